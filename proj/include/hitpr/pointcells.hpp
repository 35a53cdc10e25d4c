#pragma once

#include <array>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "hitpr/tape.hpp"
#include "hitpr/tensor.hpp"

namespace hitpr {

using Point3 = std::array<double, 3>;

struct Pose {
    double northing = 0.0;
    double easting = 0.0;
};

struct PointCloud {
    std::vector<Point3> points;  // normalized coordinates in [-1, 1]
    std::optional<Pose> pose;
    std::string id;

    std::size_t size() const { return points.size(); }
};

/// Sampled centers plus per-center neighbor lists into the original cloud.
/// rel_offsets is (N*K) x 3 with row n*K+k = center_n - neighbor_nk.
struct CellSet {
    std::vector<std::size_t> center_idx;
    std::vector<std::size_t> neighbor_idx;  // N*K, row-major
    Tensor rel_offsets;
    std::size_t n_cells = 0;
    std::size_t k = 0;
};

struct CellEmbedding {
    Var center_emb;    // N x D_I
    Var neighbor_emb;  // (N*K) x D_I
};

inline double sq_dist3(const Point3& a, const Point3& b) {
    double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
}

inline bool lex_less(const Point3& a, const Point3& b) {
    if (a[0] != b[0]) return a[0] < b[0];
    if (a[1] != b[1]) return a[1] < b[1];
    return a[2] < b[2];
}

/// Shift to zero mean per axis, then scale by the global max absolute
/// coordinate so everything lands in [-1, 1]. A constant cloud maps to zeros.
inline PointCloud normalize_cloud(const std::vector<Point3>& raw, std::string id = {},
                                  std::optional<Pose> pose = std::nullopt) {
    if (raw.empty()) throw std::invalid_argument("normalize_cloud: empty point set");
    Point3 mean{0, 0, 0};
    for (const Point3& p : raw)
        for (int a = 0; a < 3; ++a) mean[a] += p[a];
    for (int a = 0; a < 3; ++a) mean[a] /= double(raw.size());
    double maxabs = 0.0;
    PointCloud out;
    out.points.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        for (int a = 0; a < 3; ++a) {
            out.points[i][a] = raw[i][a] - mean[a];
            maxabs = std::max(maxabs, std::abs(out.points[i][a]));
        }
    if (maxabs > 0.0)
        for (Point3& p : out.points)
            for (int a = 0; a < 3; ++a) p[a] /= maxabs;
    out.id = std::move(id);
    out.pose = pose;
    return out;
}

/// Farthest point sampling with canonical tie-breaks: ties on distance go to
/// the lexicographically smallest (x,y,z), then the smallest index. The seed
/// is the point farthest from the centroid. This makes the selection a
/// function of the point set, not of the input order.
inline std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t n_centers) {
    const std::size_t p = cloud.size();
    if (n_centers == 0 || n_centers > p)
        throw std::invalid_argument("fps: n_centers " + std::to_string(n_centers) +
                                    " out of range for cloud of " + std::to_string(p) + " points");
    Point3 centroid{0, 0, 0};
    for (const Point3& q : cloud.points)
        for (int a = 0; a < 3; ++a) centroid[a] += q[a];
    for (int a = 0; a < 3; ++a) centroid[a] /= double(p);

    auto better = [&](std::size_t i, double di, std::size_t best, double dbest) {
        if (di != dbest) return di > dbest;
        if (cloud.points[i] != cloud.points[best]) return lex_less(cloud.points[i], cloud.points[best]);
        return i < best;
    };

    std::vector<std::size_t> picked;
    picked.reserve(n_centers);
    std::vector<double> min_d(p, std::numeric_limits<double>::infinity());
    std::vector<bool> taken(p, false);

    std::size_t seed = 0;
    double dbest = -1.0;
    for (std::size_t i = 0; i < p; ++i) {
        double di = sq_dist3(cloud.points[i], centroid);
        if (dbest < 0.0 || better(i, di, seed, dbest)) { seed = i; dbest = di; }
    }
    picked.push_back(seed);
    taken[seed] = true;

    while (picked.size() < n_centers) {
        std::size_t last = picked.back();
        std::size_t best = std::size_t(-1);
        double bd = -1.0;
        for (std::size_t i = 0; i < p; ++i) {
            min_d[i] = std::min(min_d[i], sq_dist3(cloud.points[i], cloud.points[last]));
            if (taken[i]) continue;
            if (best == std::size_t(-1) || better(i, min_d[i], best, bd)) { best = i; bd = min_d[i]; }
        }
        picked.push_back(best);
        taken[best] = true;
    }
    return picked;
}

/// k nearest points of the original cloud per center, ascending by distance.
/// The center is eligible (distance 0) and always heads its own list.
inline std::vector<std::size_t> knn(const PointCloud& cloud, const std::vector<std::size_t>& centers,
                                    std::size_t k) {
    const std::size_t p = cloud.size();
    if (k == 0 || k > p)
        throw std::invalid_argument("knn: k " + std::to_string(k) + " out of range for cloud of " +
                                    std::to_string(p) + " points");
    std::vector<std::size_t> out;
    out.reserve(centers.size() * k);
    std::vector<std::size_t> order(p);
    for (std::size_t c : centers) {
        const Point3& cp = cloud.points[c];
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto closer = [&](std::size_t i, std::size_t j) {
            double di = sq_dist3(cloud.points[i], cp), dj = sq_dist3(cloud.points[j], cp);
            if (di != dj) return di < dj;
            if (cloud.points[i] != cloud.points[j]) return lex_less(cloud.points[i], cloud.points[j]);
            return i < j;
        };
        std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(k), order.end(), closer);
        // With duplicated coordinates the center can lose the distance-0 tie
        // to a lexic-equal twin; the contract wants the center itself first.
        auto self = std::find(order.begin(), order.begin() + std::ptrdiff_t(k), c);
        if (self != order.begin() + std::ptrdiff_t(k)) std::rotate(order.begin(), self, self + 1);
        out.insert(out.end(), order.begin(), order.begin() + std::ptrdiff_t(k));
    }
    return out;
}

/// Sample floor(P/tau) centers, attach K neighbors each, record offsets.
inline CellSet build_cells(const PointCloud& cloud, std::size_t tau, std::size_t k) {
    const std::size_t p = cloud.size();
    if (tau == 0 || p < tau) throw std::invalid_argument("build_cells: cloud smaller than sampling rate");
    if (p < k) throw std::invalid_argument("build_cells: cloud smaller than neighbor count");
    CellSet cs;
    cs.n_cells = p / tau;
    cs.k = k;
    cs.center_idx = fps(cloud, cs.n_cells);
    cs.neighbor_idx = knn(cloud, cs.center_idx, k);
    cs.rel_offsets = Tensor({cs.n_cells * k, 3});
    for (std::size_t n = 0; n < cs.n_cells; ++n) {
        const Point3& c = cloud.points[cs.center_idx[n]];
        for (std::size_t j = 0; j < k; ++j) {
            const Point3& q = cloud.points[cs.neighbor_idx[n * k + j]];
            for (int a = 0; a < 3; ++a) cs.rel_offsets.data()[(n * k + j) * 3 + a] = c[a] - q[a];
        }
    }
    return cs;
}

inline Tensor gather_coords(const PointCloud& cloud, const std::vector<std::size_t>& idx) {
    Tensor t({idx.size(), 3});
    for (std::size_t i = 0; i < idx.size(); ++i)
        for (int a = 0; a < 3; ++a) t.data()[i * 3 + a] = cloud.points[idx[i]][a];
    return t;
}

/// Runs the shared embedding MLP over center and neighbor coordinates.
inline CellEmbedding embed_cells(const CellSet& cells, const PointCloud& cloud, Tape& tape,
                                 MlpParams& embed_mlp) {
    if (embed_mlp.in() != 3) throw std::invalid_argument("embed_cells: embedding MLP must take 3-D points");
    Var centers = tape.input(gather_coords(cloud, cells.center_idx));
    Var neighbors = tape.input(gather_coords(cloud, cells.neighbor_idx));
    return CellEmbedding{ops::mlp(centers, tape, embed_mlp), ops::mlp(neighbors, tape, embed_mlp)};
}

}  // namespace hitpr
