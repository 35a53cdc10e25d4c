#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "hitpr/tape.hpp"

namespace hitpr {

struct LossValue {
    double total = 0.0;
    double term_neg = 0.0;
    double term_other = 0.0;
};

inline double pairwise_sq_dist(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw std::invalid_argument("pairwise_sq_dist: width mismatch " + std::to_string(a.size()) +
                                    " vs " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

/// delta_pos = hardest (max-distance) positive; each hinge takes the max over
/// the negatives. Distances are squared Euclidean unless `squared` is off.
inline LossValue lazy_quadruplet_loss(std::span<const double> anchor,
                                      const std::vector<std::vector<double>>& positives,
                                      const std::vector<std::vector<double>>& negatives,
                                      std::span<const double> other, double alpha, double beta,
                                      bool squared = true) {
    if (positives.empty() || negatives.empty())
        throw std::invalid_argument("lazy_quadruplet_loss: positives and negatives must be non-empty");
    auto dist = [&](std::span<const double> a, std::span<const double> b) {
        double d = pairwise_sq_dist(a, b);
        return squared ? d : std::sqrt(d);
    };
    double delta_pos = 0.0;
    for (std::size_t i = 0; i < positives.size(); ++i) {
        double d = dist(anchor, positives[i]);
        if (i == 0 || d > delta_pos) delta_pos = d;
    }
    LossValue lv;
    double hn = -std::numeric_limits<double>::infinity();
    double ho = -std::numeric_limits<double>::infinity();
    for (const auto& neg : negatives) {
        hn = std::max(hn, alpha + delta_pos - dist(anchor, neg));
        ho = std::max(ho, beta + delta_pos - dist(other, neg));
    }
    lv.term_neg = std::max(hn, 0.0);
    lv.term_other = std::max(ho, 0.0);
    lv.total = lv.term_neg + lv.term_other;
    return lv;
}

namespace ops {

/// Tape version over a descriptor matrix whose rows are laid out as
/// [anchor, n_pos positives, n_neg negatives, other]. Subgradients flow
/// through the attaining positive/negative only (first index on ties).
inline Var lazy_quadruplet(Var desc, std::size_t n_pos, std::size_t n_neg, double alpha, double beta,
                           bool squared, LossValue* report = nullptr) {
    Tape& t = *desc.tape;
    const Tensor& dv = desc.val();
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("lazy_quadruplet: empty tuple lists");
    if (dv.dim(0) != 2 + n_pos + n_neg)
        throw std::invalid_argument("lazy_quadruplet: expected " + std::to_string(2 + n_pos + n_neg) +
                                    " descriptor rows, got " + std::to_string(dv.dim(0)));
    const std::size_t d = dv.dim(1);
    const std::size_t other_row = 1 + n_pos + n_neg;
    auto row = [&](std::size_t r) { return dv.data() + r * d; };
    auto dist = [&](const double* a, const double* b) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return squared ? s : std::sqrt(s);
    };

    std::size_t hardest_pos = 1;
    double delta_pos = dist(row(0), row(1));
    for (std::size_t i = 2; i <= n_pos; ++i) {
        double dd = dist(row(0), row(i));
        if (dd > delta_pos) { delta_pos = dd; hardest_pos = i; }
    }
    std::size_t arg_neg = 0, arg_other = 0;
    double hn = -std::numeric_limits<double>::infinity(), ho = hn;
    for (std::size_t j = 0; j < n_neg; ++j) {
        double vn = alpha + delta_pos - dist(row(0), row(1 + n_pos + j));
        if (vn > hn) { hn = vn; arg_neg = j; }
        double vo = beta + delta_pos - dist(row(other_row), row(1 + n_pos + j));
        if (vo > ho) { ho = vo; arg_other = j; }
    }
    LossValue lv;
    lv.term_neg = std::max(hn, 0.0);
    lv.term_other = std::max(ho, 0.0);
    lv.total = lv.term_neg + lv.term_other;
    if (report) *report = lv;

    bool neg_active = hn > 0.0, other_active = ho > 0.0;
    return t.make(Tensor::scalar(lv.total), [desc, n_pos, n_neg, d, other_row, hardest_pos, arg_neg,
                                             arg_other, neg_active, other_active, squared,
                                             id = t.size()](Tape& tp) {
        double g = tp.grad(id)[0];
        if (g == 0.0) return;
        const Tensor& dv2 = tp.value(desc.id);
        Tensor& gd = tp.grad(desc.id);
        auto add_dist_grad = [&](std::size_t ra, std::size_t rb, double coeff) {
            // d dist(a,b) w.r.t. a is 2(a-b) squared, (a-b)/dist otherwise
            const double* a = dv2.data() + ra * d;
            const double* b = dv2.data() + rb * d;
            double scale = 2.0;
            if (!squared) {
                double s = 0.0;
                for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
                double dist_ab = std::sqrt(s);
                if (dist_ab == 0.0) return;  // subgradient 0 at coincident points
                scale = 1.0 / dist_ab;
            }
            for (std::size_t i = 0; i < d; ++i) {
                double v = scale * (a[i] - b[i]) * coeff;
                gd.data()[ra * d + i] += v;
                gd.data()[rb * d + i] -= v;
            }
        };
        double dpos_coeff = (neg_active ? 1.0 : 0.0) + (other_active ? 1.0 : 0.0);
        if (dpos_coeff > 0.0) add_dist_grad(0, hardest_pos, g * dpos_coeff);
        if (neg_active) add_dist_grad(0, 1 + n_pos + arg_neg, -g);
        if (other_active) add_dist_grad(other_row, 1 + n_pos + arg_other, -g);
    });
}

}  // namespace ops

// ---------------------------------------------------------------------------
// Geometric tuple mining
// ---------------------------------------------------------------------------

struct PosedEntry {
    std::string id;
    double northing = 0.0;
    double easting = 0.0;
};

struct QuadTuple {
    std::size_t anchor = 0;
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
    std::size_t other_negative = 0;
};

inline double pose_dist(const PosedEntry& a, const PosedEntry& b) {
    double dn = a.northing - b.northing, de = a.easting - b.easting;
    return std::sqrt(dn * dn + de * de);
}

inline constexpr double kPositiveRadiusM = 10.0;
inline constexpr double kNegativeRadiusM = 50.0;

/// Emits one tuple per anchor that has enough positives (<=10 m) and
/// negatives (>50 m); the extra negative must be >50 m from every chosen
/// negative. Deterministic given the rng state; anchors that cannot be
/// completed are skipped.
inline std::vector<QuadTuple> mine_tuples(const std::vector<PosedEntry>& catalog, std::size_t n_pos,
                                          std::size_t n_neg, std::mt19937_64& rng) {
    std::vector<QuadTuple> out;
    std::vector<std::size_t> pos_pool, neg_pool;
    for (std::size_t a = 0; a < catalog.size(); ++a) {
        pos_pool.clear();
        neg_pool.clear();
        for (std::size_t i = 0; i < catalog.size(); ++i) {
            if (i == a || catalog[i].id == catalog[a].id) continue;
            double dd = pose_dist(catalog[a], catalog[i]);
            if (dd <= kPositiveRadiusM)
                pos_pool.push_back(i);
            else if (dd > kNegativeRadiusM)
                neg_pool.push_back(i);
        }
        if (pos_pool.size() < n_pos || neg_pool.size() < n_neg) continue;

        QuadTuple tup;
        tup.anchor = a;
        auto sample_without_replacement = [&](std::vector<std::size_t>& pool, std::size_t count) {
            std::vector<std::size_t> chosen;
            for (std::size_t i = 0; i < count; ++i) {
                std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
                std::size_t j = pick(rng);
                chosen.push_back(pool[j]);
                pool.erase(pool.begin() + std::ptrdiff_t(j));
            }
            return chosen;
        };
        tup.positives = sample_without_replacement(pos_pool, n_pos);
        tup.negatives = sample_without_replacement(neg_pool, n_neg);

        bool found = false;
        std::uniform_int_distribution<std::size_t> any(0, catalog.size() - 1);
        for (int attempt = 0; attempt < 1000 && !found; ++attempt) {
            std::size_t cand = any(rng);
            if (cand == a) continue;
            bool used = std::find(tup.positives.begin(), tup.positives.end(), cand) != tup.positives.end() ||
                        std::find(tup.negatives.begin(), tup.negatives.end(), cand) != tup.negatives.end();
            if (used) continue;
            bool ok = true;
            for (std::size_t nidx : tup.negatives)
                if (pose_dist(catalog[cand], catalog[nidx]) <= kNegativeRadiusM) { ok = false; break; }
            if (ok) {
                tup.other_negative = cand;
                found = true;
            }
        }
        if (found) out.push_back(std::move(tup));
    }
    return out;
}

}  // namespace hitpr
