#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "hitpr/descriptor.hpp"
#include "hitpr/metric.hpp"

namespace hitpr {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Submap and catalog I/O
// ---------------------------------------------------------------------------

/// Submap file: raw little-endian float64 (x,y,z) triples, row-major.
inline std::vector<Point3> load_submap(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw std::runtime_error("load_submap: cannot open " + path);
    auto bytes = std::size_t(in.tellg());
    if (bytes % 24 != 0)
        throw std::runtime_error("load_submap: " + path + " has " + std::to_string(bytes) +
                                 " bytes, not a multiple of 24");
    std::vector<Point3> pts(bytes / 24);
    in.seekg(0);
    in.read(reinterpret_cast<char*>(pts.data()), std::streamsize(bytes));
    if (!in) throw std::runtime_error("load_submap: read failed on " + path);
    return pts;
}

inline void save_submap(const std::string& path, const std::vector<Point3>& pts) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_submap: cannot open " + path);
    out.write(reinterpret_cast<const char*>(pts.data()), std::streamsize(pts.size() * 24));
    if (!out) throw std::runtime_error("save_submap: write failed on " + path);
}

struct CatalogEntry {
    std::string id;
    std::string file;
    double northing = 0.0;
    double easting = 0.0;
};

struct SubmapCatalog {
    std::vector<CatalogEntry> entries;

    std::size_t size() const { return entries.size(); }

    std::vector<PosedEntry> poses() const {
        std::vector<PosedEntry> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back({e.id, e.northing, e.easting});
        return out;
    }
};

/// Catalog CSV: header `id,northing,easting`; submap files are <id>.bin under
/// the data directory.
inline SubmapCatalog load_catalog(const std::string& csv_path, const std::string& data_dir,
                                  bool require_files = true) {
    std::ifstream in(csv_path);
    if (!in) throw std::runtime_error("load_catalog: cannot open " + csv_path);
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("load_catalog: empty file " + csv_path);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "id,northing,easting")
        throw std::runtime_error("load_catalog: bad header '" + line + "' in " + csv_path);
    SubmapCatalog cat;
    std::map<std::string, bool> seen;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream row(line);
        CatalogEntry e;
        std::string n, ee;
        if (!std::getline(row, e.id, ',') || !std::getline(row, n, ',') || !std::getline(row, ee))
            throw std::runtime_error("load_catalog: malformed row at line " + std::to_string(lineno) +
                                     " of " + csv_path);
        try {
            e.northing = std::stod(n);
            e.easting = std::stod(ee);
        } catch (const std::exception&) {
            throw std::runtime_error("load_catalog: bad number at line " + std::to_string(lineno) + " of " +
                                     csv_path);
        }
        if (!std::isfinite(e.northing) || !std::isfinite(e.easting))
            throw std::runtime_error("load_catalog: non-finite pose at line " + std::to_string(lineno));
        if (seen.count(e.id))
            throw std::runtime_error("load_catalog: duplicate id '" + e.id + "' at line " +
                                     std::to_string(lineno));
        seen[e.id] = true;
        e.file = (fs::path(data_dir) / (e.id + ".bin")).string();
        if (require_files && !fs::exists(e.file))
            throw std::runtime_error("load_catalog: missing submap file for id '" + e.id + "': " + e.file);
        cat.entries.push_back(std::move(e));
    }
    return cat;
}

inline void save_catalog(const SubmapCatalog& cat, const std::string& csv_path) {
    std::ofstream out(csv_path);
    out << "id,northing,easting\n";
    out.precision(17);
    for (const auto& e : cat.entries) out << e.id << ',' << e.northing << ',' << e.easting << '\n';
    if (!out) throw std::runtime_error("save_catalog: write failed on " + csv_path);
}

inline PointCloud load_cloud(const CatalogEntry& e) {
    return normalize_cloud(load_submap(e.file), e.id, Pose{e.northing, e.easting});
}

// ---------------------------------------------------------------------------
// Synthetic scenes
// ---------------------------------------------------------------------------

/// Generates n_places random scenes on a grid, clouds_per_place resampled and
/// noised views of each, written as .bin files plus a catalog CSV.
inline SubmapCatalog gen_synthetic(const std::string& out_dir, std::size_t n_places,
                                   std::size_t clouds_per_place, std::size_t points_per_cloud,
                                   double place_spacing_m, double jitter_m, std::uint64_t seed) {
    if (jitter_m > 5.0) throw std::invalid_argument("gen_synthetic: jitter must be <= 5 m");
    if (place_spacing_m <= kNegativeRadiusM + 2.0 * jitter_m)
        throw std::invalid_argument("gen_synthetic: spacing must exceed 50 m + 2*jitter");
    if (n_places == 0 || clouds_per_place == 0 || points_per_cloud == 0)
        throw std::invalid_argument("gen_synthetic: counts must be positive");
    fs::create_directories(out_dir);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 0.05);

    // Each primitive is a finite plane patch spanned by two random axes.
    struct Patch {
        Point3 origin, u, v;
    };

    SubmapCatalog cat;
    std::size_t grid_cols = std::size_t(std::ceil(std::sqrt(double(n_places))));
    for (std::size_t p = 0; p < n_places; ++p) {
        std::vector<Patch> scene;
        std::size_t n_patches = 4 + rng() % 5;
        for (std::size_t s = 0; s < n_patches; ++s) {
            Patch pa;
            for (int a = 0; a < 3; ++a) pa.origin[a] = (unit(rng) * 2.0 - 1.0) * 8.0;
            for (int a = 0; a < 3; ++a) pa.u[a] = (unit(rng) * 2.0 - 1.0) * 4.0;
            for (int a = 0; a < 3; ++a) pa.v[a] = (unit(rng) * 2.0 - 1.0) * 4.0;
            scene.push_back(pa);
        }
        double base_n = double(p / grid_cols) * place_spacing_m;
        double base_e = double(p % grid_cols) * place_spacing_m;
        for (std::size_t c = 0; c < clouds_per_place; ++c) {
            std::vector<Point3> pts(points_per_cloud);
            for (auto& q : pts) {
                const Patch& pa = scene[rng() % scene.size()];
                double a = unit(rng), b = unit(rng);
                for (int ax = 0; ax < 3; ++ax)
                    q[ax] = pa.origin[ax] + a * pa.u[ax] + b * pa.v[ax] + noise(rng);
            }
            CatalogEntry e;
            e.id = "place" + std::to_string(p) + "_cloud" + std::to_string(c);
            e.northing = base_n + (unit(rng) * 2.0 - 1.0) * jitter_m;
            e.easting = base_e + (unit(rng) * 2.0 - 1.0) * jitter_m;
            e.file = (fs::path(out_dir) / (e.id + ".bin")).string();
            save_submap(e.file, pts);
            cat.entries.push_back(std::move(e));
        }
    }
    save_catalog(cat, (fs::path(out_dir) / "catalog.csv").string());
    return cat;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LossLogRow {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss = 0.0;
    double term_neg = 0.0;
    double term_other = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<LossLogRow> log;
    std::vector<double> epoch_mean_loss;
};

inline void save_loss_log(const std::vector<LossLogRow>& log, const std::string& path) {
    std::ofstream out(path);
    out << "epoch,step,loss,term_neg,term_other,lr\n";
    out.precision(17);
    for (const auto& r : log)
        out << r.epoch << ',' << r.step << ',' << r.loss << ',' << r.term_neg << ',' << r.term_other << ','
            << r.lr << '\n';
    if (!out) throw std::runtime_error("save_loss_log: write failed on " + path);
}

/// In-memory view of the training set: normalized clouds plus precomputed
/// cell sets (geometry does not change across epochs).
class CloudCache {
public:
    CloudCache(const SubmapCatalog& cat, std::size_t tau, std::size_t k) {
        clouds_.reserve(cat.size());
        cells_.reserve(cat.size());
        for (const auto& e : cat.entries) {
            clouds_.push_back(load_cloud(e));
            cells_.push_back(build_cells(clouds_.back(), tau, k));
        }
    }

    const PointCloud& cloud(std::size_t i) const { return clouds_[i]; }
    const CellSet& cells(std::size_t i) const { return cells_[i]; }

private:
    std::vector<PointCloud> clouds_;
    std::vector<CellSet> cells_;
};

/// One minibatch = one quadruplet (2 + n_pos + n_neg clouds). The learning
/// rate decays linearly per epoch from lr_init to lr_final. Writes one
/// checkpoint per epoch plus a final one when out_dir is set.
inline TrainResult train(const SubmapCatalog& catalog, Model& model, std::uint64_t seed,
                         const std::string& out_dir = {}) {
    const HiTPRConfig& cfg = model.cfg;
    TrainResult res;
    std::mt19937_64 rng(seed);
    std::vector<PosedEntry> poses = catalog.poses();
    CloudCache cache(catalog, cfg.tau, cfg.k);
    std::vector<ParamTensor*> params = model.params();

    auto checkpoint = [&](const std::string& name) {
        if (!out_dir.empty()) save_checkpoint(params, (fs::path(out_dir) / name).string());
    };

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        double lr = cfg.epochs <= 1 ? cfg.lr_init
                                    : cfg.lr_init + (cfg.lr_final - cfg.lr_init) * double(epoch) /
                                                        double(cfg.epochs - 1);
        std::vector<QuadTuple> tuples = mine_tuples(poses, cfg.n_pos, cfg.n_neg, rng);
        std::shuffle(tuples.begin(), tuples.end(), rng);
        if (tuples.empty() && epoch == 0)
            throw std::runtime_error("train: catalog yields no valid quadruplets");
        double epoch_loss = 0.0;
        for (std::size_t step = 0; step < tuples.size(); ++step) {
            const QuadTuple& tup = tuples[step];
            std::vector<const PointCloud*> clouds;
            std::vector<const CellSet*> cells;
            auto push = [&](std::size_t i) {
                clouds.push_back(&cache.cloud(i));
                cells.push_back(&cache.cells(i));
            };
            push(tup.anchor);
            for (std::size_t i : tup.positives) push(i);
            for (std::size_t i : tup.negatives) push(i);
            push(tup.other_negative);

            Tape tape;
            Var desc = forward_batch(model, tape, clouds, cells, Mode::train);
            LossValue lv;
            Var loss = ops::lazy_quadruplet(desc, cfg.n_pos, cfg.n_neg, cfg.alpha, cfg.beta,
                                            cfg.squared_dist, &lv);
            if (!std::isfinite(lv.total))
                throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                                         " step " + std::to_string(step + 1));
            tape.backward(loss);
            adam_step(params, model.adam_t, lr);
            epoch_loss += lv.total;
            res.log.push_back({epoch + 1, step + 1, lv.total, lv.term_neg, lv.term_other, lr});
        }
        res.epoch_mean_loss.push_back(tuples.empty() ? 0.0 : epoch_loss / double(tuples.size()));
        checkpoint("checkpoint_epoch" + std::to_string(epoch + 1) + ".bin");
    }
    checkpoint("checkpoint_final.bin");
    return res;
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

struct DescriptorIndex {
    Tensor descriptors;  // count x D_G
    std::vector<std::string> ids;
    std::vector<Pose> poses;

    std::size_t size() const { return ids.size(); }
};

inline DescriptorIndex build_index(const SubmapCatalog& catalog, Model& model) {
    DescriptorIndex idx;
    idx.descriptors = Tensor({catalog.size(), model.cfg.d_g});
    for (std::size_t i = 0; i < catalog.size(); ++i) {
        const auto& e = catalog.entries[i];
        GlobalDescriptor d;
        try {
            d = extract_descriptor(model, load_cloud(e), Mode::eval);
        } catch (const std::exception& ex) {
            throw std::runtime_error("build_index: id '" + e.id + "': " + ex.what());
        }
        std::copy(d.vec.begin(), d.vec.end(), idx.descriptors.data() + i * model.cfg.d_g);
        idx.ids.push_back(e.id);
        idx.poses.push_back({e.northing, e.easting});
    }
    return idx;
}

/// Indices of the n nearest database descriptors, ascending by Euclidean
/// distance, ties broken by id.
inline std::vector<std::size_t> query_topn(const DescriptorIndex& idx, std::span<const double> query,
                                           std::size_t n, const std::string& exclude_id = {}) {
    if (n > idx.size()) throw std::invalid_argument("query_topn: n exceeds index size");
    std::vector<std::size_t> order;
    order.reserve(idx.size());
    std::vector<double> d2(idx.size());
    std::size_t w = idx.descriptors.dim(1);
    if (query.size() != w) throw std::invalid_argument("query_topn: descriptor width mismatch");
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (!exclude_id.empty() && idx.ids[i] == exclude_id) continue;
        d2[i] = pairwise_sq_dist(query, {idx.descriptors.data() + i * w, w});
        order.push_back(i);
    }
    if (n > order.size()) n = order.size();
    std::partial_sort(order.begin(), order.begin() + std::ptrdiff_t(n), order.end(),
                      [&](std::size_t a, std::size_t b) {
                          if (d2[a] != d2[b]) return d2[a] < d2[b];
                          return idx.ids[a] < idx.ids[b];
                      });
    order.resize(n);
    return order;
}

struct EvalReport {
    double recall_at_1 = 0.0;
    double recall_at_1pct = 0.0;
    std::vector<double> recall_curve;  // top-1 .. top-25
    std::size_t query_count = 0;
};

inline constexpr std::size_t kRecallCurvePoints = 25;

/// A query succeeds at rank n if any of its top-n retrievals lies within
/// success_radius of the query pose. Self-matches are excluded by id.
inline EvalReport evaluate(const SubmapCatalog& queries, const SubmapCatalog& db, Model& model,
                           double success_radius_m) {
    if (db.size() == 0) throw std::invalid_argument("evaluate: empty database");
    for (const auto& q : queries.entries)
        (void)q;  // poses are mandatory fields of the catalog schema
    DescriptorIndex idx = build_index(db, model);
    std::size_t n_1pct = std::max<std::size_t>(1, std::size_t(std::llround(double(db.size()) / 100.0)));
    std::size_t max_n = std::max(kRecallCurvePoints, n_1pct);

    EvalReport rep;
    rep.recall_curve.assign(kRecallCurvePoints, 0.0);
    std::size_t hits_1pct = 0;
    for (const auto& qe : queries.entries) {
        GlobalDescriptor qd = extract_descriptor(model, load_cloud(qe), Mode::eval);
        std::vector<std::size_t> top =
            query_topn(idx, qd.vec, std::min(max_n, idx.size()), qe.id);
        std::size_t first_hit = top.size();
        for (std::size_t r = 0; r < top.size(); ++r) {
            const Pose& p = idx.poses[top[r]];
            double dn = p.northing - qe.northing, de = p.easting - qe.easting;
            if (std::sqrt(dn * dn + de * de) <= success_radius_m) { first_hit = r; break; }
        }
        for (std::size_t n = 0; n < kRecallCurvePoints; ++n)
            if (first_hit <= n && first_hit < top.size()) rep.recall_curve[n] += 1.0;
        if (first_hit < std::min(n_1pct, top.size())) ++hits_1pct;
        ++rep.query_count;
    }
    if (rep.query_count > 0) {
        for (double& v : rep.recall_curve) v /= double(rep.query_count);
        rep.recall_at_1pct = double(hits_1pct) / double(rep.query_count);
    }
    rep.recall_at_1 = rep.recall_curve.empty() ? 0.0 : rep.recall_curve[0];
    return rep;
}

inline void save_recall_curve(const EvalReport& rep, const std::string& path) {
    std::ofstream out(path);
    out << "n,recall\n";
    for (std::size_t n = 0; n < rep.recall_curve.size(); ++n)
        out << (n + 1) << ',' << rep.recall_curve[n] << '\n';
    if (!out) throw std::runtime_error("save_recall_curve: write failed on " + path);
}

// ---------------------------------------------------------------------------
// Descriptor database files: float32 vectors plus a CSV manifest of offsets.
// ---------------------------------------------------------------------------

inline void save_descriptors(const DescriptorIndex& idx, const std::string& vec_path,
                             const std::string& manifest_path) {
    std::ofstream out(vec_path, std::ios::binary);
    if (!out) throw std::runtime_error("save_descriptors: cannot open " + vec_path);
    std::ofstream man(manifest_path);
    man << "id,offset\n";
    std::size_t w = idx.descriptors.dim(1);
    std::vector<float> row(w);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t j = 0; j < w; ++j) row[j] = float(idx.descriptors.data()[i * w + j]);
        man << idx.ids[i] << ',' << (i * w * sizeof(float)) << '\n';
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(w * sizeof(float)));
    }
    if (!out || !man) throw std::runtime_error("save_descriptors: write failed");
}

}  // namespace hitpr
