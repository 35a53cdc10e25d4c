#pragma once

// Independent oracle implementations used by the selftest command. These are
// deliberately written as straight-line loops with no calls into the tape or
// the pipeline code they are checked against.

#include <functional>

#include "hitpr/harness.hpp"

namespace hitpr::selfcheck {

inline double rel_err(double a, double b) {
    double m = std::max(std::abs(a), std::abs(b));
    if (m < 1e-6) return 0.0;  // both negligibly small, relative comparison meaningless
    return std::abs(a - b) / m;
}

// ---- brute-force FPS / kNN --------------------------------------------------

inline std::vector<std::size_t> brute_force_fps(const PointCloud& cloud, std::size_t n_centers) {
    const std::size_t p = cloud.size();
    Point3 centroid{0, 0, 0};
    for (const Point3& q : cloud.points)
        for (int a = 0; a < 3; ++a) centroid[a] += q[a];
    for (int a = 0; a < 3; ++a) centroid[a] /= double(p);

    std::vector<std::size_t> picked;
    std::vector<bool> taken(p, false);
    while (picked.size() < n_centers) {
        std::size_t best = std::size_t(-1);
        double bd = -1.0;
        for (std::size_t i = 0; i < p; ++i) {
            if (taken[i]) continue;
            double di;
            if (picked.empty()) {
                di = sq_dist3(cloud.points[i], centroid);
            } else {
                di = std::numeric_limits<double>::infinity();
                for (std::size_t s : picked) di = std::min(di, sq_dist3(cloud.points[i], cloud.points[s]));
            }
            bool take;
            if (best == std::size_t(-1)) {
                take = true;
            } else if (di != bd) {
                take = di > bd;
            } else if (cloud.points[i] != cloud.points[best]) {
                take = lex_less(cloud.points[i], cloud.points[best]);
            } else {
                take = i < best;
            }
            if (take) { best = i; bd = di; }
        }
        picked.push_back(best);
        taken[best] = true;
    }
    return picked;
}

inline std::vector<std::size_t> brute_force_knn(const PointCloud& cloud,
                                                const std::vector<std::size_t>& centers, std::size_t k) {
    std::vector<std::size_t> out;
    for (std::size_t c : centers) {
        std::vector<std::size_t> order(cloud.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
            double di = sq_dist3(cloud.points[i], cloud.points[c]);
            double dj = sq_dist3(cloud.points[j], cloud.points[c]);
            if (di != dj) return di < dj;
            if (cloud.points[i] != cloud.points[j]) return lex_less(cloud.points[i], cloud.points[j]);
            return i < j;
        });
        auto self = std::find(order.begin(), order.begin() + std::ptrdiff_t(k), c);
        if (self != order.begin() + std::ptrdiff_t(k)) std::rotate(order.begin(), self, self + 1);
        out.insert(out.end(), order.begin(), order.begin() + std::ptrdiff_t(k));
    }
    return out;
}

// ---- straight-line attention oracles ---------------------------------------

/// Short-range vector attention evaluated with plain loops from raw
/// projection values:
/// per cell n: f[n] = proj( sum_k softmax_k(LN(W(q_n - k_nk + d_nk)+b)) * (v_nk + d_nk) ).
inline Tensor srt_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& delta,
                                   const Tensor& attn_w, const Tensor& attn_b, const Tensor& ln_gamma,
                                   const Tensor& ln_beta, double ln_eps, const Tensor& proj_w,
                                   const Tensor& proj_b) {
    std::size_t n = q.dim(0), da = q.dim(1), kk = k.dim(0) / n, ds = proj_w.dim(1);
    Tensor out({n, ds});
    for (std::size_t cell = 0; cell < n; ++cell) {
        std::vector<std::vector<double>> logits(kk, std::vector<double>(da, 0.0));
        for (std::size_t j = 0; j < kk; ++j) {
            std::vector<double> x(da);
            for (std::size_t c = 0; c < da; ++c)
                x[c] = q.at(cell, c) - k.at(cell * kk + j, c) + delta.at(cell * kk + j, c);
            for (std::size_t c = 0; c < da; ++c) {
                double s = attn_b[c];
                for (std::size_t i = 0; i < da; ++i) s += x[i] * attn_w.at(i, c);
                logits[j][c] = s;
            }
            double mean = 0.0;
            for (double vv : logits[j]) mean += vv;
            mean /= double(da);
            double var = 0.0;
            for (double vv : logits[j]) var += (vv - mean) * (vv - mean);
            var /= double(da);
            for (std::size_t c = 0; c < da; ++c)
                logits[j][c] = (logits[j][c] - mean) / std::sqrt(var + ln_eps) * ln_gamma[c] + ln_beta[c];
        }
        std::vector<double> s(da, 0.0);
        for (std::size_t c = 0; c < da; ++c) {
            double mx = logits[0][c];
            for (std::size_t j = 1; j < kk; ++j) mx = std::max(mx, logits[j][c]);
            double z = 0.0;
            for (std::size_t j = 0; j < kk; ++j) z += std::exp(logits[j][c] - mx);
            for (std::size_t j = 0; j < kk; ++j) {
                double w = std::exp(logits[j][c] - mx) / z;
                s[c] += w * (v.at(cell * kk + j, c) + delta.at(cell * kk + j, c));
            }
        }
        for (std::size_t c = 0; c < ds; ++c) {
            double o = proj_b[c];
            for (std::size_t i = 0; i < da; ++i) o += s[i] * proj_w.at(i, c);
            out.at(cell, c) = o;
        }
    }
    return out;
}

/// Dot-product attention evaluated with plain loops: softmax(Q K^T / sqrt(D_k)) V.
inline Tensor lrt_attention_oracle(const Tensor& q, const Tensor& k, const Tensor& v) {
    std::size_t n = q.dim(0), dk = q.dim(1), dv = v.dim(1);
    Tensor out({n, dv});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> scores(n);
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < dk; ++c) s += q.at(i, c) * k.at(j, c);
            scores[j] = s / std::sqrt(double(dk));
        }
        double mx = *std::max_element(scores.begin(), scores.end());
        double z = 0.0;
        for (double& s : scores) z += (s = std::exp(s - mx));
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < dv; ++c) out.at(i, c) += scores[j] / z * v.at(j, c);
    }
    return out;
}

/// Hand arithmetic for the lazy quadruplet loss, independent of metric.hpp.
inline LossValue quadruplet_oracle(const std::vector<std::vector<double>>& rows, std::size_t n_pos,
                                   std::size_t n_neg, double alpha, double beta, bool squared = true) {
    auto dist = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return squared ? s : std::sqrt(s);
    };
    double dpos = dist(rows[0], rows[1]);
    for (std::size_t i = 2; i <= n_pos; ++i) dpos = std::max(dpos, dist(rows[0], rows[i]));
    LossValue lv;
    double hn = -1e300, ho = -1e300;
    const std::vector<double>& other = rows[1 + n_pos + n_neg];
    for (std::size_t j = 0; j < n_neg; ++j) {
        hn = std::max(hn, alpha + dpos - dist(rows[0], rows[1 + n_pos + j]));
        ho = std::max(ho, beta + dpos - dist(other, rows[1 + n_pos + j]));
    }
    lv.term_neg = std::max(hn, 0.0);
    lv.term_other = std::max(ho, 0.0);
    lv.total = lv.term_neg + lv.term_other;
    return lv;
}

// ---- finite-difference gradient checking ------------------------------------

struct GradCheckResult {
    bool pass = true;
    double max_rel_err = 0.0;
    std::string worst_param;
    std::size_t checked = 0;
};

/// Compares analytic gradients (accumulated by `run_backward`) against central
/// finite differences of `loss_value` for every scalar in `params`.
///
/// Coordinates that disagree at step `h` are retried over a ladder of larger
/// and smaller steps, and the best agreement counts. Two probe artifacts make
/// a single fixed step unreliable even when the gradient is right: a
/// ReLU/hinge kink within `h` of the evaluation point (central differences
/// average the two one-sided slopes; a smaller step recovers), and a gradient
/// that is tiny relative to the loss (the difference cancels to noise; a
/// larger step recovers). A genuinely wrong gradient agrees at no step.
inline GradCheckResult fd_check(const std::vector<ParamTensor*>& params,
                                const std::function<double()>& loss_value,
                                const std::function<void()>& run_backward, double h = 1e-5,
                                double tol = 1e-4) {
    for (ParamTensor* p : params) p->zero_grad();
    run_backward();
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (ParamTensor* p : params) analytic.push_back(p->grad);

    GradCheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        ParamTensor* p = params[pi];
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            double saved = p->value[i];
            double e = std::numeric_limits<double>::infinity();
            for (double mult : {1.0, 10.0, 100.0, 0.1, 0.01, 0.001}) {
                double step = h * mult;
                p->value[i] = saved + step;
                double lp = loss_value();
                p->value[i] = saved - step;
                double lm = loss_value();
                p->value[i] = saved;
                double fd = (lp - lm) / (2.0 * step);
                e = std::min(e, rel_err(analytic[pi][i], fd));
                if (e < tol) break;
            }
            ++res.checked;
            if (e > res.max_rel_err) {
                res.max_rel_err = e;
                res.worst_param = p->path + "[" + std::to_string(i) + "]";
            }
        }
        p->zero_grad();
    }
    res.pass = res.max_rel_err < tol;
    return res;
}

// ---- packaged suites (used by the selftest command) --------------------------

struct SuiteResult {
    std::string name;
    bool pass = false;
    std::string detail;
};

inline PointCloud random_cloud(std::mt19937_64& rng, std::size_t p, const std::string& id = "rnd") {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::vector<Point3> pts(p);
    for (auto& q : pts) q = {u(rng), u(rng), u(rng)};
    PointCloud c;
    c.points = std::move(pts);
    c.id = id;
    return c;
}

inline HiTPRConfig tiny_config() {
    HiTPRConfig c;
    c.tau = 4;
    c.k = 4;
    c.d_i = 8;
    c.d_a = 8;
    c.d_s = 8;
    c.d_k = 4;
    c.d_v = 8;
    c.d_b = 8;
    c.m_blocks = 2;
    c.d_g = 8;
    c.embed_hidden = 8;
    c.gamma_hidden = 8;
    c.n_pos = 2;
    c.n_neg = 3;
    return c;
}

/// End-to-end loss gradient vs finite differences on a tiny model.
inline GradCheckResult gradient_suite_once(std::uint64_t seed, std::size_t cloud_points = 32) {
    HiTPRConfig cfg = tiny_config();
    Model model = make_model(cfg, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::size_t batch = 2 + cfg.n_pos + cfg.n_neg;
    std::vector<PointCloud> clouds;
    std::vector<CellSet> cells;
    for (std::size_t i = 0; i < batch; ++i) {
        clouds.push_back(random_cloud(rng, cloud_points, "c" + std::to_string(i)));
        cells.push_back(build_cells(clouds.back(), cfg.tau, cfg.k));
    }
    std::vector<const PointCloud*> cp;
    std::vector<const CellSet*> csp;
    for (std::size_t i = 0; i < batch; ++i) {
        cp.push_back(&clouds[i]);
        csp.push_back(&cells[i]);
    }
    auto loss_value = [&]() {
        Tape t;
        Var desc = forward_batch(model, t, cp, csp, Mode::train);
        LossValue lv;
        ops::lazy_quadruplet(desc, cfg.n_pos, cfg.n_neg, cfg.alpha, cfg.beta, true, &lv);
        return lv.total;
    };
    auto run_backward = [&]() {
        Tape t;
        Var desc = forward_batch(model, t, cp, csp, Mode::train);
        Var loss = ops::lazy_quadruplet(desc, cfg.n_pos, cfg.n_neg, cfg.alpha, cfg.beta, true);
        t.backward(loss);
    };
    return fd_check(model.params(), loss_value, run_backward);
}

inline SuiteResult run_gradient_suite(std::size_t n_seeds = 5) {
    SuiteResult r{"gradient-check", true, ""};
    double worst = 0.0;
    for (std::uint64_t s = 1; s <= n_seeds; ++s) {
        GradCheckResult g = gradient_suite_once(s);
        worst = std::max(worst, g.max_rel_err);
        if (!g.pass) {
            r.pass = false;
            r.detail = "seed " + std::to_string(s) + ": max rel err " + std::to_string(g.max_rel_err) +
                       " at " + g.worst_param;
            return r;
        }
    }
    r.detail = "max rel err " + std::to_string(worst) + " over " + std::to_string(n_seeds) + " seeds";
    return r;
}

inline SuiteResult run_sampling_suite(std::size_t n_clouds = 200, std::size_t max_points = 128) {
    SuiteResult r{"fps-knn-oracle", true, ""};
    std::mt19937_64 rng(7);
    for (std::size_t t = 0; t < n_clouds; ++t) {
        std::size_t p = 8 + rng() % (max_points - 7);
        PointCloud c = random_cloud(rng, p);
        std::size_t n_centers = 1 + rng() % p;
        auto got = fps(c, n_centers);
        auto want = brute_force_fps(c, n_centers);
        if (got != want) {
            r.pass = false;
            r.detail = "fps mismatch on cloud " + std::to_string(t);
            return r;
        }
        std::size_t k = 1 + rng() % std::min<std::size_t>(p, 16);
        if (knn(c, got, k) != brute_force_knn(c, got, k)) {
            r.pass = false;
            r.detail = "knn mismatch on cloud " + std::to_string(t);
            return r;
        }
    }
    r.detail = std::to_string(n_clouds) + " random clouds, exact index equality";
    return r;
}

inline SuiteResult run_loss_suite(std::size_t n_tuples = 100) {
    SuiteResult r{"loss-oracle", true, ""};
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t t = 0; t < n_tuples; ++t) {
        std::size_t n_pos = 1 + rng() % 3, n_neg = 1 + rng() % 8, d = 2 + rng() % 6;
        std::vector<std::vector<double>> rows(2 + n_pos + n_neg, std::vector<double>(d));
        for (auto& row : rows)
            for (double& v : row) v = u(rng);
        std::vector<std::vector<double>> pos(rows.begin() + 1, rows.begin() + 1 + std::ptrdiff_t(n_pos));
        std::vector<std::vector<double>> neg(rows.begin() + 1 + std::ptrdiff_t(n_pos),
                                             rows.begin() + 1 + std::ptrdiff_t(n_pos + n_neg));
        LossValue got = lazy_quadruplet_loss(rows[0], pos, neg, rows.back(), 0.5, 0.2);
        LossValue want = quadruplet_oracle(rows, n_pos, n_neg, 0.5, 0.2);
        if (got.total != want.total || got.term_neg != want.term_neg || got.term_other != want.term_other) {
            r.pass = false;
            r.detail = "mismatch on tuple " + std::to_string(t);
            return r;
        }
    }
    r.detail = std::to_string(n_tuples) + " random tuples, exact match";
    return r;
}

inline SuiteResult run_permutation_suite(std::size_t n_clouds = 4, std::size_t n_perms = 5) {
    SuiteResult r{"permutation-invariance", true, ""};
    HiTPRConfig cfg = tiny_config();
    Model model = make_model(cfg, 3);
    std::mt19937_64 rng(13);
    for (std::size_t t = 0; t < n_clouds; ++t) {
        PointCloud c = random_cloud(rng, 48);
        GlobalDescriptor base = extract_descriptor(model, c);
        for (std::size_t perm = 0; perm < n_perms; ++perm) {
            PointCloud shuffled = c;
            std::shuffle(shuffled.points.begin(), shuffled.points.end(), rng);
            GlobalDescriptor d = extract_descriptor(model, shuffled);
            for (std::size_t i = 0; i < d.vec.size(); ++i) {
                if (rel_err(base.vec[i], d.vec[i]) > 1e-6) {
                    r.pass = false;
                    r.detail = "descriptor changed under permutation (cloud " + std::to_string(t) + ")";
                    return r;
                }
            }
        }
    }
    r.detail = "descriptors stable under input permutations";
    return r;
}

inline SuiteResult run_param_count_suite() {
    SuiteResult r{"param-count", true, ""};
    Model model = make_model(HiTPRConfig{}, 1);
    std::size_t n = param_count(model);
    r.pass = n >= 2'000'000 && n <= 3'500'000;
    r.detail = "default config: " + std::to_string(n) + " parameters (reference 2.72M, band [2.0M, 3.5M])";
    return r;
}

inline std::vector<SuiteResult> run_all(bool quick = false) {
    std::vector<SuiteResult> out;
    out.push_back(run_gradient_suite(quick ? 1 : 5));
    out.push_back(run_sampling_suite(quick ? 25 : 200));
    out.push_back(run_loss_suite());
    out.push_back(run_permutation_suite());
    out.push_back(run_param_count_suite());
    return out;
}

}  // namespace hitpr::selfcheck
