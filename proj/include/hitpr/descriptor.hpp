#pragma once

#include "hitpr/lrt.hpp"
#include "hitpr/pointcells.hpp"
#include "hitpr/srt.hpp"

namespace hitpr {

struct HiTPRConfig {
    std::size_t tau = 4;
    std::size_t k = 32;
    std::size_t d_i = 64;
    std::size_t d_a = 512;
    std::size_t d_s = 64;
    std::size_t d_k = 64;
    std::size_t d_v = 256;
    std::size_t d_b = 256;
    std::size_t m_blocks = 4;
    std::size_t d_g = 1024;
    std::size_t embed_hidden = 64;
    std::size_t gamma_hidden = 64;
    double alpha = 0.5;
    double beta = 0.2;
    double lr_init = 5e-5;
    double lr_final = 1e-5;
    std::size_t epochs = 20;
    std::size_t n_pos = 2;
    std::size_t n_neg = 8;
    bool l2_normalize = false;    // descriptors compared raw by default
    bool squared_dist = true;     // squared Euclidean inside the loss

    std::size_t d_l() const { return m_blocks * d_b; }

    void validate() const {
        if (!tau || !k || !d_i || !d_a || !d_s || !d_k || !d_v || !d_b || !m_blocks || !d_g ||
            !embed_hidden || !gamma_hidden)
            throw std::invalid_argument("config: all dimensions must be positive");
        if (alpha <= 0 || beta <= 0) throw std::invalid_argument("config: margins must be positive");
    }
};

struct GlobalDescriptor {
    std::vector<double> vec;
    std::string cloud_id;
};

/// Every learnable tensor of the network plus the Adam step counter.
struct Model {
    HiTPRConfig cfg;
    MlpParams embed_mlp;  // 3 -> hidden -> D_I
    SrtParams srt;
    LrtStackParams lrt;
    LinearParams agg_lin;  // D_L -> D_G
    BatchNormState agg_bn;  // over D_G
    std::int64_t adam_t = 0;

    std::vector<ParamTensor*> params() {
        std::vector<ParamTensor*> out;
        auto lin = [&](LinearParams& l) {
            out.push_back(&l.w);
            out.push_back(&l.b);
        };
        for (auto& layer : embed_mlp.layers) lin(layer);
        lin(srt.wq);
        lin(srt.wk);
        lin(srt.wv);
        for (auto& layer : srt.gamma_mlp.layers) lin(layer);
        lin(srt.attn_mlp);
        out.push_back(&srt.ln.gamma);
        out.push_back(&srt.ln.beta);
        lin(srt.proj);
        lin(lrt.input_lin);
        for (auto& b : lrt.blocks) {
            lin(b.wq);
            lin(b.wk);
            lin(b.wv);
            lin(b.lin);
            out.push_back(&b.bn.gamma);
            out.push_back(&b.bn.beta);
        }
        lin(agg_lin);
        out.push_back(&agg_bn.gamma);
        out.push_back(&agg_bn.beta);
        return out;
    }

    void zero_grads() {
        for (ParamTensor* p : params()) p->zero_grad();
    }
};

inline Model make_model(const HiTPRConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.cfg = cfg;
    m.embed_mlp = make_mlp("embed", {3, cfg.embed_hidden, cfg.d_i}, rng);
    m.srt = make_srt(cfg.d_i, cfg.d_a, cfg.d_s, cfg.gamma_hidden, rng);
    m.lrt = make_lrt(cfg.d_s, cfg.d_b, cfg.d_k, cfg.d_v, cfg.m_blocks, rng);
    m.agg_lin = make_linear("agg.lin", cfg.d_l(), cfg.d_g, rng);
    m.agg_bn = make_batch_norm("agg.bn", cfg.d_g);
    return m;
}

/// Scalar parameters only: BN gamma/beta included, running stats and
/// optimizer state excluded.
inline std::size_t param_count(Model& m) {
    std::size_t total = 0;
    for (const ParamTensor* p : m.params()) total += p->value.numel();
    return total;
}

namespace ops {

inline Var l2_normalize_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& xv = x.val();
    std::size_t n = xv.dim(0), d = xv.dim(1);
    Tensor out({n, d});
    auto inv_norm = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += xv.data()[i * d + j] * xv.data()[i * d + j];
        double inv = 1.0 / std::sqrt(std::max(s, 1e-30));
        (*inv_norm)[i] = inv;
        for (std::size_t j = 0; j < d; ++j) out.data()[i * d + j] = xv.data()[i * d + j] * inv;
    }
    return t.make(std::move(out), [x, inv_norm, n, d, id = t.size()](Tape& tp) {
        const Tensor &g = tp.grad(id), &y = tp.value(id);
        Tensor& gx = tp.grad(x.id);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += g.data()[i * d + j] * y.data()[i * d + j];
            for (std::size_t j = 0; j < d; ++j)
                gx.data()[i * d + j] += (*inv_norm)[i] * (g.data()[i * d + j] - y.data()[i * d + j] * dot);
        }
    });
}

}  // namespace ops

/// MaxPool(ReLU(BN(Lin(F_L)))) per cloud slice of n_cells rows -> B x D_G.
inline Var aggregate(Var f_l, Tape& t, Model& m, std::size_t n_cells, Mode mode) {
    Var h = ops::relu(ops::batch_norm(ops::linear(f_l, t, m.agg_lin), t, m.agg_bn, mode));
    Var pooled = ops::max_pool_groups(h, n_cells);
    return m.cfg.l2_normalize ? ops::l2_normalize_rows(pooled) : pooled;
}

/// Runs a batch of clouds through the whole network on one tape. All clouds
/// must yield the same cell count (same point count and tau). Returns the
/// B x D_G descriptor matrix node.
inline Var forward_batch(Model& m, Tape& t, const std::vector<const PointCloud*>& clouds,
                         const std::vector<const CellSet*>& cells, Mode mode) {
    if (clouds.empty() || clouds.size() != cells.size())
        throw std::invalid_argument("forward_batch: empty or mismatched batch");
    std::size_t n = cells[0]->n_cells, k = cells[0]->k;
    for (const CellSet* cs : cells)
        if (cs->n_cells != n || cs->k != k)
            throw std::invalid_argument("forward_batch: clouds must share cell geometry");
    std::size_t b = clouds.size();

    // Stack centers, neighbors and offsets across the batch; cells are
    // independent in the SRT so stacking is exact.
    Tensor centers({b * n, 3}), neighbors({b * n * k, 3}), offsets({b * n * k, 3});
    for (std::size_t i = 0; i < b; ++i) {
        Tensor c = gather_coords(*clouds[i], cells[i]->center_idx);
        Tensor nb = gather_coords(*clouds[i], cells[i]->neighbor_idx);
        std::copy(c.data(), c.data() + c.numel(), centers.data() + i * n * 3);
        std::copy(nb.data(), nb.data() + nb.numel(), neighbors.data() + i * n * k * 3);
        std::copy(cells[i]->rel_offsets.data(), cells[i]->rel_offsets.data() + n * k * 3,
                  offsets.data() + i * n * k * 3);
    }

    CellEmbedding emb{ops::mlp(t.input(std::move(centers)), t, m.embed_mlp),
                      ops::mlp(t.input(std::move(neighbors)), t, m.embed_mlp)};
    SrtProjections pr = srt_project(emb, t, m.srt);
    Var delta = ops::mlp(t.input(std::move(offsets)), t, m.srt.gamma_mlp);
    Var f_s = srt_attention(pr, delta, k, t, m.srt).features;
    Var f_l = lrt_stack(f_s, t, m.lrt, n, mode);
    return aggregate(f_l, t, m, n, mode);
}

/// Eval-mode single-cloud descriptor; pure given the parameters.
inline GlobalDescriptor extract_descriptor(Model& m, const PointCloud& cloud, Mode mode = Mode::eval) {
    if (cloud.size() < std::max(m.cfg.tau, m.cfg.k))
        throw std::invalid_argument("extract_descriptor: cloud '" + cloud.id + "' has " +
                                    std::to_string(cloud.size()) + " points, needs at least max(tau=" +
                                    std::to_string(m.cfg.tau) + ", k=" + std::to_string(m.cfg.k) + ")");
    CellSet cs = build_cells(cloud, m.cfg.tau, m.cfg.k);
    Tape t;
    Var out = forward_batch(m, t, {&cloud}, {&cs}, mode);
    GlobalDescriptor d;
    d.cloud_id = cloud.id;
    d.vec.assign(out.val().data(), out.val().data() + out.val().numel());
    return d;
}

}  // namespace hitpr
