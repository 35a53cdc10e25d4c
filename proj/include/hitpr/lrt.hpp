#pragma once

#include "hitpr/tape.hpp"

namespace hitpr {

/// One long range transformer block: dot-product attention over all cells of
/// a cloud, then Lin -> BatchNorm -> ReLU with a residual connection.
struct LrtBlockParams {
    LinearParams wq;  // D_B -> D_k
    LinearParams wk;  // D_B -> D_k
    LinearParams wv;  // D_B -> D_v
    LinearParams lin;  // D_v -> D_B
    BatchNormState bn;  // over D_B
};

struct LrtStackParams {
    LinearParams input_lin;  // D_S -> D_B, followed by ReLU, produces F^0
    std::vector<LrtBlockParams> blocks;
};

struct LrtProjections {
    Var q;  // rows x D_k
    Var k;  // rows x D_k
    Var v;  // rows x D_v
};

inline LrtBlockParams make_lrt_block(const std::string& path, std::size_t d_b, std::size_t d_k,
                                     std::size_t d_v, std::mt19937_64& rng) {
    LrtBlockParams b;
    b.wq = make_linear(path + ".wq", d_b, d_k, rng);
    b.wk = make_linear(path + ".wk", d_b, d_k, rng);
    b.wv = make_linear(path + ".wv", d_b, d_v, rng);
    b.lin = make_linear(path + ".lin", d_v, d_b, rng);
    b.bn = make_batch_norm(path + ".bn", d_b);
    return b;
}

inline LrtStackParams make_lrt(std::size_t d_s, std::size_t d_b, std::size_t d_k, std::size_t d_v,
                               std::size_t m_blocks, std::mt19937_64& rng) {
    if (m_blocks == 0) throw std::invalid_argument("lrt: need at least one block");
    LrtStackParams p;
    p.input_lin = make_linear("lrt.input", d_s, d_b, rng);
    for (std::size_t m = 0; m < m_blocks; ++m)
        p.blocks.push_back(make_lrt_block("lrt.block" + std::to_string(m), d_b, d_k, d_v, rng));
    return p;
}

inline LrtProjections lrt_project(Var f_prev, Tape& t, LrtBlockParams& b) {
    return LrtProjections{ops::linear(f_prev, t, b.wq), ops::linear(f_prev, t, b.wk),
                          ops::linear(f_prev, t, b.wv)};
}

/// Softmax(Q K^T / sqrt(D_k)) V, block-diagonal per cloud of n_cells rows.
inline Var lrt_attention(const LrtProjections& pr, std::size_t n_cells) {
    return ops::scaled_dot_attention(pr.q, pr.k, pr.v, n_cells);
}

inline Var lrt_block(Var f_prev, Tape& t, LrtBlockParams& b, std::size_t n_cells, Mode mode) {
    Var attn = lrt_attention(lrt_project(f_prev, t, b), n_cells);
    Var h = ops::relu(ops::batch_norm(ops::linear(attn, t, b.lin), t, b.bn, mode));
    return ops::add(h, f_prev);
}

/// F^0 = ReLU(Lin(F_S)); F^m = block(F^{m-1}); output = Concat(F^1..F^M).
/// Input rows are a batch of clouds stacked cloud-by-cloud; attention is
/// block-diagonal per cloud while batch norm pools over all rows.
inline Var lrt_stack(Var f_s, Tape& t, LrtStackParams& p, std::size_t n_cells, Mode mode) {
    Var f = ops::relu(ops::linear(f_s, t, p.input_lin));
    std::vector<Var> stages;
    stages.reserve(p.blocks.size());
    for (LrtBlockParams& b : p.blocks) {
        f = lrt_block(f, t, b, n_cells, mode);
        stages.push_back(f);
    }
    return ops::concat_cols(stages);
}

}  // namespace hitpr
