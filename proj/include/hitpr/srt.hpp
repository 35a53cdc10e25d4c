#pragma once

#include "hitpr/pointcells.hpp"
#include "hitpr/tape.hpp"

namespace hitpr {

/// Short range transformer: subtraction-based vector attention inside each
/// point cell, one local feature per cell.
struct SrtParams {
    LinearParams wq;   // D_I -> D_A (center)
    LinearParams wk;   // D_I -> D_A (neighbors)
    LinearParams wv;   // D_I -> D_A (neighbors)
    MlpParams gamma_mlp;  // 3 -> hidden -> D_A, positional encoding
    LinearParams attn_mlp;  // D_A -> D_A, inside the attention logits
    LayerNormParams ln;     // over D_A
    LinearParams proj;      // D_A -> D_S
};

struct SrtProjections {
    Var q;  // N x D_A
    Var k;  // (N*K) x D_A
    Var v;  // (N*K) x D_A
};

struct SrtAttentionOut {
    Var features;  // N x D_S
    Var weights;   // (N*K) x D_A, per-channel softmax over each cell's K slots
};

inline SrtParams make_srt(std::size_t d_i, std::size_t d_a, std::size_t d_s, std::size_t gamma_hidden,
                          std::mt19937_64& rng) {
    SrtParams p;
    p.wq = make_linear("srt.wq", d_i, d_a, rng);
    p.wk = make_linear("srt.wk", d_i, d_a, rng);
    p.wv = make_linear("srt.wv", d_i, d_a, rng);
    p.gamma_mlp = make_mlp("srt.gamma", {3, gamma_hidden, d_a}, rng);
    p.attn_mlp = make_linear("srt.attn", d_a, d_a, rng);
    p.ln = make_layer_norm("srt.ln", d_a);
    p.proj = make_linear("srt.proj", d_a, d_s, rng);
    return p;
}

inline SrtProjections srt_project(const CellEmbedding& emb, Tape& t, SrtParams& p) {
    return SrtProjections{ops::linear(emb.center_emb, t, p.wq), ops::linear(emb.neighbor_emb, t, p.wk),
                          ops::linear(emb.neighbor_emb, t, p.wv)};
}

/// delta[n*K+k] = gamma(P_n - P_nk)
inline Var positional_encoding(const CellSet& cells, Tape& t, MlpParams& gamma_mlp) {
    return ops::mlp(t.input(cells.rel_offsets), t, gamma_mlp);
}

/// S_n = sum_k Softmax_k(LN(MLP(Q-K+delta))) ⊙ (V+delta), projected to D_S.
/// The softmax runs over the K neighbor slots independently per channel.
inline SrtAttentionOut srt_attention(const SrtProjections& pr, Var delta, std::size_t k, Tape& t,
                                     SrtParams& p) {
    if (k == 0) throw std::invalid_argument("srt_attention: cell has no neighbors");
    Var q_rep = ops::repeat_rows(pr.q, k);
    Var logits = ops::linear(ops::add(ops::sub(q_rep, pr.k), delta), t, p.attn_mlp);
    Var weights = ops::softmax_group_cols(ops::layer_norm(logits, t, p.ln), k);
    Var summed = ops::sum_group_rows(ops::mul(weights, ops::add(pr.v, delta)), k);
    return SrtAttentionOut{ops::linear(summed, t, p.proj), weights};
}

/// Full SRT pass over an assembled cell set: N x D_S local features.
inline Var srt_forward(const CellSet& cells, const PointCloud& cloud, Tape& t, MlpParams& embed_mlp,
                       SrtParams& p) {
    CellEmbedding emb = embed_cells(cells, cloud, t, embed_mlp);
    SrtProjections pr = srt_project(emb, t, p);
    Var delta = positional_encoding(cells, t, p.gamma_mlp);
    return srt_attention(pr, delta, cells.k, t, p).features;
}

}  // namespace hitpr
