#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxlm/tensor.hpp"

namespace ctxlm {

inline constexpr double kLnEps = 1e-5;

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;  // [d]
  Tensor<T> bias;  // [d]
};

// One pre-norm residual transformer block. Attention projections carry no
// bias; the MLP does (GPT-2 convention).
template <typename T>
struct BlockParams {
  Tensor<T> wq, wk, wv, wo;  // [d x d]
  Tensor<T> fc1;             // [d x 4d]
  Tensor<T> fc1_b;           // [4d]
  Tensor<T> fc2;             // [4d x d]
  Tensor<T> fc2_b;           // [d]
  LayerNormParams<T> ln1, ln2;
};

template <typename T>
struct EmbeddingParams {
  Tensor<T> tok;  // [V x d]; doubles as the output head when tied
  Tensor<T> pos;  // [T_max x d] learned absolute positions
};

// ---- construction ------------------------------------------------------------

// Fills with N(0, stddev) from a stream derived from (seed, t.name): a
// tensor's draw depends only on its name, so models sharing tensor names
// (e.g. a baseline and a contextlm run with equal seeds) share those values
// bit-for-bit.
template <typename T>
void init_normal(Tensor<T>& t, uint64_t seed, double stddev);

// residual_scale multiplies the init stddev of the two residual-output
// projections (wo, fc2); pass 1/sqrt(2*stack_depth).
template <typename T>
BlockParams<T> make_block(int64_t d, const std::string& prefix, uint64_t seed,
                          double residual_scale);

template <typename T>
LayerNormParams<T> make_layer_norm(int64_t d, const std::string& prefix);

template <typename T>
EmbeddingParams<T> make_embeddings(int64_t vocab, int64_t max_seq, int64_t d, uint64_t seed);

// ---- forward pieces ----------------------------------------------------------

// Token row + position row per slot; output [B x S x d].
template <typename T>
int embed(Tape<T>& tp, const std::vector<int32_t>& tokens, const std::vector<int32_t>& positions,
          EmbeddingParams<T>& emb, int64_t B, int64_t S);

// Scaled dot-product attention with the causal mask, no norm or residual.
// att_out, when non-null, receives the tape node of the [B*H x S x S]
// attention weights (for export/analysis).
template <typename T>
int causal_attention(Tape<T>& tp, int x, BlockParams<T>& p, int n_heads, int* att_out = nullptr);

// x + Attn(LN1(x)), then + MLP(LN2(.)) with GELU.
template <typename T>
int transformer_block(Tape<T>& tp, int x, BlockParams<T>& p, int n_heads, int* att_out = nullptr);

// Final layer-norm then vocabulary projection; uses the token table
// transposed when untied_head is null (weight tying).
template <typename T>
int lm_head(Tape<T>& tp, int x, EmbeddingParams<T>& emb, LayerNormParams<T>& final_ln,
            Tensor<T>* untied_head = nullptr);

}  // namespace ctxlm
