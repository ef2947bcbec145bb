#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxlm/config.hpp"
#include "ctxlm/layout.hpp"
#include "ctxlm/nn.hpp"
#include "ctxlm/tensor.hpp"

namespace ctxlm {

// All learnable state. The backbone vector holds the encoder blocks
// ([0, n_enc)) followed by the decoder blocks; blocks are named
// "backbone.<i>.*" by stack position regardless of the split, so a baseline
// and a contextlm model with equal seeds share those tensors bit-for-bit —
// the zero-fusion equivalence checks depend on that.
template <typename T>
struct ContextLMParams {
  ModelConfig cfg;
  EmbeddingParams<T> emb;
  std::vector<BlockParams<T>> backbone;
  std::vector<BlockParams<T>> predictor;  // contextlm only
  LayerNormParams<T> ctx_ln;              // predictor output norm (contextlm only)
  LayerNormParams<T> final_ln;
  Tensor<T> head;    // present only when !tie_embeddings
  Tensor<T> c_init;  // present only when learned_c_init

  static ContextLMParams<T> init(const ModelConfig& cfg);

  // Fixed iteration order — the single source of truth for the optimizer,
  // gradient clipping, and checkpoint manifests.
  std::vector<Tensor<T>*> all();
  int64_t param_count();
};

enum class PathwayMode {
  full,           // ordinary training graph
  detach_pool,    // gradient may not flow h -> pooled contexts
  detach_direct,  // gradient may not flow through h's own fusion term (incl. c_init)
};

struct ForwardOptions {
  bool capture_attention = false;
  // Bypasses fusion entirely: the decoder consumes h unchanged and the
  // context branch is not built. Verification switch for the
  // reduction-to-baseline equivalences.
  bool zero_fusion = false;
  PathwayMode pathway = PathwayMode::full;
};

// Tape node handles for one teacher-forced forward pass.
template <typename T>
struct ForwardTrace {
  int64_t batch = 0;
  int64_t seq_len = 0;
  int h = -1;       // encoder output [B x T x d]
  int c = -1;       // pooled contexts [B x (K-1) x d] (contextlm)
  int chat = -1;    // predicted contexts, slot j holds c-hat_{j+1} (contextlm)
  int fused = -1;   // decoder input [B x T x d]
  int logits = -1;  // [B x T x V]
  std::vector<int> att_backbone;  // capture_attention only
  std::vector<int> att_ctx;
};

// tokens: row-major [B x S]. Throws ContractError when S > max_seq_len, and
// (contextlm) propagates the layout error when S < chunk_size.
template <typename T>
ForwardTrace<T> forward(Tape<T>& tp, const std::vector<int32_t>& tokens, int64_t B, int64_t S,
                        ContextLMParams<T>& params, const ForwardOptions& opts = {});

// ---- model-level tape ops (exposed for direct testing) -----------------------

// c[b][j] = mean of h[b][t] over pool span j. Output [B x (K-1) x d].
template <typename T>
int pool_mean_chunks(Tape<T>& tp, int h, const ChunkLayout& lo);

// out[b][t] = h[b][t] + (t in segment 0 ? c_init_b : chat[b][k(t)-1]), where
// c_init_b is h[b][0] or the learned vector (node index learned_c_init >= 0).
template <typename T>
int broadcast_fuse(Tape<T>& tp, int h, int chat, const ChunkLayout& lo,
                   int learned_c_init = -1);

// ---- gradient-pathway verification -------------------------------------------

// Decomposition of the single cross-entropy gradient into the token-level
// and context-level supervision pathways, plus the per-chunk aggregation
// identity. All buffers are flattened row-major doubles.
//
// The chunk identity (chunk_residual, outside_leakage) presumes the decoder
// applies position-wise after fusion, i.e. n_dec_layers == 0; attention
// layers after the fusion point carry context into later positions'
// logits, and the report then measures that leakage rather than zero.
struct PathwayReport {
  bool context_path_present = false;  // false for baseline mode
  int64_t batch = 0, seq_len = 0, d_model = 0, num_chunks = 0;
  std::vector<double> full_h_grad;      // (a) [B*T*d]
  std::vector<double> token_pathway;    // (b) [B*T*d]
  std::vector<double> context_pathway;  // (c) [B*T*d]
  std::vector<double> chat_grad;        // (d) [B*(K-1)*d]
  // (e) per-position contributions, position-major: [T][B*(K-1)*d].
  std::vector<double> per_token_chat_grad;
  double additivity_residual = 0.0;  // max |(b)+(c)-(a)|
  double chunk_residual = 0.0;       // max |sum_{t in J_k}(e) - (d)|
  double outside_leakage = 0.0;      // max |(e)| over t outside J_k
};

PathwayReport grad_pathway_report(ContextLMParams<double>& params,
                                  const std::vector<int32_t>& tokens,
                                  const std::vector<int32_t>& targets, int64_t B, int64_t S);

// Throws VerificationError naming the first identity whose residual exceeds
// tol (absolute).
void verify_pathways(const PathwayReport& report, double tol);

// ---- finite-difference sweep over every parameter ----------------------------

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  int64_t coords_checked = 0;
};

// Compares the tape gradient of the mean CE loss against central
// differences, coordinate by coordinate, over every parameter. f64 only —
// f32 rounding would drown the signal.
GradcheckResult model_gradcheck(ContextLMParams<double>& params,
                                const std::vector<int32_t>& tokens,
                                const std::vector<int32_t>& targets, int64_t B, int64_t S);

}  // namespace ctxlm
