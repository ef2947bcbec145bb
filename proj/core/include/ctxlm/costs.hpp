#pragma once

#include <cstdint>
#include <string>

#include "ctxlm/config.hpp"

namespace ctxlm {

// Analytic parameter and FLOP accounting. FLOP fields count multiply-adds;
// the attention term per layer is B*T^2*d (score matrix), so the predictor
// overhead ratios reduce to powers of (chunk slots / T).
struct CostReport {
  // parameters by component
  int64_t params_embeddings = 0;  // token + position tables
  int64_t params_encoder = 0;     // backbone blocks before the fusion point
  int64_t params_decoder = 0;     // blocks after the fusion point + final norm
  int64_t params_predictor = 0;   // predictor blocks + its norm + c_init
  int64_t params_head = 0;        // untied output head (0 when tied)
  int64_t params_total = 0;

  // forward multiply-adds at (B, T)
  int64_t B = 0, T = 0;
  int64_t chunk_slots = 0;  // K' = floor(T/w) pooled windows
  double flops_backbone_linear = 0.0;   // qkvo + mlp over all backbone layers
  double flops_backbone_attn = 0.0;     // B*T^2*d per layer
  double flops_predictor_linear = 0.0;  // same formulas at K' slots
  double flops_predictor_attn = 0.0;    // B*K'^2*d per layer
  double flops_head = 0.0;              // B*T*d*V
  double flops_total = 0.0;

  // overhead ratios (zero in baseline mode)
  double attn_overhead_per_layer = 0.0;  // (K'/T)^2, exactly 1/w^2 when w | T
  double attn_overhead_ratio = 0.0;      // predictor attn / backbone attn
  double full_model_overhead_ratio = 0.0;  // all predictor flops / everything else
  double context_memory_ratio = 0.0;     // K'*d / T*d activations, = 1/w when w | T
};

// Exact counts from the block formulas (12*d^2 + 9*d per block, tables,
// norms); equals the instantiated model's tensor-size sum.
CostReport count_params(const ModelConfig& cfg);

// Params plus forward FLOPs and overhead ratios at (B, T). Throws
// ContractError when T exceeds max_seq_len.
CostReport estimate_flops(const ModelConfig& cfg, int64_t T, int64_t B);

// Human-readable table publishing both the per-layer attention-term ratio
// and the honest full-model ratio (the predictor's linear layers dominate
// at small T, which the attention-only figure hides).
std::string overhead_report(const ModelConfig& cfg, int64_t T);

std::string to_json(const CostReport& r);

}  // namespace ctxlm
