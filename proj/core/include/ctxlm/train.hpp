#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxlm/config.hpp"
#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

// AdamW first/second moments, stored parallel to ContextLMParams::all().
template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;
  int64_t step = 0;  // updates applied so far (drives bias correction)

  static OptimizerState zeros_like(ContextLMParams<T>& params) {
    OptimizerState s;
    for (Tensor<T>* p : params.all()) {
      s.m.emplace_back(p->data.size(), T(0));
      s.v.emplace_back(p->data.size(), T(0));
    }
    return s;
  }
};

// Linear warmup 0 -> peak over warmup_steps, cosine decay peak -> min over
// the remaining steps, constant min afterwards.
double lr_at(int64_t step, const TrainConfig& tc);

// Scales all gradients by max_norm/norm when the global L2 norm exceeds
// max_norm; returns the pre-clip norm. A non-finite norm leaves gradients
// untouched (adamw_step then rejects them with the parameter name).
template <typename T>
double clip_global_norm(ContextLMParams<T>& params, double max_norm);

// One bias-corrected AdamW update with decoupled weight decay. Decay is
// skipped for 1-D tensors (gains, biases, c_init) and the position table.
// Scans every gradient first and throws NumericError naming the parameter on
// any non-finite value, leaving parameters and moments untouched.
template <typename T>
void adamw_step(ContextLMParams<T>& params, OptimizerState<T>& opt, double lr,
                const TrainConfig& tc);

struct MetricsRecord {
  int64_t step = 0;
  std::string split;  // "train" or "val"
  double loss = 0.0;
  double ppl = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
};

std::string to_jsonl(const MetricsRecord& r);

// Teacher-forced training from start_step (exclusive) to tc.steps. The loss
// is token-level cross entropy only — the context path trains purely through
// gradients that reach it from that loss. When out_dir is non-empty, appends
// metrics.jsonl, writes ckpt_step<N>.bin every checkpoint_every steps and at
// the end. A non-finite loss or gradient halts with a diagnostic checkpoint
// (ckpt_diag_step<N>.bin) and rethrows.
//
// Determinism: batch contents depend only on (seed, step), so two runs with
// equal seeds — or an interrupted run resumed from a checkpoint — produce
// bit-identical parameters and metrics (wall_ms aside).
//
// fwd is a verification hook: the defaults leave training untouched, while
// zero_fusion lets the equivalence tests confirm the single-objective claim
// (fusion silenced, the trajectory matches a same-depth baseline bit for bit).
template <typename T>
std::vector<MetricsRecord> train_loop(ContextLMParams<T>& params, OptimizerState<T>& opt,
                                      const TrainConfig& tc, const Corpus& corpus,
                                      int64_t start_step = 0, const std::string& out_dir = "",
                                      const ForwardOptions& fwd = {});

}  // namespace ctxlm
