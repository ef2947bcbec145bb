#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctxlm/data.hpp"
#include "ctxlm/model.hpp"

namespace ctxlm {

struct Bucket {
  int64_t begin = 0, end = 0;  // position range [begin, end) within a window
  int64_t tokens = 0;
  double mean_nll = 0.0;
};

struct EvalReport {
  std::string split;
  int64_t seq_len = 0;
  int64_t windows = 0;
  int64_t tokens = 0;
  double mean_nll = 0.0;  // nats/token
  double ppl = 0.0;       // exp(mean_nll)
  std::vector<Bucket> buckets;
  double wall_ms = 0.0;
};

// Mean NLL over deterministic non-overlapping windows tiled from the start
// of the split (stride = seq_len, so every scored position is scored once).
// max_windows > 0 caps the window count. Throws ContractError when the
// split cannot hold a single window.
template <typename T>
EvalReport perplexity(ContextLMParams<T>& params, const Corpus& corpus, const std::string& split,
                      int64_t seq_len, int64_t max_windows = 0);

// Same pass with per-position-range statistics. buckets must partition
// [0, seq_len): sorted, contiguous, none empty — else ContractError. The
// token-weighted bucket mean reproduces the global mean NLL.
template <typename T>
EvalReport bucketed_position_loss(ContextLMParams<T>& params, const Corpus& corpus,
                                  const std::string& split, int64_t seq_len,
                                  const std::vector<std::pair<int64_t, int64_t>>& buckets,
                                  int64_t max_windows = 0);

struct DeltaBucket {
  int64_t begin = 0, end = 0;
  double delta_nll = 0.0;  // a - b
};

struct DeltaCurve {
  std::string label_a, label_b;  // the two reports' split labels
  int64_t seq_len = 0;
  std::vector<DeltaBucket> deltas;
};

// Elementwise a - b over matching buckets; ContractError when the two
// reports are bucketed differently.
DeltaCurve delta_loss_curve(const EvalReport& a, const EvalReport& b);

std::string to_json(const EvalReport& r);
std::string to_json(const DeltaCurve& c);
EvalReport eval_report_from_json(const std::string& text);
DeltaCurve delta_curve_from_json(const std::string& text);

// ---- attention export ---------------------------------------------------------

struct AttentionDump {
  std::vector<int32_t> prompt;
  int64_t seq_len = 0;
  int64_t chunk_size = 0;  // 0 in baseline mode
  int64_t n_heads = 0;
  std::vector<std::pair<int64_t, int64_t>> pool_spans;  // contextlm only
  std::vector<std::pair<int64_t, int64_t>> segments;    // contextlm only
  std::vector<int64_t> layers;  // exported backbone layer indices
  std::vector<int64_t> heads;   // exported head indices
  // matrices[i][j]: S x S row-major weights for (layers[i], heads[j]).
  std::vector<std::vector<std::vector<double>>> matrices;
  // Per-token incoming attention: mean over all heads of the column sums of
  // the last backbone layer.
  std::vector<double> aggregated;
};

// Runs the prompt once with attention capture. Empty layers/heads selects
// all. Throws ContractError for an out-of-range layer or head index, and
// propagates forward()'s error for prompts longer than max_seq_len.
template <typename T>
AttentionDump export_attention(ContextLMParams<T>& params, const std::vector<int32_t>& prompt,
                               std::vector<int64_t> layers = {}, std::vector<int64_t> heads = {});

std::string to_json(const AttentionDump& dump);

}  // namespace ctxlm
