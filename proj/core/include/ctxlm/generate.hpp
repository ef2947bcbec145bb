#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctxlm/model.hpp"
#include "ctxlm/rng.hpp"

namespace ctxlm {

enum class Strategy { greedy, temperature, top_k };

struct SamplerConfig {
  Strategy strategy = Strategy::greedy;
  double temperature = 1.0;  // temperature / top_k strategies; must be > 0
  int64_t k = 40;            // top_k strategy; must be >= 1
  uint64_t seed = 1;
};

Strategy strategy_from_string(const std::string& s);

// Per-layer attention cache: keys/values for every decoded position,
// row-major [len x d].
template <typename T>
struct LayerCache {
  std::vector<T> k, v;
  int64_t len = 0;
};

// Incremental decoding state for one stream. tokens holds the prompt plus
// everything sampled so far; positions [0, next_pos) are in the caches, and
// tokens[next_pos] is the pending input the next decode_step consumes.
template <typename T>
struct GenerationState {
  std::vector<int32_t> tokens;
  int64_t next_pos = 0;

  std::vector<LayerCache<T>> backbone;   // one per backbone block
  std::vector<LayerCache<T>> predictor;  // contextlm: one per predictor block

  // Running sum of encoder outputs inside the open pooling window. fill
  // stays < chunk_size between window completions.
  std::vector<T> chunk_sum;
  int64_t chunk_fill = 0;
  int64_t chunks_emitted = 0;  // pooled windows handed to the predictor

  // The vector fused into the position being decoded: h0 (or the learned
  // placeholder) until the first window completes, then the latest
  // predicted context.
  std::vector<T> ctx;
  bool ctx_ready = false;
};

// Runs the prompt through the cached pipeline, leaving the last prompt
// token pending so the first decode_step yields the first next-token
// distribution. Throws ContractError on an empty prompt, a prompt longer
// than max_seq_len, or an out-of-range token id.
template <typename T>
GenerationState<T> prefill(const std::vector<int32_t>& prompt, ContextLMParams<T>& params);

// Consumes the pending token: encode -> update the chunk accumulator ->
// (on window completion) pool and advance the predictor one cached step ->
// fuse -> decode -> next-token logits [V]. Validates before touching state,
// so a throwing call leaves the state usable. Throws ContractError when the
// cache would grow past max_seq_len or no token is pending.
template <typename T>
std::vector<T> decode_step(GenerationState<T>& state, ContextLMParams<T>& params);

// Post-processing order: temperature divide -> top-k filter -> renormalize
// -> sample. Greedy breaks ties toward the lowest id. Exposed for direct
// testing.
template <typename T>
int32_t sample_logits(const std::vector<T>& logits, const SamplerConfig& sampler, SplitMix64& g);

// prefill + n_new rounds of decode_step/sample. Greedy mode and seeded
// sampling are both deterministic. Throws ContractError when
// prompt + n_new would exceed max_seq_len.
template <typename T>
std::vector<int32_t> generate(const std::vector<int32_t>& prompt, int64_t n_new,
                              const SamplerConfig& sampler, ContextLMParams<T>& params);

}  // namespace ctxlm
