#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctxlm {

// Byte-level corpus: every byte value is a token id, so V = 256 and
// encode/decode is the identity. The trailing val_fraction of the file is
// the validation split; the two ranges are contiguous and disjoint.
struct Corpus {
  std::vector<uint8_t> bytes;
  int64_t train_begin = 0, train_end = 0;  // [begin, end)
  int64_t val_begin = 0, val_end = 0;

  int64_t size() const { return static_cast<int64_t>(bytes.size()); }
  static constexpr int64_t vocab_size = 256;
};

// Throws IoError for unreadable/empty files, ContractError for a
// val_fraction outside (0, 0.5).
Corpus load_corpus(const std::string& path, double val_fraction);
// Same splitting applied to in-memory bytes (tests, synthesized corpora).
Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double val_fraction);

// Seeded random-crop sampler. Stateless in the step index: batch contents
// are a pure function of (seed, step, slot), which is what makes
// checkpoint-resume reproduce the uninterrupted data order exactly.
struct BatchSampler {
  uint64_t seed = 1;
  int64_t seq_len = 0;
  int64_t batch_size = 0;
  int64_t begin = 0, end = 0;  // source split [begin, end)

  BatchSampler() = default;
  // split: "train" or "val"; folded into the seed so the two splits draw
  // from unrelated streams.
  BatchSampler(const Corpus& c, const std::string& split, uint64_t seed, int64_t seq_len,
               int64_t batch_size);

  // Fills inputs/targets (each batch_size x seq_len, row-major) with windows
  // of length seq_len+1: targets[b][t] = inputs[b][t+1]. Throws
  // ContractError when the split is shorter than seq_len+2.
  void sample(const Corpus& c, int64_t step, std::vector<int32_t>& inputs,
              std::vector<int32_t>& targets) const;
};

}  // namespace ctxlm
