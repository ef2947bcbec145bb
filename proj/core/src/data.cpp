#include "ctxlm/data.hpp"

#include <algorithm>
#include <fstream>

#include "ctxlm/common.hpp"
#include "ctxlm/rng.hpp"

namespace ctxlm {

Corpus corpus_from_bytes(std::vector<uint8_t> bytes, double val_fraction) {
  if (bytes.empty()) throw IoError("load_corpus: corpus is empty");
  if (val_fraction <= 0.0 || val_fraction >= 0.5)
    throw ContractError("load_corpus: val_fraction must lie in (0, 0.5), got " +
                        std::to_string(val_fraction));
  Corpus c;
  c.bytes = std::move(bytes);
  int64_t n = c.size();
  if (n < 2) throw IoError("load_corpus: need at least 2 bytes to carve out a validation split");
  // Floor, but never let either split collapse to zero bytes: val_fraction
  // in (0, 0.5) promises both splits exist even for tiny corpora.
  int64_t n_val = std::max<int64_t>(1, static_cast<int64_t>(static_cast<double>(n) * val_fraction));
  c.train_begin = 0;
  c.train_end = n - n_val;
  c.val_begin = n - n_val;
  c.val_end = n;
  return c;
}

Corpus load_corpus(const std::string& path, double val_fraction) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_corpus: cannot read '" + path + "'");
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  if (f.bad()) throw IoError("load_corpus: read failure on '" + path + "'");
  if (bytes.empty()) throw IoError("load_corpus: '" + path + "' is empty");
  return corpus_from_bytes(std::move(bytes), val_fraction);
}

BatchSampler::BatchSampler(const Corpus& c, const std::string& split, uint64_t seed_,
                           int64_t seq_len_, int64_t batch_size_) {
  seq_len = seq_len_;
  batch_size = batch_size_;
  if (split == "train") {
    begin = c.train_begin;
    end = c.train_end;
  } else if (split == "val") {
    begin = c.val_begin;
    end = c.val_end;
  } else {
    throw ContractError("BatchSampler: split must be 'train' or 'val', got '" + split + "'");
  }
  seed = named_stream(seed_, "sampler." + split).next();
}

void BatchSampler::sample(const Corpus& c, int64_t step, std::vector<int32_t>& inputs,
                          std::vector<int32_t>& targets) const {
  const int64_t window = seq_len + 1;
  const int64_t span = end - begin;
  if (span < window + 1)
    throw ContractError("BatchSampler: split holds " + std::to_string(span) +
                        " bytes; need more than " + std::to_string(window) +
                        " for seq_len=" + std::to_string(seq_len));
  const int64_t num_starts = span - window + 1;
  inputs.resize(static_cast<size_t>(batch_size * seq_len));
  targets.resize(static_cast<size_t>(batch_size * seq_len));
  for (int64_t b = 0; b < batch_size; ++b) {
    // One independent stream per (step, slot): batch contents never depend
    // on how many batches were drawn before.
    SplitMix64 g = named_stream(
        seed, "batch." + std::to_string(step) + "." + std::to_string(b));
    int64_t start = begin + static_cast<int64_t>(g.next_below(static_cast<uint64_t>(num_starts)));
    for (int64_t t = 0; t < seq_len; ++t) {
      inputs[static_cast<size_t>(b * seq_len + t)] = c.bytes[static_cast<size_t>(start + t)];
      targets[static_cast<size_t>(b * seq_len + t)] = c.bytes[static_cast<size_t>(start + t + 1)];
    }
  }
}

}  // namespace ctxlm
