#include "ctxlm/layout.hpp"

#include <string>

#include "ctxlm/common.hpp"

namespace ctxlm {

ChunkLayout build_chunk_layout(int64_t T, int64_t w) {
  if (T < 1) throw ContractError("build_chunk_layout: T must be >= 1, got " + std::to_string(T));
  if (w < 2) throw ContractError("build_chunk_layout: w must be >= 2, got " + std::to_string(w));
  if (w > T)
    throw ContractError("build_chunk_layout: w=" + std::to_string(w) + " exceeds T=" +
                        std::to_string(T) + "; no full chunk exists");
  ChunkLayout lo;
  lo.seq_len = T;
  lo.chunk_size = w;
  lo.num_slots = T / w + 1;
  const int64_t K = lo.num_slots;
  lo.pool_spans.reserve(static_cast<size_t>(K - 1));
  lo.chunk_positions.reserve(static_cast<size_t>(K - 1));
  for (int64_t j = 0; j < K - 1; ++j) {
    lo.pool_spans.emplace_back(j * w, (j + 1) * w);
    lo.chunk_positions.push_back(j * w);
  }
  lo.broadcast_index.resize(static_cast<size_t>(T));
  for (int64_t t = 0; t < T; ++t) lo.broadcast_index[static_cast<size_t>(t)] = (t + 1) / w;
  // Contiguous ranges of equal broadcast index: [0, w-1), then w-wide
  // blocks, then whatever remains for slot K-1 (T+1-(K-1)w positions).
  lo.segments.reserve(static_cast<size_t>(K));
  lo.segments.emplace_back(0, w - 1);
  for (int64_t k = 1; k < K - 1; ++k) lo.segments.emplace_back(k * w - 1, (k + 1) * w - 1);
  lo.segments.emplace_back((K - 1) * w - 1, T);
  return lo;
}

}  // namespace ctxlm
