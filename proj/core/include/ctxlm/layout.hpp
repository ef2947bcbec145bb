#pragma once

#include <cstdint>
#include <utility>
#include <vector>

namespace ctxlm {

// Segmentation of a length-T sequence into pooling chunks and broadcast
// segments.
//
// Pooling: chunk j covers token positions [j*w, (j+1)*w) for j = 0..K-2 —
// aligned windows, each exactly w tokens; a trailing partial window (when
// w does not divide T) is never pooled.
//
// Broadcast: position t consumes context slot k(t) = floor((t+1)/w). Slot 0
// is the c_init placeholder; slot k >= 1 is the prediction made from chunks
// 0..k-1, whose newest token index is k*w-1 = min of segment k. That
// one-token left shift is exactly what keeps the context path causal.
//
// Segment sizes come out as (w-1, w, ..., w, T+1-(K-1)*w), summing to T.
struct ChunkLayout {
  int64_t seq_len = 0;     // T
  int64_t chunk_size = 0;  // w
  int64_t num_slots = 0;   // K = floor(T/w) + 1, counting the c_init slot
  // Pooled chunk spans [first, last) — num_chunks() = K-1 of them.
  std::vector<std::pair<int64_t, int64_t>> pool_spans;
  // broadcast_index[t] = k(t), in [0, K).
  std::vector<int64_t> broadcast_index;
  // segments[k] = the token positions t with k(t) == k (each a contiguous
  // [first, last) range).
  std::vector<std::pair<int64_t, int64_t>> segments;
  // Position id fed to the context predictor for chunk j: its first token's
  // position, j*w.
  std::vector<int64_t> chunk_positions;

  int64_t num_chunks() const { return num_slots - 1; }
  int64_t segment_size(int64_t k) const { return segments[k].second - segments[k].first; }
};

// Throws ContractError unless T >= 1, w >= 2, w <= T (otherwise no full
// chunk exists and the layout degenerates).
ChunkLayout build_chunk_layout(int64_t T, int64_t w);

}  // namespace ctxlm
