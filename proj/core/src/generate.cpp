#include "ctxlm/generate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Core>

namespace ctxlm {

Strategy strategy_from_string(const std::string& s) {
  if (s == "greedy") return Strategy::greedy;
  if (s == "temperature") return Strategy::temperature;
  if (s == "top_k" || s == "top-k") return Strategy::top_k;
  throw ConfigError("sampler: expected greedy | temperature | top_k, got '" + s + "'");
}

namespace {

// Single-position forward pieces. These mirror the tape ops' arithmetic
// (same accumulation order per row) so cached decoding tracks the
// teacher-forced forward to rounding.

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// y = x (1 x n) * w (n x m), row-major.
template <typename T>
void matvec(const std::vector<T>& x, const Tensor<T>& w, std::vector<T>& y) {
  const int64_t n = w.shape[0], m = w.shape[1];
  y.resize(static_cast<size_t>(m));
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(y.data(), m).noalias() =
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(x.data(), n) *
      Eigen::Map<const RowMat<T>>(w.data.data(), n, m);
}

template <typename T>
void layer_norm_row(const std::vector<T>& x, const LayerNormParams<T>& ln, std::vector<T>& y) {
  const int64_t d = static_cast<int64_t>(x.size());
  T mu = T(0);
  for (int64_t j = 0; j < d; ++j) mu += x[static_cast<size_t>(j)];
  mu /= static_cast<T>(d);
  T var = T(0);
  for (int64_t j = 0; j < d; ++j) {
    T c = x[static_cast<size_t>(j)] - mu;
    var += c * c;
  }
  var /= static_cast<T>(d);
  const T rs = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
  y.resize(static_cast<size_t>(d));
  for (int64_t j = 0; j < d; ++j)
    y[static_cast<size_t>(j)] =
        ln.gain.data[static_cast<size_t>(j)] * (x[static_cast<size_t>(j)] - mu) * rs +
        ln.bias.data[static_cast<size_t>(j)];
}

template <typename T>
void gelu_rows(std::vector<T>& x) {
  const T c1 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T c2 = static_cast<T>(0.044715);
  for (T& v : x) {
    T t = std::tanh(c1 * (v + c2 * v * v * v));
    v = T(0.5) * v * (T(1) + t);
  }
}

// One cached pre-norm block update of x (the residual stream at the new
// position). Appends this position's keys/values to the cache.
template <typename T>
void block_step(std::vector<T>& x, BlockParams<T>& p, int64_t n_heads, LayerCache<T>& cache) {
  const int64_t d = static_cast<int64_t>(x.size());
  const int64_t hd = d / n_heads;
  const T qscale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  std::vector<T> a, q, k, v;
  layer_norm_row(x, p.ln1, a);
  matvec(a, p.wq, q);
  matvec(a, p.wk, k);
  matvec(a, p.wv, v);
  cache.k.insert(cache.k.end(), k.begin(), k.end());
  cache.v.insert(cache.v.end(), v.begin(), v.end());
  cache.len += 1;

  const int64_t len = cache.len;
  std::vector<T> att(static_cast<size_t>(d));
  std::vector<T> scores(static_cast<size_t>(len));
  for (int64_t h = 0; h < n_heads; ++h) {
    const int64_t off = h * hd;
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t s = 0; s < len; ++s) {
      const T* kr = cache.k.data() + s * d + off;
      T dot = T(0);
      for (int64_t j = 0; j < hd; ++j) dot += qscale * q[static_cast<size_t>(off + j)] * kr[j];
      scores[static_cast<size_t>(s)] = dot;
      if (dot > mx) mx = dot;
    }
    T denom = T(0);
    for (int64_t s = 0; s < len; ++s) {
      T e = std::exp(scores[static_cast<size_t>(s)] - mx);
      scores[static_cast<size_t>(s)] = e;
      denom += e;
    }
    for (int64_t j = 0; j < hd; ++j) {
      T acc = T(0);
      for (int64_t s = 0; s < len; ++s)
        acc += (scores[static_cast<size_t>(s)] / denom) * cache.v[static_cast<size_t>(s * d + off + j)];
      att[static_cast<size_t>(off + j)] = acc;
    }
  }
  std::vector<T> y;
  matvec(att, p.wo, y);
  for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] += y[static_cast<size_t>(j)];

  std::vector<T> m, u, z;
  layer_norm_row(x, p.ln2, m);
  matvec(m, p.fc1, u);
  for (size_t j = 0; j < u.size(); ++j) u[j] += p.fc1_b.data[j];
  gelu_rows(u);
  matvec(u, p.fc2, z);
  for (int64_t j = 0; j < d; ++j)
    x[static_cast<size_t>(j)] += z[static_cast<size_t>(j)] + p.fc2_b.data[static_cast<size_t>(j)];
}

// logits = f * W^T with W the tied token table or the untied head [V x d].
template <typename T>
void matvec_head(const std::vector<T>& f, ContextLMParams<T>& params, std::vector<T>& logits) {
  const Tensor<T>& w = params.cfg.tie_embeddings ? params.emb.tok : params.head;
  const int64_t V = w.shape[0], d = w.shape[1];
  logits.resize(static_cast<size_t>(V));
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(logits.data(), V).noalias() =
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(f.data(), d) *
      Eigen::Map<const RowMat<T>>(w.data.data(), V, d).transpose();
}

}  // namespace

template <typename T>
std::vector<T> decode_step(GenerationState<T>& st, ContextLMParams<T>& params) {
  const ModelConfig& cfg = params.cfg;
  const int64_t d = cfg.d_model, w = cfg.chunk_size;

  // Everything that can fail is checked before the first mutation.
  if (st.next_pos >= static_cast<int64_t>(st.tokens.size()))
    throw ContractError("decode_step: no pending token at position " +
                        std::to_string(st.next_pos) + " (append one first)");
  if (st.next_pos >= cfg.max_seq_len)
    throw ContractError("decode_step: position " + std::to_string(st.next_pos) +
                        " would overflow max_seq_len " + std::to_string(cfg.max_seq_len));
  const int32_t tok = st.tokens[static_cast<size_t>(st.next_pos)];
  if (tok < 0 || tok >= cfg.vocab_size)
    throw ContractError("decode_step: token id " + std::to_string(tok) +
                        " outside vocab of " + std::to_string(cfg.vocab_size));
  const int64_t t = st.next_pos;

  std::vector<T> x(static_cast<size_t>(d));
  {
    const T* tr = params.emb.tok.data.data() + static_cast<int64_t>(tok) * d;
    const T* pr = params.emb.pos.data.data() + t * d;
    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] = tr[j] + pr[j];
  }

  for (int64_t i = 0; i < cfg.n_enc_layers; ++i)
    block_step(x, params.backbone[static_cast<size_t>(i)], cfg.n_heads,
               st.backbone[static_cast<size_t>(i)]);

  if (cfg.mode == Mode::contextlm) {
    // x is h_t here.
    if (t == 0) {
      st.ctx = cfg.learned_c_init ? params.c_init.data : x;
      st.ctx_ready = true;
    }
    for (int64_t j = 0; j < d; ++j) st.chunk_sum[static_cast<size_t>(j)] += x[static_cast<size_t>(j)];
    st.chunk_fill += 1;
    if (st.chunk_fill == w) {
      // Window [j*w, (j+1)*w) just completed: pool it and advance the
      // predictor one cached step. The result is fused already at this
      // position (segment k = (t+1)/w starts here).
      const int64_t j = st.chunks_emitted;
      const T inv = T(1) / static_cast<T>(w);
      std::vector<T> c(static_cast<size_t>(d));
      const T* cp = params.emb.pos.data.data() + j * w * d;
      for (int64_t e = 0; e < d; ++e)
        c[static_cast<size_t>(e)] = st.chunk_sum[static_cast<size_t>(e)] * inv + cp[e];
      for (size_t li = 0; li < params.predictor.size(); ++li)
        block_step(c, params.predictor[li], cfg.n_heads, st.predictor[li]);
      layer_norm_row(c, params.ctx_ln, st.ctx);
      st.chunks_emitted += 1;
      st.chunk_fill = 0;
      std::fill(st.chunk_sum.begin(), st.chunk_sum.end(), T(0));
    }
    for (int64_t j = 0; j < d; ++j) x[static_cast<size_t>(j)] += st.ctx[static_cast<size_t>(j)];
  }

  for (int64_t i = cfg.n_enc_layers; i < cfg.n_backbone_layers(); ++i)
    block_step(x, params.backbone[static_cast<size_t>(i)], cfg.n_heads,
               st.backbone[static_cast<size_t>(i)]);

  std::vector<T> f, logits;
  layer_norm_row(x, params.final_ln, f);
  matvec_head(f, params, logits);
  st.next_pos += 1;
  return logits;
}

template <typename T>
GenerationState<T> prefill(const std::vector<int32_t>& prompt, ContextLMParams<T>& params) {
  const ModelConfig& cfg = params.cfg;
  if (prompt.empty()) throw ContractError("prefill: prompt must hold at least one token");
  if (static_cast<int64_t>(prompt.size()) > cfg.max_seq_len)
    throw ContractError("prefill: prompt of " + std::to_string(prompt.size()) +
                        " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int32_t id : prompt)
    if (id < 0 || id >= cfg.vocab_size)
      throw ContractError("prefill: token id " + std::to_string(id) + " outside vocab of " +
                          std::to_string(cfg.vocab_size));
  GenerationState<T> st;
  st.tokens = prompt;
  st.backbone.resize(static_cast<size_t>(cfg.n_backbone_layers()));
  st.predictor.resize(params.predictor.size());
  const size_t cache_bytes = static_cast<size_t>(cfg.max_seq_len * cfg.d_model);
  for (auto& c : st.backbone) {
    c.k.reserve(cache_bytes);
    c.v.reserve(cache_bytes);
  }
  st.chunk_sum.assign(static_cast<size_t>(cfg.d_model), T(0));
  st.ctx.assign(static_cast<size_t>(cfg.d_model), T(0));
  // Decode everything but the last prompt token; the first decode_step after
  // prefill then produces the first next-token distribution.
  for (size_t i = 0; i + 1 < prompt.size(); ++i) decode_step(st, params);
  return st;
}

template <typename T>
int32_t sample_logits(const std::vector<T>& logits, const SamplerConfig& sampler, SplitMix64& g) {
  const int64_t V = static_cast<int64_t>(logits.size());
  if (V < 1) throw ContractError("sample_logits: empty logit row");
  for (T v : logits)
    if (std::isnan(static_cast<double>(v))) throw NumericError("sample_logits: NaN logit");

  if (sampler.strategy == Strategy::greedy) {
    // Ascending scan: ties resolve toward the lowest id.
    int64_t best = 0;
    for (int64_t v = 1; v < V; ++v)
      if (logits[static_cast<size_t>(v)] > logits[static_cast<size_t>(best)]) best = v;
    return static_cast<int32_t>(best);
  }

  if (sampler.temperature <= 0)
    throw ContractError("sample_logits: temperature must be > 0, got " +
                        std::to_string(sampler.temperature));
  std::vector<double> p(static_cast<size_t>(V));
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t v = 0; v < V; ++v) {
    p[static_cast<size_t>(v)] = static_cast<double>(logits[static_cast<size_t>(v)]) / sampler.temperature;
    mx = std::max(mx, p[static_cast<size_t>(v)]);
  }
  for (double& e : p) e = std::exp(e - mx);

  if (sampler.strategy == Strategy::top_k) {
    if (sampler.k < 1)
      throw ContractError("sample_logits: top-k needs k >= 1, got " + std::to_string(sampler.k));
    const int64_t keep = std::min(sampler.k, V);
    std::vector<int64_t> order(static_cast<size_t>(V));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)];
    });
    for (int64_t i = keep; i < V; ++i) p[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0.0;
  }

  double total = 0.0;
  for (double e : p) total += e;
  const double r = g.next_double() * total;
  double acc = 0.0;
  int64_t last = 0;
  for (int64_t v = 0; v < V; ++v) {
    if (p[static_cast<size_t>(v)] <= 0.0) continue;
    acc += p[static_cast<size_t>(v)];
    last = v;
    if (r < acc) return static_cast<int32_t>(v);
  }
  return static_cast<int32_t>(last);  // r landed on the tail of the rounding gap
}

template <typename T>
std::vector<int32_t> generate(const std::vector<int32_t>& prompt, int64_t n_new,
                              const SamplerConfig& sampler, ContextLMParams<T>& params) {
  if (n_new < 0) throw ContractError("generate: n_new must be >= 0");
  if (static_cast<int64_t>(prompt.size()) + n_new > params.cfg.max_seq_len)
    throw ContractError("generate: prompt (" + std::to_string(prompt.size()) + ") + n_new (" +
                        std::to_string(n_new) + ") exceeds max_seq_len " +
                        std::to_string(params.cfg.max_seq_len));
  GenerationState<T> st = prefill(prompt, params);
  SplitMix64 g = named_stream(sampler.seed, "generate");
  for (int64_t i = 0; i < n_new; ++i) {
    std::vector<T> logits = decode_step(st, params);
    st.tokens.push_back(sample_logits(logits, sampler, g));
  }
  return st.tokens;
}

#define CTXLM_INSTANTIATE_GEN(T)                                                            \
  template std::vector<T> decode_step<T>(GenerationState<T>&, ContextLMParams<T>&);         \
  template GenerationState<T> prefill<T>(const std::vector<int32_t>&, ContextLMParams<T>&); \
  template int32_t sample_logits<T>(const std::vector<T>&, const SamplerConfig&, SplitMix64&); \
  template std::vector<int32_t> generate<T>(const std::vector<int32_t>&, int64_t,           \
                                            const SamplerConfig&, ContextLMParams<T>&);

CTXLM_INSTANTIATE_GEN(float)
CTXLM_INSTANTIATE_GEN(double)

#undef CTXLM_INSTANTIATE_GEN

}  // namespace ctxlm
