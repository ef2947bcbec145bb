#include "ctxlm/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "ctxlm/layout.hpp"

namespace ctxlm {

using nlohmann::json;

namespace {

std::pair<int64_t, int64_t> split_range(const Corpus& c, const std::string& split) {
  if (split == "train") return {c.train_begin, c.train_end};
  if (split == "val") return {c.val_begin, c.val_end};
  throw ContractError("evaluation: split must be 'train' or 'val', got '" + split + "'");
}

// Position-level NLL sums over the tiled windows, the shared core of
// perplexity and bucketed_position_loss. position_nll[t] accumulates across
// windows; the caller divides by the window count.
template <typename T>
int64_t window_nll(ContextLMParams<T>& params, const Corpus& corpus, const std::string& split,
                   int64_t seq_len, int64_t max_windows, std::vector<double>& position_nll) {
  auto [begin, end] = split_range(corpus, split);
  const int64_t stride = seq_len;
  int64_t available = 0;
  for (int64_t s = begin; s + seq_len + 1 <= end; s += stride) ++available;
  if (available == 0)
    throw ContractError("evaluation: split '" + split + "' holds " + std::to_string(end - begin) +
                        " bytes; need at least " + std::to_string(seq_len + 1) +
                        " for one window of seq_len=" + std::to_string(seq_len));
  const int64_t windows = max_windows > 0 ? std::min(max_windows, available) : available;

  position_nll.assign(static_cast<size_t>(seq_len), 0.0);
  std::vector<int32_t> in(static_cast<size_t>(seq_len));
  for (int64_t wi = 0; wi < windows; ++wi) {
    const int64_t s = begin + wi * stride;
    for (int64_t t = 0; t < seq_len; ++t)
      in[static_cast<size_t>(t)] = corpus.bytes[static_cast<size_t>(s + t)];
    Tape<T> tp(/*record_grads=*/false);
    auto tr = forward(tp, in, 1, seq_len, params);
    const T* logits = tp.val(tr.logits);
    const int64_t V = params.cfg.vocab_size;
    for (int64_t t = 0; t < seq_len; ++t) {
      const T* row = logits + t * V;
      // log-sum-exp with ascending sums, in double regardless of T.
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t v = 0; v < V; ++v) mx = std::max(mx, static_cast<double>(row[v]));
      double denom = 0.0;
      for (int64_t v = 0; v < V; ++v) denom += std::exp(static_cast<double>(row[v]) - mx);
      const int32_t target = corpus.bytes[static_cast<size_t>(s + t + 1)];
      position_nll[static_cast<size_t>(t)] +=
          mx + std::log(denom) - static_cast<double>(row[target]);
    }
  }
  return windows;
}

void check_partition(const std::vector<std::pair<int64_t, int64_t>>& buckets, int64_t seq_len) {
  if (buckets.empty()) throw ContractError("bucketed_position_loss: no buckets given");
  int64_t cursor = 0;
  for (const auto& [b, e] : buckets) {
    if (b >= e)
      throw ContractError("bucketed_position_loss: bucket [" + std::to_string(b) + ", " +
                          std::to_string(e) + ") is empty");
    if (b != cursor)
      throw ContractError("bucketed_position_loss: buckets must partition [0, " +
                          std::to_string(seq_len) + ") contiguously; gap/overlap at " +
                          std::to_string(b));
    cursor = e;
  }
  if (cursor != seq_len)
    throw ContractError("bucketed_position_loss: buckets end at " + std::to_string(cursor) +
                        ", expected " + std::to_string(seq_len));
}

}  // namespace

template <typename T>
EvalReport bucketed_position_loss(ContextLMParams<T>& params, const Corpus& corpus,
                                  const std::string& split, int64_t seq_len,
                                  const std::vector<std::pair<int64_t, int64_t>>& buckets,
                                  int64_t max_windows) {
  check_partition(buckets, seq_len);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> position_nll;
  const int64_t windows = window_nll(params, corpus, split, seq_len, max_windows, position_nll);

  EvalReport rep;
  rep.split = split;
  rep.seq_len = seq_len;
  rep.windows = windows;
  rep.tokens = windows * seq_len;
  double total = 0.0;
  for (const auto& [b, e] : buckets) {
    Bucket bk;
    bk.begin = b;
    bk.end = e;
    bk.tokens = windows * (e - b);
    double sum = 0.0;
    for (int64_t t = b; t < e; ++t) sum += position_nll[static_cast<size_t>(t)];
    bk.mean_nll = sum / static_cast<double>(bk.tokens);
    total += sum;
    rep.buckets.push_back(bk);
  }
  rep.mean_nll = total / static_cast<double>(rep.tokens);
  rep.ppl = std::exp(rep.mean_nll);
  rep.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

template <typename T>
EvalReport perplexity(ContextLMParams<T>& params, const Corpus& corpus, const std::string& split,
                      int64_t seq_len, int64_t max_windows) {
  return bucketed_position_loss(params, corpus, split, seq_len, {{0, seq_len}}, max_windows);
}

DeltaCurve delta_loss_curve(const EvalReport& a, const EvalReport& b) {
  if (a.seq_len != b.seq_len || a.buckets.size() != b.buckets.size())
    throw ContractError("delta_loss_curve: reports bucketed differently (" +
                        std::to_string(a.buckets.size()) + " vs " +
                        std::to_string(b.buckets.size()) + " buckets)");
  DeltaCurve c;
  c.label_a = a.split;
  c.label_b = b.split;
  c.seq_len = a.seq_len;
  for (size_t i = 0; i < a.buckets.size(); ++i) {
    const Bucket& ba = a.buckets[i];
    const Bucket& bb = b.buckets[i];
    if (ba.begin != bb.begin || ba.end != bb.end)
      throw ContractError("delta_loss_curve: bucket " + std::to_string(i) + " ranges differ");
    c.deltas.push_back({ba.begin, ba.end, ba.mean_nll - bb.mean_nll});
  }
  return c;
}

// ---- JSON ---------------------------------------------------------------------

namespace {

json bucket_to_json(const Bucket& b) {
  return json{{"begin", b.begin}, {"end", b.end}, {"tokens", b.tokens}, {"mean_nll", b.mean_nll}};
}

}  // namespace

std::string to_json(const EvalReport& r) {
  json buckets = json::array();
  for (const Bucket& b : r.buckets) buckets.push_back(bucket_to_json(b));
  json j{{"split", r.split},       {"seq_len", r.seq_len}, {"windows", r.windows},
         {"tokens", r.tokens},     {"mean_nll", r.mean_nll}, {"ppl", r.ppl},
         {"buckets", buckets},     {"wall_ms", r.wall_ms}};
  return j.dump(2) + "\n";
}

std::string to_json(const DeltaCurve& c) {
  json deltas = json::array();
  for (const DeltaBucket& d : c.deltas)
    deltas.push_back(json{{"begin", d.begin}, {"end", d.end}, {"delta_nll", d.delta_nll}});
  json j{{"kind", "delta_loss_curve"},
         {"label_a", c.label_a},
         {"label_b", c.label_b},
         {"seq_len", c.seq_len},
         {"deltas", deltas}};
  return j.dump(2) + "\n";
}

namespace {

json parse_or_throw(const std::string& text, const char* what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw IoError(std::string(what) + ": not valid JSON: " + e.what());
  }
}

}  // namespace

EvalReport eval_report_from_json(const std::string& text) {
  json j = parse_or_throw(text, "eval report");
  EvalReport r;
  try {
    r.split = j.at("split").get<std::string>();
    r.seq_len = j.at("seq_len").get<int64_t>();
    r.windows = j.at("windows").get<int64_t>();
    r.tokens = j.at("tokens").get<int64_t>();
    r.mean_nll = j.at("mean_nll").get<double>();
    r.ppl = j.at("ppl").get<double>();
    r.wall_ms = j.at("wall_ms").get<double>();
    for (const json& b : j.at("buckets")) {
      Bucket bk;
      bk.begin = b.at("begin").get<int64_t>();
      bk.end = b.at("end").get<int64_t>();
      bk.tokens = b.at("tokens").get<int64_t>();
      bk.mean_nll = b.at("mean_nll").get<double>();
      r.buckets.push_back(bk);
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("eval report: ") + e.what());
  }
  return r;
}

DeltaCurve delta_curve_from_json(const std::string& text) {
  json j = parse_or_throw(text, "delta curve");
  DeltaCurve c;
  try {
    if (j.at("kind").get<std::string>() != "delta_loss_curve")
      throw IoError("delta curve: kind field is not 'delta_loss_curve'");
    c.label_a = j.at("label_a").get<std::string>();
    c.label_b = j.at("label_b").get<std::string>();
    c.seq_len = j.at("seq_len").get<int64_t>();
    for (const json& d : j.at("deltas"))
      c.deltas.push_back({d.at("begin").get<int64_t>(), d.at("end").get<int64_t>(),
                          d.at("delta_nll").get<double>()});
  } catch (const json::exception& e) {
    throw IoError(std::string("delta curve: ") + e.what());
  }
  return c;
}

// ---- attention export -----------------------------------------------------------

template <typename T>
AttentionDump export_attention(ContextLMParams<T>& params, const std::vector<int32_t>& prompt,
                               std::vector<int64_t> layers, std::vector<int64_t> heads) {
  const ModelConfig& cfg = params.cfg;
  const int64_t S = static_cast<int64_t>(prompt.size());
  const int64_t L = cfg.n_backbone_layers(), H = cfg.n_heads;
  if (layers.empty())
    for (int64_t l = 0; l < L; ++l) layers.push_back(l);
  if (heads.empty())
    for (int64_t h = 0; h < H; ++h) heads.push_back(h);
  for (int64_t l : layers)
    if (l < 0 || l >= L)
      throw ContractError("export_attention: layer " + std::to_string(l) + " outside [0, " +
                          std::to_string(L) + ")");
  for (int64_t h : heads)
    if (h < 0 || h >= H)
      throw ContractError("export_attention: head " + std::to_string(h) + " outside [0, " +
                          std::to_string(H) + ")");

  Tape<T> tp(/*record_grads=*/false);
  ForwardOptions opts;
  opts.capture_attention = true;
  auto tr = forward(tp, prompt, 1, S, params, opts);

  AttentionDump dump;
  dump.prompt = prompt;
  dump.seq_len = S;
  dump.n_heads = H;
  dump.layers = layers;
  dump.heads = heads;
  if (cfg.mode == Mode::contextlm) {
    dump.chunk_size = cfg.chunk_size;
    ChunkLayout lo = build_chunk_layout(S, cfg.chunk_size);
    dump.pool_spans = lo.pool_spans;
    dump.segments = lo.segments;
  }
  // att nodes are [H x S x S] for B=1 (head-major after split_heads).
  for (int64_t l : layers) {
    std::vector<std::vector<double>> per_head;
    const T* att = tp.val(tr.att_backbone[static_cast<size_t>(l)]);
    for (int64_t h : heads) {
      std::vector<double> m(static_cast<size_t>(S * S));
      const T* src = att + h * S * S;
      for (int64_t i = 0; i < S * S; ++i) m[static_cast<size_t>(i)] = static_cast<double>(src[i]);
      per_head.push_back(std::move(m));
    }
    dump.matrices.push_back(std::move(per_head));
  }
  // Aggregated incoming attention: mean over all heads of the column sums
  // of the last backbone layer.
  dump.aggregated.assign(static_cast<size_t>(S), 0.0);
  const T* last = tp.val(tr.att_backbone.back());
  for (int64_t h = 0; h < H; ++h)
    for (int64_t t = 0; t < S; ++t)
      for (int64_t s = 0; s < S; ++s)
        dump.aggregated[static_cast<size_t>(s)] +=
            static_cast<double>(last[(h * S + t) * S + s]);
  for (double& v : dump.aggregated) v /= static_cast<double>(H);
  return dump;
}

std::string to_json(const AttentionDump& dump) {
  auto ranges = [](const std::vector<std::pair<int64_t, int64_t>>& v) {
    json a = json::array();
    for (const auto& [b, e] : v) a.push_back(json::array({b, e}));
    return a;
  };
  json layers = json::array();
  for (size_t i = 0; i < dump.layers.size(); ++i) {
    json hs = json::array();
    for (size_t jh = 0; jh < dump.heads.size(); ++jh) {
      // matrices serialize as S rows of S weights
      json rows = json::array();
      const auto& m = dump.matrices[i][jh];
      for (int64_t r = 0; r < dump.seq_len; ++r) {
        json row = json::array();
        for (int64_t c = 0; c < dump.seq_len; ++c)
          row.push_back(m[static_cast<size_t>(r * dump.seq_len + c)]);
        rows.push_back(std::move(row));
      }
      hs.push_back(json{{"head", dump.heads[jh]}, {"weights", std::move(rows)}});
    }
    layers.push_back(json{{"layer", dump.layers[i]}, {"heads", std::move(hs)}});
  }
  json j{{"kind", "attention_dump"},
         {"prompt", dump.prompt},
         {"seq_len", dump.seq_len},
         {"chunk_size", dump.chunk_size},
         {"n_heads", dump.n_heads},
         {"pool_spans", ranges(dump.pool_spans)},
         {"segments", ranges(dump.segments)},
         {"layers", std::move(layers)},
         {"aggregated_incoming", dump.aggregated}};
  return j.dump(2) + "\n";
}

#define CTXLM_INSTANTIATE_EVAL(T)                                                             \
  template EvalReport perplexity<T>(ContextLMParams<T>&, const Corpus&, const std::string&,   \
                                    int64_t, int64_t);                                        \
  template EvalReport bucketed_position_loss<T>(                                              \
      ContextLMParams<T>&, const Corpus&, const std::string&, int64_t,                        \
      const std::vector<std::pair<int64_t, int64_t>>&, int64_t);                              \
  template AttentionDump export_attention<T>(ContextLMParams<T>&, const std::vector<int32_t>&, \
                                             std::vector<int64_t>, std::vector<int64_t>);

CTXLM_INSTANTIATE_EVAL(float)
CTXLM_INSTANTIATE_EVAL(double)

#undef CTXLM_INSTANTIATE_EVAL

}  // namespace ctxlm
