#include "ctxlm/config.hpp"

#include <algorithm>

#include <json.hpp>

#include "config_json.hpp"
#include "ctxlm/common.hpp"

namespace ctxlm {

using nlohmann::json;

std::string to_string(Mode m) { return m == Mode::baseline ? "baseline" : "contextlm"; }
std::string to_string(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

Mode mode_from_string(const std::string& s) {
  if (s == "baseline") return Mode::baseline;
  if (s == "contextlm") return Mode::contextlm;
  throw ConfigError("model.mode: expected 'baseline' or 'contextlm', got '" + s + "'");
}

Dtype dtype_from_string(const std::string& s) {
  if (s == "f32") return Dtype::f32;
  if (s == "f64") return Dtype::f64;
  throw ConfigError("train.dtype: expected 'f32' or 'f64', got '" + s + "'");
}

std::vector<std::string> validate(const ModelConfig& m) {
  std::vector<std::string> out;
  if (m.vocab_size < 2) out.push_back("model.vocab_size: must be >= 2");
  if (m.d_model < 1) out.push_back("model.d_model: must be >= 1");
  if (m.n_heads < 1)
    out.push_back("model.n_heads: must be >= 1");
  else if (m.d_model % m.n_heads != 0)
    out.push_back("model.n_heads: d_model=" + std::to_string(m.d_model) +
                  " not divisible by n_heads=" + std::to_string(m.n_heads));
  if (m.n_enc_layers < 0) out.push_back("model.n_enc_layers: must be >= 0");
  if (m.n_dec_layers < 0) out.push_back("model.n_dec_layers: must be >= 0");
  if (m.n_backbone_layers() < 1)
    out.push_back("model: n_enc_layers + n_dec_layers must be >= 1");
  if (m.max_seq_len < 2) out.push_back("model.max_seq_len: must be >= 2");
  if (m.mode == Mode::contextlm) {
    if (m.n_ctx_layers < 1) out.push_back("model.n_ctx_layers: must be >= 1 in contextlm mode");
    if (m.chunk_size < 2)
      out.push_back("model.chunk_size: must be >= 2 in contextlm mode (w=1 degenerates: the "
                    "first broadcast segment would be empty)");
    else if (m.chunk_size > m.max_seq_len)
      out.push_back("model.chunk_size: exceeds max_seq_len; no full chunk would exist");
  }
  return out;
}

std::vector<std::string> validate(const TrainConfig& t) {
  std::vector<std::string> out;
  if (t.steps < 1) out.push_back("train.steps: must be >= 1");
  if (t.batch_size < 1) out.push_back("train.batch_size: must be >= 1");
  if (t.seq_len < 2) out.push_back("train.seq_len: must be >= 2");
  if (t.peak_lr <= 0) out.push_back("train.peak_lr: must be > 0");
  if (t.min_lr < 0) out.push_back("train.min_lr: must be >= 0");
  if (t.min_lr >= t.peak_lr) out.push_back("train: peak_lr must exceed min_lr");
  if (t.warmup_steps < 0) out.push_back("train.warmup_steps: must be >= 0");
  if (t.warmup_steps >= t.steps) out.push_back("train.warmup_steps: must be < steps");
  if (t.weight_decay < 0) out.push_back("train.weight_decay: must be >= 0");
  if (t.beta1 < 0 || t.beta1 >= 1) out.push_back("train.beta1: must be in [0,1)");
  if (t.beta2 < 0 || t.beta2 >= 1) out.push_back("train.beta2: must be in [0,1)");
  if (t.eps_adam <= 0) out.push_back("train.eps_adam: must be > 0");
  if (t.grad_clip_norm <= 0) out.push_back("train.grad_clip_norm: must be > 0");
  if (t.eval_every < 1) out.push_back("train.eval_every: must be >= 1");
  if (t.eval_batches < 1) out.push_back("train.eval_batches: must be >= 1");
  if (t.checkpoint_every < 1) out.push_back("train.checkpoint_every: must be >= 1");
  return out;
}

std::vector<std::string> validate(const RunConfig& rc, bool require_corpus) {
  std::vector<std::string> out = validate(rc.model);
  auto tp = validate(rc.train);
  out.insert(out.end(), tp.begin(), tp.end());
  if (rc.train.seq_len > rc.model.max_seq_len)
    out.push_back("train.seq_len: " + std::to_string(rc.train.seq_len) +
                  " exceeds model.max_seq_len " + std::to_string(rc.model.max_seq_len));
  if (require_corpus && rc.data.corpus.empty())
    out.push_back("data.corpus: required (path to the training text)");
  if (rc.data.val_fraction <= 0 || rc.data.val_fraction >= 0.5)
    out.push_back("data.val_fraction: must lie in (0, 0.5)");
  return out;
}

// ---- JSON ---------------------------------------------------------------------

namespace {

template <typename V>
void take(const json& j, const char* key, V& dst, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    dst = it->template get<V>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace

namespace detail {

json to_json(const ModelConfig& m) {
  return json{{"vocab_size", m.vocab_size},
              {"d_model", m.d_model},
              {"n_heads", m.n_heads},
              {"n_enc_layers", m.n_enc_layers},
              {"n_dec_layers", m.n_dec_layers},
              {"n_ctx_layers", m.n_ctx_layers},
              {"chunk_size", m.chunk_size},
              {"max_seq_len", m.max_seq_len},
              {"mode", to_string(m.mode)},
              {"tie_embeddings", m.tie_embeddings},
              {"learned_c_init", m.learned_c_init},
              {"seed", m.seed}};
}

json to_json(const TrainConfig& t) {
  return json{{"steps", t.steps},
              {"batch_size", t.batch_size},
              {"seq_len", t.seq_len},
              {"peak_lr", t.peak_lr},
              {"min_lr", t.min_lr},
              {"warmup_steps", t.warmup_steps},
              {"weight_decay", t.weight_decay},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps_adam", t.eps_adam},
              {"grad_clip_norm", t.grad_clip_norm},
              {"eval_every", t.eval_every},
              {"eval_batches", t.eval_batches},
              {"checkpoint_every", t.checkpoint_every},
              {"seed", t.seed},
              {"dtype", to_string(t.dtype)}};
}

void merge_model(ModelConfig& m, const json& j) {
  static const std::vector<std::string> known = {
      "vocab_size", "d_model",     "n_heads",        "n_enc_layers",   "n_dec_layers",
      "n_ctx_layers", "chunk_size", "max_seq_len",    "mode",           "tie_embeddings",
      "learned_c_init", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("model." + it.key() + ": unknown key");
  take(j, "vocab_size", m.vocab_size, "model");
  take(j, "d_model", m.d_model, "model");
  take(j, "n_heads", m.n_heads, "model");
  take(j, "n_enc_layers", m.n_enc_layers, "model");
  take(j, "n_dec_layers", m.n_dec_layers, "model");
  take(j, "n_ctx_layers", m.n_ctx_layers, "model");
  take(j, "chunk_size", m.chunk_size, "model");
  take(j, "max_seq_len", m.max_seq_len, "model");
  if (j.contains("mode")) m.mode = mode_from_string(j.at("mode").get<std::string>());
  take(j, "tie_embeddings", m.tie_embeddings, "model");
  take(j, "learned_c_init", m.learned_c_init, "model");
  take(j, "seed", m.seed, "model");
}

void merge_train(TrainConfig& t, const json& j) {
  static const std::vector<std::string> known = {
      "steps",      "batch_size",   "seq_len",   "peak_lr",          "min_lr",
      "warmup_steps", "weight_decay", "beta1",     "beta2",            "eps_adam",
      "grad_clip_norm", "eval_every", "eval_batches", "checkpoint_every", "seed",
      "dtype"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw ConfigError("train." + it.key() + ": unknown key");
  take(j, "steps", t.steps, "train");
  take(j, "batch_size", t.batch_size, "train");
  take(j, "seq_len", t.seq_len, "train");
  take(j, "peak_lr", t.peak_lr, "train");
  take(j, "min_lr", t.min_lr, "train");
  take(j, "warmup_steps", t.warmup_steps, "train");
  take(j, "weight_decay", t.weight_decay, "train");
  take(j, "beta1", t.beta1, "train");
  take(j, "beta2", t.beta2, "train");
  take(j, "eps_adam", t.eps_adam, "train");
  take(j, "grad_clip_norm", t.grad_clip_norm, "train");
  take(j, "eval_every", t.eval_every, "train");
  take(j, "eval_batches", t.eval_batches, "train");
  take(j, "checkpoint_every", t.checkpoint_every, "train");
  take(j, "seed", t.seed, "train");
  if (j.contains("dtype")) t.dtype = dtype_from_string(j.at("dtype").get<std::string>());
}

}  // namespace detail

using detail::merge_model;
using detail::merge_train;

std::string serialize(const RunConfig& rc) {
  json j{{"model", detail::to_json(rc.model)},
         {"train", detail::to_json(rc.train)},
         {"data", json{{"corpus", rc.data.corpus}, {"val_fraction", rc.data.val_fraction}}},
         {"run", json{{"out_dir", rc.out_dir}}}};
  return j.dump(2) + "\n";
}

void merge_json(RunConfig& rc, const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config file: not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config file: top level must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k != "model" && k != "train" && k != "data" && k != "run")
      throw ConfigError(k + ": unknown top-level section (expected model/train/data/run)");
  }
  if (j.contains("model")) merge_model(rc.model, j.at("model"));
  if (j.contains("train")) merge_train(rc.train, j.at("train"));
  if (j.contains("data")) {
    const json& d = j.at("data");
    for (auto it = d.begin(); it != d.end(); ++it)
      if (it.key() != "corpus" && it.key() != "val_fraction")
        throw ConfigError("data." + it.key() + ": unknown key");
    take(d, "corpus", rc.data.corpus, "data");
    take(d, "val_fraction", rc.data.val_fraction, "data");
  }
  if (j.contains("run")) {
    const json& r = j.at("run");
    for (auto it = r.begin(); it != r.end(); ++it)
      if (it.key() != "out_dir") throw ConfigError("run." + it.key() + ": unknown key");
    take(r, "out_dir", rc.out_dir, "run");
  }
}

void apply_override(RunConfig& rc, const std::string& key, const std::string& value) {
  auto dot = key.find('.');
  if (dot == std::string::npos)
    throw ConfigError("override '" + key + "': expected section.field (e.g. model.chunk_size)");
  std::string section = key.substr(0, dot);
  std::string field = key.substr(dot + 1);
  // Route through the JSON merger so unknown keys and bad values produce the
  // same messages as config files. Strings need quoting; try raw first so
  // numbers/booleans parse naturally.
  json leaf;
  try {
    leaf = json::parse(value);
  } catch (const json::exception&) {
    leaf = value;
  }
  if (field == "mode" || field == "dtype" || field == "corpus" || field == "out_dir")
    leaf = value;  // always textual, even when the text looks numeric
  json wrapped{{section, json{{field, leaf}}}};
  merge_json(rc, wrapped.dump());
}

const std::vector<ConfigKey>& config_keys() {
  using K = ConfigKey::Kind;
  static const std::vector<ConfigKey> keys = {
      {"model.vocab_size", K::integer, "token vocabulary size (byte-level default 256)"},
      {"model.d_model", K::integer, "model width"},
      {"model.n_heads", K::integer, "attention heads"},
      {"model.n_enc_layers", K::integer, "backbone layers before the fusion point"},
      {"model.n_dec_layers", K::integer, "backbone layers after the fusion point"},
      {"model.n_ctx_layers", K::integer, "context predictor depth"},
      {"model.chunk_size", K::integer, "tokens pooled per context chunk (w)"},
      {"model.max_seq_len", K::integer, "maximum sequence length"},
      {"model.mode", K::text, "baseline | contextlm"},
      {"model.tie_embeddings", K::boolean, "share token table with the output head"},
      {"model.learned_c_init", K::boolean, "learned placeholder context instead of h0"},
      {"model.seed", K::integer, "parameter init seed"},
      {"train.steps", K::integer, "optimization steps"},
      {"train.batch_size", K::integer, "sequences per step"},
      {"train.seq_len", K::integer, "training window length"},
      {"train.peak_lr", K::real, "peak learning rate"},
      {"train.min_lr", K::real, "cosine floor"},
      {"train.warmup_steps", K::integer, "linear warmup steps"},
      {"train.weight_decay", K::real, "decoupled weight decay"},
      {"train.beta1", K::real, "AdamW beta1"},
      {"train.beta2", K::real, "AdamW beta2"},
      {"train.eps_adam", K::real, "AdamW epsilon"},
      {"train.grad_clip_norm", K::real, "global gradient-norm cap"},
      {"train.eval_every", K::integer, "steps between validation passes"},
      {"train.eval_batches", K::integer, "batches per validation pass"},
      {"train.checkpoint_every", K::integer, "steps between checkpoints"},
      {"train.seed", K::integer, "data order / sampling seed"},
      {"train.dtype", K::text, "f32 | f64"},
      {"data.corpus", K::text, "path to training bytes"},
      {"data.val_fraction", K::real, "trailing fraction held out for validation"},
      {"run.out_dir", K::text, "run output directory"},
  };
  return keys;
}

}  // namespace ctxlm
