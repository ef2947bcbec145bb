#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ctxlm {

enum class Mode { baseline, contextlm };
enum class Dtype { f32, f64 };

std::string to_string(Mode m);
std::string to_string(Dtype d);
Mode mode_from_string(const std::string& s);
Dtype dtype_from_string(const std::string& s);

// Architecture hyperparameters. Encoder/decoder depths describe the backbone
// split around the fusion point ("0/4" = fuse directly on embeddings); the
// context predictor has its own depth and operates only in contextlm mode.
struct ModelConfig {
  int64_t vocab_size = 256;
  int64_t d_model = 128;
  int64_t n_heads = 4;
  int64_t n_enc_layers = 0;
  int64_t n_dec_layers = 4;
  int64_t n_ctx_layers = 2;
  int64_t chunk_size = 4;
  int64_t max_seq_len = 256;
  Mode mode = Mode::contextlm;
  bool tie_embeddings = true;
  // Placeholder context for the first chunk segment: the sequence's own h0
  // by default, or a learned vector when set.
  bool learned_c_init = false;
  uint64_t seed = 1;

  int64_t n_backbone_layers() const { return n_enc_layers + n_dec_layers; }
};

struct TrainConfig {
  int64_t steps = 3000;
  int64_t batch_size = 16;
  int64_t seq_len = 256;
  double peak_lr = 3e-4;
  double min_lr = 3e-5;
  int64_t warmup_steps = 100;
  double weight_decay = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps_adam = 1e-8;
  double grad_clip_norm = 1.0;
  int64_t eval_every = 250;
  int64_t eval_batches = 8;
  int64_t checkpoint_every = 1000;
  uint64_t seed = 1;
  Dtype dtype = Dtype::f32;
};

struct DataConfig {
  std::string corpus;
  double val_fraction = 0.1;
};

// Fully merged run description: defaults, overlaid by a JSON config file,
// overlaid by dotted command-line flags. The resolved form is echoed into
// the run directory so any run can be reproduced from its outputs alone.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::string out_dir;
};

// Each returns human-readable problems (empty = valid); callers report the
// whole list at once rather than failing on the first.
std::vector<std::string> validate(const ModelConfig& m);
std::vector<std::string> validate(const TrainConfig& t);
// Cross-field checks (e.g. train.seq_len vs model.max_seq_len) plus the
// per-section lists. require_corpus adds the data-path checks used by train/eval.
std::vector<std::string> validate(const RunConfig& rc, bool require_corpus);

// JSON round-trip for configs and the resolved echo.
std::string serialize(const RunConfig& rc);
// Parses a config file's JSON text over existing values (missing keys keep
// their current/default values). Unknown keys are an error.
void merge_json(RunConfig& rc, const std::string& json_text);
// Applies one dotted key ("model.chunk_size", "train.peak_lr", ...).
void apply_override(RunConfig& rc, const std::string& key, const std::string& value);
// All keys apply_override accepts, with value kind, for CLI registration.
struct ConfigKey {
  std::string key;
  enum class Kind { integer, real, text, boolean } kind;
  std::string help;
};
const std::vector<ConfigKey>& config_keys();

}  // namespace ctxlm
