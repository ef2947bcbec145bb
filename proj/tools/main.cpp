// ctxlm: train / eval / generate / ablate / flops / gradcheck / export-attn /
// plot-data over one JSON config with dotted-flag overrides.
//
// Exit codes: 0 success, 1 verification or run failure, 2 usage/config error.
// CTXLM_THREADS caps worker parallelism (default 1 = fully deterministic).

#include <fcntl.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctxlm/checkpoint.hpp"
#include "ctxlm/costs.hpp"
#include "ctxlm/data.hpp"
#include "ctxlm/eval.hpp"
#include "ctxlm/generate.hpp"
#include "ctxlm/model.hpp"
#include "ctxlm/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ctxlm;

namespace {

constexpr int kOk = 0;
constexpr int kRunFailure = 1;
constexpr int kUsage = 2;

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f || !(f << text).flush()) throw IoError("cannot write '" + path + "'");
}

// --config plus every dotted key as a flag; precedence flags > file > defaults.
struct ConfigCli {
  std::string config_path;
  std::vector<std::pair<std::string, std::string>> overrides;  // flag order

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file (sections model/train/data/run)");
    for (const ConfigKey& k : config_keys()) {
      const std::string name = "--" + k.key;
      cmd->add_option_function<std::string>(
             name,
             [this, key = k.key](const std::string& v) { overrides.emplace_back(key, v); },
             k.help)
          ->type_name(type_name(k.kind));
    }
  }

  RunConfig resolve() const {
    RunConfig rc;
    if (!config_path.empty()) merge_json(rc, read_file(config_path));
    for (const auto& [key, value] : overrides) apply_override(rc, key, value);
    return rc;
  }

  static const char* type_name(ConfigKey::Kind k) {
    switch (k) {
      case ConfigKey::Kind::integer: return "INT";
      case ConfigKey::Kind::real: return "REAL";
      case ConfigKey::Kind::boolean: return "BOOL";
      default: return "TEXT";
    }
  }
};

int report_problems(const std::vector<std::string>& problems) {
  std::cerr << "config errors:\n";
  for (const auto& p : problems) std::cerr << "  - " << p << "\n";
  return kUsage;
}

// Exclusive ownership of a run directory for the process lifetime.
struct RunDir {
  fs::path dir;
  fs::path lock;
  int fd = -1;

  explicit RunDir(const std::string& out_dir) : dir(out_dir), lock(dir / ".lock") {
    fs::create_directories(dir);
    fd = ::open(lock.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw ContractError("run directory '" + out_dir +
                          "' is locked by another run (remove " + lock.string() +
                          " if that run is gone)");
    std::string pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] ssize_t n = ::write(fd, pid.data(), pid.size());
  }
  ~RunDir() {
    if (fd >= 0) {
      ::close(fd);
      std::error_code ec;
      fs::remove(lock, ec);
    }
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;
};

json model_json(const ModelConfig& m) {
  RunConfig rc;
  rc.model = m;
  return json::parse(serialize(rc)).at("model");
}

// ---- train ------------------------------------------------------------------

struct TrainOutcome {
  double final_val_loss = 0.0;
  double final_val_ppl = 0.0;
  int64_t params = 0;
};

template <typename T>
TrainOutcome run_training(const RunConfig& rc, const std::string& resume) {
  Corpus corpus = load_corpus(rc.data.corpus, rc.data.val_fraction);
  ContextLMParams<T> params;
  OptimizerState<T> opt;
  int64_t start_step = 0;
  if (resume.empty()) {
    params = ContextLMParams<T>::init(rc.model);
    opt = OptimizerState<T>::zeros_like(params);
  } else {
    auto lc = load_checkpoint<T>(resume);
    if (model_json(lc.params.cfg) != model_json(rc.model))
      throw ConfigError("--resume: checkpoint model config differs from the resolved config");
    params = std::move(lc.params);
    opt = std::move(lc.opt);
    start_step = lc.step;
  }
  auto log = train_loop(params, opt, rc.train, corpus, start_step, rc.out_dir);
  TrainOutcome out;
  out.params = params.param_count();
  for (const auto& r : log)
    if (r.split == "val") {
      out.final_val_loss = r.loss;
      out.final_val_ppl = r.ppl;
    }
  for (const auto& r : log)
    if (r.split == "val")
      std::cout << "step " << r.step << "  val loss " << r.loss << "  ppl " << r.ppl << "\n";
  return out;
}

int cmd_train(const ConfigCli& cc, const std::string& resume) {
  RunConfig rc = cc.resolve();
  auto problems = validate(rc, /*require_corpus=*/true);
  if (rc.out_dir.empty()) problems.push_back("run.out_dir: required for train");
  if (!problems.empty()) return report_problems(problems);
  RunDir run(rc.out_dir);
  write_file(rc.out_dir + "/config.resolved.json", serialize(rc));
  TrainOutcome out = rc.train.dtype == Dtype::f64 ? run_training<double>(rc, resume)
                                                  : run_training<float>(rc, resume);
  std::cout << "done: " << out.params << " params, final val loss " << out.final_val_loss
            << " (ppl " << out.final_val_ppl << ")\n";
  return kOk;
}

// ---- eval ---------------------------------------------------------------------

template <typename T>
int run_eval(const RunConfig& rc, const std::string& ckpt, const std::string& split,
             int64_t seq_len, int64_t windows, int64_t bucket_width) {
  auto lc = load_checkpoint<T>(ckpt);
  Corpus corpus = load_corpus(rc.data.corpus, rc.data.val_fraction);
  if (seq_len <= 0) seq_len = lc.train.seq_len;
  EvalReport rep;
  if (bucket_width > 0) {
    std::vector<std::pair<int64_t, int64_t>> buckets;
    for (int64_t b = 0; b < seq_len; b += bucket_width)
      buckets.emplace_back(b, std::min(seq_len, b + bucket_width));
    rep = bucketed_position_loss(lc.params, corpus, split, seq_len, buckets, windows);
  } else {
    rep = perplexity(lc.params, corpus, split, seq_len, windows);
  }
  std::string text = to_json(rep);
  std::cout << text;
  if (!rc.out_dir.empty()) {
    fs::create_directories(fs::path(rc.out_dir) / "reports");
    write_file(rc.out_dir + "/reports/eval_" + split + ".json", text);
  }
  return kOk;
}

int cmd_eval(const ConfigCli& cc, const std::string& ckpt, const std::string& split,
             int64_t seq_len, int64_t windows, int64_t bucket_width) {
  RunConfig rc = cc.resolve();
  auto problems = validate(rc.train);
  if (rc.data.corpus.empty()) problems.push_back("data.corpus: required (path to the text)");
  if (!problems.empty()) return report_problems(problems);
  CheckpointInfo info = inspect_checkpoint(ckpt);
  return info.dtype == Dtype::f64
             ? run_eval<double>(rc, ckpt, split, seq_len, windows, bucket_width)
             : run_eval<float>(rc, ckpt, split, seq_len, windows, bucket_width);
}

// ---- generate -------------------------------------------------------------------

template <typename T>
int run_generate(const std::string& ckpt, const std::string& prompt, int64_t n_new,
                 const SamplerConfig& sampler) {
  auto lc = load_checkpoint<T>(ckpt);
  std::vector<int32_t> ids;
  for (unsigned char c : prompt) ids.push_back(static_cast<int32_t>(c));
  std::vector<int32_t> out = generate(ids, n_new, sampler, lc.params);
  std::string text;
  for (size_t i = ids.size(); i < out.size(); ++i)
    text.push_back(static_cast<char>(static_cast<unsigned char>(out[i])));
  std::cout << text << "\n";
  return kOk;
}

int cmd_generate(const std::string& ckpt, const std::string& prompt, int64_t n_new,
                 const std::string& strategy, double temperature, int64_t k, uint64_t seed) {
  if (prompt.empty()) {
    std::cerr << "generate: --prompt must be non-empty\n";
    return kUsage;
  }
  SamplerConfig sampler;
  sampler.strategy = strategy_from_string(strategy);
  sampler.temperature = temperature;
  sampler.k = k;
  sampler.seed = seed;
  CheckpointInfo info = inspect_checkpoint(ckpt);
  return info.dtype == Dtype::f64 ? run_generate<double>(ckpt, prompt, n_new, sampler)
                                  : run_generate<float>(ckpt, prompt, n_new, sampler);
}

// ---- ablate ---------------------------------------------------------------------

struct SweepPoint {
  std::string label;
  RunConfig rc;
};

std::vector<SweepPoint> build_sweep(const RunConfig& base, const std::string& axis,
                                    const std::vector<std::string>& values) {
  std::vector<SweepPoint> points;
  for (const std::string& v : values) {
    SweepPoint p;
    p.rc = base;
    if (axis == "chunk_size") {
      apply_override(p.rc, "model.chunk_size", v);
      p.label = "w=" + v;
    } else if (axis == "ctx_depth") {
      apply_override(p.rc, "model.n_ctx_layers", v);
      p.label = "ctx_depth=" + v;
    } else if (axis == "enc_dec_split") {
      auto slash = v.find('/');
      if (slash == std::string::npos)
        throw ConfigError("enc_dec_split values look like '0/4', got '" + v + "'");
      apply_override(p.rc, "model.n_enc_layers", v.substr(0, slash));
      apply_override(p.rc, "model.n_dec_layers", v.substr(slash + 1));
      p.label = "split=" + v;
    } else {
      throw ConfigError("ablate: axis must be chunk_size | ctx_depth | enc_dec_split, got '" +
                        axis + "'");
    }
    std::string dir_label = p.label;
    for (char& c : dir_label)
      if (c == '/') c = '-';
    p.rc.out_dir = base.out_dir + "/" + dir_label;
    points.push_back(std::move(p));
  }
  return points;
}

int cmd_ablate(const ConfigCli& cc, const std::string& axis, std::vector<std::string> values) {
  RunConfig base = cc.resolve();
  if (values.empty()) {
    std::cerr << "ablate: --values is empty; nothing to sweep\n";
    return kUsage;
  }
  {
    auto problems = validate(base, /*require_corpus=*/true);
    if (base.out_dir.empty()) problems.push_back("run.out_dir: required for ablate");
    if (!problems.empty()) return report_problems(problems);
  }
  // Every point is validated before the first run starts.
  std::vector<SweepPoint> points = build_sweep(base, axis, values);
  std::vector<std::string> problems;
  for (const auto& p : points)
    for (const auto& msg : validate(p.rc, /*require_corpus=*/true))
      problems.push_back(p.label + ": " + msg);
  if (!problems.empty()) return report_problems(problems);

  RunDir run(base.out_dir);
  json summary{{"axis", axis}, {"runs", json::array()}};
  std::cout << "setting            final val loss   ppl\n";
  for (auto& p : points) {
    RunDir sub(p.rc.out_dir);
    write_file(p.rc.out_dir + "/config.resolved.json", serialize(p.rc));
    TrainOutcome out = p.rc.train.dtype == Dtype::f64 ? run_training<double>(p.rc, "")
                                                      : run_training<float>(p.rc, "");
    summary["runs"].push_back(json{{"label", p.label},
                                   {"final_val_loss", out.final_val_loss},
                                   {"final_val_ppl", out.final_val_ppl},
                                   {"params", out.params},
                                   {"out_dir", p.rc.out_dir}});
    char line[128];
    std::snprintf(line, sizeof line, "%-18s %14.4f %6.2f", p.label.c_str(), out.final_val_loss,
                  out.final_val_ppl);
    std::cout << line << "\n";
  }
  write_file(base.out_dir + "/ablation_summary.json", summary.dump(2) + "\n");
  std::cout << "summary written to " << base.out_dir << "/ablation_summary.json\n";
  return kOk;
}

// ---- flops ---------------------------------------------------------------------

int cmd_flops(const ConfigCli& cc, int64_t seq_len, bool as_json) {
  RunConfig rc = cc.resolve();
  auto problems = validate(rc.model);
  if (!problems.empty()) return report_problems(problems);
  if (seq_len <= 0) seq_len = rc.train.seq_len;
  if (as_json)
    std::cout << to_json(estimate_flops(rc.model, seq_len, 1));
  else
    std::cout << overhead_report(rc.model, seq_len);
  return kOk;
}

// ---- gradcheck -------------------------------------------------------------------

std::vector<int32_t> fuzz_tokens(uint64_t seed, const char* label, int64_t n, int64_t vocab) {
  SplitMix64 g = named_stream(seed, label);
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& t : out) t = static_cast<int32_t>(g.next_below(static_cast<uint64_t>(vocab)));
  return out;
}

int cmd_gradcheck(const ConfigCli& cc, const std::string& corrupt_op) {
  RunConfig rc = cc.resolve();
  bool custom = !cc.config_path.empty() || !cc.overrides.empty();
  ModelConfig pathway_cfg, fd_cfg;
  if (custom) {
    pathway_cfg = fd_cfg = rc.model;
  } else {
    // Pathway identities are exact when every backbone layer sits before the
    // fusion point (the decoder is then position-wise); the
    // finite-difference sweep uses the 0/2 split + 2-layer predictor.
    pathway_cfg.vocab_size = 64;
    pathway_cfg.d_model = 8;
    pathway_cfg.n_heads = 2;
    pathway_cfg.n_enc_layers = 2;
    pathway_cfg.n_dec_layers = 0;
    pathway_cfg.n_ctx_layers = 2;
    pathway_cfg.chunk_size = 4;
    pathway_cfg.max_seq_len = 8;
    fd_cfg = pathway_cfg;
    fd_cfg.n_enc_layers = 0;
    fd_cfg.n_dec_layers = 2;
  }
  for (const ModelConfig* m : {&pathway_cfg, &fd_cfg}) {
    auto problems = validate(*m);
    if (!problems.empty()) return report_problems(problems);
    if (m->d_model > 16 || m->max_seq_len > 16) {
      std::cerr << "gradcheck: runs tiny configs only (d_model <= 16, max_seq_len <= 16)\n";
      return kUsage;
    }
  }
  if (!corrupt_op.empty()) fault::corrupt_backward(corrupt_op);

  const int64_t B = 2;
  bool ok = true;
  try {
    const int64_t S = pathway_cfg.max_seq_len;
    auto params = ContextLMParams<double>::init(pathway_cfg);
    auto tokens = fuzz_tokens(7, "gradcheck.tokens", B * S, pathway_cfg.vocab_size);
    auto targets = fuzz_tokens(7, "gradcheck.targets", B * S, pathway_cfg.vocab_size);
    PathwayReport rep = grad_pathway_report(params, tokens, targets, B, S);
    std::cout << "pathway additivity residual   " << rep.additivity_residual << "\n"
              << "chunk aggregation residual    " << rep.chunk_residual << "\n"
              << "outside-chunk leakage         " << rep.outside_leakage << "\n";
    const double tol = 1e-10;
    if (pathway_cfg.mode == Mode::contextlm && pathway_cfg.n_dec_layers == 0) {
      verify_pathways(rep, tol);
    } else if (rep.additivity_residual > tol) {
      throw VerificationError("pathway additivity residual " +
                              std::to_string(rep.additivity_residual) + " exceeds 1e-10");
    } else {
      std::cout << "(chunk identities not gated: decoder layers follow the fusion point)\n";
    }
  } catch (const VerificationError& e) {
    std::cerr << "gradcheck FAILED: " << e.what();
    if (!corrupt_op.empty()) std::cerr << " [corrupted backward rule active: " << corrupt_op << "]";
    std::cerr << "\n";
    ok = false;
  }
  try {
    const int64_t S = fd_cfg.max_seq_len;
    auto params = ContextLMParams<double>::init(fd_cfg);
    auto tokens = fuzz_tokens(9, "gradcheck.fd.tokens", B * S, fd_cfg.vocab_size);
    auto targets = fuzz_tokens(9, "gradcheck.fd.targets", B * S, fd_cfg.vocab_size);
    GradcheckResult res = model_gradcheck(params, tokens, targets, B, S);
    std::cout << "finite-difference max rel err " << res.max_rel_error << " (worst: "
              << res.worst_param << ", " << res.coords_checked << " coords)\n";
    if (res.max_rel_error > 1e-4) {
      std::cerr << "gradcheck FAILED: finite-difference mismatch in " << res.worst_param;
      if (!corrupt_op.empty())
        std::cerr << " [corrupted backward rule active: " << corrupt_op << "]";
      std::cerr << "\n";
      ok = false;
    }
  } catch (const std::exception& e) {
    std::cerr << "gradcheck FAILED: " << e.what() << "\n";
    ok = false;
  }
  fault::clear();
  return ok ? kOk : kRunFailure;
}

// ---- export-attn -----------------------------------------------------------------

std::vector<int64_t> parse_index_list(const std::string& csv) {
  std::vector<int64_t> out;
  std::stringstream ss(csv);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(std::stoll(item));
  return out;
}

template <typename T>
int run_export_attn(const std::string& ckpt, const std::string& prompt,
                    const std::string& layers_csv, const std::string& heads_csv,
                    const std::string& out_path) {
  auto lc = load_checkpoint<T>(ckpt);
  std::vector<int32_t> ids;
  for (unsigned char c : prompt) ids.push_back(static_cast<int32_t>(c));
  AttentionDump dump = export_attention(lc.params, ids, parse_index_list(layers_csv),
                                        parse_index_list(heads_csv));
  std::string text = to_json(dump);
  if (out_path.empty())
    std::cout << text;
  else
    write_file(out_path, text);
  return kOk;
}

int cmd_export_attn(const std::string& ckpt, const std::string& prompt,
                    const std::string& layers_csv, const std::string& heads_csv,
                    const std::string& out_path) {
  if (prompt.empty()) {
    std::cerr << "export-attn: --prompt must be non-empty\n";
    return kUsage;
  }
  CheckpointInfo info = inspect_checkpoint(ckpt);
  return info.dtype == Dtype::f64
             ? run_export_attn<double>(ckpt, prompt, layers_csv, heads_csv, out_path)
             : run_export_attn<float>(ckpt, prompt, layers_csv, heads_csv, out_path);
}

// ---- plot-data -------------------------------------------------------------------

std::vector<MetricsRecord> read_metrics(const std::string& path, const std::string& split) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read '" + path + "'");
  std::vector<MetricsRecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
      MetricsRecord r;
      r.step = j.at("step").get<int64_t>();
      r.split = j.at("split").get<std::string>();
      r.loss = j.at("loss").get<double>();
      if (r.split == split) out.push_back(r);
    } catch (const json::exception& e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": not a metrics record: " + e.what());
    }
  }
  return out;
}

int cmd_plot_data(const std::string& kind, const std::vector<std::string>& inputs,
                  const std::string& split, const std::string& out_path) {
  if (inputs.empty()) {
    std::cerr << "plot-data: no input files\n";
    return kUsage;
  }
  std::ostringstream csv;
  if (kind == "loss_curve") {
    // One (step, loss) column pair per run, rows padded to the longest run.
    std::vector<std::vector<MetricsRecord>> runs;
    for (const auto& path : inputs) runs.push_back(read_metrics(path, split));
    for (size_t i = 0; i < runs.size(); ++i) {
      if (i) csv << ",";
      csv << "step_" << i << ",loss_" << i;
    }
    csv << "\n";
    size_t rows = 0;
    for (const auto& r : runs) rows = std::max(rows, r.size());
    for (size_t row = 0; row < rows; ++row) {
      for (size_t i = 0; i < runs.size(); ++i) {
        if (i) csv << ",";
        if (row < runs[i].size())
          csv << runs[i][row].step << "," << runs[i][row].loss;
        else
          csv << ",";
      }
      csv << "\n";
    }
  } else if (kind == "delta_loss") {
    DeltaCurve c = delta_curve_from_json(read_file(inputs[0]));
    csv << "bucket_start,bucket_end,delta_nll\n";
    for (const auto& d : c.deltas)
      csv << d.begin << "," << d.end << "," << d.delta_nll << "\n";
  } else if (kind == "ablation") {
    json j;
    try {
      j = json::parse(read_file(inputs[0]));
      csv << "label,final_val_loss,final_val_ppl\n";
      for (const json& r : j.at("runs"))
        csv << r.at("label").get<std::string>() << "," << r.at("final_val_loss").get<double>()
            << "," << r.at("final_val_ppl").get<double>() << "\n";
    } catch (const json::exception& e) {
      throw IoError(inputs[0] + ": not an ablation summary: " + e.what());
    }
  } else {
    std::cerr << "plot-data: unknown kind '" << kind
              << "' (valid: loss_curve, delta_loss, ablation)\n";
    return kUsage;
  }
  if (out_path.empty())
    std::cout << csv.str();
  else
    write_file(out_path, csv.str());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ContextLM laboratory: chunk-pooled context prediction vs a matched baseline"};
  app.require_subcommand(1);

  ConfigCli train_cc, eval_cc, ablate_cc, flops_cc, grad_cc;
  std::string resume, ckpt, split = "val", prompt, strategy = "greedy";
  std::string axis = "chunk_size", layers_csv, heads_csv, out_path, kind;
  std::vector<std::string> values, inputs;
  int64_t n_new = 64, k = 40, seq_len = 0, windows = 0, bucket_width = 0;
  double temperature = 1.0;
  uint64_t seed = 1;
  std::string corrupt_op;

  CLI::App* t = app.add_subcommand("train", "optimize a model; writes a run directory");
  train_cc.attach(t);
  t->add_option("--resume", resume, "checkpoint to continue from (bit-exact resume)");

  CLI::App* e = app.add_subcommand("eval", "perplexity / bucketed position loss of a checkpoint");
  eval_cc.attach(e);
  e->add_option("--ckpt", ckpt, "checkpoint file")->required();
  e->add_option("--split", split, "train | val (default val)");
  e->add_option("--seq-len", seq_len, "evaluation window (default: checkpoint's train seq_len)");
  e->add_option("--windows", windows, "max windows (0 = all)");
  e->add_option("--bucket-width", bucket_width, "position bucket width (0 = single bucket)");

  CLI::App* g = app.add_subcommand("generate", "sample a continuation from a checkpoint");
  g->add_option("--ckpt", ckpt, "checkpoint file")->required();
  g->add_option("--prompt", prompt, "prompt text (bytes are token ids)")->required();
  g->add_option("--n-new", n_new, "tokens to sample (default 64)");
  g->add_option("--strategy", strategy, "greedy | temperature | top_k");
  g->add_option("--temperature", temperature, "softmax temperature (> 0)");
  g->add_option("--k", k, "top-k cutoff");
  g->add_option("--seed", seed, "sampling seed");

  CLI::App* a = app.add_subcommand("ablate", "sweep one axis; sequential runs + summary table");
  ablate_cc.attach(a);
  a->add_option("--axis", axis, "chunk_size | ctx_depth | enc_dec_split");
  a->add_option("--values", values, "sweep values (e.g. 2 4 8 16, or 0/4 1/3 for splits)");

  CLI::App* f = app.add_subcommand("flops", "analytic parameter/FLOP/overhead table");
  flops_cc.attach(f);
  f->add_option("--seq-len", seq_len, "context length for the estimate (default train.seq_len)");
  bool flops_json = false;
  f->add_flag("--json", flops_json, "emit the JSON report instead of the table");

  CLI::App* gc = app.add_subcommand("gradcheck", "gradient-pathway + finite-difference suite (f64)");
  grad_cc.attach(gc);
  gc->add_option("--corrupt-op", corrupt_op, "scale one op's backward by 1.5 (fault-injection demo)")
      ->group("");  // hidden

  CLI::App* x = app.add_subcommand("export-attn", "attention matrices + chunk annotations as JSON");
  x->add_option("--ckpt", ckpt, "checkpoint file")->required();
  x->add_option("--prompt", prompt, "prompt text")->required();
  x->add_option("--layers", layers_csv, "comma-separated layer indices (default all)");
  x->add_option("--heads", heads_csv, "comma-separated head indices (default all)");
  x->add_option("--out", out_path, "output file (default stdout)");

  CLI::App* p = app.add_subcommand("plot-data", "CSV series from run outputs");
  p->add_option("--kind", kind, "loss_curve | delta_loss | ablation")->required();
  p->add_option("--inputs", inputs, "metrics.jsonl / report JSON files")->required();
  p->add_option("--split", split, "loss_curve: which split (default val)");
  p->add_option("--out", out_path, "output CSV (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& help) {
    return app.exit(help);  // 0
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kUsage;
  }

  try {
    if (t->parsed()) return cmd_train(train_cc, resume);
    if (e->parsed()) return cmd_eval(eval_cc, ckpt, split, seq_len, windows, bucket_width);
    if (g->parsed()) return cmd_generate(ckpt, prompt, n_new, strategy, temperature, k, seed);
    if (a->parsed()) return cmd_ablate(ablate_cc, axis, values);
    if (f->parsed()) return cmd_flops(flops_cc, seq_len, flops_json);
    if (gc->parsed()) return cmd_gradcheck(grad_cc, corrupt_op);
    if (x->parsed()) return cmd_export_attn(ckpt, prompt, layers_csv, heads_csv, out_path);
    if (p->parsed()) return cmd_plot_data(kind, inputs, split, out_path);
  } catch (const ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const IoError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const ContractError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {  // NumericError, VerificationError, ...
    std::cerr << "run failed: " << err.what() << "\n";
    return kRunFailure;
  }
  return kUsage;
}
