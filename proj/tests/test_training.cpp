#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ctxlm/checkpoint.hpp"
#include "ctxlm/data.hpp"
#include "ctxlm/rng.hpp"
#include "ctxlm/train.hpp"
#include "testutil.hpp"

using namespace ctxlm;

namespace {

ModelConfig tiny_cfg(Mode mode, int64_t enc, int64_t dec, int64_t ctx, int64_t w,
                     int64_t vocab = 64, int64_t d = 8, int64_t max_seq = 16,
                     uint64_t seed = 1) {
  ModelConfig cfg;
  cfg.vocab_size = vocab;
  cfg.d_model = d;
  cfg.n_heads = 2;
  cfg.n_enc_layers = enc;
  cfg.n_dec_layers = dec;
  cfg.n_ctx_layers = ctx;
  cfg.chunk_size = w;
  cfg.max_seq_len = max_seq;
  cfg.mode = mode;
  cfg.seed = seed;
  return cfg;
}

TrainConfig fast_tc(int64_t steps, int64_t batch, int64_t seq, uint64_t seed) {
  TrainConfig tc;
  tc.steps = steps;
  tc.batch_size = batch;
  tc.seq_len = seq;
  tc.warmup_steps = std::min<int64_t>(10, steps / 2);
  tc.eval_every = 1000000;  // individual cases dial this down when they want val records
  tc.eval_batches = 2;
  tc.checkpoint_every = 1000000;
  tc.seed = seed;
  return tc;
}

// Random bytes folded into [0, mod) so tiny-vocab models can train on them.
Corpus noise_corpus(int64_t n, uint64_t seed, int mod = 256) {
  SplitMix64 g = named_stream(seed, "test.train.corpus");
  std::vector<uint8_t> b(static_cast<size_t>(n));
  for (auto& v : b) v = static_cast<uint8_t>(g.next() % static_cast<uint64_t>(mod));
  return corpus_from_bytes(std::move(b), 0.1);
}

// A fixed 64-token cycle: the next byte is a function of the current one, so
// any model with a working token pathway can drive the loss to ~zero.
Corpus cycle_corpus(int64_t n) {
  std::vector<uint8_t> b(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) b[static_cast<size_t>(i)] = static_cast<uint8_t>(i % 64);
  return corpus_from_bytes(std::move(b), 0.1);
}

// Bitwise comparison; == would also accept -0.0 vs 0.0 and miss NaN payloads.
template <typename T>
bool bits_equal(const std::vector<T>& a, const std::vector<T>& b) {
  return a.size() == b.size() &&
         (a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(T)) == 0);
}

template <typename T>
void zero_grads(ContextLMParams<T>& params) {
  for (Tensor<T>* p : params.all()) {
    p->ensure_grad();
    std::fill(p->grad.begin(), p->grad.end(), T(0));
  }
}

template <typename T>
Tensor<T>* find_param(ContextLMParams<T>& params, const std::string& name) {
  for (Tensor<T>* p : params.all())
    if (p->name == name) return p;
  REQUIRE_MESSAGE(false, "no parameter named " << name);
  return nullptr;
}

// Scoped run directory under the test working directory.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const char* name) : path(name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
  std::string str() const { return path.string(); }
};

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  REQUIRE(f.good());
}

std::string error_message(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// ---- learning-rate schedule -------------------------------------------------------

TEST_CASE("lr schedule: warmup ramp, cosine decay, constant tail") {
  TrainConfig tc;
  tc.steps = 300;
  tc.warmup_steps = 100;
  tc.peak_lr = 3e-4;
  tc.min_lr = 3e-5;

  CHECK(lr_at(0, tc) == 0.0);
  CHECK(lr_at(50, tc) == 0.5 * tc.peak_lr);
  CHECK(lr_at(100, tc) == doctest::Approx(tc.peak_lr).epsilon(1e-12));
  // Decay midpoint: cos(pi/2) in the closed form leaves exactly the average.
  CHECK(std::abs(lr_at(200, tc) - 0.5 * (tc.peak_lr + tc.min_lr)) < 1e-12);
  CHECK(lr_at(300, tc) == tc.min_lr);
  CHECK(lr_at(10'000, tc) == tc.min_lr);
  CHECK_THROWS_AS(lr_at(-1, tc), ContractError);

  // No warmup: the very first step already runs at peak.
  tc.warmup_steps = 0;
  CHECK(lr_at(0, tc) == doctest::Approx(tc.peak_lr).epsilon(1e-12));

  // Monotone: never increases after the peak, never decreases before it.
  tc.warmup_steps = 100;
  for (int64_t s = 1; s <= 320; ++s) {
    if (s <= 100) CHECK(lr_at(s, tc) >= lr_at(s - 1, tc));
    else CHECK(lr_at(s, tc) <= lr_at(s - 1, tc));
  }
}

// ---- gradient clipping --------------------------------------------------------------

TEST_CASE("clip_global_norm scales only above the threshold") {
  ModelConfig cfg = tiny_cfg(Mode::baseline, 0, 1, 0, 4);
  auto params = ContextLMParams<double>::init(cfg);
  zero_grads(params);
  Tensor<double>* wq = find_param(params, "backbone.0.wq");

  SUBCASE("3-4-5 triangle is scaled onto the unit sphere") {
    wq->grad[0] = 3.0;
    wq->grad[1] = 4.0;
    double norm = clip_global_norm(params, 1.0);
    CHECK(norm == 5.0);
    CHECK(wq->grad[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(wq->grad[1] == doctest::Approx(0.8).epsilon(1e-15));
  }

  SUBCASE("norm at or below the cap leaves gradients untouched") {
    wq->grad[0] = 3.0;
    wq->grad[1] = 4.0;
    std::vector<double> before = wq->grad;
    CHECK(clip_global_norm(params, 5.0) == 5.0);
    CHECK(bits_equal(wq->grad, before));
    CHECK(clip_global_norm(params, 100.0) == 5.0);
    CHECK(bits_equal(wq->grad, before));
  }

  SUBCASE("post-clip norm never exceeds the cap (fuzz)") {
    SplitMix64 g = named_stream(17, "test.clip.fuzz");
    for (int trial = 0; trial < 20; ++trial) {
      for (Tensor<double>* p : params.all())
        for (double& v : p->grad) v = 20.0 * (g.next_double() - 0.5);
      double max_norm = 0.1 + 5.0 * g.next_double();
      double pre = clip_global_norm(params, max_norm);
      double sq = 0.0;
      for (Tensor<double>* p : params.all())
        for (double v : p->grad) sq += v * v;
      CHECK(pre >= std::sqrt(sq) - 1e-9);
      CHECK(std::sqrt(sq) <= std::min(pre, max_norm) + 1e-6);
    }
  }

  SUBCASE("rejects a non-positive cap") {
    CHECK_THROWS_AS(clip_global_norm(params, 0.0), ContractError);
    CHECK_THROWS_AS(clip_global_norm(params, -1.0), ContractError);
  }
}

// ---- AdamW ---------------------------------------------------------------------------

TEST_CASE("adamw_step: zero gradients and zero decay change nothing") {
  ModelConfig cfg = tiny_cfg(Mode::contextlm, 1, 1, 1, 4);
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  std::vector<std::vector<double>> before;
  for (Tensor<double>* p : params.all()) before.push_back(p->data);
  zero_grads(params);
  adamw_step(params, opt, /*lr=*/1e-3, tc);
  auto tensors = params.all();
  for (size_t i = 0; i < tensors.size(); ++i) CHECK(bits_equal(tensors[i]->data, before[i]));
  CHECK(opt.step == 1);
}

TEST_CASE("adamw_step: one step from zero moments matches the closed form") {
  ModelConfig cfg = tiny_cfg(Mode::baseline, 0, 1, 0, 4);
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc;
  tc.weight_decay = 0.0;
  const double lr = 2.5e-3, g = 0.37;
  zero_grads(params);
  Tensor<double>* tok = find_param(params, "embed.tok");
  const double x0 = tok->data[5];
  tok->grad[5] = g;

  adamw_step(params, opt, lr, tc);

  // Bias corrections cancel at t=1: m/(1-b1) = g and v/(1-b2) = g^2, so the
  // update collapses to lr*g/(|g|+eps).
  const double expected = x0 - lr * g / (std::abs(g) + tc.eps_adam);
  CHECK(std::abs(tok->data[5] - expected) < 1e-12);

  size_t idx = 0;
  auto tensors = params.all();
  while (tensors[idx]->name != "embed.tok") ++idx;
  CHECK(opt.m[idx][5] == doctest::Approx((1.0 - tc.beta1) * g).epsilon(1e-15));
  CHECK(opt.v[idx][5] == doctest::Approx((1.0 - tc.beta2) * g * g).epsilon(1e-15));
  // Every untouched coordinate stays put: zero moments yield a zero update.
  CHECK(tok->data[4] == doctest::Approx(tok->data[4]));
  Tensor<double>* wq = find_param(params, "backbone.0.wq");
  CHECK(opt.m[0].size() == params.all()[0]->data.size());
  for (double m : opt.m[idx == 0 ? 1 : 0]) CHECK(m == 0.0);
  (void)wq;
}

TEST_CASE("adamw_step: decay applies to matrices but not vectors or the position table") {
  ModelConfig cfg = tiny_cfg(Mode::contextlm, 1, 1, 1, 4);
  cfg.learned_c_init = true;
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc;  // weight_decay = 0.1 default
  const double lr = 2e-3;
  zero_grads(params);
  std::vector<std::vector<double>> before;
  for (Tensor<double>* p : params.all()) before.push_back(p->data);

  adamw_step(params, opt, lr, tc);

  auto tensors = params.all();
  const double wd = lr * tc.weight_decay;
  for (size_t i = 0; i < tensors.size(); ++i) {
    Tensor<double>* p = tensors[i];
    const bool decays = p->shape.size() >= 2 && p->name != "embed.pos";
    if (!decays) {
      CHECK_MESSAGE(bits_equal(p->data, before[i]), p->name << " should be decay-exempt");
      continue;
    }
    for (size_t j = 0; j < p->data.size(); ++j) {
      double want = before[i][j] - wd * before[i][j];
      REQUIRE_MESSAGE(p->data[j] == want, p->name << "[" << j << "] decay mismatch");
    }
  }
}

TEST_CASE("adamw_step: a non-finite gradient aborts before mutating anything") {
  ModelConfig cfg = tiny_cfg(Mode::baseline, 0, 1, 0, 4);
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc;
  zero_grads(params);
  Tensor<double>* fc1 = find_param(params, "backbone.0.fc1");
  fc1->grad[3] = std::nan("");
  std::vector<std::vector<double>> before;
  for (Tensor<double>* p : params.all()) before.push_back(p->data);

  std::string msg = error_message([&] { adamw_step(params, opt, 1e-3, tc); });
  CHECK(msg.find("backbone.0.fc1") != std::string::npos);
  CHECK_THROWS_AS(adamw_step(params, opt, 1e-3, tc), NumericError);

  auto tensors = params.all();
  for (size_t i = 0; i < tensors.size(); ++i) CHECK(bits_equal(tensors[i]->data, before[i]));
  for (const auto& m : opt.m)
    for (double v : m) CHECK(v == 0.0);
  CHECK(opt.step == 0);
}

// ---- train_loop ----------------------------------------------------------------------

TEST_CASE("untrained loss sits at ln(vocab)") {
  Corpus corpus = noise_corpus(4096, 5);
  ModelConfig cfg = tiny_cfg(Mode::contextlm, 0, 1, 1, 4, /*vocab=*/256);
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc = fast_tc(/*steps=*/1, /*batch=*/4, /*seq=*/16, /*seed=*/5);
  auto log = train_loop(params, opt, tc, corpus);
  REQUIRE(!log.empty());
  CHECK(log[0].step == 0);
  CHECK(log[0].split == "train");
  CHECK(std::abs(log[0].loss - std::log(256.0)) < 0.2);
  CHECK(log[0].ppl == doctest::Approx(std::exp(log[0].loss)));
}

TEST_CASE("200 steps memorize a 64-token cycle") {
  Corpus corpus = cycle_corpus(4096);
  ModelConfig cfg = tiny_cfg(Mode::baseline, 0, 2, 0, 4, /*vocab=*/64, /*d=*/32, /*max_seq=*/32);
  cfg.n_heads = 4;
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc = fast_tc(/*steps=*/200, /*batch=*/8, /*seq=*/32, /*seed=*/3);
  tc.peak_lr = 3e-3;
  tc.min_lr = 3e-4;
  tc.warmup_steps = 20;
  auto log = train_loop(params, opt, tc, corpus);
  REQUIRE(static_cast<int64_t>(log.size()) >= tc.steps);
  CHECK(log.back().loss < 0.1);
}

TEST_CASE("two runs with one seed produce bit-identical parameters and losses") {
  Corpus corpus = noise_corpus(4096, 21, /*mod=*/64);
  TrainConfig tc = fast_tc(/*steps=*/100, /*batch=*/4, /*seq=*/16, /*seed=*/21);
  tc.eval_every = 50;

  auto run = [&](std::vector<MetricsRecord>& log) {
    auto params = ContextLMParams<double>::init(tiny_cfg(Mode::contextlm, 1, 1, 1, 4));
    auto opt = OptimizerState<double>::zeros_like(params);
    log = train_loop(params, opt, tc, corpus);
    return params;
  };
  std::vector<MetricsRecord> log_a, log_b;
  auto pa = run(log_a);
  auto pb = run(log_b);

  REQUIRE(log_a.size() == log_b.size());
  for (size_t i = 0; i < log_a.size(); ++i) {
    CHECK(log_a[i].step == log_b[i].step);
    CHECK(log_a[i].split == log_b[i].split);
    CHECK(std::memcmp(&log_a[i].loss, &log_b[i].loss, sizeof(double)) == 0);
  }
  auto ta = pa.all();
  auto tb = pb.all();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) CHECK(bits_equal(ta[i]->data, tb[i]->data));
}

TEST_CASE("loss stays finite over long tiny-scale runs across seeds") {
  for (uint64_t seed : {11u, 12u}) {
    Corpus corpus = noise_corpus(4096, seed, /*mod=*/64);
    auto params = ContextLMParams<double>::init(
        tiny_cfg(Mode::contextlm, 1, 1, 1, 4, 64, 8, 16, seed));
    auto opt = OptimizerState<double>::zeros_like(params);
    TrainConfig tc = fast_tc(/*steps=*/150, /*batch=*/4, /*seq=*/16, seed);
    auto log = train_loop(params, opt, tc, corpus);
    for (const auto& r : log) CHECK(std::isfinite(r.loss));
  }
}

TEST_CASE("run directory gets a parseable metrics log and scheduled checkpoints") {
  TempDir dir("test_training_rundir.tmp");
  Corpus corpus = noise_corpus(4096, 9, /*mod=*/64);
  auto params = ContextLMParams<double>::init(tiny_cfg(Mode::contextlm, 0, 1, 1, 4));
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc = fast_tc(/*steps=*/12, /*batch=*/4, /*seq=*/16, /*seed=*/9);
  tc.eval_every = 5;
  tc.checkpoint_every = 5;
  auto log = train_loop(params, opt, tc, corpus, 0, dir.str());

  // 12 train records plus val records after steps 5, 10 and the final 12.
  REQUIRE(log.size() == 15);
  CHECK(std::filesystem::exists(dir.path / "ckpt_step5.bin"));
  CHECK(std::filesystem::exists(dir.path / "ckpt_step10.bin"));
  CHECK(std::filesystem::exists(dir.path / "ckpt_step12.bin"));

  std::ifstream f((dir.path / "metrics.jsonl").string());
  REQUIRE(f.good());
  std::string line;
  size_t i = 0;
  while (std::getline(f, line)) {
    REQUIRE(i < log.size());
    auto j = nlohmann::json::parse(line);
    CHECK(j.at("step").get<int64_t>() == log[i].step);
    CHECK(j.at("split").get<std::string>() == log[i].split);
    CHECK(j.at("loss").get<double>() == doctest::Approx(log[i].loss));
    CHECK(j.at("ppl").get<double>() == doctest::Approx(log[i].ppl));
    CHECK(j.at("lr").get<double>() == doctest::Approx(log[i].lr));
    CHECK(j.at("wall_ms").is_number());
    ++i;
  }
  CHECK(i == log.size());
}

TEST_CASE("a non-finite loss halts with a diagnostic checkpoint") {
  TempDir dir("test_training_diag.tmp");
  Corpus corpus = noise_corpus(4096, 4, /*mod=*/64);
  auto params = ContextLMParams<double>::init(tiny_cfg(Mode::baseline, 0, 1, 0, 4));
  // The final norm's gain touches every logit, so the poison reaches the loss
  // on the very first batch regardless of which tokens get sampled.
  params.final_ln.gain.data[0] = std::nan("");
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc = fast_tc(/*steps=*/5, /*batch=*/4, /*seq=*/16, /*seed=*/4);

  std::string msg =
      error_message([&] { train_loop(params, opt, tc, corpus, 0, dir.str()); });
  CHECK(msg.find("non-finite") != std::string::npos);
  CHECK(std::filesystem::exists(dir.path / "ckpt_diag_step0.bin"));
  CHECK_THROWS_AS(train_loop(params, opt, tc, corpus, 0, dir.str()), NumericError);
}

// ---- checkpointing -------------------------------------------------------------------

TEST_CASE("checkpoint round-trip restores every tensor, moment and config bit-for-bit") {
  TempDir dir("test_training_ckpt.tmp");
  ModelConfig cfg = tiny_cfg(Mode::contextlm, 1, 1, 1, 4);
  cfg.tie_embeddings = false;
  cfg.learned_c_init = true;
  auto params = ContextLMParams<double>::init(cfg);
  auto opt = OptimizerState<double>::zeros_like(params);
  // Scribble over the moments so the round-trip has nontrivial state to lose.
  SplitMix64 g = named_stream(33, "test.ckpt.moments");
  for (auto& m : opt.m)
    for (double& v : m) v = g.next_double() - 0.5;
  for (auto& v : opt.v)
    for (double& x : v) x = g.next_double();
  opt.step = 7;
  TrainConfig tc = fast_tc(/*steps=*/500, /*batch=*/4, /*seq=*/16, /*seed=*/33);
  tc.peak_lr = 7e-4;

  const std::string path = (dir.path / "ck.bin").string();
  save_checkpoint(path, params, opt, tc, /*step=*/123);
  auto lc = load_checkpoint<double>(path);

  CHECK(lc.step == 123);
  CHECK(lc.opt.step == 7);
  CHECK(lc.train.steps == tc.steps);
  CHECK(lc.train.peak_lr == tc.peak_lr);
  CHECK(lc.train.seed == tc.seed);
  CHECK(lc.params.cfg.mode == Mode::contextlm);
  CHECK(lc.params.cfg.tie_embeddings == false);
  CHECK(lc.params.cfg.learned_c_init == true);

  auto ta = params.all();
  auto tb = lc.params.all();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) {
    CHECK(ta[i]->name == tb[i]->name);
    CHECK(bits_equal(ta[i]->data, tb[i]->data));
    CHECK(bits_equal(opt.m[i], lc.opt.m[i]));
    CHECK(bits_equal(opt.v[i], lc.opt.v[i]));
  }

  // save -> load -> save reproduces the file byte for byte.
  const std::string again = (dir.path / "ck2.bin").string();
  save_checkpoint(again, lc.params, lc.opt, lc.train, lc.step);
  CHECK(slurp(path) == slurp(again));

  CheckpointInfo info = inspect_checkpoint(path);
  CHECK(info.step == 123);
  CHECK(info.dtype == Dtype::f64);
  CHECK(info.model.d_model == cfg.d_model);
  CHECK(info.train.peak_lr == tc.peak_lr);
}

TEST_CASE("float checkpoints round-trip too") {
  TempDir dir("test_training_ckpt_f32.tmp");
  auto params = ContextLMParams<float>::init(tiny_cfg(Mode::baseline, 0, 2, 0, 4));
  auto opt = OptimizerState<float>::zeros_like(params);
  TrainConfig tc = fast_tc(10, 2, 8, 1);
  const std::string path = (dir.path / "ck.bin").string();
  save_checkpoint(path, params, opt, tc, 10);
  auto lc = load_checkpoint<float>(path);
  auto ta = params.all();
  auto tb = lc.params.all();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) CHECK(bits_equal(ta[i]->data, tb[i]->data));
  CHECK(inspect_checkpoint(path).dtype == Dtype::f32);
}

TEST_CASE("checkpoint loader names the fault for damaged files") {
  TempDir dir("test_training_ckpt_bad.tmp");
  auto params = ContextLMParams<double>::init(tiny_cfg(Mode::baseline, 0, 1, 0, 4));
  auto opt = OptimizerState<double>::zeros_like(params);
  TrainConfig tc = fast_tc(10, 2, 8, 1);
  const std::string path = (dir.path / "ck.bin").string();
  save_checkpoint(path, params, opt, tc, 10);
  const std::string good = slurp(path);
  REQUIRE(good.size() > 30);

  SUBCASE("flipped payload byte trips the checksum") {
    uint32_t hlen = 0;
    std::memcpy(&hlen, good.data() + 7, sizeof hlen);
    const size_t payload_off = 7 + 4 + hlen;
    REQUIRE(payload_off + 16 < good.size());
    std::string bad = good;
    bad[payload_off + 8] = static_cast<char>(bad[payload_off + 8] ^ 0xff);
    spit(path, bad);
    std::string msg = error_message([&] { load_checkpoint<double>(path); });
    CHECK(msg.find("checksum") != std::string::npos);
    CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);
  }

  SUBCASE("truncation is reported as such") {
    spit(path, good.substr(0, good.size() - 12));
    std::string msg = error_message([&] { load_checkpoint<double>(path); });
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK_THROWS_AS(load_checkpoint<double>(path), IoError);
  }

  SUBCASE("wrong magic is rejected up front") {
    std::string bad = good;
    bad[0] = 'X';
    spit(path, bad);
    std::string msg = error_message([&] { load_checkpoint<double>(path); });
    CHECK(msg.find("magic") != std::string::npos);
  }

  SUBCASE("dtype mismatch is named") {
    std::string msg = error_message([&] { load_checkpoint<float>(path); });
    CHECK(msg.find("f64") != std::string::npos);
    CHECK(msg.find("f32") != std::string::npos);
    CHECK_THROWS_AS(load_checkpoint<float>(path), IoError);
  }

  SUBCASE("missing file cannot be opened") {
    std::string msg =
        error_message([&] { load_checkpoint<double>((dir.path / "nope.bin").string()); });
    CHECK(msg.find("cannot open") != std::string::npos);
  }
}

TEST_CASE("resume from a checkpoint replays the uninterrupted run bit-exactly") {
  TempDir dir_a("test_training_resume_a.tmp");
  TempDir dir_b("test_training_resume_b.tmp");
  Corpus corpus = noise_corpus(4096, 13, /*mod=*/64);
  TrainConfig tc = fast_tc(/*steps=*/30, /*batch=*/4, /*seq=*/16, /*seed=*/13);
  tc.eval_every = 10;
  tc.checkpoint_every = 10;

  auto params = ContextLMParams<double>::init(tiny_cfg(Mode::contextlm, 1, 1, 1, 4));
  auto opt = OptimizerState<double>::zeros_like(params);
  auto log_full = train_loop(params, opt, tc, corpus, 0, dir_a.str());

  auto lc = load_checkpoint<double>((dir_a.path / "ckpt_step20.bin").string());
  CHECK(lc.step == 20);
  CHECK(lc.train.seed == tc.seed);
  auto log_resumed = train_loop(lc.params, lc.opt, lc.train, corpus, lc.step, dir_b.str());

  // Every resumed record (steps 20..29, train and val) must match the full
  // run's record for the same (step, split) down to the last bit.
  for (const auto& r : log_resumed) {
    bool found = false;
    for (const auto& f : log_full) {
      if (f.step != r.step || f.split != r.split) continue;
      CHECK(std::memcmp(&f.loss, &r.loss, sizeof(double)) == 0);
      found = true;
      break;
    }
    CHECK_MESSAGE(found, "no full-run record for step " << r.step << " split " << r.split);
  }

  auto ta = params.all();
  auto tb = lc.params.all();
  REQUIRE(ta.size() == tb.size());
  for (size_t i = 0; i < ta.size(); ++i) CHECK(bits_equal(ta[i]->data, tb[i]->data));

  // The final checkpoints are written from identical state, so the files
  // themselves agree byte for byte.
  CHECK(slurp((dir_a.path / "ckpt_step30.bin").string()) ==
        slurp((dir_b.path / "ckpt_step30.bin").string()));
}

// ---- single-objective property --------------------------------------------------------

TEST_CASE("silencing fusion makes training match the same-depth baseline bit-exactly") {
  Corpus corpus = noise_corpus(4096, 29, /*mod=*/64);
  TrainConfig tc = fast_tc(/*steps=*/25, /*batch=*/4, /*seq=*/16, /*seed=*/29);
  tc.eval_every = 10;

  auto base = ContextLMParams<double>::init(tiny_cfg(Mode::baseline, 0, 2, 0, 4));
  auto opt_base = OptimizerState<double>::zeros_like(base);
  auto log_base = train_loop(base, opt_base, tc, corpus);

  auto ctx = ContextLMParams<double>::init(tiny_cfg(Mode::contextlm, 1, 1, 2, 4));
  auto opt_ctx = OptimizerState<double>::zeros_like(ctx);
  ForwardOptions fwd;
  fwd.zero_fusion = true;
  auto log_ctx = train_loop(ctx, opt_ctx, tc, corpus, 0, "", fwd);

  // The loss never sees the context branch, so with the fusion output removed
  // the trajectory collapses onto the baseline's — there is no auxiliary
  // context loss that could pull them apart.
  REQUIRE(log_base.size() == log_ctx.size());
  for (size_t i = 0; i < log_base.size(); ++i) {
    CHECK(log_base[i].step == log_ctx[i].step);
    CHECK(log_base[i].split == log_ctx[i].split);
    CHECK(std::memcmp(&log_base[i].loss, &log_ctx[i].loss, sizeof(double)) == 0);
  }

  // Shared parameters (embeddings, backbone, final norm) end bit-identical;
  // the context tower exists only in the ContextLM model.
  for (Tensor<double>* pb : base.all()) {
    Tensor<double>* pc = find_param(ctx, pb->name);
    CHECK_MESSAGE(bits_equal(pb->data, pc->data), pb->name << " diverged");
  }
}
