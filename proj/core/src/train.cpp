#include "ctxlm/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctxlm/checkpoint.hpp"

namespace ctxlm {

double lr_at(int64_t step, const TrainConfig& tc) {
  if (step < 0) throw ContractError("lr_at: step must be >= 0");
  if (step < tc.warmup_steps)
    return tc.peak_lr * static_cast<double>(step) / static_cast<double>(tc.warmup_steps);
  if (step >= tc.steps) return tc.min_lr;
  double progress = static_cast<double>(step - tc.warmup_steps) /
                    static_cast<double>(tc.steps - tc.warmup_steps);
  return tc.min_lr + 0.5 * (tc.peak_lr - tc.min_lr) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

template <typename T>
double clip_global_norm(ContextLMParams<T>& params, double max_norm) {
  if (max_norm <= 0) throw ContractError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (Tensor<T>* p : params.all()) {
    p->ensure_grad();
    for (T g : p->grad) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm) || norm <= max_norm) return norm;
  const T s = static_cast<T>(max_norm / norm);
  for (Tensor<T>* p : params.all())
    for (T& g : p->grad) g *= s;
  return norm;
}

template <typename T>
void adamw_step(ContextLMParams<T>& params, OptimizerState<T>& opt, double lr,
                const TrainConfig& tc) {
  auto tensors = params.all();
  if (opt.m.size() != tensors.size())
    throw ContractError("adamw_step: optimizer tracks " + std::to_string(opt.m.size()) +
                        " tensors, model has " + std::to_string(tensors.size()));
  for (Tensor<T>* p : tensors) {
    p->ensure_grad();
    for (T g : p->grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericError("adamw_step: non-finite gradient in '" + p->name + "'");
  }
  const int64_t t = opt.step + 1;
  const double b1 = tc.beta1, b2 = tc.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t));
  for (size_t i = 0; i < tensors.size(); ++i) {
    Tensor<T>& p = *tensors[i];
    if (p.data.size() != opt.m[i].size())
      throw ContractError("adamw_step: moment shape drifted for '" + p.name + "'");
    // 1-D tensors (norm gains/biases, MLP biases, c_init) and the position
    // table are exempt from decay; the token table decays like any other
    // matrix since it doubles as the tied output head.
    const bool decay = p.shape.size() >= 2 && p.name != "embed.pos";
    const T wd = decay ? static_cast<T>(lr * tc.weight_decay) : T(0);
    T* x = p.data.data();
    const T* g = p.grad.data();
    T* m = opt.m[i].data();
    T* v = opt.v[i].data();
    const int64_t n = p.size();
    for (int64_t j = 0; j < n; ++j) {
      m[j] = static_cast<T>(b1) * m[j] + static_cast<T>(1.0 - b1) * g[j];
      v[j] = static_cast<T>(b2) * v[j] + static_cast<T>(1.0 - b2) * g[j] * g[j];
      double mhat = static_cast<double>(m[j]) / bc1;
      double vhat = static_cast<double>(v[j]) / bc2;
      x[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + tc.eps_adam)) + wd * x[j];
    }
  }
  opt.step = t;
}

std::string to_jsonl(const MetricsRecord& r) {
  nlohmann::json j{{"step", r.step}, {"split", r.split},     {"loss", r.loss},
                   {"ppl", r.ppl},   {"lr", r.lr},           {"wall_ms", r.wall_ms}};
  return j.dump();
}

namespace {

template <typename T>
double batch_loss(ContextLMParams<T>& params, Tape<T>& tp, const std::vector<int32_t>& in,
                  const std::vector<int32_t>& tgt, int64_t B, int64_t S, int* loss_node,
                  const ForwardOptions& fwd) {
  auto tr = forward(tp, in, B, S, params, fwd);
  int loss = cross_entropy_logits(tp, tr.logits, tgt);
  if (loss_node) *loss_node = loss;
  return static_cast<double>(tp.val(loss)[0]);
}

template <typename T>
double validation_loss(ContextLMParams<T>& params, const TrainConfig& tc, const Corpus& corpus,
                       const ForwardOptions& fwd) {
  BatchSampler val(corpus, "val", tc.seed, tc.seq_len, tc.batch_size);
  std::vector<int32_t> in, tgt;
  double sum = 0.0;
  // Fixed pseudo-steps: every validation pass scores the same batches, so
  // the curve measures the model, not sampling noise.
  for (int64_t k = 0; k < tc.eval_batches; ++k) {
    val.sample(corpus, k, in, tgt);
    Tape<T> tp(/*record_grads=*/false);
    sum += batch_loss(params, tp, in, tgt, tc.batch_size, tc.seq_len, nullptr, fwd);
  }
  return sum / static_cast<double>(tc.eval_batches);
}

std::string ckpt_path(const std::string& dir, const char* stem, int64_t step) {
  std::ostringstream os;
  os << dir << '/' << stem << step << ".bin";
  return os.str();
}

}  // namespace

template <typename T>
std::vector<MetricsRecord> train_loop(ContextLMParams<T>& params, OptimizerState<T>& opt,
                                      const TrainConfig& tc, const Corpus& corpus,
                                      int64_t start_step, const std::string& out_dir,
                                      const ForwardOptions& fwd) {
  using clock = std::chrono::steady_clock;
  std::vector<MetricsRecord> log;
  std::ofstream metrics;
  if (!out_dir.empty()) {
    metrics.open(out_dir + "/metrics.jsonl", std::ios::app);
    if (!metrics) throw IoError("train_loop: cannot write " + out_dir + "/metrics.jsonl");
  }
  auto emit = [&](MetricsRecord r) {
    if (metrics.is_open()) metrics << to_jsonl(r) << '\n' << std::flush;
    log.push_back(std::move(r));
  };
  BatchSampler sampler(corpus, "train", tc.seed, tc.seq_len, tc.batch_size);
  std::vector<int32_t> in, tgt;
  for (int64_t step = start_step; step < tc.steps; ++step) {
    auto t0 = clock::now();
    sampler.sample(corpus, step, in, tgt);
    Tape<T> tp;
    int loss_node = -1;
    double loss = 0.0;
    double lr = lr_at(step, tc);
    // Any numeric fault in the step — non-finite logits in the forward pass,
    // a non-finite loss, or a blown-up gradient caught by the optimizer —
    // leaves a diagnostic checkpoint of the pre-step state behind.
    try {
      loss = batch_loss(params, tp, in, tgt, tc.batch_size, tc.seq_len, &loss_node, fwd);
      if (!std::isfinite(loss))
        throw NumericError("train_loop: non-finite loss " + std::to_string(loss) + " at step " +
                           std::to_string(step));
      tp.backward(loss_node);
      clip_global_norm(params, tc.grad_clip_norm);
      adamw_step(params, opt, lr, tc);
    } catch (const NumericError&) {
      if (!out_dir.empty())
        save_checkpoint(ckpt_path(out_dir, "ckpt_diag_step", step), params, opt, tc, step);
      throw;
    }
    double wall =
        std::chrono::duration<double, std::milli>(clock::now() - t0).count();
    emit({step, "train", loss, std::exp(loss), lr, wall});
    const int64_t done = step + 1;
    if (done % tc.eval_every == 0 || done == tc.steps) {
      auto v0 = clock::now();
      double vloss = validation_loss(params, tc, corpus, fwd);
      double vwall = std::chrono::duration<double, std::milli>(clock::now() - v0).count();
      emit({step, "val", vloss, std::exp(vloss), lr, vwall});
    }
    if (!out_dir.empty() && (done % tc.checkpoint_every == 0 || done == tc.steps))
      save_checkpoint(ckpt_path(out_dir, "ckpt_step", done), params, opt, tc, done);
  }
  return log;
}

#define CTXLM_INSTANTIATE_TRAIN(T)                                                         \
  template double clip_global_norm<T>(ContextLMParams<T>&, double);                        \
  template void adamw_step<T>(ContextLMParams<T>&, OptimizerState<T>&, double,             \
                              const TrainConfig&);                                         \
  template std::vector<MetricsRecord> train_loop<T>(ContextLMParams<T>&, OptimizerState<T>&, \
                                                    const TrainConfig&, const Corpus&,     \
                                                    int64_t, const std::string&,           \
                                                    const ForwardOptions&);

CTXLM_INSTANTIATE_TRAIN(float)
CTXLM_INSTANTIATE_TRAIN(double)

#undef CTXLM_INSTANTIATE_TRAIN

}  // namespace ctxlm
