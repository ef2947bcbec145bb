#include "ctxlm/costs.hpp"

#include <sstream>

#include <json.hpp>

#include "ctxlm/common.hpp"

namespace ctxlm {

namespace {

// One pre-norm block: wq/wk/wv/wo (4d^2) + fc1/fc2 (8d^2) + fc1_b/fc2_b
// (5d) + two norms (4d).
int64_t block_params(int64_t d) { return 12 * d * d + 9 * d; }

}  // namespace

CostReport count_params(const ModelConfig& cfg) {
  {
    auto problems = validate(cfg);
    if (!problems.empty()) throw ConfigError("count_params: " + problems[0]);
  }
  const int64_t d = cfg.d_model;
  CostReport r;
  r.params_embeddings = cfg.vocab_size * d + cfg.max_seq_len * d;
  r.params_encoder = cfg.n_enc_layers * block_params(d);
  r.params_decoder = cfg.n_dec_layers * block_params(d) + 2 * d;  // + final norm
  if (cfg.mode == Mode::contextlm) {
    r.params_predictor = cfg.n_ctx_layers * block_params(d) + 2 * d;  // + predictor norm
    if (cfg.learned_c_init) r.params_predictor += d;
  }
  if (!cfg.tie_embeddings) r.params_head = cfg.vocab_size * d;
  r.params_total = r.params_embeddings + r.params_encoder + r.params_decoder +
                   r.params_predictor + r.params_head;
  return r;
}

CostReport estimate_flops(const ModelConfig& cfg, int64_t T, int64_t B) {
  if (T < 1 || T > cfg.max_seq_len)
    throw ContractError("estimate_flops: T=" + std::to_string(T) + " outside [1, max_seq_len=" +
                        std::to_string(cfg.max_seq_len) + "]");
  if (B < 1) throw ContractError("estimate_flops: B must be >= 1");
  CostReport r = count_params(cfg);
  const double d = static_cast<double>(cfg.d_model);
  const double bd = static_cast<double>(B);
  const double td = static_cast<double>(T);
  const int64_t L = cfg.n_backbone_layers();
  r.B = B;
  r.T = T;
  // Per layer: qkvo 4*T*d^2 + mlp 8*T*d^2 multiply-adds.
  r.flops_backbone_linear = static_cast<double>(L) * 12.0 * bd * td * d * d;
  r.flops_backbone_attn = static_cast<double>(L) * bd * td * td * d;
  r.flops_head = bd * td * d * static_cast<double>(cfg.vocab_size);
  if (cfg.mode == Mode::contextlm) {
    const int64_t kp = T / cfg.chunk_size;  // pooled windows available in T tokens
    r.chunk_slots = kp;
    const double kd = static_cast<double>(kp);
    r.flops_predictor_linear = static_cast<double>(cfg.n_ctx_layers) * 12.0 * bd * kd * d * d;
    r.flops_predictor_attn = static_cast<double>(cfg.n_ctx_layers) * bd * kd * kd * d;
    // Integer numerators/denominators, so when w | T the quotient is the
    // correctly rounded 1/w^2 (and 1/w) exactly.
    r.attn_overhead_per_layer = static_cast<double>(kp * kp) / static_cast<double>(T * T);
    r.attn_overhead_ratio = r.flops_backbone_attn > 0
                                ? r.flops_predictor_attn / r.flops_backbone_attn
                                : 0.0;
    r.context_memory_ratio = static_cast<double>(kp) / static_cast<double>(T);
    const double base = r.flops_backbone_linear + r.flops_backbone_attn + r.flops_head;
    r.full_model_overhead_ratio = (r.flops_predictor_linear + r.flops_predictor_attn) / base;
  }
  r.flops_total = r.flops_backbone_linear + r.flops_backbone_attn + r.flops_predictor_linear +
                  r.flops_predictor_attn + r.flops_head;
  return r;
}

std::string overhead_report(const ModelConfig& cfg, int64_t T) {
  CostReport r = estimate_flops(cfg, T, 1);
  std::ostringstream os;
  os << "parameters\n"
     << "  embeddings        " << r.params_embeddings << "\n"
     << "  encoder blocks    " << r.params_encoder << "\n"
     << "  decoder blocks    " << r.params_decoder << "\n"
     << "  context predictor " << r.params_predictor << "\n"
     << "  untied head       " << r.params_head << "\n"
     << "  total             " << r.params_total << "\n"
     << "forward multiply-adds (B=1, T=" << T << ")\n"
     << "  backbone linear   " << r.flops_backbone_linear << "\n"
     << "  backbone attn     " << r.flops_backbone_attn << "\n"
     << "  predictor linear  " << r.flops_predictor_linear << "\n"
     << "  predictor attn    " << r.flops_predictor_attn << "\n"
     << "  head              " << r.flops_head << "\n"
     << "  total             " << r.flops_total << "\n";
  if (cfg.mode == Mode::contextlm) {
    os << "overhead (chunk slots K'=" << r.chunk_slots << ")\n"
       << "  attention term, per predictor layer  " << r.attn_overhead_per_layer * 100 << "%\n"
       << "  attention term, whole predictor      " << r.attn_overhead_ratio * 100 << "%\n"
       << "  full model (incl. predictor linear)  " << r.full_model_overhead_ratio * 100 << "%\n"
       << "  context/token activation memory      " << r.context_memory_ratio * 100 << "%\n"
       << "The attention-term ratio is the asymptotic figure; at this T the\n"
       << "predictor's linear layers dominate its cost, hence the full-model row.\n";
  } else {
    os << "overhead: none (baseline mode)\n";
  }
  return os.str();
}

std::string to_json(const CostReport& r) {
  nlohmann::json j{{"params",
                    {{"embeddings", r.params_embeddings},
                     {"encoder", r.params_encoder},
                     {"decoder", r.params_decoder},
                     {"predictor", r.params_predictor},
                     {"head", r.params_head},
                     {"total", r.params_total}}},
                   {"flops",
                    {{"B", r.B},
                     {"T", r.T},
                     {"chunk_slots", r.chunk_slots},
                     {"backbone_linear", r.flops_backbone_linear},
                     {"backbone_attn", r.flops_backbone_attn},
                     {"predictor_linear", r.flops_predictor_linear},
                     {"predictor_attn", r.flops_predictor_attn},
                     {"head", r.flops_head},
                     {"total", r.flops_total}}},
                   {"overhead",
                    {{"attn_per_layer", r.attn_overhead_per_layer},
                     {"attn_ratio", r.attn_overhead_ratio},
                     {"full_model_ratio", r.full_model_overhead_ratio},
                     {"context_memory_ratio", r.context_memory_ratio}}}};
  return j.dump(2) + "\n";
}

}  // namespace ctxlm
