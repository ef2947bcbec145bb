#include "ctxlm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace ctxlm {

// ---- parameter set ------------------------------------------------------------

template <typename T>
ContextLMParams<T> ContextLMParams<T>::init(const ModelConfig& cfg) {
  {
    auto problems = validate(cfg);
    if (!problems.empty()) {
      std::string msg = "ContextLMParams::init: invalid config:";
      for (const auto& p : problems) msg += "\n  - " + p;
      throw ConfigError(msg);
    }
  }
  ContextLMParams<T> p;
  p.cfg = cfg;
  p.emb = make_embeddings<T>(cfg.vocab_size, cfg.max_seq_len, cfg.d_model, cfg.seed);
  // Residual-output projections are scaled by 1/sqrt(2*depth) of their own
  // stack, so backbone init is independent of whether a predictor exists.
  const double bb_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_backbone_layers()));
  for (int64_t i = 0; i < cfg.n_backbone_layers(); ++i)
    p.backbone.push_back(
        make_block<T>(cfg.d_model, "backbone." + std::to_string(i), cfg.seed, bb_scale));
  if (cfg.mode == Mode::contextlm) {
    const double ctx_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_ctx_layers));
    for (int64_t i = 0; i < cfg.n_ctx_layers; ++i)
      p.predictor.push_back(
          make_block<T>(cfg.d_model, "ctx." + std::to_string(i), cfg.seed, ctx_scale));
    p.ctx_ln = make_layer_norm<T>(cfg.d_model, "ctx_ln");
  }
  p.final_ln = make_layer_norm<T>(cfg.d_model, "final_ln");
  if (!cfg.tie_embeddings) {
    p.head = Tensor<T>::zeros({cfg.vocab_size, cfg.d_model});
    p.head.name = "head";
    p.head.requires_grad = true;
    init_normal(p.head, cfg.seed, 0.02);
  }
  if (cfg.learned_c_init) {
    p.c_init = Tensor<T>::zeros({cfg.d_model});
    p.c_init.name = "c_init";
    p.c_init.requires_grad = true;
    init_normal(p.c_init, cfg.seed, 0.02);
  }
  p.emb.tok.requires_grad = true;
  p.emb.pos.requires_grad = true;
  auto mark = [](BlockParams<T>& b) {
    for (Tensor<T>* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc1_b, &b.fc2, &b.fc2_b,
                         &b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias})
      t->requires_grad = true;
  };
  for (auto& b : p.backbone) mark(b);
  for (auto& b : p.predictor) mark(b);
  p.ctx_ln.gain.requires_grad = p.ctx_ln.bias.requires_grad = true;
  p.final_ln.gain.requires_grad = p.final_ln.bias.requires_grad = true;
  return p;
}

template <typename T>
std::vector<Tensor<T>*> ContextLMParams<T>::all() {
  std::vector<Tensor<T>*> out;
  out.push_back(&emb.tok);
  out.push_back(&emb.pos);
  auto push_block = [&out](BlockParams<T>& b) {
    for (Tensor<T>* t : {&b.wq, &b.wk, &b.wv, &b.wo, &b.fc1, &b.fc1_b, &b.fc2, &b.fc2_b,
                         &b.ln1.gain, &b.ln1.bias, &b.ln2.gain, &b.ln2.bias})
      out.push_back(t);
  };
  for (auto& b : backbone) push_block(b);
  for (auto& b : predictor) push_block(b);
  if (cfg.mode == Mode::contextlm) {
    out.push_back(&ctx_ln.gain);
    out.push_back(&ctx_ln.bias);
  }
  out.push_back(&final_ln.gain);
  out.push_back(&final_ln.bias);
  if (!cfg.tie_embeddings) out.push_back(&head);
  if (cfg.learned_c_init) out.push_back(&c_init);
  return out;
}

template <typename T>
int64_t ContextLMParams<T>::param_count() {
  int64_t n = 0;
  for (Tensor<T>* t : all()) n += t->size();
  return n;
}

// ---- model-level tape ops ------------------------------------------------------

template <typename T>
int pool_mean_chunks(Tape<T>& tp, int h, const ChunkLayout& lo) {
  const Shape& s = tp.shape(h);
  if (s.size() != 3 || s[1] != lo.seq_len)
    throw ShapeError("pool_mean_chunks: h " + shape_str(s) + " does not match layout T=" +
                     std::to_string(lo.seq_len));
  const int64_t B = s[0], d = s[2], J = lo.num_chunks(), w = lo.chunk_size;
  int out = tp.push(Shape{B, J, d}, "pool_mean_chunks");
  const T* ph = tp.val(h);
  T* po = tp.val(out);
  const T inv = T(1) / static_cast<T>(w);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < J; ++j) {
      T* dst = po + (b * J + j) * d;
      std::fill(dst, dst + d, T(0));
      for (int64_t t = lo.pool_spans[static_cast<size_t>(j)].first;
           t < lo.pool_spans[static_cast<size_t>(j)].second; ++t) {
        const T* src = ph + (b * lo.seq_len + t) * d;
        for (int64_t e = 0; e < d; ++e) dst[e] += src[e];
      }
      for (int64_t e = 0; e < d; ++e) dst[e] *= inv;
    }
  }
  tp.set_backward(out, [&tp, h, out, B, J, d, inv, lo] {
    const T* g = tp.grad(out);
    T* gh = tp.grad(h);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t j = 0; j < J; ++j) {
        const T* src = g + (b * J + j) * d;
        for (int64_t t = lo.pool_spans[static_cast<size_t>(j)].first;
             t < lo.pool_spans[static_cast<size_t>(j)].second; ++t) {
          T* dst = gh + (b * lo.seq_len + t) * d;
          for (int64_t e = 0; e < d; ++e) dst[e] += inv * src[e];
        }
      }
  });
  return out;
}

template <typename T>
int broadcast_fuse(Tape<T>& tp, int h, int chat, const ChunkLayout& lo, int learned_c_init) {
  const Shape& sh = tp.shape(h);
  const Shape& sc = tp.shape(chat);
  if (sh.size() != 3 || sh[1] != lo.seq_len)
    throw ShapeError("broadcast_fuse: h " + shape_str(sh) + " does not match layout T=" +
                     std::to_string(lo.seq_len));
  if (sc.size() != 3 || sc[0] != sh[0] || sc[1] != lo.num_chunks() || sc[2] != sh[2])
    throw ShapeError("broadcast_fuse: contexts " + shape_str(sc) + " do not match h " +
                     shape_str(sh) + " with K-1=" + std::to_string(lo.num_chunks()));
  const int64_t B = sh[0], S = sh[1], d = sh[2], J = lo.num_chunks();
  int out = tp.push(sh, "broadcast_fuse");
  const T* ph = tp.val(h);
  const T* pc = tp.val(chat);
  const T* pinit = learned_c_init >= 0 ? tp.val(learned_c_init) : nullptr;
  T* po = tp.val(out);
  std::copy(ph, ph + B * S * d, po);
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t k = 0; k < lo.num_slots; ++k) {
      const T* ctx = k == 0 ? (pinit ? pinit : ph + b * S * d)  // c_init: learned or h[b][0]
                            : pc + (b * J + (k - 1)) * d;
      for (int64_t t = lo.segments[static_cast<size_t>(k)].first;
           t < lo.segments[static_cast<size_t>(k)].second; ++t) {
        T* dst = po + (b * S + t) * d;
        for (int64_t e = 0; e < d; ++e) dst[e] += ctx[e];
      }
    }
  }
  tp.set_backward(out, [&tp, h, chat, out, learned_c_init, B, S, d, J, lo] {
    const T* g = tp.grad(out);
    T* gh = tp.grad(h);
    T* gc = tp.grad(chat);
    T* ginit = learned_c_init >= 0 ? tp.grad(learned_c_init) : nullptr;
    for (int64_t i = 0; i < B * S * d; ++i) gh[i] += g[i];
    for (int64_t b = 0; b < B; ++b) {
      for (int64_t k = 0; k < lo.num_slots; ++k) {
        T* ctx = k == 0 ? (ginit ? ginit : gh + b * S * d) : gc + (b * J + (k - 1)) * d;
        for (int64_t t = lo.segments[static_cast<size_t>(k)].first;
             t < lo.segments[static_cast<size_t>(k)].second; ++t) {
          const T* src = g + (b * S + t) * d;
          for (int64_t e = 0; e < d; ++e) ctx[e] += src[e];
        }
      }
    }
  });
  return out;
}

// ---- forward -------------------------------------------------------------------

template <typename T>
ForwardTrace<T> forward(Tape<T>& tp, const std::vector<int32_t>& tokens, int64_t B, int64_t S,
                        ContextLMParams<T>& params, const ForwardOptions& opts) {
  const ModelConfig& cfg = params.cfg;
  if (S > cfg.max_seq_len)
    throw ContractError("forward: sequence length " + std::to_string(S) + " exceeds max_seq_len " +
                        std::to_string(cfg.max_seq_len));
  if (static_cast<int64_t>(tokens.size()) != B * S)
    throw ShapeError("forward: got " + std::to_string(tokens.size()) + " tokens for B=" +
                     std::to_string(B) + " S=" + std::to_string(S));
  ForwardTrace<T> tr;
  tr.batch = B;
  tr.seq_len = S;
  std::vector<int32_t> positions(static_cast<size_t>(B * S));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < S; ++t) positions[static_cast<size_t>(b * S + t)] = static_cast<int32_t>(t);
  int x = embed(tp, tokens, positions, params.emb, B, S);
  const int n_heads = static_cast<int>(cfg.n_heads);
  auto run_block = [&](int in, BlockParams<T>& blk, std::vector<int>* att_sink) {
    int att = -1;
    int out = transformer_block(tp, in, blk, n_heads, opts.capture_attention ? &att : nullptr);
    if (opts.capture_attention && att_sink) att_sink->push_back(att);
    return out;
  };

  if (cfg.mode == Mode::baseline) {
    for (auto& blk : params.backbone) x = run_block(x, blk, &tr.att_backbone);
    tr.h = x;
    tr.fused = x;
    tr.logits = lm_head(tp, x, params.emb, params.final_ln,
                        cfg.tie_embeddings ? nullptr : &params.head);
    return tr;
  }

  for (int64_t i = 0; i < cfg.n_enc_layers; ++i)
    x = run_block(x, params.backbone[static_cast<size_t>(i)], &tr.att_backbone);
  tr.h = x;

  int fused = x;
  if (!opts.zero_fusion) {
    ChunkLayout lo = build_chunk_layout(S, cfg.chunk_size);
    int pool_src = opts.pathway == PathwayMode::detach_pool ? detach(tp, x) : x;
    tr.c = pool_mean_chunks(tp, pool_src, lo);
    // Chunk positional information: the position row of each chunk's first
    // token, added before the predictor stack.
    std::vector<int32_t> cpos(static_cast<size_t>(B * lo.num_chunks()));
    for (int64_t b = 0; b < B; ++b)
      for (int64_t j = 0; j < lo.num_chunks(); ++j)
        cpos[static_cast<size_t>(b * lo.num_chunks() + j)] =
            static_cast<int32_t>(lo.chunk_positions[static_cast<size_t>(j)]);
    int cp = embedding_gather(tp, tp.leaf(params.emb.pos), cpos, Shape{B, lo.num_chunks()});
    int y = add(tp, tr.c, cp);
    for (auto& blk : params.predictor) y = run_block(y, blk, &tr.att_ctx);
    tr.chat = layer_norm(tp, y, tp.leaf(params.ctx_ln.gain), tp.leaf(params.ctx_ln.bias), kLnEps);
    int fuse_h = opts.pathway == PathwayMode::detach_direct ? detach(tp, x) : x;
    int cinit = cfg.learned_c_init ? tp.leaf(params.c_init) : -1;
    fused = broadcast_fuse(tp, fuse_h, tr.chat, lo, cinit);
  }
  tr.fused = fused;

  x = fused;
  for (int64_t i = cfg.n_enc_layers; i < cfg.n_backbone_layers(); ++i)
    x = run_block(x, params.backbone[static_cast<size_t>(i)], &tr.att_backbone);
  tr.logits = lm_head(tp, x, params.emb, params.final_ln,
                      cfg.tie_embeddings ? nullptr : &params.head);
  return tr;
}

// ---- pathway decomposition ------------------------------------------------------

PathwayReport grad_pathway_report(ContextLMParams<double>& params,
                                  const std::vector<int32_t>& tokens,
                                  const std::vector<int32_t>& targets, int64_t B, int64_t S) {
  const ModelConfig& cfg = params.cfg;
  if (cfg.d_model > 32 || S > 32 || B > 4)
    throw ContractError("grad_pathway_report: verification path is meant for tiny configs "
                        "(d<=32, S<=32, B<=4); got d=" + std::to_string(cfg.d_model) + " S=" +
                        std::to_string(S) + " B=" + std::to_string(B));
  if (static_cast<int64_t>(targets.size()) != B * S)
    throw ShapeError("grad_pathway_report: targets size " + std::to_string(targets.size()) +
                     " != B*S");
  PathwayReport rep;
  rep.batch = B;
  rep.seq_len = S;
  rep.d_model = cfg.d_model;
  const int64_t d = cfg.d_model;
  const int64_t n_h = B * S * d;

  auto run = [&](PathwayMode pm, std::vector<double>& h_grad, std::vector<double>* chat_grad) {
    Tape<double> tp;
    ForwardOptions opts;
    opts.pathway = pm;
    auto tr = forward(tp, tokens, B, S, params, opts);
    int loss = cross_entropy_logits(tp, tr.logits, targets);
    tp.backward(loss);
    const double* gh = tp.grad(tr.h);
    h_grad.assign(gh, gh + n_h);
    if (chat_grad && tr.chat >= 0) {
      const double* gc = tp.grad(tr.chat);
      chat_grad->assign(gc, gc + tp.size(tr.chat));
    }
  };

  run(PathwayMode::full, rep.full_h_grad, &rep.chat_grad);
  if (cfg.mode == Mode::baseline) {
    rep.token_pathway = rep.full_h_grad;
    rep.context_pathway.assign(static_cast<size_t>(n_h), 0.0);
    return rep;
  }
  rep.context_path_present = true;
  rep.num_chunks = static_cast<int64_t>(rep.chat_grad.size()) / (B * d);
  run(PathwayMode::detach_pool, rep.token_pathway, nullptr);
  run(PathwayMode::detach_direct, rep.context_pathway, nullptr);
  for (int64_t i = 0; i < n_h; ++i) {
    double r = std::abs(rep.token_pathway[static_cast<size_t>(i)] +
                        rep.context_pathway[static_cast<size_t>(i)] -
                        rep.full_h_grad[static_cast<size_t>(i)]);
    rep.additivity_residual = std::max(rep.additivity_residual, r);
  }

  // Per-position contributions: the loss is the mean over B*S positions, so
  // with CE restricted to column t (mean over its B rows), dL/dx =
  // (1/S) * sum_t d(CE_t)/dx.
  ChunkLayout lo = build_chunk_layout(S, cfg.chunk_size);
  const int64_t J = lo.num_chunks();
  const int64_t n_c = B * J * d;
  rep.per_token_chat_grad.assign(static_cast<size_t>(S * n_c), 0.0);
  {
    Tape<double> tp;
    auto tr = forward(tp, tokens, B, S, params);
    const double inv_s = 1.0 / static_cast<double>(S);
    for (int64_t t = 0; t < S; ++t) {
      std::vector<int32_t> masked(static_cast<size_t>(B * S), -1);
      for (int64_t b = 0; b < B; ++b)
        masked[static_cast<size_t>(b * S + t)] = targets[static_cast<size_t>(b * S + t)];
      int ce = cross_entropy_logits(tp, tr.logits, masked, /*ignore_index=*/-1);
      tp.backward(ce);
      const double* gc = tp.grad(tr.chat);
      for (int64_t i = 0; i < n_c; ++i)
        rep.per_token_chat_grad[static_cast<size_t>(t * n_c + i)] = inv_s * gc[i];
    }
  }
  // Segment sums must reproduce the full chunk gradient; positions outside a
  // chunk's segment must contribute nothing to it.
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t j = 0; j < J; ++j) {
      const int64_t k = j + 1;  // chat slot j holds c-hat_{j+1}
      for (int64_t e = 0; e < d; ++e) {
        double sum = 0.0;
        for (int64_t t = lo.segments[static_cast<size_t>(k)].first;
             t < lo.segments[static_cast<size_t>(k)].second; ++t)
          sum += rep.per_token_chat_grad[static_cast<size_t>(t * n_c + (b * J + j) * d + e)];
        double r = std::abs(sum - rep.chat_grad[static_cast<size_t>((b * J + j) * d + e)]);
        rep.chunk_residual = std::max(rep.chunk_residual, r);
      }
      for (int64_t t = 0; t < S; ++t) {
        if (t >= lo.segments[static_cast<size_t>(k)].first &&
            t < lo.segments[static_cast<size_t>(k)].second)
          continue;
        for (int64_t e = 0; e < d; ++e)
          rep.outside_leakage = std::max(
              rep.outside_leakage,
              std::abs(rep.per_token_chat_grad[static_cast<size_t>(t * n_c + (b * J + j) * d + e)]));
      }
    }
  }
  return rep;
}

void verify_pathways(const PathwayReport& rep, double tol) {
  if (rep.additivity_residual > tol)
    throw VerificationError("pathway decomposition failed: |token + context - full| = " +
                            std::to_string(rep.additivity_residual) + " exceeds " +
                            std::to_string(tol));
  if (rep.chunk_residual > tol)
    throw VerificationError("chunk aggregation failed: |sum over segment - chunk gradient| = " +
                            std::to_string(rep.chunk_residual) + " exceeds " +
                            std::to_string(tol));
  if (rep.outside_leakage > tol)
    throw VerificationError("chunk isolation failed: positions outside a segment leak " +
                            std::to_string(rep.outside_leakage) + " into its context gradient");
}

// ---- finite-difference parameter sweep --------------------------------------------

GradcheckResult model_gradcheck(ContextLMParams<double>& params,
                                const std::vector<int32_t>& tokens,
                                const std::vector<int32_t>& targets, int64_t B, int64_t S) {
  if (params.cfg.d_model > 16 || S > 16)
    throw ContractError("model_gradcheck: finite differences need a tiny config (d<=16, S<=16)");
  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tp;
    auto tr = forward(tp, tokens, B, S, params);
    int loss = cross_entropy_logits(tp, tr.logits, targets);
    tp.backward(loss);
    for (Tensor<double>* p : params.all()) analytic.push_back(p->grad);
  }
  auto eval = [&]() {
    Tape<double> tp(/*record_grads=*/false);
    auto tr = forward(tp, tokens, B, S, params);
    int loss = cross_entropy_logits(tp, tr.logits, targets);
    return tp.val(loss)[0];
  };
  GradcheckResult res;
  auto tensors = params.all();
  for (size_t pi = 0; pi < tensors.size(); ++pi) {
    Tensor<double>& p = *tensors[pi];
    for (size_t i = 0; i < p.data.size(); ++i) {
      double keep = p.data[i];
      double h = 1e-5 * std::max(1.0, std::abs(keep));
      p.data[i] = keep + h;
      double fp = eval();
      p.data[i] = keep - h;
      double fm = eval();
      p.data[i] = keep;
      double fd = (fp - fm) / (2.0 * h);
      double an = analytic[pi][i];
      // Central differences carry absolute noise ~eps^(2/3)*|loss| ~ 2e-10
      // no matter how small the true gradient is, so near-zero coordinates
      // need a denominator floor; 1e-5 keeps that noise at <= 2e-5 relative
      // while a genuinely wrong backward rule still shows up at O(1).
      double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-5});
      ++res.coords_checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_param = p.name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return res;
}

// ---- explicit instantiations -------------------------------------------------------

template struct ContextLMParams<float>;
template struct ContextLMParams<double>;

#define CTXLM_INSTANTIATE_MODEL(T)                                                            \
  template int pool_mean_chunks<T>(Tape<T>&, int, const ChunkLayout&);                        \
  template int broadcast_fuse<T>(Tape<T>&, int, int, const ChunkLayout&, int);                \
  template ForwardTrace<T> forward<T>(Tape<T>&, const std::vector<int32_t>&, int64_t, int64_t, \
                                      ContextLMParams<T>&, const ForwardOptions&);

CTXLM_INSTANTIATE_MODEL(float)
CTXLM_INSTANTIATE_MODEL(double)

#undef CTXLM_INSTANTIATE_MODEL

}  // namespace ctxlm
