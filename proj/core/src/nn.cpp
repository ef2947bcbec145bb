#include "ctxlm/nn.hpp"

#include <cmath>

#include "ctxlm/rng.hpp"

namespace ctxlm {

template <typename T>
void init_normal(Tensor<T>& t, uint64_t seed, double stddev) {
  SplitMix64 g = named_stream(seed, t.name);
  fill_normal(g, t.data.data(), t.size(), 0.0, stddev);
}

namespace {
template <typename T>
Tensor<T> named(Shape shape, std::string name, bool requires_grad = true) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  t.name = std::move(name);
  t.requires_grad = requires_grad;
  return t;
}
}  // namespace

template <typename T>
BlockParams<T> make_block(int64_t d, const std::string& prefix, uint64_t seed,
                          double residual_scale) {
  BlockParams<T> b;
  b.wq = named<T>({d, d}, prefix + ".wq");
  b.wk = named<T>({d, d}, prefix + ".wk");
  b.wv = named<T>({d, d}, prefix + ".wv");
  b.wo = named<T>({d, d}, prefix + ".wo");
  b.fc1 = named<T>({d, 4 * d}, prefix + ".fc1");
  b.fc1_b = named<T>({4 * d}, prefix + ".fc1_b");
  b.fc2 = named<T>({4 * d, d}, prefix + ".fc2");
  b.fc2_b = named<T>({d}, prefix + ".fc2_b");
  b.ln1 = make_layer_norm<T>(d, prefix + ".ln1");
  b.ln2 = make_layer_norm<T>(d, prefix + ".ln2");
  const double std0 = 0.02;
  init_normal(b.wq, seed, std0);
  init_normal(b.wk, seed, std0);
  init_normal(b.wv, seed, std0);
  init_normal(b.wo, seed, std0 * residual_scale);
  init_normal(b.fc1, seed, std0);
  init_normal(b.fc2, seed, std0 * residual_scale);
  return b;
}

template <typename T>
LayerNormParams<T> make_layer_norm(int64_t d, const std::string& prefix) {
  LayerNormParams<T> ln;
  ln.gain = named<T>({d}, prefix + ".gain");
  std::fill(ln.gain.data.begin(), ln.gain.data.end(), T(1));
  ln.bias = named<T>({d}, prefix + ".bias");
  return ln;
}

template <typename T>
EmbeddingParams<T> make_embeddings(int64_t vocab, int64_t max_seq, int64_t d, uint64_t seed) {
  EmbeddingParams<T> e;
  e.tok = named<T>({vocab, d}, "embed.tok");
  e.pos = named<T>({max_seq, d}, "embed.pos");
  init_normal(e.tok, seed, 0.02);
  init_normal(e.pos, seed, 0.02);
  return e;
}

template <typename T>
int embed(Tape<T>& tp, const std::vector<int32_t>& tokens, const std::vector<int32_t>& positions,
          EmbeddingParams<T>& emb, int64_t B, int64_t S) {
  if (static_cast<int64_t>(tokens.size()) != B * S ||
      static_cast<int64_t>(positions.size()) != B * S)
    throw ShapeError("embed: got " + std::to_string(tokens.size()) + " tokens / " +
                     std::to_string(positions.size()) + " positions for B=" + std::to_string(B) +
                     " S=" + std::to_string(S));
  int te = embedding_gather(tp, tp.leaf(emb.tok), tokens, Shape{B, S});
  int pe = embedding_gather(tp, tp.leaf(emb.pos), positions, Shape{B, S});
  return add(tp, te, pe);
}

template <typename T>
int causal_attention(Tape<T>& tp, int x, BlockParams<T>& p, int n_heads, int* att_out) {
  const Shape& s = tp.shape(x);
  if (s.size() != 3) throw ShapeError("causal_attention: expects [B x T x d], got " + shape_str(s));
  int64_t d = s[2];
  int64_t hd = d / n_heads;
  int q = matmul(tp, x, tp.leaf(p.wq));
  int k = matmul(tp, x, tp.leaf(p.wk));
  int v = matmul(tp, x, tp.leaf(p.wv));
  // Fold the 1/sqrt(head_dim) scale into q: cheaper than scaling the
  // [B*H x T x T] score matrix and gradient-equivalent.
  int qh = scale(tp, split_heads(tp, q, n_heads), 1.0 / std::sqrt(static_cast<double>(hd)));
  int kh = split_heads(tp, k, n_heads);
  int vh = split_heads(tp, v, n_heads);
  int scores = bmm(tp, qh, kh, /*trans_b=*/true);
  int att = causal_softmax(tp, scores);
  if (att_out) *att_out = att;
  int ctx = merge_heads(tp, bmm(tp, att, vh), n_heads);
  return matmul(tp, ctx, tp.leaf(p.wo));
}

template <typename T>
int transformer_block(Tape<T>& tp, int x, BlockParams<T>& p, int n_heads, int* att_out) {
  int h1 = layer_norm(tp, x, tp.leaf(p.ln1.gain), tp.leaf(p.ln1.bias), kLnEps);
  int x1 = add(tp, x, causal_attention(tp, h1, p, n_heads, att_out));
  int h2 = layer_norm(tp, x1, tp.leaf(p.ln2.gain), tp.leaf(p.ln2.bias), kLnEps);
  int m1 = gelu(tp, add_bias(tp, matmul(tp, h2, tp.leaf(p.fc1)), tp.leaf(p.fc1_b)));
  int m2 = add_bias(tp, matmul(tp, m1, tp.leaf(p.fc2)), tp.leaf(p.fc2_b));
  return add(tp, x1, m2);
}

template <typename T>
int lm_head(Tape<T>& tp, int x, EmbeddingParams<T>& emb, LayerNormParams<T>& final_ln,
            Tensor<T>* untied_head) {
  int h = layer_norm(tp, x, tp.leaf(final_ln.gain), tp.leaf(final_ln.bias), kLnEps);
  Tensor<T>& w = untied_head ? *untied_head : emb.tok;
  return matmul(tp, h, tp.leaf(w), /*trans_b=*/true);
}

#define CTXLM_INSTANTIATE_NN(T)                                                               \
  template void init_normal<T>(Tensor<T>&, uint64_t, double);                                 \
  template BlockParams<T> make_block<T>(int64_t, const std::string&, uint64_t, double);       \
  template LayerNormParams<T> make_layer_norm<T>(int64_t, const std::string&);                \
  template EmbeddingParams<T> make_embeddings<T>(int64_t, int64_t, int64_t, uint64_t);        \
  template int embed<T>(Tape<T>&, const std::vector<int32_t>&, const std::vector<int32_t>&,   \
                        EmbeddingParams<T>&, int64_t, int64_t);                               \
  template int causal_attention<T>(Tape<T>&, int, BlockParams<T>&, int, int*);                \
  template int transformer_block<T>(Tape<T>&, int, BlockParams<T>&, int, int*);               \
  template int lm_head<T>(Tape<T>&, int, EmbeddingParams<T>&, LayerNormParams<T>&, Tensor<T>*);

CTXLM_INSTANTIATE_NN(float)
CTXLM_INSTANTIATE_NN(double)

#undef CTXLM_INSTANTIATE_NN

}  // namespace ctxlm
