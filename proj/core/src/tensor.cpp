#include "ctxlm/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

#ifndef EIGEN_DONT_PARALLELIZE
#define EIGEN_DONT_PARALLELIZE  // one slice partitioner (parallel_slices) owns all threading
#endif
#include <Eigen/Core>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ctxlm {

#if defined(__GLIBC__)
namespace {
// Activation buffers run to several MB each and turn over every step; with
// default thresholds glibc serves them via mmap/munmap and the syscall +
// page-fault traffic dominates sys time. Keep them in the arena instead.
const bool g_malloc_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace
#endif

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int worker_threads() {
  static const int n = [] {
    const char* env = std::getenv("CTXLM_THREADS");
    if (!env || !*env) return 1;
    int v = std::atoi(env);
    return v < 1 ? 1 : v;
  }();
  return n;
}

namespace fault {
namespace {
std::string g_target;  // NOLINT: test-only global
}
void corrupt_backward(const std::string& op_name) { g_target = op_name; }
void clear() { g_target.clear(); }
const std::string& active() { return g_target; }
}  // namespace fault

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
template <typename T>
using Arr = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CArr = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

// Uninitialized, 64-byte-aligned closure scratch (shared_ptr keeps the
// closure copyable for std::function). Alignment matters for the same
// reason as the tape's own buffers: vectorized traversal order must depend
// only on the shape, never on where the allocator placed the block.
template <typename T>
std::shared_ptr<T[]> scratch(int64_t n) {
  return std::shared_ptr<T[]>(
      static_cast<T*>(::operator new[](static_cast<size_t>(n) * sizeof(T), std::align_val_t{64})),
      [](T* p) { ::operator delete[](p, std::align_val_t{64}); });
}

void require(bool ok, const char* what, const std::string& detail) {
  if (!ok) throw ShapeError(std::string(what) + ": " + detail);
}

int64_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

Shape drop_last(const Shape& s) {
  Shape lead(s.begin(), s.empty() ? s.end() : s.end() - 1);
  return lead;
}

}  // namespace

// ---- Tape -------------------------------------------------------------------

template <typename T>
int Tape<T>::push(Shape shape, const char* op_name) {
  Node n;
  n.shape = std::move(shape);
  n.value.alloc(static_cast<size_t>(numel(n.shape)));
  n.op = op_name;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
int Tape<T>::leaf(Tensor<T>& t) {
  auto it = leaf_index_.find(&t);
  if (it != leaf_index_.end()) return it->second;
  if (numel(t.shape) != t.size())
    throw ShapeError("Tape::leaf: tensor '" + t.name + "' shape " + shape_str(t.shape) +
                     " does not hold " + std::to_string(t.data.size()) + " values");
  Node n;
  n.shape = t.shape;
  n.external = &t;
  n.op = "leaf";
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaf_index_.emplace(&t, id);
  return id;
}

template <typename T>
int Tape<T>::constant(Shape shape, std::vector<T> values, const char* op_name) {
  if (numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("Tape::constant: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  Node n;
  n.shape = std::move(shape);
  n.value.alloc(values.size());
  std::copy(values.begin(), values.end(), n.value.data());
  n.op = op_name;
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

template <typename T>
void Tape<T>::set_backward(int node, std::function<void()> fn) {
  if (!record_) return;
  nodes_[check(node)].back = std::move(fn);
}

template <typename T>
T* Tape<T>::val(int node) {
  Node& n = nodes_[check(node)];
  return n.external ? n.external->data.data() : n.value.data();
}

template <typename T>
const T* Tape<T>::val(int node) const {
  const Node& n = nodes_[check(node)];
  return n.external ? n.external->data.data() : n.value.data();
}

template <typename T>
T* Tape<T>::grad(int node) {
  Node& n = nodes_[check(node)];
  if (n.external) {
    if (n.external->grad.size() != n.external->data.size()) n.external->ensure_grad();
    return n.external->grad.data();
  }
  if (n.gradbuf.size() != n.value.size()) n.gradbuf.alloc(n.value.size());
  return n.gradbuf.data();
}

template <typename T>
void Tape<T>::backward(int loss) {
  check(loss);
  if (!record_) throw ContractError("Tape::backward: tape was recorded without gradients");
  if (numel(nodes_[loss].shape) != 1)
    throw ContractError("Tape::backward: loss must be scalar, got shape " +
                        shape_str(nodes_[loss].shape));
  fault_fired_ = false;
  for (size_t i = 0; i < nodes_.size(); ++i) {
    T* g = grad(static_cast<int>(i));
    std::fill(g, g + numel(nodes_[i].shape), T(0));
  }
  grad(loss)[0] = T(1);
  const std::string& corrupt = fault::active();
  for (int i = loss; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.back) continue;
    if (!corrupt.empty() && corrupt == n.op) {
      T* g = grad(i);
      int64_t m = numel(n.shape);
      for (int64_t j = 0; j < m; ++j) g[j] *= T(1.5);
      fault_fired_ = true;
    }
    n.back();
  }
}

// ---- elementwise ops --------------------------------------------------------

template <typename T>
int add(Tape<T>& tp, int a, int b) {
  require(tp.shape(a) == tp.shape(b), "add",
          "shape mismatch " + shape_str(tp.shape(a)) + " vs " + shape_str(tp.shape(b)));
  int out = tp.push(tp.shape(a), "add");
  int64_t n = tp.size(out);
  Arr<T>(tp.val(out), n) = CArr<T>(tp.val(a), n) + CArr<T>(tp.val(b), n);
  tp.set_backward(out, [&tp, a, b, out, n] {
    CArr<T> g(tp.grad(out), n);
    Arr<T>(tp.grad(a), n) += g;
    Arr<T>(tp.grad(b), n) += g;
  });
  return out;
}

template <typename T>
int scale(Tape<T>& tp, int a, double s) {
  int out = tp.push(tp.shape(a), "scale");
  int64_t n = tp.size(out);
  const T k = static_cast<T>(s);
  Arr<T>(tp.val(out), n) = k * CArr<T>(tp.val(a), n);
  tp.set_backward(out, [&tp, a, out, n, k] {
    Arr<T>(tp.grad(a), n) += k * CArr<T>(tp.grad(out), n);
  });
  return out;
}

template <typename T>
int add_bias(Tape<T>& tp, int x, int bias) {
  int64_t n = last_extent(tp.shape(x));
  require(tp.shape(bias) == Shape{n}, "add_bias",
          "bias shape " + shape_str(tp.shape(bias)) + " does not match last extent of " +
              shape_str(tp.shape(x)));
  int out = tp.push(tp.shape(x), "add_bias");
  const T* px = tp.val(x);
  const T* pb = tp.val(bias);
  T* po = tp.val(out);
  int64_t rows = tp.size(x) / n;
  for (int64_t r = 0; r < rows; ++r)
    Arr<T>(po + r * n, n) = CArr<T>(px + r * n, n) + CArr<T>(pb, n);
  tp.set_backward(out, [&tp, x, bias, out, rows, n] {
    const T* g = tp.grad(out);
    Arr<T>(tp.grad(x), rows * n) += CArr<T>(g, rows * n);
    Arr<T> gb(tp.grad(bias), n);
    for (int64_t r = 0; r < rows; ++r) gb += CArr<T>(g + r * n, n);
  });
  return out;
}

template <typename T>
int gelu(Tape<T>& tp, int x) {
  int out = tp.push(tp.shape(x), "gelu");
  const T* px = tp.val(x);
  T* po = tp.val(out);
  int64_t n = tp.size(out);
  const T c1 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T c2 = static_cast<T>(0.044715);
  std::shared_ptr<T[]> tanh_u = scratch<T>(n);
  {
    CArr<T> xa(px, n);
    Arr<T> ta(tanh_u.get(), n);
    ta = (c1 * (xa + c2 * xa.cube())).tanh();
    Arr<T> oa(po, n);
    oa = T(0.5) * xa * (T(1) + ta);
  }
  tp.set_backward(out, [&tp, x, out, n, c1, c2, tanh_u = std::move(tanh_u)] {
    CArr<T> g(tp.grad(out), n);
    CArr<T> xa(tp.val(x), n);
    CArr<T> ta(tanh_u.get(), n);
    Arr<T> gx(tp.grad(x), n);
    auto du = c1 * (T(1) + T(3) * c2 * xa.square());
    gx += g * (T(0.5) * (T(1) + ta) + T(0.5) * xa * (T(1) - ta.square()) * du);
  });
  return out;
}

template <typename T>
int detach(Tape<T>& tp, int x) {
  int out = tp.push(tp.shape(x), "detach");
  std::copy(tp.val(x), tp.val(x) + tp.size(x), tp.val(out));
  return out;  // no backward rule: gradient flow stops here
}

template <typename T>
int sum_all(Tape<T>& tp, int x) {
  int out = tp.push(Shape{1}, "sum_all");
  const T* px = tp.val(x);
  int64_t n = tp.size(x);
  T s = T(0);
  for (int64_t i = 0; i < n; ++i) s += px[i];
  tp.val(out)[0] = s;
  tp.set_backward(out, [&tp, x, out, n] {
    const T g = tp.grad(out)[0];
    T* gx = tp.grad(x);
    for (int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return out;
}

// ---- matrix products --------------------------------------------------------

template <typename T>
int matmul(Tape<T>& tp, int a, int b, bool trans_b) {
  const Shape& sa = tp.shape(a);
  const Shape& sb = tp.shape(b);
  require(sb.size() == 2, "matmul", "rhs must be 2-D, got " + shape_str(sb));
  int64_t k = last_extent(sa);
  int64_t bk = trans_b ? sb[1] : sb[0];
  int64_t n = trans_b ? sb[0] : sb[1];
  require(k == bk, "matmul",
          "inner extents differ: " + shape_str(sa) + (trans_b ? " x T" : " x ") + shape_str(sb));
  int64_t rows = tp.size(a) / k;
  Shape so = drop_last(sa);
  so.push_back(n);
  int out = tp.push(std::move(so), "matmul");
  CMapMat<T> A(tp.val(a), rows, k);
  MapMat<T> C(tp.val(out), rows, n);
  if (trans_b) {
    CMapMat<T> B(tp.val(b), n, k);
    C.noalias() = A * B.transpose();
  } else {
    CMapMat<T> B(tp.val(b), k, n);
    C.noalias() = A * B;
  }
  tp.set_backward(out, [&tp, a, b, out, rows, k, n, trans_b] {
    CMapMat<T> G(tp.grad(out), rows, n);
    CMapMat<T> A2(tp.val(a), rows, k);
    MapMat<T> dA(tp.grad(a), rows, k);
    if (trans_b) {
      CMapMat<T> B2(tp.val(b), n, k);
      MapMat<T> dB(tp.grad(b), n, k);
      dA.noalias() += G * B2;
      dB.noalias() += G.transpose() * A2;
    } else {
      CMapMat<T> B2(tp.val(b), k, n);
      MapMat<T> dB(tp.grad(b), k, n);
      dA.noalias() += G * B2.transpose();
      dB.noalias() += A2.transpose() * G;
    }
  });
  return out;
}

namespace {
// Static slice partition; each worker owns a disjoint output range, so the
// result is bit-identical to the serial loop for any thread count.
template <typename Fn>
void parallel_slices(int64_t count, const Fn& fn) {
  int nt = worker_threads();
  if (nt <= 1 || count <= 1) {
    for (int64_t g = 0; g < count; ++g) fn(g);
    return;
  }
  nt = static_cast<int>(std::min<int64_t>(nt, count));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(nt));
  for (int w = 0; w < nt; ++w) {
    pool.emplace_back([=, &fn] {
      for (int64_t g = w; g < count; g += nt) fn(g);
    });
  }
  for (auto& th : pool) th.join();
}
}  // namespace

template <typename T>
int bmm(Tape<T>& tp, int a, int b, bool trans_b) {
  const Shape& sa = tp.shape(a);
  const Shape& sb = tp.shape(b);
  require(sa.size() == 3 && sb.size() == 3, "bmm",
          "expects 3-D operands, got " + shape_str(sa) + " and " + shape_str(sb));
  require(sa[0] == sb[0], "bmm",
          "batch extents differ: " + shape_str(sa) + " vs " + shape_str(sb));
  int64_t G = sa[0], m = sa[1], k = sa[2];
  int64_t bk = trans_b ? sb[2] : sb[1];
  int64_t n = trans_b ? sb[1] : sb[2];
  require(k == bk, "bmm",
          "inner extents differ: " + shape_str(sa) + (trans_b ? " x T" : " x ") + shape_str(sb));
  int out = tp.push(Shape{G, m, n}, "bmm");
  const T* pa = tp.val(a);
  const T* pb = tp.val(b);
  T* po = tp.val(out);
  parallel_slices(G, [=](int64_t g) {
    CMapMat<T> A(pa + g * m * k, m, k);
    MapMat<T> C(po + g * m * n, m, n);
    if (trans_b) {
      CMapMat<T> B(pb + g * n * k, n, k);
      C.noalias() = A * B.transpose();
    } else {
      CMapMat<T> B(pb + g * k * n, k, n);
      C.noalias() = A * B;
    }
  });
  tp.set_backward(out, [&tp, a, b, out, G, m, k, n, trans_b] {
    const T* g0 = tp.grad(out);
    const T* pa2 = tp.val(a);
    const T* pb2 = tp.val(b);
    T* ga = tp.grad(a);
    T* gb = tp.grad(b);
    parallel_slices(G, [=](int64_t g) {
      CMapMat<T> Gm(g0 + g * m * n, m, n);
      CMapMat<T> A2(pa2 + g * m * k, m, k);
      MapMat<T> dA(ga + g * m * k, m, k);
      if (trans_b) {
        CMapMat<T> B2(pb2 + g * n * k, n, k);
        MapMat<T> dB(gb + g * n * k, n, k);
        dA.noalias() += Gm * B2;
        dB.noalias() += Gm.transpose() * A2;
      } else {
        CMapMat<T> B2(pb2 + g * k * n, k, n);
        MapMat<T> dB(gb + g * k * n, k, n);
        dA.noalias() += Gm * B2.transpose();
        dB.noalias() += A2.transpose() * Gm;
      }
    });
  });
  return out;
}

// ---- normalizations ---------------------------------------------------------

template <typename T>
int softmax_rows(Tape<T>& tp, int x) {
  int64_t n = last_extent(tp.shape(x));
  int64_t rows = tp.size(x) / n;
  const T* px = tp.val(x);
  int out = tp.push(tp.shape(x), "softmax_rows");
  T* po = tp.val(out);
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * n;
    T* orow = po + r * n;
    CArr<T> xa(row, n);
    Arr<T> oa(orow, n);
    T m = xa.maxCoeff();
    oa = (xa - m).exp();
    T s = oa.sum();
    // Finite input guarantees s >= 1 (the max element maps to exp(0));
    // anything else means a NaN slipped in upstream.
    if (!(s >= T(1))) {
      for (int64_t j = 0; j < n; ++j)
        if (std::isnan(static_cast<double>(row[j])))
          throw NumericError("softmax_rows: NaN in input at flat index " +
                             std::to_string(r * n + j));
      throw NumericError("softmax_rows: non-finite input in row " + std::to_string(r));
    }
    oa /= s;
  }
  tp.set_backward(out, [&tp, x, out, rows, n] {
    const T* g = tp.grad(out);
    const T* y = tp.val(out);
    T* gx = tp.grad(x);
    for (int64_t r = 0; r < rows; ++r) {
      CArr<T> gr(g + r * n, n);
      CArr<T> yr(y + r * n, n);
      T dot = (gr * yr).sum();
      Arr<T>(gx + r * n, n) += yr * (gr - dot);
    }
  });
  return out;
}

template <typename T>
int causal_softmax(Tape<T>& tp, int x) {
  const Shape& s = tp.shape(x);
  require(s.size() == 3 && s[1] == s[2], "causal_softmax",
          "expects [G x S x S], got " + shape_str(s));
  int64_t G = s[0], S = s[1];
  int out = tp.push(s, "causal_softmax");
  const T* px = tp.val(x);
  T* po = tp.val(out);
  for (int64_t g = 0; g < G; ++g) {
    for (int64_t i = 0; i < S; ++i) {
      const T* row = px + (g * S + i) * S;
      T* orow = po + (g * S + i) * S;
      int64_t valid = i + 1;
      CArr<T> xa(row, valid);
      Arr<T> oa(orow, valid);
      T m = xa.maxCoeff();
      oa = (xa - m).exp();
      T sum = oa.sum();
      // Finite input gives sum >= 1 (max element -> exp(0)); see softmax_rows.
      if (!(sum >= T(1)))
        throw NumericError("causal_softmax: non-finite input at slice " + std::to_string(g) +
                           " row " + std::to_string(i));
      oa /= sum;
      std::fill(orow + valid, orow + S, T(0));  // masked region: exact zeros
    }
  }
  tp.set_backward(out, [&tp, x, out, G, S] {
    const T* g0 = tp.grad(out);
    const T* y = tp.val(out);
    T* gx = tp.grad(x);
    for (int64_t g = 0; g < G; ++g) {
      for (int64_t i = 0; i < S; ++i) {
        int64_t base = (g * S + i) * S;
        int64_t valid = i + 1;
        CArr<T> gr(g0 + base, valid);
        CArr<T> yr(y + base, valid);
        T dot = (gr * yr).sum();
        Arr<T>(gx + base, valid) += yr * (gr - dot);
      }
    }
  });
  return out;
}

template <typename T>
int layer_norm(Tape<T>& tp, int x, int gain, int bias, double eps) {
  if (eps <= 0) throw ContractError("layer_norm: eps must be > 0");
  int64_t d = last_extent(tp.shape(x));
  require(tp.shape(gain) == Shape{d} && tp.shape(bias) == Shape{d}, "layer_norm",
          "gain " + shape_str(tp.shape(gain)) + " / bias " + shape_str(tp.shape(bias)) +
              " do not match last extent of " + shape_str(tp.shape(x)));
  int64_t rows = tp.size(x) / d;
  int out = tp.push(tp.shape(x), "layer_norm");
  const T* px = tp.val(x);
  const T* pg = tp.val(gain);
  const T* pb = tp.val(bias);
  T* po = tp.val(out);
  std::shared_ptr<T[]> xhat = scratch<T>(rows * d);
  std::shared_ptr<T[]> rstd = scratch<T>(rows);
  for (int64_t r = 0; r < rows; ++r) {
    CArr<T> row(px + r * d, d);
    T mu = row.sum() / static_cast<T>(d);
    T var = (row - mu).square().sum() / static_cast<T>(d);
    T rs = T(1) / std::sqrt(var + static_cast<T>(eps));
    rstd[static_cast<size_t>(r)] = rs;
    Arr<T> xh(xhat.get() + r * d, d);
    xh = (row - mu) * rs;
    Arr<T>(po + r * d, d) = CArr<T>(pg, d) * xh + CArr<T>(pb, d);
  }
  tp.set_backward(out, [&tp, x, gain, bias, out, rows, d, xhat = std::move(xhat),
                        rstd = std::move(rstd)] {
    const T* g0 = tp.grad(out);
    CArr<T> pg2(tp.val(gain), d);
    T* gx = tp.grad(x);
    Arr<T> gg(tp.grad(gain), d);
    Arr<T> gb(tp.grad(bias), d);
    for (int64_t r = 0; r < rows; ++r) {
      CArr<T> gr(g0 + r * d, d);
      CArr<T> xh(xhat.get() + r * d, d);
      T rs = rstd[static_cast<size_t>(r)];
      auto dxh = gr * pg2;
      T s1 = dxh.sum() / static_cast<T>(d);
      T s2 = (dxh * xh).sum() / static_cast<T>(d);
      Arr<T>(gx + r * d, d) += rs * (dxh - s1 - xh * s2);
      gg += gr * xh;
      gb += gr;
    }
  });
  return out;
}

// ---- gathers and head reshapes ----------------------------------------------

template <typename T>
int embedding_gather(Tape<T>& tp, int table, const std::vector<int32_t>& ids, Shape lead) {
  const Shape& st = tp.shape(table);
  require(st.size() == 2, "embedding_gather", "table must be 2-D, got " + shape_str(st));
  int64_t V = st[0], d = st[1];
  if (static_cast<int64_t>(ids.size()) != numel(lead))
    throw ShapeError("embedding_gather: " + std::to_string(ids.size()) +
                     " ids do not fill leading shape " + shape_str(lead));
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= V)
      throw ContractError("embedding_gather: id " + std::to_string(ids[i]) + " at position " +
                          std::to_string(i) + " outside [0," + std::to_string(V) + ")");
  Shape so = lead;
  so.push_back(d);
  int out = tp.push(std::move(so), "embedding_gather");
  const T* pt = tp.val(table);
  T* po = tp.val(out);
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(pt + static_cast<int64_t>(ids[i]) * d, pt + (static_cast<int64_t>(ids[i]) + 1) * d,
              po + static_cast<int64_t>(i) * d);
  tp.set_backward(out, [&tp, table, out, ids, d] {
    const T* g = tp.grad(out);
    T* gt = tp.grad(table);
    // Ascending occurrence order: repeated ids accumulate deterministically.
    for (size_t i = 0; i < ids.size(); ++i) {
      Arr<T>(gt + static_cast<int64_t>(ids[i]) * d, d) +=
          CArr<T>(g + static_cast<int64_t>(i) * d, d);
    }
  });
  return out;
}

template <typename T>
int split_heads(Tape<T>& tp, int x, int n_heads) {
  const Shape& s = tp.shape(x);
  require(s.size() == 3, "split_heads", "expects [B x T x d], got " + shape_str(s));
  int64_t B = s[0], S = s[1], d = s[2];
  if (n_heads < 1 || d % n_heads != 0)
    throw ContractError("split_heads: d=" + std::to_string(d) + " not divisible by n_heads=" +
                        std::to_string(n_heads));
  int64_t H = n_heads, hd = d / H;
  int out = tp.push(Shape{B * H, S, hd}, "split_heads");
  const T* px = tp.val(x);
  T* po = tp.val(out);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t t = 0; t < S; ++t)
        std::copy(px + (b * S + t) * d + h * hd, px + (b * S + t) * d + (h + 1) * hd,
                  po + ((b * H + h) * S + t) * hd);
  tp.set_backward(out, [&tp, x, out, B, S, d, H, hd] {
    const T* g = tp.grad(out);
    T* gx = tp.grad(x);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t t = 0; t < S; ++t) {
          const T* src = g + ((b * H + h) * S + t) * hd;
          T* dst = gx + (b * S + t) * d + h * hd;
          for (int64_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  });
  return out;
}

template <typename T>
int merge_heads(Tape<T>& tp, int x, int n_heads) {
  const Shape& s = tp.shape(x);
  require(s.size() == 3, "merge_heads", "expects [B*H x T x hd], got " + shape_str(s));
  int64_t G = s[0], S = s[1], hd = s[2];
  if (n_heads < 1 || G % n_heads != 0)
    throw ContractError("merge_heads: batch extent " + std::to_string(G) +
                        " not divisible by n_heads=" + std::to_string(n_heads));
  int64_t H = n_heads, B = G / H, d = H * hd;
  int out = tp.push(Shape{B, S, d}, "merge_heads");
  const T* px = tp.val(x);
  T* po = tp.val(out);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < H; ++h)
      for (int64_t t = 0; t < S; ++t)
        std::copy(px + ((b * H + h) * S + t) * hd, px + ((b * H + h) * S + t + 1) * hd,
                  po + (b * S + t) * d + h * hd);
  tp.set_backward(out, [&tp, x, out, B, S, d, H, hd] {
    const T* g = tp.grad(out);
    T* gx = tp.grad(x);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t t = 0; t < S; ++t) {
          const T* src = g + (b * S + t) * d + h * hd;
          T* dst = gx + ((b * H + h) * S + t) * hd;
          for (int64_t j = 0; j < hd; ++j) dst[j] += src[j];
        }
  });
  return out;
}

// ---- loss -------------------------------------------------------------------

template <typename T>
int cross_entropy_logits(Tape<T>& tp, int logits, const std::vector<int32_t>& targets,
                         int32_t ignore_index) {
  int64_t V = last_extent(tp.shape(logits));
  int64_t rows = tp.size(logits) / V;
  if (static_cast<int64_t>(targets.size()) != rows)
    throw ShapeError("cross_entropy_logits: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " logit rows");
  for (int64_t r = 0; r < rows; ++r) {
    int32_t t = targets[static_cast<size_t>(r)];
    if (t != ignore_index && (t < 0 || t >= V))
      throw ContractError("cross_entropy_logits: target " + std::to_string(t) + " at row " +
                          std::to_string(r) + " outside [0," + std::to_string(V) + ")");
  }
  const T* pz = tp.val(logits);
  std::shared_ptr<T[]> probs = scratch<T>(rows * V);
  int64_t counted = 0;
  // Accumulate the mean in double regardless of T: the sum over thousands of
  // rows is where f32 accumulation error would actually show up.
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    int32_t tgt = targets[static_cast<size_t>(r)];
    if (tgt == ignore_index) continue;
    const T* row = pz + r * V;
    T* prow = probs.get() + r * V;
    CArr<T> za(row, V);
    Arr<T> pa(prow, V);
    T m = za.maxCoeff();
    pa = (za - m).exp();
    T s = pa.sum();
    if (!(s >= T(1)))  // finite logits give s >= 1; see softmax_rows
      throw NumericError("cross_entropy_logits: non-finite logits in row " + std::to_string(r));
    pa /= s;
    total += static_cast<double>(m) + std::log(static_cast<double>(s)) -
             static_cast<double>(row[tgt]);
    ++counted;
  }
  if (counted == 0)
    throw ContractError("cross_entropy_logits: all " + std::to_string(rows) +
                        " positions ignored; mean undefined");
  int out = tp.push(Shape{1}, "cross_entropy_logits");
  tp.val(out)[0] = static_cast<T>(total / static_cast<double>(counted));
  tp.set_backward(out, [&tp, logits, out, rows, V, targets, ignore_index, counted,
                        probs = std::move(probs)] {
    const T g = tp.grad(out)[0];
    T* gz = tp.grad(logits);
    const T inv = T(1) / static_cast<T>(counted);
    for (int64_t r = 0; r < rows; ++r) {
      int32_t tgt = targets[static_cast<size_t>(r)];
      if (tgt == ignore_index) continue;
      T* grow = gz + r * V;
      Arr<T>(grow, V) += (g * inv) * CArr<T>(probs.get() + r * V, V);
      grow[tgt] -= g * inv;
    }
  });
  return out;
}

// ---- finite differences -----------------------------------------------------

template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double h) {
  if (h <= 0) throw ContractError("finite_diff_grad: h must be > 0");
  Tensor<T> probe = x;
  Tensor<T> g = Tensor<T>::zeros(x.shape);
  const T step = static_cast<T>(h);
  for (size_t i = 0; i < probe.data.size(); ++i) {
    T keep = probe.data[i];
    probe.data[i] = keep + step;
    T fp = f(probe);
    probe.data[i] = keep - step;
    T fm = f(probe);
    probe.data[i] = keep;
    g.data[i] = (fp - fm) / (T(2) * step);
  }
  return g;
}

// ---- explicit instantiations --------------------------------------------------

template class Tape<float>;
template class Tape<double>;

#define CTXLM_INSTANTIATE_OPS(T)                                                            \
  template int add<T>(Tape<T>&, int, int);                                                  \
  template int scale<T>(Tape<T>&, int, double);                                             \
  template int add_bias<T>(Tape<T>&, int, int);                                             \
  template int gelu<T>(Tape<T>&, int);                                                      \
  template int detach<T>(Tape<T>&, int);                                                    \
  template int sum_all<T>(Tape<T>&, int);                                                   \
  template int matmul<T>(Tape<T>&, int, int, bool);                                         \
  template int bmm<T>(Tape<T>&, int, int, bool);                                            \
  template int softmax_rows<T>(Tape<T>&, int);                                              \
  template int causal_softmax<T>(Tape<T>&, int);                                            \
  template int layer_norm<T>(Tape<T>&, int, int, int, double);                              \
  template int embedding_gather<T>(Tape<T>&, int, const std::vector<int32_t>&, Shape);      \
  template int split_heads<T>(Tape<T>&, int, int);                                          \
  template int merge_heads<T>(Tape<T>&, int, int);                                          \
  template int cross_entropy_logits<T>(Tape<T>&, int, const std::vector<int32_t>&, int32_t); \
  template Tensor<T> finite_diff_grad<T>(const std::function<T(const Tensor<T>&)>&,         \
                                         const Tensor<T>&, double);

CTXLM_INSTANTIATE_OPS(float)
CTXLM_INSTANTIATE_OPS(double)

#undef CTXLM_INSTANTIATE_OPS

}  // namespace ctxlm
