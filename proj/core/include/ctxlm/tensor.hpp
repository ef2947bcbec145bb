#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <new>
#include <string>
#include <unordered_map>
#include <vector>

#include "ctxlm/common.hpp"

namespace ctxlm {

// Dense row-major array. Parameters live in Tensor objects that outlive any
// tape; activations live inside Tape nodes. grad stays empty until a tape
// leaf wraps the tensor (or ensure_grad is called).
template <typename T>
struct Tensor {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  std::string name;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (numel(shape) != static_cast<int64_t>(data.size()))
      throw ShapeError("Tensor: shape " + shape_str(shape) + " does not hold " +
                       std::to_string(data.size()) + " values");
  }

  static Tensor zeros(Shape s) {
    Tensor t;
    t.data.assign(static_cast<size_t>(numel(s)), T(0));
    t.shape = std::move(s);
    return t;
  }
  static Tensor full(Shape s, T v) {
    Tensor t = zeros(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }

  // Allocates a zeroed gradient buffer if absent; never clobbers one that
  // already holds accumulated values.
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Test hook: corrupts the backward contribution of every node whose op name
// matches, so gradient-verification failure paths can be exercised on demand.
namespace fault {
void corrupt_backward(const std::string& op_name);
void clear();
const std::string& active();
}  // namespace fault

// Dynamic reverse-mode tape, rebuilt per forward pass. Nodes are addressed
// by index; backward closures capture indices (never raw pointers) and fetch
// buffers through the tape, which keeps them valid as the tape grows.
//
// Determinism: every reduction runs in one fixed order — either an
// ascending scalar loop or Eigen's fixed-blocking kernels — so repeated
// runs of the same binary are bit-identical. Two backward passes over an
// unchanged graph are bit-identical too (backward zeroes every gradient
// buffer before replaying).
template <typename T>
class Tape {
 public:
  // record_grads=false skips gradient buffers and backward closures —
  // evaluation/generation mode.
  explicit Tape(bool record_grads = true) : record_(record_grads) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Uninitialized owned node; the op must write every value element.
  int push(Shape shape, const char* op_name);
  // Wraps external storage (a parameter). Repeated calls with the same
  // tensor return the same node, so gradients from all uses accumulate into
  // one buffer — the sum rule for shared weights (e.g. tied embeddings).
  int leaf(Tensor<T>& t);
  // Owned node with fixed values and no gradient flow.
  int constant(Shape shape, std::vector<T> values, const char* op_name = "const");

  void set_backward(int node, std::function<void()> fn);

  T* val(int node);
  const T* val(int node) const;
  // Gradient buffer, allocated on demand. backward() zeroes every buffer
  // before replaying, so contents are unspecified until the first backward
  // pass. Only meaningful while record_grads is on.
  T* grad(int node);
  const Shape& shape(int node) const { return nodes_[check(node)].shape; }
  int64_t size(int node) const { return numel(nodes_[check(node)].shape); }
  const char* op_name(int node) const { return nodes_[check(node)].op; }
  size_t num_nodes() const { return nodes_.size(); }
  bool grads_enabled() const { return record_; }

  // Zeroes every gradient buffer (including wrapped parameter tensors),
  // seeds d(loss)/d(loss) = 1, and replays backward rules in reverse
  // recording order. Gradients from multiple consumers add.
  void backward(int loss);
  // Whether the active fault-injection target fired during the last
  // backward pass (see fault::corrupt_backward).
  bool fault_fired() const { return fault_fired_; }

 private:
  // Owned buffers skip value-initialization: every op writes its whole
  // output and backward() zero-fills gradients itself, so default zeroing
  // would re-touch hundreds of MB per training step for nothing.
  //
  // They are also 64-byte aligned. Vectorized kernels peel scalar
  // head/tail iterations up to the pointer's alignment boundary, so the
  // evaluation order inside a reduction — and therefore the result's last
  // bit — would otherwise depend on where the allocator happened to place
  // the buffer. Fixing the alignment makes every kernel's traversal a pure
  // function of the operand shape, which the bit-reproducibility
  // guarantees in this library rely on.
  struct RawBuf {
    struct Deleter {
      void operator()(T* p) const { ::operator delete[](p, std::align_val_t{64}); }
    };
    std::unique_ptr<T[], Deleter> ptr;
    size_t count = 0;
    void alloc(size_t n) {
      ptr.reset(static_cast<T*>(::operator new[](n * sizeof(T), std::align_val_t{64})));
      count = n;
    }
    T* data() { return ptr.get(); }
    const T* data() const { return ptr.get(); }
    size_t size() const { return count; }
  };

  struct Node {
    Shape shape;
    RawBuf value;    // owned storage; empty when external
    RawBuf gradbuf;  // owned gradient; empty when external
    Tensor<T>* external = nullptr;
    std::function<void()> back;
    const char* op = "";
  };

  int check(int node) const {
    if (node < 0 || static_cast<size_t>(node) >= nodes_.size())
      throw ContractError("Tape: node index " + std::to_string(node) + " out of range");
    return node;
  }

  std::deque<Node> nodes_;
  std::unordered_map<const void*, int> leaf_index_;
  bool record_;
  bool fault_fired_ = false;
};

// ---- differentiable operations ---------------------------------------------
// All ops record onto the given tape and return the output node index.

// Elementwise sum; shapes must match exactly.
template <typename T> int add(Tape<T>& tp, int a, int b);
// Multiply by a compile-time-constant scalar.
template <typename T> int scale(Tape<T>& tp, int a, double s);
// x: [rows..., n], bias: [n]; bias broadcast over rows.
template <typename T> int add_bias(Tape<T>& tp, int x, int bias);
// GELU, tanh approximation (GPT-2 convention).
template <typename T> int gelu(Tape<T>& tp, int x);
// Value copy that blocks gradient flow.
template <typename T> int detach(Tape<T>& tp, int x);
// Scalar sum of all elements.
template <typename T> int sum_all(Tape<T>& tp, int x);

// a: [..., k] treated as (numel/k) rows; b: [k, n] (or [n, k] with trans_b).
// Output: a's leading extents + [n].
template <typename T> int matmul(Tape<T>& tp, int a, int b, bool trans_b = false);
// Batched: a [G, m, k], b [G, k, n] (or [G, n, k] with trans_b) -> [G, m, n].
template <typename T> int bmm(Tape<T>& tp, int a, int b, bool trans_b = false);

// Softmax over the last extent, max-shifted per row.
template <typename T> int softmax_rows(Tape<T>& tp, int x);
// x: [G, S, S]; row i normalized over columns 0..i, columns > i exactly 0.
template <typename T> int causal_softmax(Tape<T>& tp, int x);

// x: [..., d]; gain/bias: [d].
template <typename T> int layer_norm(Tape<T>& tp, int x, int gain, int bias, double eps);

// table: [V, d]; output: lead + [d], row i = table[ids[i]].
template <typename T>
int embedding_gather(Tape<T>& tp, int table, const std::vector<int32_t>& ids, Shape lead);

// [B, T, d] -> [B*H, T, d/H] and back.
template <typename T> int split_heads(Tape<T>& tp, int x, int n_heads);
template <typename T> int merge_heads(Tape<T>& tp, int x, int n_heads);

// logits: [..., V] treated as rows; targets per row; rows whose target is
// ignore_index carry no loss. Returns scalar mean NLL over counted rows.
template <typename T>
int cross_entropy_logits(Tape<T>& tp, int logits, const std::vector<int32_t>& targets,
                         int32_t ignore_index = -1);

// Central differences (f(x+h·e_i) − f(x−h·e_i)) / (2h) per coordinate.
// Deliberately independent of the tape machinery — it is the oracle the
// tape is checked against.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x,
                           double h);

}  // namespace ctxlm
