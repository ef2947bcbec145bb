#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <doctest.h>

#include "ctxlm/rng.hpp"
#include "ctxlm/tensor.hpp"

namespace testutil {

// Uniform values in [-1, 1), reproducible per label.
inline ctxlm::Tensor<double> rand_tensor(ctxlm::Shape shape, uint64_t seed, const char* label) {
  ctxlm::SplitMix64 g = ctxlm::named_stream(seed, label);
  ctxlm::Tensor<double> t = ctxlm::Tensor<double>::zeros(std::move(shape));
  for (auto& v : t.data) v = 2.0 * g.next_double() - 1.0;
  return t;
}

inline std::vector<int32_t> rand_ids(int64_t n, int64_t vocab, uint64_t seed, const char* label) {
  ctxlm::SplitMix64 g = ctxlm::named_stream(seed, label);
  std::vector<int32_t> out(static_cast<size_t>(n));
  for (auto& v : out) v = static_cast<int32_t>(g.next_below(static_cast<uint64_t>(vocab)));
  return out;
}

inline double rel_err(double got, double want, double floor = 1e-8) {
  return std::abs(got - want) / std::max({std::abs(got), std::abs(want), floor});
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0.0;
  for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <typename T>
std::vector<T> node_values(ctxlm::Tape<T>& tp, int node) {
  return std::vector<T>(tp.val(node), tp.val(node) + tp.size(node));
}

// Tape gradient of a scalar graph w.r.t. one input tensor, checked against
// the central-difference oracle coordinate by coordinate. `build` receives a
// tape and the input's node and must return a scalar node; it is re-invoked
// on probe tapes, so it must not capture tape state.
template <typename Build>
void check_grad_against_fd(ctxlm::Tensor<double> x, const Build& build, double tol = 1e-6,
                           double h = 1e-6) {
  std::vector<double> analytic;
  {
    ctxlm::Tape<double> tp;
    int xi = tp.leaf(x);
    int loss = build(tp, xi);
    REQUIRE(tp.size(loss) == 1);
    tp.backward(loss);
    analytic = x.grad;
  }
  auto f = [&](const ctxlm::Tensor<double>& probe) {
    ctxlm::Tensor<double> tmp = probe;
    ctxlm::Tape<double> tp(/*record_grads=*/false);
    int xi = tp.leaf(tmp);
    int loss = build(tp, xi);
    return tp.val(loss)[0];
  };
  ctxlm::Tensor<double> fd = ctxlm::finite_diff_grad<double>(f, x, h);
  double worst = 0.0;
  for (size_t i = 0; i < fd.data.size(); ++i)
    worst = std::max(worst, rel_err(analytic[i], fd.data[i], 1e-6));
  CHECK(worst < tol);
}

// FD check for a tensor the graph reads in place via leaf deduplication
// (weights inside parameter structs). Perturbs `param.data` directly, so
// `forward` must rebuild the graph from the live structs on every call and
// return the scalar loss node. The denominator floor makes "relative" sane
// near zero: it turns the criterion into |an-fd| < tol*max(|an|,|fd|,floor),
// i.e. an absolute cutoff of tol*floor = 1e-8 for tiny coordinates, which
// sits above the ~1e-9 central-difference rounding noise while still
// flagging any real backward-rule bug (those show up at the gradient's own
// magnitude, orders above the floor).
template <typename Forward>
void check_param_grad(ctxlm::Tensor<double>& param, const Forward& forward, double tol = 1e-5,
                      double h = 1e-5, double floor = 1e-3) {
  std::vector<double> analytic;
  {
    ctxlm::Tape<double> tp;
    int loss = forward(tp);
    REQUIRE(tp.size(loss) == 1);
    tp.backward(loss);
    analytic = param.grad;
  }
  REQUIRE(analytic.size() == param.data.size());
  auto eval = [&] {
    ctxlm::Tape<double> tp(/*record_grads=*/false);
    int loss = forward(tp);
    return tp.val(loss)[0];
  };
  double worst = 0.0;
  for (size_t i = 0; i < param.data.size(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + h;
    const double fp = eval();
    param.data[i] = saved - h;
    const double fm = eval();
    param.data[i] = saved;
    worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2.0 * h), floor));
  }
  INFO("worst relative error ", worst);
  CHECK(worst < tol);
}

}  // namespace testutil
