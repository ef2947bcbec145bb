#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctxlm/tensor.hpp"
#include "testutil.hpp"

using namespace ctxlm;
using testutil::check_grad_against_fd;
using testutil::rand_tensor;
using testutil::rel_err;

using testutil::node_values;

TEST_CASE("finite_diff_grad matches a closed form") {
  // f(x) = sum x^2 has gradient exactly 2x; validates the oracle itself.
  Tensor<double> x = rand_tensor({5}, 3, "fd.self");
  auto f = [](const Tensor<double>& t) {
    double s = 0.0;
    for (double v : t.data) s += v * v;
    return s;
  };
  Tensor<double> g = finite_diff_grad<double>(f, x, 1e-6);
  for (size_t i = 0; i < x.data.size(); ++i)
    CHECK(std::abs(g.data[i] - 2.0 * x.data[i]) < 1e-8);
  CHECK_THROWS_AS(finite_diff_grad<double>(f, x, 0.0), ContractError);
}

TEST_CASE("matmul forward against a hand-multiplied example") {
  Tape<double> tp;
  Tensor<double> a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor<double> b({3, 2}, {7, 8, 9, 10, 11, 12});
  int c = matmul(tp, tp.leaf(a), tp.leaf(b));
  // [1 2 3; 4 5 6] * [7 8; 9 10; 11 12] = [58 64; 139 154], by hand.
  CHECK(node_values(tp, c) == std::vector<double>{58, 64, 139, 154});
  CHECK(tp.shape(c) == Shape{2, 2});
}

TEST_CASE("matmul against a brute-force triple loop on random operands") {
  Tensor<double> a = rand_tensor({3, 4}, 11, "mm.a");
  Tensor<double> b = rand_tensor({4, 2}, 11, "mm.b");
  Tape<double> tp;
  int c = matmul(tp, tp.leaf(a), tp.leaf(b));
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 2; ++j) {
      double want = 0.0;
      for (int64_t k = 0; k < 4; ++k) want += a.data[i * 4 + k] * b.data[k * 2 + j];
      CHECK(std::abs(tp.val(c)[i * 2 + j] - want) < 1e-12);
    }
}

// Auxiliary operands live at test scope: Tape::leaf wraps external storage,
// so anything wrapped must outlive every tape built against it.
TEST_CASE("matmul gradients vs central differences, both operand slots") {
  Tensor<double> a = rand_tensor({3, 4}, 12, "mmg.a");
  Tensor<double> b = rand_tensor({4, 2}, 12, "mmg.b");
  check_grad_against_fd(a, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, matmul(tp, xi, tp.leaf(b)));
  });
  check_grad_against_fd(b, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, matmul(tp, tp.leaf(a), xi));
  });
  // Transposed right operand: same contraction, stored as [n, k].
  Tensor<double> bt = rand_tensor({2, 4}, 12, "mmg.bt");
  check_grad_against_fd(bt, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, matmul(tp, tp.leaf(a), xi, /*trans_b=*/true));
  });
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Tape<double> tp;
  Tensor<double> a = rand_tensor({2, 3}, 1, "bad.a");
  Tensor<double> b = rand_tensor({4, 2}, 1, "bad.b");
  CHECK_THROWS_AS(matmul(tp, tp.leaf(a), tp.leaf(b)), ShapeError);
}

TEST_CASE("bmm equals per-slice matmul and passes gradcheck") {
  Tensor<double> a = rand_tensor({2, 3, 4}, 13, "bmm.a");
  Tensor<double> b = rand_tensor({2, 4, 2}, 13, "bmm.b");
  Tape<double> tp;
  int c = bmm(tp, tp.leaf(a), tp.leaf(b));
  for (int64_t g = 0; g < 2; ++g)
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 2; ++j) {
        double want = 0.0;
        for (int64_t k = 0; k < 4; ++k)
          want += a.data[(g * 3 + i) * 4 + k] * b.data[(g * 4 + k) * 2 + j];
        CHECK(std::abs(tp.val(c)[(g * 3 + i) * 2 + j] - want) < 1e-12);
      }
  check_grad_against_fd(a, [&](Tape<double>& t2, int xi) {
    return sum_all(t2, bmm(t2, xi, t2.leaf(b)));
  });
  check_grad_against_fd(b, [&](Tape<double>& t2, int xi) {
    return sum_all(t2, bmm(t2, t2.leaf(a), xi));
  });
}

TEST_CASE("softmax of [0, ln 3] is exactly [1/4, 3/4]") {
  Tape<double> tp;
  Tensor<double> x({1, 2}, {0.0, std::log(3.0)});
  int y = softmax_rows(tp, tp.leaf(x));
  CHECK(tp.val(y)[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(tp.val(y)[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one") {
  Tensor<double> x = rand_tensor({4, 7}, 14, "sm.x");
  Tape<double> tp;
  int y = softmax_rows(tp, tp.leaf(x));
  for (int64_t r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int64_t j = 0; j < 7; ++j) s += tp.val(y)[r * 7 + j];
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

// A weighted sum keeps the loss sensitive to individual entries (plain
// sum_all of a softmax row has an exactly-zero gradient).
TEST_CASE("softmax gradient vs finite differences through a weighted loss") {
  Tensor<double> x = rand_tensor({3, 5}, 15, "smg.x");
  Tensor<double> w = rand_tensor({5, 1}, 15, "smg.w");
  check_grad_against_fd(x, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, matmul(tp, softmax_rows(tp, xi), tp.leaf(w)));
  });
}

TEST_CASE("softmax refuses NaN input and names the position") {
  Tape<double> tp;
  Tensor<double> x({1, 3}, {0.0, std::nan(""), 1.0});
  CHECK_THROWS_AS(softmax_rows(tp, tp.leaf(x)), NumericError);
}

TEST_CASE("causal softmax: prefix rows normalized, strict upper triangle exactly zero") {
  Tensor<double> x = rand_tensor({2, 6, 6}, 16, "cs.x");
  Tape<double> tp;
  int y = causal_softmax(tp, tp.leaf(x));
  const double* py = tp.val(y);
  for (int64_t g = 0; g < 2; ++g)
    for (int64_t i = 0; i < 6; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j <= i; ++j) s += py[(g * 6 + i) * 6 + j];
      CHECK(std::abs(s - 1.0) < 1e-12);
      for (int64_t j = i + 1; j < 6; ++j) CHECK(py[(g * 6 + i) * 6 + j] == 0.0);
    }
}

TEST_CASE("causal softmax gradient vs finite differences") {
  Tensor<double> x = rand_tensor({1, 4, 4}, 17, "csg.x");
  Tensor<double> w = rand_tensor({1, 4, 4}, 17, "csg.w");
  check_grad_against_fd(x, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, bmm(tp, causal_softmax(tp, xi), tp.leaf(w)));
  });
}

TEST_CASE("layer_norm of [1,2,3,4] matches the hand-computed normalization") {
  Tape<double> tp;
  Tensor<double> x({1, 4}, {1, 2, 3, 4});
  Tensor<double> g = Tensor<double>::full({4}, 1.0);
  Tensor<double> b = Tensor<double>::zeros({4});
  int y = layer_norm(tp, tp.leaf(x), tp.leaf(g), tp.leaf(b), 1e-5);
  // mean 2.5, var 1.25: xhat = (x-2.5)/sqrt(1.25+1e-5), computed offline.
  const double want[4] = {-1.3416354199689269, -0.447211806656309, 0.447211806656309,
                          1.3416354199689269};
  for (int i = 0; i < 4; ++i) CHECK(tp.val(y)[i] == doctest::Approx(want[i]).epsilon(1e-12));
}

TEST_CASE("layer_norm gradients vs finite differences for x, gain, and bias") {
  Tensor<double> x = rand_tensor({3, 6}, 18, "ln.x");
  Tensor<double> g = rand_tensor({6}, 18, "ln.g");
  Tensor<double> b = rand_tensor({6}, 18, "ln.b");
  Tensor<double> w = rand_tensor({6, 1}, 18, "ln.w");
  auto weighted = [&](Tape<double>& tp, int yi) {
    return sum_all(tp, matmul(tp, yi, tp.leaf(w)));
  };
  check_grad_against_fd(x, [&](Tape<double>& tp, int xi) {
    return weighted(tp, layer_norm(tp, xi, tp.leaf(g), tp.leaf(b), 1e-5));
  });
  check_grad_against_fd(g, [&](Tape<double>& tp, int gi) {
    return weighted(tp, layer_norm(tp, tp.leaf(x), gi, tp.leaf(b), 1e-5));
  });
  check_grad_against_fd(b, [&](Tape<double>& tp, int bi) {
    return weighted(tp, layer_norm(tp, tp.leaf(x), tp.leaf(g), bi, 1e-5));
  });
  Tape<double> tp;
  CHECK_THROWS_AS(layer_norm(tp, tp.leaf(x), tp.leaf(g), tp.leaf(b), 0.0), ContractError);
}

TEST_CASE("gelu matches offline values of the tanh approximation") {
  Tape<double> tp;
  Tensor<double> x({3}, {1.0, -2.0, 0.5});
  int y = gelu(tp, tp.leaf(x));
  CHECK(tp.val(y)[0] == doctest::Approx(0.84119199060827676).epsilon(1e-14));
  CHECK(tp.val(y)[1] == doctest::Approx(-0.045402305912224938).epsilon(1e-14));
  CHECK(tp.val(y)[2] == doctest::Approx(0.34571400982514394).epsilon(1e-14));
}

TEST_CASE("gelu gradient vs finite differences") {
  Tensor<double> x = rand_tensor({11}, 19, "gelu.x");
  check_grad_against_fd(x, [](Tape<double>& tp, int xi) { return sum_all(tp, gelu(tp, xi)); });
}

TEST_CASE("add, scale, add_bias forward and gradients") {
  Tensor<double> a = rand_tensor({2, 3}, 20, "ew.a");
  Tensor<double> b = rand_tensor({2, 3}, 20, "ew.b");
  Tensor<double> bias = rand_tensor({3}, 20, "ew.bias");
  {
    Tape<double> tp;
    int s = add(tp, tp.leaf(a), tp.leaf(b));
    for (size_t i = 0; i < a.data.size(); ++i)
      CHECK(tp.val(s)[i] == a.data[i] + b.data[i]);
    int sc = scale(tp, s, -2.5);
    for (size_t i = 0; i < a.data.size(); ++i)
      CHECK(tp.val(sc)[i] == doctest::Approx(-2.5 * (a.data[i] + b.data[i])).epsilon(1e-15));
  }
  check_grad_against_fd(a, [&](Tape<double>& tp, int xi) {
    return sum_all(tp, scale(tp, add(tp, xi, tp.leaf(b)), 3.0));
  });
  check_grad_against_fd(bias, [&](Tape<double>& tp, int bi) {
    return sum_all(tp, gelu(tp, add_bias(tp, tp.leaf(a), bi)));
  });
}

TEST_CASE("detach stops gradient flow entirely") {
  Tensor<double> x = rand_tensor({4}, 21, "det.x");
  Tape<double> tp;
  int xi = tp.leaf(x);
  int loss = sum_all(tp, detach(tp, gelu(tp, xi)));
  tp.backward(loss);
  for (double g : x.grad) CHECK(g == 0.0);
}

TEST_CASE("embedding gather picks rows and accumulates repeated-id gradients") {
  Tensor<double> table = rand_tensor({5, 3}, 22, "emb.t");
  std::vector<int32_t> ids = {4, 0, 4, 2};
  Tape<double> tp;
  int ti = tp.leaf(table);
  int out = embedding_gather(tp, ti, ids, Shape{4});
  for (size_t i = 0; i < ids.size(); ++i)
    for (int64_t j = 0; j < 3; ++j)
      CHECK(tp.val(out)[i * 3 + j] == table.data[ids[i] * 3 + j]);
  int loss = sum_all(tp, out);
  tp.backward(loss);
  // d(sum)/d(table[r]) = number of times r was gathered.
  const double occ[5] = {1, 0, 1, 0, 2};
  for (int64_t r = 0; r < 5; ++r)
    for (int64_t j = 0; j < 3; ++j) CHECK(table.grad[r * 3 + j] == occ[r]);
  CHECK_THROWS_AS(embedding_gather(tp, ti, std::vector<int32_t>{5}, Shape{1}), ContractError);
}

TEST_CASE("split_heads/merge_heads round-trip is the identity") {
  Tensor<double> x = rand_tensor({2, 3, 8}, 23, "heads.x");
  Tape<double> tp;
  int xi = tp.leaf(x);
  int rt = merge_heads(tp, split_heads(tp, xi, 4), 4);
  for (size_t i = 0; i < x.data.size(); ++i) CHECK(tp.val(rt)[i] == x.data[i]);
  check_grad_against_fd(x, [](Tape<double>& t2, int n) {
    return sum_all(t2, gelu(t2, merge_heads(t2, split_heads(t2, n, 2), 2)));
  });
  CHECK_THROWS_AS(split_heads(tp, xi, 3), ContractError);
}

TEST_CASE("cross entropy of uniform logits over 256 classes is ln 256") {
  Tape<double> tp;
  Tensor<double> z = Tensor<double>::zeros({4, 256});
  int loss = cross_entropy_logits(tp, tp.leaf(z), std::vector<int32_t>{7, 0, 255, 31});
  CHECK(tp.val(loss)[0] == doctest::Approx(5.5451774444795623).epsilon(1e-14));
}

TEST_CASE("cross entropy matches the hand example and honors ignore_index") {
  Tape<double> tp;
  double l3 = std::log(3.0);
  Tensor<double> z({3, 2}, {0.0, l3, l3, 0.0, 9.0, 9.0});
  // Rows 0,1 predict the 3/4 class; row 2 is ignored.
  int loss = cross_entropy_logits(tp, tp.leaf(z), std::vector<int32_t>{1, 0, -1});
  CHECK(tp.val(loss)[0] == doctest::Approx(0.2876820724517809).epsilon(1e-13));
  CHECK_THROWS_AS(
      cross_entropy_logits(tp, tp.leaf(z), std::vector<int32_t>{-1, -1, -1}),
      ContractError);
  CHECK_THROWS_AS(cross_entropy_logits(tp, tp.leaf(z), std::vector<int32_t>{2, 0, -1}),
                  ContractError);
}

TEST_CASE("cross entropy gradient vs finite differences") {
  Tensor<double> z = rand_tensor({6, 5}, 24, "ce.z");
  std::vector<int32_t> targets = {0, 4, 2, -1, 1, 3};
  check_grad_against_fd(z, [&](Tape<double>& tp, int zi) {
    return cross_entropy_logits(tp, zi, targets);
  });
}

TEST_CASE("tape: leaf deduplication shares one gradient buffer") {
  Tensor<double> x = rand_tensor({3}, 25, "tape.x");
  Tape<double> tp;
  int a = tp.leaf(x);
  int b = tp.leaf(x);
  CHECK(a == b);
  int loss = sum_all(tp, add(tp, a, b));  // f = 2 * sum(x)
  tp.backward(loss);
  for (double g : x.grad) CHECK(g == 2.0);
}

TEST_CASE("tape: two backward passes over one graph are bit-identical") {
  Tensor<double> x = rand_tensor({4, 4}, 26, "tape2.x");
  Tape<double> tp;
  int xi = tp.leaf(x);
  int loss = sum_all(tp, gelu(tp, softmax_rows(tp, xi)));
  tp.backward(loss);
  std::vector<double> first = x.grad;
  tp.backward(loss);
  CHECK(x.grad == first);
}

TEST_CASE("tape misuse: non-scalar backward, no-grad tape, bad node index") {
  Tensor<double> x = rand_tensor({2, 2}, 27, "tape3.x");
  {
    Tape<double> tp;
    int xi = tp.leaf(x);
    CHECK_THROWS_AS(tp.backward(xi), ContractError);
  }
  {
    Tape<double> tp(/*record_grads=*/false);
    Tensor<double> xx = x;
    int loss = sum_all(tp, tp.leaf(xx));
    CHECK_THROWS_AS(tp.backward(loss), ContractError);
  }
  {
    Tape<double> tp;
    CHECK_THROWS_AS(tp.val(0), ContractError);
  }
}

TEST_CASE("fault injection corrupts one op's backward and is detectable") {
  Tensor<double> x = rand_tensor({3, 3}, 28, "fault.x");
  Tensor<double> w = rand_tensor({3, 3}, 28, "fault.w");
  auto grads_with = [&](bool corrupt) {
    fault::clear();
    if (corrupt) fault::corrupt_backward("matmul");
    Tape<double> tp;
    Tensor<double> xx = x, ww = w;  // fresh copies: grads must not carry over
    int xi = tp.leaf(xx);
    int loss = sum_all(tp, matmul(tp, xi, tp.leaf(ww)));
    tp.backward(loss);
    CHECK(tp.fault_fired() == corrupt);
    fault::clear();
    return xx.grad;
  };
  auto clean = grads_with(false);
  auto dirty = grads_with(true);
  CHECK(testutil::max_abs_diff(clean, dirty) > 1e-6);
  // 1.5x on the output-side gradient scales the whole input gradient.
  for (size_t i = 0; i < clean.size(); ++i)
    CHECK(dirty[i] == doctest::Approx(1.5 * clean[i]).epsilon(1e-12));
}

TEST_CASE("same graph, same seed, bit-identical values across runs") {
  auto run = [] {
    Tensor<double> x = rand_tensor({2, 8, 8}, 29, "det.run");
    Tape<double> tp;
    int xi = tp.leaf(x);
    int h = split_heads(tp, gelu(tp, xi), 2);
    int scores = bmm(tp, h, h, /*trans_b=*/true);
    int loss = sum_all(tp, causal_softmax(tp, scores));
    tp.backward(loss);
    std::vector<double> out = node_values(tp, loss);
    out.insert(out.end(), x.grad.begin(), x.grad.end());
    return out;
  };
  CHECK(run() == run());
}
