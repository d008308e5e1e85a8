#include <doctest.h>

#include <cmath>

#include "coda/grad_check.hpp"
#include "coda/ops.hpp"
#include "coda/rng.hpp"
#include "oracles.hpp"

using namespace coda;

namespace {
Rng make_rng(std::uint64_t s) { return Rng(s); }
}  // namespace

TEST_CASE("matmul identity and oracle") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor a({2, 2}, {3, -1, 2, 5});
  CHECK(matmul(eye, a).values() == a.values());

  Rng rng(7);
  Tensor x = oracles::random_tensor({5, 4}, rng);
  Tensor y = oracles::random_tensor({4, 6}, rng);
  const auto expect = oracles::naive_matmul(x.values(), y.values(), 5, 4, 6);
  const auto got = matmul(x, y).values();
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-12));
}

TEST_CASE("softmax of a constant row is uniform") {
  Tensor z({1, 4}, {0, 0, 0, 0});
  Tensor s = softmax(z);
  for (double v : s.values()) CHECK(v == doctest::Approx(0.25));
}

TEST_CASE("conv2d with a 1x1 unit kernel is the identity") {
  Rng rng(3);
  Tensor img = oracles::random_tensor({2, 1, 4, 4}, rng);
  Tensor ker({1, 1, 1, 1}, {1.0});
  CHECK(conv2d(img, ker, Padding::kSame).values() == img.values());
  CHECK(conv2d(img, ker, Padding::kValid).values() == img.values());
}

TEST_CASE("conv2d matches the naive oracle for both paddings") {
  Rng rng(11);
  Tensor x = oracles::random_tensor({2, 3, 5, 6}, rng);
  Tensor w = oracles::random_tensor({4, 3, 3, 3}, rng);

  oracles::ConvGeom same{2, 3, 5, 6, 4, 3, 3, 1, 1, 5, 6};
  const auto got_same = conv2d(x, w, Padding::kSame).values();
  const auto want_same = oracles::naive_conv2d(x.values(), w.values(), same);
  for (std::size_t i = 0; i < want_same.size(); ++i)
    CHECK(got_same[i] == doctest::Approx(want_same[i]).epsilon(1e-12));

  oracles::ConvGeom valid{2, 3, 5, 6, 4, 3, 3, 0, 0, 3, 4};
  const auto got_valid = conv2d(x, w, Padding::kValid).values();
  const auto want_valid = oracles::naive_conv2d(x.values(), w.values(), valid);
  for (std::size_t i = 0; i < want_valid.size(); ++i)
    CHECK(got_valid[i] == doctest::Approx(want_valid[i]).epsilon(1e-12));
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({3}, {1, 2, 3});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), ShapeError);
  CHECK_THROWS_WITH_AS(matmul(a, Tensor({3, 2}, {1, 2, 3, 4, 5, 6})),
                       doctest::Contains("matmul"), ShapeError);
}

TEST_CASE("non-finite forward output raises a numeric error naming the op") {
  Tensor big({1}, {1e308});
  CHECK_THROWS_WITH_AS(exp(big), doctest::Contains("exp"), NumericError);
}

TEST_CASE("backward of sum(x*x) at x=[3] is [6]") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({1}, {3.0}), true);
  Tensor loss = sum(mul(x, x));
  const auto g = tape.backward(loss).at(x);
  CHECK(g[0] == doctest::Approx(6.0));
}

TEST_CASE("constant loss yields zero gradients") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({3}, {1.0, 2.0, 3.0}), true);
  Tensor c = tape.constant(tensor_scalar(5.0));
  // x participates in no path to the loss.
  Tensor loss = sum(c);
  const auto g = tape.backward(loss).at(x);
  for (double v : g) CHECK(v == 0.0);
}

TEST_CASE("backward rejects a non-scalar or detached loss") {
  Tape tape;
  Tensor x = tape.leaf(Tensor({2}, {1.0, 2.0}), true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ShapeError);

  Tape other;
  Tensor detached = tensor_scalar(1.0);
  CHECK_THROWS_AS(other.backward(detached), Error);
}

TEST_CASE("tape is consumed by backward") {
  Tape tape;
  Tensor x = tape.leaf(tensor_scalar(2.0), true);
  Tensor loss = mul(x, x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), Error);
  CHECK_THROWS_AS(tape.leaf(tensor_scalar(1.0), true), Error);
  tape.reset();
  CHECK(tape.size() == 0);
}

namespace {
Tensor onehot_4x3() {
  return Tensor({4, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0});
}
}  // namespace

TEST_CASE("log-softmax cross-entropy gradient: analytic and fd oracles") {
  Rng rng(5);
  Tensor z0 = oracles::random_tensor({4, 3}, rng);
  Tensor y = onehot_4x3();

  const auto ce = [&](Tape& tape, const Tensor& z) {
    return scale(sum(mul(tape.constant(y), log_softmax(z))), -0.25);
  };

  Tape tape;
  Tensor z = tape.leaf(z0, true);
  Tensor loss = ce(tape, z);
  const auto g = tape.backward(loss).at(z);

  // Analytic form per row: (softmax - onehot) / batch.
  const auto probs = softmax(z0).values();
  for (std::size_t i = 0; i < g.size(); ++i)
    CHECK(g[i] ==
          doctest::Approx((probs[i] - y.values()[i]) / 4.0).epsilon(1e-9));

  CHECK(grad_check(ce, z0, 1e-5) < 1e-8);
}

TEST_CASE("grad_check on a linear functional is near-exact") {
  Rng rng = make_rng(17);
  Tensor w = oracles::random_tensor({6}, rng);
  Tensor x0 = oracles::random_tensor({6}, rng);
  const auto fn = [&](Tape& tape, const Tensor& x) {
    return sum(mul(tape.constant(w), x));
  };
  CHECK(grad_check(fn, x0, 1e-5) <= 1e-9);
}

TEST_CASE("grad_check: relu away from the kink") {
  Rng rng = make_rng(23);
  std::vector<double> v(10);
  for (double& x : v) {
    x = rng.uniform(0.2, 1.0);
    if (rng.uniform01() < 0.5) x = -x;
  }
  Tensor x0({10}, v);
  const auto fn = [](Tape&, const Tensor& x) { return sum(relu(x)); };
  CHECK(grad_check(fn, x0, 1e-5) <= 1e-6);
}

TEST_CASE("grad_check across the op suite") {
  Rng rng = make_rng(31);
  const double step = 1e-5;
  const double tol = 1e-4;

  SUBCASE("add/sub/mul/scale/add_scalar") {
    Tensor a0 = oracles::random_tensor({3, 4}, rng);
    Tensor b = oracles::random_tensor({3, 4}, rng);
    const auto fn = [&](Tape& tape, const Tensor& a) {
      Tensor bb = tape.constant(b);
      return mean(mul(add_scalar(scale(sub(add(a, bb), bb), 1.7), 0.3), a));
    };
    CHECK(grad_check(fn, a0, step) < tol);
  }

  SUBCASE("matmul + rowvec ops") {
    Tensor w = oracles::random_tensor({4, 3}, rng);
    Tensor v = oracles::random_tensor({3}, rng);
    Tensor x0 = oracles::random_tensor({5, 4}, rng);
    const auto fn = [&](Tape& tape, const Tensor& x) {
      Tensor y = add_rowvec(matmul(x, tape.constant(w)), tape.constant(v));
      return sum(mul_rowvec(y, tape.constant(v)));
    };
    CHECK(grad_check(fn, x0, step) < tol);
  }

  SUBCASE("matmul gradient w.r.t. the weight") {
    Tensor x = oracles::random_tensor({5, 4}, rng);
    Tensor w0 = oracles::random_tensor({4, 3}, rng);
    const auto fn = [&](Tape& tape, const Tensor& w) {
      Tensor y = matmul(tape.constant(x), w);
      return squared_l2_norm(y);
    };
    CHECK(grad_check(fn, w0, step) < tol);
  }

  SUBCASE("conv2d + chanvec + pooling") {
    Tensor w = oracles::random_tensor({2, 3, 3, 3}, rng);
    Tensor b = oracles::random_tensor({2}, rng);
    Tensor x0 = oracles::random_tensor({2, 3, 4, 4}, rng);
    const auto fn = [&](Tape& tape, const Tensor& x) {
      Tensor y = add_chanvec(conv2d(x, tape.constant(w), Padding::kSame),
                             tape.constant(b));
      return sum(global_avg_pool(maxpool2(y)));
    };
    CHECK(grad_check(fn, x0, step) < tol);

    const auto fn_w = [&](Tape& tape, const Tensor& ww) {
      Tensor y = conv2d(tape.constant(x0), ww, Padding::kValid);
      return squared_l2_norm(y);
    };
    CHECK(grad_check(fn_w, w, step) < tol);
  }

  SUBCASE("activations, exp, log, sigmoid, abs") {
    std::vector<double> v(12);
    for (double& x : v) {
      x = rng.uniform(0.3, 1.2);
      if (rng.uniform01() < 0.5) x = -x;
    }
    Tensor x0({12}, v);
    const auto fn = [](Tape&, const Tensor& x) {
      Tensor path = add(exp(scale(x, 0.3)), sigmoid(x));
      return mean(add(abs(x), add(leaky_relu(x, 0.1), path)));
    };
    CHECK(grad_check(fn, x0, step) < tol);

    std::vector<double> pos(8);
    for (double& x : pos) x = rng.uniform(0.2, 2.0);
    const auto fn_log = [](Tape&, const Tensor& x) { return sum(log(x)); };
    CHECK(grad_check(fn_log, Tensor({8}, pos), step) < tol);
  }

  SUBCASE("softmax and log_softmax") {
    Tensor x0 = oracles::random_tensor({4, 5}, rng);
    Tensor r = oracles::random_tensor({4, 5}, rng);
    const auto fn = [&](Tape& tape, const Tensor& x) {
      return sum(mul(tape.constant(r), softmax(x)));
    };
    CHECK(grad_check(fn, x0, step) < tol);
    const auto fn_ls = [&](Tape& tape, const Tensor& x) {
      return sum(mul(tape.constant(r), log_softmax(x)));
    };
    CHECK(grad_check(fn_ls, x0, step) < tol);
  }

  SUBCASE("reductions, reshape, concat, clamp") {
    Tensor x0 = oracles::random_tensor({3, 4}, rng);
    Tensor other = oracles::random_tensor({2, 4}, rng);
    const auto fn = [&](Tape& tape, const Tensor& x) {
      Tensor joined = concat0(x, tape.constant(other));
      Tensor m = mean_axis0(joined);
      Tensor flat = reshape(x, {12});
      return add(squared_l2_norm(m),
                 add(mean(flat), clamp_max(sum(mul(x, x)), 4.0)));
    };
    CHECK(grad_check(fn, x0, step) < tol);
  }

  SUBCASE("batchnorm_train w.r.t. input, scale and shift") {
    Tensor gamma = oracles::random_tensor({4}, rng, 0.5, 1.5);
    Tensor beta = oracles::random_tensor({4}, rng);
    Tensor x0 = oracles::random_tensor({6, 4}, rng);
    Tensor r = oracles::random_tensor({6, 4}, rng);
    const auto fn_x = [&](Tape& tape, const Tensor& x) {
      Tensor y = batchnorm_train(x, tape.constant(gamma), tape.constant(beta),
                                 kBnEps);
      return sum(mul(tape.constant(r), y));
    };
    CHECK(grad_check(fn_x, x0, step) < tol);

    const auto fn_g = [&](Tape& tape, const Tensor& g) {
      Tensor y = batchnorm_train(tape.constant(x0), g, tape.constant(beta),
                                 kBnEps);
      return sum(mul(tape.constant(r), y));
    };
    CHECK(grad_check(fn_g, gamma, step) < tol);

    const auto fn_b = [&](Tape& tape, const Tensor& b) {
      Tensor y = batchnorm_train(tape.constant(x0), tape.constant(gamma), b,
                                 kBnEps);
      return sum(mul(tape.constant(r), y));
    };
    CHECK(grad_check(fn_b, beta, step) < tol);

    Tensor xi = oracles::random_tensor({3, 4, 2, 2}, rng);
    Tensor ri = oracles::random_tensor({3, 4, 2, 2}, rng);
    const auto fn_img = [&](Tape& tape, const Tensor& x) {
      Tensor y = batchnorm_train(x, tape.constant(gamma), tape.constant(beta),
                                 kBnEps);
      return sum(mul(tape.constant(ri), y));
    };
    CHECK(grad_check(fn_img, xi, step) < tol);
  }
}

TEST_CASE("forward results are bit-identical across runs") {
  Rng rng = make_rng(41);
  Tensor a = oracles::random_tensor({16, 16}, rng);
  Tensor b = oracles::random_tensor({16, 16}, rng);
  const auto r1 = matmul(softmax(a), b).values();
  const auto r2 = matmul(softmax(a), b).values();
  CHECK(r1 == r2);
}

TEST_CASE("backward over a sum of independent subgraphs is additive") {
  Rng rng = make_rng(43);
  Tensor x0 = oracles::random_tensor({5}, rng);
  Tensor y0 = oracles::random_tensor({5}, rng);

  Tape joint;
  Tensor xj = joint.leaf(x0, true);
  Tensor yj = joint.leaf(y0, true);
  Tensor loss = add(squared_l2_norm(xj), sum(exp(yj)));
  Gradients gj = joint.backward(loss);

  Tape tx;
  Tensor xs = tx.leaf(x0, true);
  Gradients gx = tx.backward(squared_l2_norm(xs));
  Tape ty;
  Tensor ys = ty.leaf(y0, true);
  Gradients gy = ty.backward(sum(exp(ys)));

  CHECK(gj.at(xj) == gx.at(xs));
  CHECK(gj.at(yj) == gy.at(ys));
}

TEST_CASE("ops on detached tensors stay off any tape") {
  Tensor a({2}, {1.0, 2.0});
  Tensor b({2}, {3.0, 4.0});
  Tensor c = add(a, b);
  CHECK(!c.attached());
  CHECK(c.values() == std::vector<double>{4.0, 6.0});
}

TEST_CASE("mixing tapes is rejected") {
  Tape t1, t2;
  Tensor a = t1.leaf(tensor_scalar(1.0), true);
  Tensor b = t2.leaf(tensor_scalar(2.0), true);
  CHECK_THROWS_AS(add(a, b), Error);
}
