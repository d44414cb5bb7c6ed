#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "dannte/tape.hpp"

using namespace dannte;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -2.0,
                     double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  ArrayX<double> v(shape_numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace

TEST_CASE("matmul hand cases") {
  Tensor a({2, 2}, [] {
    ArrayX<double> v(4);
    v << 1, 2, 3, 4;
    return v;
  }());
  Tensor b({2, 1}, [] {
    ArrayX<double> v(2);
    v << 1, 1;
    return v;
  }());
  Tensor c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c[0] == doctest::Approx(3.0));
  CHECK(c[1] == doctest::Approx(7.0));

  // A * I == A
  std::mt19937_64 rng(11);
  Tensor m = random_tensor({3, 3}, rng);
  Tensor eye = Tensor::from_matrix(Eigen::MatrixXd::Identity(3, 3));
  Tensor prod = matmul(m, eye);
  CHECK((prod.values() - m.values()).abs().maxCoeff() == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), DimensionError);
  try {
    matmul(a, b);
  } catch (const DimensionError& e) {
    CHECK(std::string(e.what()).find("[2x2]") != std::string::npos);
  }
}

TEST_CASE("matmul gradients match finite differences") {
  std::mt19937_64 rng(42);
  Tensor a0 = random_tensor({3, 4}, rng);
  Tensor b0 = random_tensor({4, 2}, rng);

  double err_a = grad_check(
      [&](Tape& t, const Tensor& a) { return reduce_mean(tanh(matmul(a, b0))); },
      a0, 1e-5);
  double err_b = grad_check(
      [&](Tape& t, const Tensor& b) { return reduce_mean(tanh(matmul(a0, b))); },
      b0, 1e-5);
  CHECK(err_a < 1e-6);
  CHECK(err_b < 1e-6);
}

TEST_CASE("matmul_t equals matmul with explicit transpose") {
  std::mt19937_64 rng(7);
  Tensor a = random_tensor({3, 5}, rng);
  Tensor b = random_tensor({4, 5}, rng);
  Tensor direct = matmul_t(a, b);
  Tensor via = matmul(a, Tensor::from_matrix(b.matrix().transpose()));
  CHECK((direct.values() - via.values()).abs().maxCoeff() < 1e-14);

  double err = grad_check(
      [&](Tape& t, const Tensor& x) { return reduce_mean(tanh(matmul_t(x, b))); },
      a, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise hand cases") {
  CHECK(sigmoid(Tensor::scalar(0.0)).value() == doctest::Approx(0.5));
  CHECK(tanh(Tensor::scalar(0.0)).value() == 0.0);

  Tensor a = Tensor::from_vector({1.0, -2.0});
  Tensor b = Tensor::from_vector({3.0, 3.0});
  Tensor m = mul(a, b);
  CHECK(m[0] == doctest::Approx(3.0));
  CHECK(m[1] == doctest::Approx(-6.0));

  double err = grad_check(
      [&](Tape& t, const Tensor& x) { return reduce_mean(mul(x, b)); }, a, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("elementwise shape rules") {
  Tensor a = Tensor::zeros({3});
  Tensor b = Tensor::zeros({4});
  CHECK_THROWS_AS(add(a, b), DimensionError);

  // scalar-with-tensor broadcast is the one allowed exception
  Tensor s = Tensor::scalar(2.0);
  Tensor r = mul(s, Tensor::from_vector({1.0, 2.0, 3.0}));
  CHECK(r.shape() == Shape{3});
  CHECK(r[2] == doctest::Approx(6.0));
}

TEST_CASE("log domain error on non-positive input") {
  CHECK_THROWS_AS(log(Tensor::from_vector({1.0, 0.0})), NumericError);
  CHECK_THROWS_AS(log(Tensor::from_vector({-1.0})), NumericError);
}

TEST_CASE("reduce_mean values and gradient") {
  Tensor x = Tensor::from_vector({1.0, 2.0, 3.0, 4.0});
  CHECK(reduce_mean(x).value() == doctest::Approx(2.5));
  CHECK(reduce_mean(Tensor::full({7}, 3.25)).value() == doctest::Approx(3.25));

  Tape tape;
  Tensor v = tape.variable(Tensor::zeros({5}));
  tape.backward(reduce_mean(v));
  Tensor g = tape.grad(v);
  for (Index i = 0; i < 5; ++i) CHECK(g[i] == doctest::Approx(0.2));
}

TEST_CASE("backward of mse-style loss") {
  // loss = mean((x - t)^2), x=[1,2], t=[1,0] -> dx = [0, 2]
  Tape tape;
  Tensor x = tape.variable(Tensor::from_vector({1.0, 2.0}));
  Tensor t = Tensor::from_vector({1.0, 0.0});
  Tensor d = sub(x, t);
  tape.backward(reduce_mean(mul(d, d)));
  Tensor g = tape.grad(x);
  CHECK(g[0] == doctest::Approx(0.0));
  CHECK(g[1] == doctest::Approx(2.0));
}

TEST_CASE("diamond graph sums gradients along paths") {
  // y = a*b + a*c -> da = b + c
  Tape tape;
  Tensor a = tape.variable(Tensor::scalar(1.7));
  Tensor b = Tensor::scalar(2.0);
  Tensor c = Tensor::scalar(5.0);
  Tensor y = add(mul(a, b), mul(a, c));
  tape.backward(y);
  CHECK(tape.grad(a).value() == doctest::Approx(7.0));
}

TEST_CASE("backward requires a scalar loss") {
  Tape tape;
  Tensor x = tape.variable(Tensor::zeros({3}));
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("unreachable nodes read zero gradient") {
  Tape tape;
  Tensor x = tape.variable(Tensor::from_vector({1.0, 2.0}));
  Tensor orphan = tape.variable(Tensor::from_vector({5.0}));
  Tensor loss = reduce_mean(mul(x, x));
  Tensor also_orphan = tanh(orphan);  // recorded after the loss, never reached
  tape.backward(loss);
  CHECK(tape.grad(orphan).value() == 0.0);
  CHECK(tape.grad(also_orphan).value() == 0.0);
}

TEST_CASE("grad_scale forward identity, backward scaled exactly") {
  Tensor x = Tensor::from_vector({3.5, -1.0});
  Tensor fwd = grad_scale(x, -1.5);
  CHECK(fwd.values()[0] == 3.5);
  CHECK(fwd.values()[1] == -1.0);

  Tape tape;
  Tensor v = tape.variable(x);
  Tensor out = grad_scale(v, -1.5);
  // upstream gradient [1, -2] via sum(out * w)
  Tensor w = Tensor::from_vector({1.0, -2.0});
  tape.backward(reduce_sum(mul(out, w)));
  Tensor g = tape.grad(v);
  CHECK(g[0] == -1.5);
  CHECK(g[1] == 3.0);
}

TEST_CASE("grad_check closed-form cases") {
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({6}, rng);

  // f = sum of squares: gradient 2x known in closed form
  double err_sq = grad_check(
      [](Tape& t, const Tensor& v) { return reduce_sum(mul(v, v)); }, x, 1e-5);
  CHECK(err_sq <= 1e-8);

  double err_sig = grad_check(
      [](Tape& t, const Tensor& v) { return reduce_mean(sigmoid(v)); }, x, 1e-5);
  CHECK(err_sig <= 1e-6);

  // gradient reversal with lambda = 0 kills the reversed branch exactly
  Tape tape;
  Tensor v = tape.variable(x);
  tape.backward(reduce_mean(grad_scale(v, -0.0)));
  CHECK(tape.grad(v).values().abs().maxCoeff() == 0.0);
}

TEST_CASE("randomized gradients match finite differences" *
          doctest::description("property: >=100 cases, 1e-4 relative")) {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> dim(1, 5);
  int cases = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const Index m = dim(rng), k = dim(rng), p = dim(rng);
    Tensor a = random_tensor({m, k}, rng);
    Tensor b = random_tensor({k, p}, rng);
    Tensor c = random_tensor({m, k}, rng);
    Tensor pos = random_tensor({m, k}, rng, 0.5, 3.0);
    Tensor bias = random_tensor({k}, rng);

    auto checks = {
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_mean(matmul(tanh(v), b));
        }, a, 1e-5),
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_mean(sigmoid(add(v, c)));
        }, a, 1e-5),
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_sum(mul(sub(v, c), sub(v, c)));
        }, a, 1e-5),
        grad_check([&](Tape& t, const Tensor& v) { return reduce_mean(log(v)); },
                   pos, 1e-5),
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_mean(add_rowwise(v, bias));
        }, a, 1e-5),
        // factor 1 passes gradients through unchanged, so the finite-
        // difference oracle stays valid for the reversal plumbing
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_sum(mul(neg(v), grad_scale(tanh(v), 1.0)));
        }, a, 1e-5),
        grad_check([&](Tape& t, const Tensor& v) {
          return reduce_mean(reshape(mul(v, v), {m * k}));
        }, a, 1e-5),
    };
    for (double e : checks) {
      CHECK(e < 1e-4);
      ++cases;
    }
  }
  CHECK(cases >= 100);
}

TEST_CASE("backward is linear over summed losses") {
  std::mt19937_64 rng(5);
  Tensor x0 = random_tensor({4}, rng);

  Tape t1;
  Tensor a1 = t1.variable(x0);
  Tensor la = reduce_mean(mul(a1, a1));
  t1.backward(la);
  ArrayX<double> ga = t1.grad(a1).values();

  Tape t2;
  Tensor a2 = t2.variable(x0);
  Tensor lb = reduce_mean(tanh(a2));
  t2.backward(lb);
  ArrayX<double> gb = t2.grad(a2).values();

  Tape t3;
  Tensor a3 = t3.variable(x0);
  t3.backward(add(reduce_mean(mul(a3, a3)), reduce_mean(tanh(a3))));
  ArrayX<double> gsum = t3.grad(a3).values();

  CHECK((gsum - (ga + gb)).abs().maxCoeff() < 1e-12);
}

TEST_CASE("tape replay is bit-identical") {
  auto run = [] {
    std::mt19937_64 rng(99);
    Tensor a = random_tensor({4, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    Tape tape;
    Tensor v = tape.variable(a);
    Tensor loss = reduce_mean(sigmoid(matmul(tanh(v), b)));
    tape.backward(loss);
    return std::pair{loss.value(), ArrayX<double>(tape.grad(v).values())};
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1 == g2).all());
}

TEST_CASE("clamp values and subgradient") {
  Tensor x = Tensor::from_vector({-2.0, 0.25, 2.0});
  Tensor y = clamp(x, -1.0, 1.0);
  CHECK(y[0] == -1.0);
  CHECK(y[1] == 0.25);
  CHECK(y[2] == 1.0);

  Tape tape;
  Tensor v = tape.variable(x);
  tape.backward(reduce_sum(clamp(v, -1.0, 1.0)));
  Tensor g = tape.grad(v);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 1.0);
  CHECK(g[2] == 0.0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, ArrayX<double>::Zero(5)), DimensionError);
  CHECK_THROWS_AS(Tensor({0}, ArrayX<double>::Zero(0)), DimensionError);
  CHECK_THROWS_AS(Tensor::zeros({2, 0, 3}), DimensionError);
}

TEST_CASE("batch slicing round-trips") {
  std::mt19937_64 rng(13);
  std::vector<Eigen::MatrixXd> seqs;
  for (int i = 0; i < 3; ++i)
    seqs.push_back(random_tensor({4, 2}, rng).matrix());
  Tensor batch = stack_sequences(seqs);
  CHECK(batch.shape() == Shape{3, 4, 2});
  for (Index b = 0; b < 3; ++b) {
    Tensor s = slice_sequence(batch, b);
    CHECK((s.matrix() - seqs[static_cast<std::size_t>(b)]).cwiseAbs().maxCoeff() ==
          0.0);
  }
  Tensor xt = slice_time(batch, 2);
  for (Index b = 0; b < 3; ++b)
    for (Index f = 0; f < 2; ++f)
      CHECK(xt.at(b, f) == seqs[static_cast<std::size_t>(b)](2, f));
}

TEST_CASE("float instantiation works end to end") {
  TapeT<float> tape;
  TensorT<float> x = tape.variable(TensorT<float>::from_vector({0.5f, -0.25f}));
  tape.backward(reduce_mean(tanh(x)));
  CHECK(tape.grad(x).values().allFinite());
}
