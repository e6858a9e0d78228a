#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "cyb/autodiff.hpp"
#include "cyb/gradcheck.hpp"
#include "cyb/rng.hpp"
#include "cyb/verify.hpp"

#include <cmath>
#include <functional>
#include <string>

using namespace cyb;

namespace {

Tensor random_tensor(CounterRng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

}  // namespace

TEST_CASE("tensor shape bookkeeping") {
  Tensor t({2, 3, 4});
  CHECK(t.numel() == 24);
  CHECK(t.ndim() == 3);
  CHECK(t.dim(-1) == 4);
  CHECK(t.matrix().rows() == 6);
  CHECK(t.matrix().cols() == 4);
  t.at({1, 2, 3}) = 7.0;
  CHECK(t[23] == 7.0);
  CHECK(t.reshaped({6, 4})[23] == 7.0);
  CHECK_THROWS_AS(t.reshaped({5, 5}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK(shape_str({12, 6, 256}) == "(12, 6, 256)");
}

TEST_CASE("matmul values and shape errors") {
  Tape tape;
  Var eye = tape.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var m = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
  CHECK(matmul(eye, m).value() == m.value());
  Var row = tape.constant(Tensor({1, 2}, {1, 2}));
  Var col = tape.constant(Tensor({2, 1}, {3, 4}));
  CHECK(matmul(row, col).value()[0] == 11.0);
  try {
    matmul(row, m);
    matmul(col, m);
    FAIL("expected a dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("(2, 1)") != std::string::npos);
    CHECK(msg.find("(2, 2)") != std::string::npos);
  }
}

TEST_CASE("elementwise values and broadcasting") {
  Tape tape;
  Var x = tape.constant(Tensor({3}, {1, 2, 3}));
  CHECK(add(x, tape.constant(Tensor::scalar(0.0))).value() == x.value());
  CHECK(relu(tape.constant(Tensor({3}, {-1, 0, 2}))).value() == Tensor({3}, {0, 0, 2}));

  Var m = tape.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  CHECK(add(m, x).value() == Tensor({2, 3}, {2, 4, 6, 5, 7, 9}));
  CHECK(sub(x, m).value() == Tensor({2, 3}, {0, 0, 0, -3, -3, -3}));
  CHECK(mul(tape.constant(Tensor({1, 3}, {2, 2, 2})), m).value() == Tensor({2, 3}, {2, 4, 6, 8, 10, 12}));
  CHECK_THROWS_AS(add(m, tape.constant(Tensor({2}, {1, 1}))), DimensionError);
  CHECK_THROWS_AS(add(tape.constant(Tensor({2, 3, 1})), m), DimensionError);
}

TEST_CASE("broadcast gradients sum over the repeated axis") {
  Tape tape;
  Var m = tape.leaf(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var b = tape.leaf(Tensor({3}, {10, 20, 30}));
  tape.backward(sum_all(mul(m, b)));
  CHECK(tape.grad(b) == Tensor({3}, {5, 7, 9}));
  CHECK(tape.grad(m) == Tensor({2, 3}, {10, 20, 30, 10, 20, 30}));
}

TEST_CASE("softmax examples") {
  Tape tape;
  const Tensor u = softmax(tape.constant(Tensor({3}, {0, 0, 0})), 0).value();
  for (Index i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  const Tensor big = softmax(tape.constant(Tensor({2}, {1000, 0})), 0).value();
  CHECK(big.all_finite());
  CHECK(big[0] == doctest::Approx(1.0));
  CHECK(big[1] < 1e-300);
}

TEST_CASE("layernorm examples") {
  Tape tape;
  Var g4 = tape.constant(Tensor::constant({4}, 1.0));
  Var b4 = tape.constant(Tensor({4}));
  CHECK(layernorm(tape.constant(Tensor({1, 4}, {5, 5, 5, 5})), g4, b4).value() == Tensor({1, 4}));
  Var bias = tape.constant(Tensor({4}, {0.5, -1, 2, 3}));
  CHECK(layernorm(tape.constant(Tensor({1, 4}, {5, 5, 5, 5})), g4, bias).value() == bias.value().reshaped({1, 4}));

  Var g2 = tape.constant(Tensor::constant({2}, 1.0));
  Var b2 = tape.constant(Tensor({2}));
  const Tensor y = layernorm(tape.constant(Tensor({1, 2}, {1, -1})), g2, b2).value();
  // var = 1, so y = x / sqrt(1 + eps).
  CHECK(y[0] == doctest::Approx(1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(-1.0 / std::sqrt(1.0 + 1e-5)).epsilon(1e-14));
  CHECK_THROWS_AS(layernorm(tape.constant(Tensor({1, 3})), g2, b2), DimensionError);
}

TEST_CASE("mean_pool examples") {
  Tape tape;
  CHECK(mean_pool(tape.constant(Tensor({3}, {2, 4, 6})), 0).value()[0] == 4.0);
  CHECK(mean_pool(tape.constant(Tensor({1, 3}, {2, 4, 6})), 0).value() == Tensor({3}, {2, 4, 6}));
  CHECK(mean_pool(tape.constant(Tensor({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8})), 1).value() ==
        Tensor({2, 2}, {2, 3, 6, 7}));
  CHECK_THROWS_AS(mean_pool(tape.constant(Tensor({2, 0, 3})), 1), DimensionError);
}

TEST_CASE("tape edge cases") {
  Tape empty;
  CHECK_NOTHROW(empty.backward(Var{&empty, 0}));

  Tape tape;
  Var used = tape.leaf(Tensor({2}, {1, 2}));
  Var unused = tape.leaf(Tensor({3}, {4, 5, 6}));
  tape.backward(sum_all(mul(used, used)));
  CHECK(tape.grad(used) == Tensor({2}, {2, 4}));
  CHECK(tape.grad(unused) == Tensor({3}));

  Var vec = add(used, used);
  CHECK_THROWS_AS(tape.backward(vec), DimensionError);

  // Ops on constants only record no backward rule.
  Var c = tape.constant(Tensor({2}, {1, 1}));
  Var d = add(c, c);
  CHECK_FALSE(d.requires_grad());
}

TEST_CASE("finite_diff_check basics") {
  std::function<Var(Tape&, Var)> sq = [](Tape&, Var x) { return sum_all(mul(x, x)); };
  const auto r = finite_diff_check(sq, Tensor({2}, {1, 2}), 1e-5, 1e-8);
  CHECK(r.passed);
  CHECK(r.checked == 2);
  CHECK(r.max_rel_error < 1e-9);

  CHECK_THROWS_AS(finite_diff_check(sq, Tensor({2}, {1, 2}), 0.0, 1e-8), std::invalid_argument);
  CHECK_THROWS_AS(finite_diff_check(sq, Tensor({2}, {1, 2}), 1e-2, 1e-8), std::invalid_argument);
  std::function<Var(Tape&, Var)> vec = [](Tape&, Var x) { return mul(x, x); };
  CHECK_THROWS_AS(finite_diff_check(vec, Tensor({2}, {1, 2}), 1e-5, 1e-8), DimensionError);
}

TEST_CASE("finite_diff_check catches a wrong backward rule") {
  // x^2 with the derivative deliberately off by a factor 1.01.
  std::function<Var(Tape&, Var)> broken = [](Tape& t, Var x) {
    Tensor y(x.shape(), x.value().data().cwiseAbs2());
    const Index ix = x.id;
    Var out = t.record("bad_square", std::move(y), {x}, [ix](Tape& tp, const Tensor& g) {
      tp.grad_buffer(ix).data() += 2.02 * g.data().cwiseProduct(tp.value(ix).data());
    });
    return sum_all(out);
  };
  const auto r = finite_diff_check(broken, Tensor({3}, {0.5, -1.0, 1.5}), 1e-5, 1e-3);
  CHECK_FALSE(r.passed);
  CHECK(r.max_rel_error == doctest::Approx(0.01 / 1.01).epsilon(1e-4));
}

TEST_CASE("gelu gradient at 0.5") {
  std::function<Var(Tape&, Var)> f = [](Tape&, Var x) { return sum_all(gelu(x)); };
  const auto r = finite_diff_check(f, Tensor({1}, {0.5}), 1e-5, 1e-6);
  CHECK(r.passed);
  CHECK(detail::gelu_derivative(0.5) == doctest::Approx(0.8673699).epsilon(1e-6));
}

TEST_CASE("every primitive matches central differences over seeded trials") {
  constexpr int kTrials = 100;
  for (const GradPrimitive& p : gradient_primitives()) {
    double worst = 0.0;
    for (int trial = 0; trial < kTrials; ++trial) {
      CounterRng rng(combine_key(combine_key(17, std::string_view(p.name)), static_cast<std::uint64_t>(trial)));
      std::vector<Tensor> inputs;
      for (const Shape& s : p.shapes) inputs.push_back(random_tensor(rng, s));
      const std::uint64_t wseed = rng.next_u64();
      ScalarFn<double> f = [&](Tape& t, std::span<const Var> xs) {
        return weighted_sum(t, p.build(t, xs), wseed);
      };
      const auto r = finite_diff_check(f, inputs, 1e-5, 1e-5);
      worst = std::max(worst, r.max_rel_error);
    }
    INFO("primitive " << p.name << " worst relative error " << worst);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("softmax rows sum to one") {
  CounterRng rng(3);
  Tape tape;
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor x = random_tensor(rng, {4, 7}, -50.0, 50.0);
    const Tensor y = softmax(tape.constant(x), 1).value();
    for (Index r = 0; r < 4; ++r) {
      CHECK(std::abs(y.matrix().row(r).sum() - 1.0) <= 1e-12);
      CHECK(y.matrix().row(r).minCoeff() >= 0.0);
    }
  }
}

TEST_CASE("layernorm rows are standardised") {
  CounterRng rng(4);
  Tape tape;
  Var g = tape.constant(Tensor::constant({16}, 1.0));
  Var b = tape.constant(Tensor({16}));
  for (int trial = 0; trial < 200; ++trial) {
    const double spread = trial % 2 == 0 ? rng.uniform(4.0, 40.0) : rng.uniform(0.01, 4.0);
    const Tensor x = random_tensor(rng, {3, 16}, -spread, spread);
    const Tensor y = layernorm(tape.constant(x), g, b).value();
    for (Index r = 0; r < 3; ++r) {
      const auto xr = x.matrix().row(r).array();
      const double v = (xr - xr.mean()).square().mean();
      const auto yr = y.matrix().row(r).array();
      const double mu = yr.mean();
      const double var = (yr - mu).square().mean();
      CHECK(std::abs(mu) <= 1e-10);
      // With eps inside the root the output variance is v / (v + eps).
      CHECK(var == doctest::Approx(v / (v + 1e-5)).epsilon(1e-12));
      if (v >= 10.0) CHECK(std::abs(var - 1.0) <= 1e-6);
    }
  }
}
