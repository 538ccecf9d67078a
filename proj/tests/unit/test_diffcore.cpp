#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "grit/gradcheck.hpp"
#include "grit/ops.hpp"
#include "helpers.hpp"

using namespace grit::diff;
using testutil::random_tensor;

namespace {

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-6;

// Weighted sum with fixed random weights so every output element matters.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed = 99) {
  auto w = random_tensor(y.shape(), seed, -1.0, 1.0, false);
  return sum(mul(y, w));
}

void check_unary(const std::function<Tensor(const Tensor&)>& op, Shape shape, std::uint64_t seed,
                 double lo = -1.0, double hi = 1.0) {
  auto x = random_tensor(shape, seed, lo, hi);
  const auto r = finite_difference_check([&] { return weighted_sum(op(x)); }, x, kStep);
  CHECK(r.max_relative_error < kTol);
}

}  // namespace

TEST_CASE("tensor construction and shape errors") {
  CHECK_THROWS_AS(Tensor::from({2, 0}, {}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({2, 2}, {1.0, 2.0}), std::invalid_argument);
  auto t = Tensor::full({2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.values()[5] == 1.5);
  auto a = Tensor::zeros({2, 3});
  auto b = Tensor::zeros({3, 2});
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, Tensor::zeros({2, 2})), std::invalid_argument);
}

TEST_CASE("backward on a leaf or a non-scalar root is rejected") {
  auto x = Tensor::full({3}, 1.0, true);
  CHECK_THROWS_AS(x.backward(), std::logic_error);
  auto y = scale(x, 2.0);
  CHECK_THROWS_AS(y.backward(), std::invalid_argument);
  std::vector<double> seed{1.0, 2.0, 3.0};
  y.backward(seed);
  CHECK(x.grad()[2] == doctest::Approx(6.0));
}

TEST_CASE("gradients accumulate across sweeps and reset with zero_grad") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto loss = sum(mul(x, x));
  loss.backward();
  loss.backward();
  CHECK(x.grad()[1] == doctest::Approx(8.0));
  x.zero_grad();
  CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("no-grad guard produces leaves") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  {
    NoGradGuard guard;
    auto y = scale(x, 3.0);
    CHECK(y.is_leaf());
    CHECK_FALSE(y.requires_grad());
  }
  CHECK(grad_enabled());
  CHECK_FALSE(scale(x, 3.0).is_leaf());
}

TEST_CASE("trace lists every recorded op after its inputs") {
  auto x = Tensor::from({2}, {1.0, 2.0}, true);
  auto a = scale(x, 2.0);
  auto b = mul(a, a);
  auto c = add(b, a);
  auto loss = sum(c);
  const auto rec = trace(loss);
  REQUIRE(rec.entries.size() == 4);
  CHECK(rec.entries.front().same_storage(a));
  CHECK(rec.entries.back().same_storage(loss));
}

TEST_CASE("matmul gradients") {
  auto a = random_tensor({2, 3, 4}, 1);
  auto b = random_tensor({4, 5}, 2);
  auto bt = random_tensor({5, 4}, 3);
  CHECK(finite_difference_check([&] { return weighted_sum(matmul(a, b)); }, a, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check([&] { return weighted_sum(matmul(a, b)); }, b, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check([&] { return weighted_sum(matmul(a, bt, true)); }, bt, kStep).max_relative_error <
        kTol);
}

TEST_CASE("matmul matches a naive triple loop") {
  auto a = random_tensor({3, 4}, 4, -1, 1, false);
  auto b = random_tensor({4, 2}, 5, -1, 1, false);
  const auto c = matmul(a, b);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 4; ++k) s += a.values()[i * 4 + k] * b.values()[k * 2 + j];
      CHECK(c.values()[i * 2 + j] == doctest::Approx(s).epsilon(1e-14));
    }
  }
}

TEST_CASE("bmm gradients") {
  auto a = random_tensor({3, 2, 4}, 6);
  auto b = random_tensor({3, 4, 5}, 7);
  auto bt = random_tensor({3, 5, 4}, 8);
  CHECK(finite_difference_check([&] { return weighted_sum(bmm(a, b)); }, a, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check([&] { return weighted_sum(bmm(a, b)); }, b, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check([&] { return weighted_sum(bmm(a, bt, true)); }, bt, kStep).max_relative_error < kTol);
}

TEST_CASE("broadcasting binary ops") {
  auto a = random_tensor({2, 3, 4}, 9);
  SUBCASE("bias over the last axis") {
    auto b = random_tensor({4}, 10);
    CHECK(add(a, b).values()[5] == doctest::Approx(a.values()[5] + b.values()[1]));
    CHECK(finite_difference_check([&] { return weighted_sum(add(a, b)); }, b, kStep).max_relative_error < kTol);
    CHECK(finite_difference_check([&] { return weighted_sum(sub(a, b)); }, b, kStep).max_relative_error < kTol);
  }
  SUBCASE("one value per row") {
    auto m = random_tensor({2, 3, 1}, 11);
    CHECK(mul(a, m).values()[5] == doctest::Approx(a.values()[5] * m.values()[1]));
    CHECK(finite_difference_check([&] { return weighted_sum(mul(a, m)); }, m, kStep).max_relative_error < kTol);
    CHECK(finite_difference_check([&] { return weighted_sum(mul(a, m)); }, a, kStep).max_relative_error < kTol);
  }
  SUBCASE("general broadcast") {
    auto g = random_tensor({2, 1, 4}, 12);
    CHECK(add(a, g).values()[4 * 2 + 1] == doctest::Approx(a.values()[9] + g.values()[1]));
    CHECK(finite_difference_check([&] { return weighted_sum(mul(a, g)); }, g, kStep).max_relative_error < kTol);
  }
  SUBCASE("incompatible") { CHECK_THROWS_AS(add(a, random_tensor({3}, 1)), std::invalid_argument); }
}

TEST_CASE("elementwise and structural ops pass finite differences") {
  check_unary([](const Tensor& x) { return scale(x, -1.7); }, {3, 4}, 20);
  check_unary([](const Tensor& x) { return divide(x, 3.0); }, {3, 4}, 21);
  check_unary([](const Tensor& x) { return gelu(x); }, {3, 4}, 22, -3.0, 3.0);
  check_unary([](const Tensor& x) { return transpose_last2(x); }, {2, 3, 4}, 23);
  check_unary([](const Tensor& x) { return swap_axes12(x); }, {2, 3, 4, 5}, 24);
  check_unary([](const Tensor& x) { return reshape(x, {4, 3}); }, {3, 4}, 25);
  check_unary([](const Tensor& x) { return softmax_last(x); }, {3, 5}, 26, -2.0, 2.0);
  check_unary([](const Tensor& x) { return mean(x); }, {3, 5}, 27);
  check_unary(
      [](const Tensor& x) {
        std::vector<Tensor> parts{x, scale(x, 2.0)};
        return concat_last(parts);
      },
      {2, 3}, 28);
}

TEST_CASE("clamp_min passes gradient only above the bound") {
  auto x = Tensor::from({4}, {-1.0, 0.5, 2.0, 0.0}, true);
  sum(clamp_min(x, 0.25)).backward();
  CHECK(x.grad()[0] == 0.0);
  CHECK(x.grad()[1] == 1.0);
  CHECK(x.grad()[2] == 1.0);
  CHECK(x.grad()[3] == 0.0);
  CHECK_THROWS_AS(clamp_min(x, std::numeric_limits<double>::infinity()), std::invalid_argument);
}

TEST_CASE("gelu uses the exact erf form") {
  auto x = Tensor::from({3}, {-1.0, 0.0, 2.0});
  const auto gy = gelu(x);
  const auto y = gy.values();
  for (std::size_t i = 0; i < 3; ++i) {
    const double v = x.values()[i];
    CHECK(y[i] == doctest::Approx(0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2))).epsilon(1e-15));
  }
}

TEST_CASE("masked softmax") {
  auto x = random_tensor({2, 3}, 30);
  const double inf = std::numeric_limits<double>::infinity();
  auto mask = Tensor::from({2, 3}, {0.0, -inf, 0.0, -inf, -inf, -inf});
  const auto py = softmax_last(x, &mask);
  const auto p = py.values();
  CHECK(p[1] == 0.0);
  CHECK(p[0] + p[2] == doctest::Approx(1.0));
  CHECK(p[3] == 0.0);
  CHECK(p[4] == 0.0);
  CHECK(p[5] == 0.0);
  CHECK(finite_difference_check([&] { return weighted_sum(softmax_last(x, &mask)); }, x, kStep).max_relative_error <
        kTol);
}

TEST_CASE("layer norm") {
  auto x = random_tensor({3, 6}, 31, -2.0, 2.0);
  auto g = random_tensor({6}, 32, 0.5, 1.5);
  auto b = random_tensor({6}, 33);
  const auto ly = layer_norm(x, g, b, 1e-12);
  const auto y = ly.values();
  for (std::size_t r = 0; r < 3; ++r) {
    double mu = 0.0;
    double var = 0.0;
    for (std::size_t c = 0; c < 6; ++c) mu += x.values()[r * 6 + c] / 6.0;
    for (std::size_t c = 0; c < 6; ++c) var += std::pow(x.values()[r * 6 + c] - mu, 2) / 6.0;
    for (std::size_t c = 0; c < 6; ++c) {
      const double ref = (x.values()[r * 6 + c] - mu) / std::sqrt(var + 1e-12) * g.values()[c] + b.values()[c];
      CHECK(y[r * 6 + c] == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  auto f = [&] { return weighted_sum(layer_norm(x, g, b, 1e-12)); };
  CHECK(finite_difference_check(f, x, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check(f, g, kStep).max_relative_error < kTol);
  CHECK(finite_difference_check(f, b, kStep).max_relative_error < kTol);
}

TEST_CASE("gather_rows scatters gradients back to the table") {
  auto table = random_tensor({5, 3}, 34);
  std::vector<std::int32_t> ids{4, 0, 4, 2};
  const auto y = gather_rows(table, ids, {2, 2});
  CHECK(y.shape() == Shape{2, 2, 3});
  CHECK(y.values()[4] == table.values()[0 * 3 + 1]);
  CHECK(y.values()[7] == table.values()[4 * 3 + 1]);
  CHECK(finite_difference_check([&] { return weighted_sum(gather_rows(table, ids, {2, 2})); }, table, kStep)
            .max_relative_error < kTol);
  std::vector<std::int32_t> bad{5};
  CHECK_THROWS_AS(gather_rows(table, bad, {1}), std::out_of_range);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(1);
  auto x = Tensor::full({1000}, 1.0, true);
  CHECK(dropout(x, 0.3, false, rng).same_storage(x));
  CHECK(dropout(x, 0.0, true, rng).same_storage(x));
  const auto dy = dropout(x, 0.25, true, rng);
  const auto y = dy.values();
  std::size_t kept = 0;
  for (double v : y) {
    CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
    kept += v != 0.0;
  }
  CHECK(kept > 650);
  CHECK(kept < 850);
  CHECK_THROWS_AS(dropout(x, 1.0, true, rng), std::invalid_argument);
}

TEST_CASE("softmax cross-entropy") {
  SUBCASE("two equal candidates give ln 2") {
    auto logits = Tensor::from({1, 3}, {0.7, 0.7, 5.0}, true);
    std::vector<std::int32_t> target{1};
    ExcludedColumns ex{{0, 1}, {2}};
    CHECK(softmax_cross_entropy(logits, target, ex).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  }
  SUBCASE("three-item vocabulary matches a hand computation") {
    auto logits = Tensor::from({2, 3}, {0.1, -0.4, 1.3, 2.0, 0.5, -1.0}, true);
    std::vector<std::int32_t> targets{2, 0};
    const auto loss = softmax_cross_entropy(logits, targets, ExcludedColumns::none(2)).item();
    const double l0 = -std::log(std::exp(1.3) / (std::exp(0.1) + std::exp(-0.4) + std::exp(1.3)));
    const double l1 = -std::log(std::exp(2.0) / (std::exp(2.0) + std::exp(0.5) + std::exp(-1.0)));
    CHECK(std::abs(loss - (l0 + l1) / 2.0) < 1e-10);
  }
  SUBCASE("the target is never excluded and gradients match finite differences") {
    auto logits = random_tensor({3, 6}, 35, -2.0, 2.0);
    std::vector<std::int32_t> targets{1, 4, 0};
    ExcludedColumns ex{{0, 2, 3, 5}, {0, 1, 4, 0, 3}};
    const auto loss = softmax_cross_entropy(logits, targets, ex).item();
    CHECK(std::isfinite(loss));
    auto f = [&] { return softmax_cross_entropy(logits, targets, ex); };
    CHECK(finite_difference_check(f, logits, kStep).max_relative_error < kTol);
  }
}

TEST_CASE("finite difference checker rejects bad arguments") {
  auto x = random_tensor({3}, 40);
  auto f = [&] { return sum(x); };
  CHECK_THROWS_AS(finite_difference_check(f, x, 1e-2), std::invalid_argument);
  auto frozen = random_tensor({3}, 41, -1, 1, false);
  CHECK_THROWS_AS(finite_difference_check([&] { return sum(frozen); }, frozen, 1e-5), std::invalid_argument);
  std::size_t calls = 0;
  auto noisy = [&] { return scale(sum(x), 1.0 + static_cast<double>(++calls)); };
  CHECK_THROWS_AS(finite_difference_check(noisy, x, 1e-5), std::invalid_argument);
}
