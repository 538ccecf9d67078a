#include "grit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace grit::diff {

namespace {

// Central differences carry rounding noise of order eps * |f| / h, so
// relative errors are measured against at least this magnitude.
constexpr double kErrorFloor = 1e-6;

}  // namespace

GradCheckResult finite_difference_check(const std::function<Tensor()>& f, Tensor x, double h,
                                        const std::vector<std::size_t>& coords) {
  if (!(h >= 1e-6 && h <= 1e-4)) throw std::invalid_argument("finite_difference_check: step must lie in [1e-6, 1e-4]");
  if (!x.is_leaf() || !x.requires_grad()) {
    throw std::invalid_argument("finite_difference_check: x must be a leaf that requires gradients");
  }
  auto eval = [&f] {
    NoGradGuard guard;
    const auto y = f();
    if (y.numel() != 1) throw std::invalid_argument("finite_difference_check: f must be scalar-valued");
    return y.item();
  };
  const double first = eval();
  const double second = eval();
  if (first != second) {
    throw std::invalid_argument("finite_difference_check: f is not deterministic (is dropout active?)");
  }

  x.zero_grad();
  f().backward();
  const std::vector<double> analytic(x.grad().begin(), x.grad().end());

  std::vector<std::size_t> which = coords;
  if (which.empty()) {
    which.resize(x.numel());
    std::iota(which.begin(), which.end(), std::size_t{0});
  }
  GradCheckResult result;
  auto values = x.values();
  for (auto i : which) {
    if (i >= values.size()) throw std::out_of_range("finite_difference_check: coordinate out of range");
    const double saved = values[i];
    values[i] = saved + h;
    const double up = eval();
    values[i] = saved - h;
    const double down = eval();
    values[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double err = std::abs(analytic[i] - numeric) / std::max({std::abs(analytic[i]), std::abs(numeric), kErrorFloor});
    if (err >= result.max_relative_error) result = {err, i, analytic[i], numeric};
  }
  return result;
}

}  // namespace grit::diff
