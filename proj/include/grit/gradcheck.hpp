#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "grit/tensor.hpp"

namespace grit::diff {

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of the scalar `f` with respect to the
/// leaf `x` against central differences with step `h`, over the coordinates
/// in `coords` (all coordinates when empty). The error of a coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-6).
///
/// `f` must rebuild its graph from the current values of `x` on every call
/// and be deterministic; a function that returns different values for the
/// same input is rejected with std::invalid_argument.
GradCheckResult finite_difference_check(const std::function<Tensor()>& f, Tensor x, double h,
                                        const std::vector<std::size_t>& coords = {});

}  // namespace grit::diff
