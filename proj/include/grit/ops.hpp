#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "grit/tensor.hpp"

// Differentiable primitives. Every function records an adjoint rule on its
// result when any input requires a gradient. Shape violations throw
// std::invalid_argument naming the primitive and the offending shapes.
namespace grit::diff {

/// a[..., M, K] · b[K, N] (or b[N, K] with transpose_b). Leading axes of `a`
/// are flattened into rows.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

/// Batched product a[n, M, K] · b[n, K, N] (or b[n, N, K] with transpose_b).
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Elementwise binary ops. `b` broadcasts onto `a` numpy-style (right-aligned,
// each extent equal or 1); the result always has a's shape.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double factor);
Tensor divide(const Tensor& a, double divisor);

Tensor concat_last(std::span<const Tensor> parts);

/// Gathers rows of table[V, d] at `ids`; result shape is `leading` + [d].
Tensor gather_rows(const Tensor& table, std::span<const std::int32_t> ids, Shape leading);

/// Softmax over the last axis. `additive_mask`, when given, must match x's
/// shape and is added before normalisation (use -inf to exclude). Rows with
/// every entry excluded produce zeros.
Tensor softmax_last(const Tensor& x, const Tensor* additive_mask = nullptr);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-12);

/// Exact (erf) GELU.
Tensor gelu(const Tensor& x);

/// Inverted dropout. Identity (same handle) when not training or rate == 0.
Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng);

/// Swaps the two trailing axes.
Tensor transpose_last2(const Tensor& x);

/// [a, b, c, d] -> [a, c, b, d].
Tensor swap_axes12(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// max(x, bound). Gradient flows only where x > bound.
Tensor clamp_min(const Tensor& x, double bound);

/// Per-row candidate exclusions in compressed form: the columns excluded for
/// row r are ids[offsets[r] .. offsets[r + 1]).
struct ExcludedColumns {
  std::vector<std::size_t> offsets;
  std::vector<std::int32_t> ids;

  static ExcludedColumns none(std::size_t rows) { return {std::vector<std::size_t>(rows + 1, 0), {}}; }
};

/// Mean over rows of -log softmax(logits[r])[targets[r]], where the softmax
/// runs over columns not excluded for row r. The target column is never
/// excluded.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets,
                             const ExcludedColumns& excluded);

}  // namespace grit::diff
