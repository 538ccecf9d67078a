#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "grit/config.hpp"
#include "grit/seqencode.hpp"
#include "grit/tensor.hpp"

// Group-dynamics branch: transition sequences, recency-weighted statistics
// over complete and short windows, the four temporal user representations,
// soft group membership and the group-aware representation.
namespace grit::group {

using diff::Tensor;

/// Affine map x W + b, optionally followed by GELU and a second affine map.
struct Mlp {
  Tensor weight;  // [in, out] (or [in, hidden] with a hidden layer)
  Tensor bias;
  std::optional<Tensor> weight2;  // [hidden, out]
  std::optional<Tensor> bias2;

  Tensor operator()(const Tensor& x) const;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

/// `hidden` == 0 builds a single affine layer.
Mlp make_mlp(std::size_t in, std::size_t out, std::size_t hidden, double init_std, std::mt19937_64& rng);

enum Stream : std::size_t { kXComplete = 0, kTComplete = 1, kXShort = 2, kTShort = 3 };

struct GroupBranchParams {
  std::array<Mlp, 4> streams;  // indexed by Stream, each 3d -> d
  Mlp affinity;                // 2d -> kappa
  Tensor groups;               // G, [d, kappa]; column g is group g

  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

GroupBranchParams init_group_params(const ModelConfig& config, std::mt19937_64& rng);

/// Orthonormal columns via Householder QR of a random normal matrix when
/// kappa <= d, truncated normal otherwise.
Tensor init_group_matrix(std::size_t dim, std::size_t groups, double init_std, std::mt19937_64& rng);

/// Streaming recency-weighted moments with gamma = 1 - alpha:
/// C <- gamma C + 1, S <- gamma S + z, Q <- gamma Q + z*z.
class EwmaAccumulator {
 public:
  EwmaAccumulator(std::size_t dim, double alpha);

  void push(std::span<const double> z);
  double weight_mass() const { return mass_; }
  std::vector<double> mean() const;
  /// Q/C - mean^2, clamped elementwise to at least `floor`.
  std::vector<double> variance(double floor) const;

 private:
  double gamma_;
  double mass_ = 0.0;
  std::vector<double> sum_;
  std::vector<double> sq_sum_;
};

/// t_i = x_i - x_{i-1}; zero at the first real position of each row and at
/// padding. x is [B, L, d], mask has B*L entries.
Tensor transitions(const Tensor& x, std::span<const std::uint8_t> mask);

/// Differentiable recency-weighted mean over real positions, computed by the
/// O(L) recurrence. window == 0 selects the complete window (weights over
/// the real prefix); window == w >= 1 selects the last w positions with
/// missing slots zero-filled and their weights kept in the normaliser.
Tensor recency_mean(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window);

/// Recency-weighted variance sum_j w_ij (z_j - mu_i)^2 / C_i over the same
/// windows as recency_mean, free of E[z^2] - mu^2 cancellation: weighted
/// West updates for the complete window, two passes over the short one.
Tensor recency_variance(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window);

struct EwmaStats {
  Tensor mean;
  Tensor variance;
};

EwmaStats ewma_complete(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, double floor);
EwmaStats ewma_short(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window,
                     double floor);

/// f = MLP([current ; mean ; variance]) for each stream; disabled streams
/// yield zero tensors.
std::array<Tensor, 4> temporal_representations(const Tensor& x, const Tensor& t,
                                                const std::array<EwmaStats, 4>& stats,
                                                const GroupBranchParams& params, const ModelConfig& config);

/// softmax(MLP([f_xc + f_tc ; f_xs + f_ts]) / tau). Padded positions get the
/// uniform distribution. Returns [B, L, kappa].
Tensor membership(const std::array<Tensor, 4>& features, const GroupBranchParams& params, double tau,
                  const Tensor& position_mask);

/// g_i = G c_i. Returns [B, L, d].
Tensor group_representation(const Tensor& membership, const Tensor& groups);

struct GroupBranchOutput {
  Tensor representation;  // g, [B, L, d]
  Tensor membership;      // c, [B, L, kappa]
};

/// Whole branch on a pad-zeroed block input x.
GroupBranchOutput group_branch(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& position_mask,
                               const GroupBranchParams& params, const ModelConfig& config);

}  // namespace grit::group
