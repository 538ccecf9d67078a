#include "grit/groupdyn.hpp"

#include <Eigen/QR>
#include <stdexcept>

#include "grit/ops.hpp"
#include "grit/rng.hpp"

namespace grit::group {

namespace {

// Real column indices of each row.
std::vector<std::vector<std::size_t>> real_positions(std::size_t rows, std::size_t len,
                                                     std::span<const std::uint8_t> mask) {
  if (mask.size() != rows * len) {
    throw std::invalid_argument("group: mask of " + std::to_string(mask.size()) + " entries for " +
                                std::to_string(rows) + "x" + std::to_string(len) + " positions");
  }
  std::vector<std::vector<std::size_t>> out(rows);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t i = 0; i < len; ++i) {
      if (mask[b * len + i]) out[b].push_back(i);
    }
  }
  return out;
}

void check_sequence_tensor(const char* op, const Tensor& z) {
  if (z.rank() != 3) throw std::invalid_argument(std::string(op) + ": expected [B, L, d], got " + diff::shape_str(z.shape()));
}

}  // namespace

Tensor Mlp::operator()(const Tensor& x) const {
  auto h = diff::add(diff::matmul(x, weight), bias);
  if (weight2) h = diff::add(diff::matmul(diff::gelu(h), *weight2), *bias2);
  return h;
}

void Mlp::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
  if (weight2) {
    out.emplace_back(prefix + ".weight2", *weight2);
    out.emplace_back(prefix + ".bias2", *bias2);
  }
}

Mlp make_mlp(std::size_t in, std::size_t out, std::size_t hidden, double init_std, std::mt19937_64& rng) {
  Mlp m;
  const auto first_out = hidden > 0 ? hidden : out;
  m.weight = Tensor::zeros({in, first_out}, true);
  fill_truncated_normal(m.weight.values(), init_std, rng);
  m.bias = Tensor::zeros({first_out}, true);
  if (hidden > 0) {
    m.weight2 = Tensor::zeros({first_out, out}, true);
    fill_truncated_normal(m.weight2->values(), init_std, rng);
    m.bias2 = Tensor::zeros({out}, true);
  }
  return m;
}

void GroupBranchParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  static constexpr const char* kNames[] = {"x_complete", "t_complete", "x_short", "t_short"};
  for (std::size_t s = 0; s < streams.size(); ++s) streams[s].collect(prefix + "." + kNames[s], out);
  affinity.collect(prefix + ".affinity", out);
  out.emplace_back(prefix + ".groups", groups);
}

Tensor init_group_matrix(std::size_t dim, std::size_t groups, double init_std, std::mt19937_64& rng) {
  auto g = Tensor::zeros({dim, groups}, true);
  if (groups > dim) {
    fill_truncated_normal(g.values(), init_std, rng);
    return g;
  }
  Eigen::MatrixXd draw(dim, groups);
  fill_truncated_normal(std::span<double>(draw.data(), static_cast<std::size_t>(draw.size())), 1.0, rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(draw);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dim),
                                                                           static_cast<Eigen::Index>(groups));
  auto v = g.values();
  for (std::size_t r = 0; r < dim; ++r) {
    for (std::size_t c = 0; c < groups; ++c) {
      v[r * groups + c] = q(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
    }
  }
  return g;
}

GroupBranchParams init_group_params(const ModelConfig& config, std::mt19937_64& rng) {
  const auto d = config.hidden;
  GroupBranchParams p;
  const std::size_t hidden = config.mlp_hidden_layer ? d : 0;
  for (auto& s : p.streams) s = make_mlp(3 * d, d, hidden, config.init_std, rng);
  p.affinity = make_mlp(2 * d, config.groups, hidden, config.init_std, rng);
  p.groups = init_group_matrix(d, config.groups, config.init_std, rng);
  return p;
}

EwmaAccumulator::EwmaAccumulator(std::size_t dim, double alpha)
    : gamma_(1.0 - alpha), sum_(dim, 0.0), sq_sum_(dim, 0.0) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("EwmaAccumulator: alpha must lie in (0, 1)");
}

void EwmaAccumulator::push(std::span<const double> z) {
  if (z.size() != sum_.size()) throw std::invalid_argument("EwmaAccumulator: dimension mismatch");
  mass_ = gamma_ * mass_ + 1.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    sum_[k] = gamma_ * sum_[k] + z[k];
    sq_sum_[k] = gamma_ * sq_sum_[k] + z[k] * z[k];
  }
}

std::vector<double> EwmaAccumulator::mean() const {
  std::vector<double> m(sum_.size(), 0.0);
  if (mass_ == 0.0) return m;
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = sum_[k] / mass_;
  return m;
}

std::vector<double> EwmaAccumulator::variance(double floor) const {
  const auto m = mean();
  std::vector<double> v(m.size(), floor);
  if (mass_ == 0.0) return v;
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = std::max(sq_sum_[k] / mass_ - m[k] * m[k], floor);
  return v;
}

Tensor transitions(const Tensor& x, std::span<const std::uint8_t> mask) {
  check_sequence_tensor("transitions", x);
  const auto rows = x.dim(0);
  const auto len = x.dim(1);
  const auto d = x.dim(2);
  auto real = real_positions(rows, len, mask);
  const auto xv = x.values();
  std::vector<double> out(x.numel(), 0.0);
  for (std::size_t b = 0; b < rows; ++b) {
    const auto& pos = real[b];
    for (std::size_t k = 1; k < pos.size(); ++k) {
      const auto cur = (b * len + pos[k]) * d;
      const auto prev = (b * len + pos[k - 1]) * d;
      for (std::size_t c = 0; c < d; ++c) out[cur + c] = xv[cur + c] - xv[prev + c];
    }
  }
  return diff::record("transitions", x.shape(), std::move(out), {x},
                      [len, d, real = std::move(real)](const Tensor& o, std::span<const Tensor> in) {
                        const auto g = o.grad();
                        auto gx = in[0].mutable_grad();
                        for (std::size_t b = 0; b < real.size(); ++b) {
                          const auto& pos = real[b];
                          for (std::size_t k = 1; k < pos.size(); ++k) {
                            const auto cur = (b * len + pos[k]) * d;
                            const auto prev = (b * len + pos[k - 1]) * d;
                            for (std::size_t c = 0; c < d; ++c) {
                              gx[cur + c] += g[cur + c];
                              gx[prev + c] -= g[cur + c];
                            }
                          }
                        }
                      });
}

Tensor recency_mean(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window) {
  check_sequence_tensor("recency_mean", z);
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("recency_mean: alpha must lie in (0, 1)");
  const auto rows = z.dim(0);
  const auto len = z.dim(1);
  const auto d = z.dim(2);
  const double gamma = 1.0 - alpha;
  auto real = real_positions(rows, len, mask);

  // Short windows normalise by the full window mass; zero-filled slots keep
  // their weight.
  double window_mass = 0.0;
  double gamma_w = 1.0;
  for (std::size_t k = 0; k < window; ++k) {
    window_mass += gamma_w;
    gamma_w *= gamma;
  }

  const auto zv = z.values();
  std::vector<double> out(z.numel(), 0.0);
  std::vector<double> norm(rows * len, 0.0);
  std::vector<double> run(d);
  for (std::size_t b = 0; b < rows; ++b) {
    const auto& pos = real[b];
    std::fill(run.begin(), run.end(), 0.0);
    double mass = 0.0;
    for (std::size_t k = 0; k < pos.size(); ++k) {
      const double* zk = zv.data() + (b * len + pos[k]) * d;
      for (std::size_t c = 0; c < d; ++c) run[c] = gamma * run[c] + zk[c];
      if (window > 0 && k >= window) {
        const double* old = zv.data() + (b * len + pos[k - window]) * d;
        for (std::size_t c = 0; c < d; ++c) run[c] -= gamma_w * old[c];
      }
      mass = window == 0 ? gamma * mass + 1.0 : window_mass;
      norm[b * len + pos[k]] = mass;
      double* dst = out.data() + (b * len + pos[k]) * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] = run[c] / mass;
    }
  }
  return diff::record(
      "recency_mean", z.shape(), std::move(out), {z},
      [len, d, gamma, gamma_w, window, real = std::move(real), norm = std::move(norm)](const Tensor& o,
                                                                                     std::span<const Tensor> in) {
        const auto g = o.grad();
        auto gz = in[0].mutable_grad();
        std::vector<double> run(d);
        for (std::size_t b = 0; b < real.size(); ++b) {
          const auto& pos = real[b];
          std::fill(run.begin(), run.end(), 0.0);
          for (std::size_t k = pos.size(); k-- > 0;) {
            const auto at = b * len + pos[k];
            const double inv = 1.0 / norm[at];
            for (std::size_t c = 0; c < d; ++c) run[c] = gamma * run[c] + g[at * d + c] * inv;
            if (window > 0 && k + window < pos.size()) {
              const auto ahead = b * len + pos[k + window];
              const double inv_ahead = 1.0 / norm[ahead];
              for (std::size_t c = 0; c < d; ++c) run[c] -= gamma_w * g[ahead * d + c] * inv_ahead;
            }
            for (std::size_t c = 0; c < d; ++c) gz[at * d + c] += run[c];
          }
        }
      });
}

Tensor recency_variance(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window) {
  check_sequence_tensor("recency_variance", z);
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("recency_variance: alpha must lie in (0, 1)");
  const auto rows = z.dim(0);
  const auto len = z.dim(1);
  const auto d = z.dim(2);
  const double gamma = 1.0 - alpha;
  auto real = real_positions(rows, len, mask);

  double window_mass = 0.0;
  double gamma_w = 1.0;
  std::vector<double> weights;
  for (std::size_t k = 0; k < window; ++k) {
    weights.push_back(gamma_w);
    window_mass += gamma_w;
    gamma_w *= gamma;
  }

  // Complete window: weighted West updates on (mass, mean, m2). Short
  // window: two passes over its slots, zero-filled before the start.
  const auto zv = z.values();
  std::vector<double> out(z.numel(), 0.0);
  std::vector<double> means(z.numel(), 0.0);
  std::vector<double> norm(rows * len, 0.0);
  std::vector<double> mean(d);
  std::vector<double> m2(d);
  for (std::size_t b = 0; b < rows; ++b) {
    const auto& pos = real[b];
    std::fill(mean.begin(), mean.end(), 0.0);
    std::fill(m2.begin(), m2.end(), 0.0);
    double mass = 0.0;
    for (std::size_t k = 0; k < pos.size(); ++k) {
      const double* zk = zv.data() + (b * len + pos[k]) * d;
      if (window == 0) {
        mass = gamma * mass + 1.0;
        for (std::size_t c = 0; c < d; ++c) {
          const double delta = zk[c] - mean[c];
          mean[c] += delta / mass;
          m2[c] = gamma * m2[c] + delta * (zk[c] - mean[c]);
        }
      } else {
        mass = window_mass;
        const std::size_t filled = std::min(window, k + 1);
        std::fill(mean.begin(), mean.end(), 0.0);
        for (std::size_t back = 0; back < filled; ++back) {
          const double* zj = zv.data() + (b * len + pos[k - back]) * d;
          for (std::size_t c = 0; c < d; ++c) mean[c] += weights[back] * zj[c];
        }
        for (std::size_t c = 0; c < d; ++c) mean[c] /= mass;
        double empty_mass = 0.0;
        for (std::size_t back = filled; back < window; ++back) empty_mass += weights[back];
        for (std::size_t c = 0; c < d; ++c) m2[c] = empty_mass * mean[c] * mean[c];
        for (std::size_t back = 0; back < filled; ++back) {
          const double* zj = zv.data() + (b * len + pos[k - back]) * d;
          for (std::size_t c = 0; c < d; ++c) {
            const double e = zj[c] - mean[c];
            m2[c] += weights[back] * e * e;
          }
        }
      }
      const auto at = b * len + pos[k];
      norm[at] = mass;
      for (std::size_t c = 0; c < d; ++c) {
        out[at * d + c] = std::max(m2[c], 0.0) / mass;
        means[at * d + c] = mean[c];
      }
    }
  }
  // d var_i / d z_j = 2 w_ij (z_j - mu_i) / C_i; the mean's own dependence
  // cancels because the weighted deviations sum to zero.
  return diff::record(
      "recency_variance", z.shape(), std::move(out), {z},
      [len, d, gamma, gamma_w, window, real = std::move(real), norm = std::move(norm),
       means = std::move(means)](const Tensor& o, std::span<const Tensor> in) {
        const auto g = o.grad();
        const auto zv = in[0].values();
        auto gz = in[0].mutable_grad();
        std::vector<double> a(d);
        std::vector<double> bsum(d);
        for (std::size_t b = 0; b < real.size(); ++b) {
          const auto& pos = real[b];
          std::fill(a.begin(), a.end(), 0.0);
          std::fill(bsum.begin(), bsum.end(), 0.0);
          for (std::size_t k = pos.size(); k-- > 0;) {
            const auto at = b * len + pos[k];
            const double inv = 1.0 / norm[at];
            for (std::size_t c = 0; c < d; ++c) {
              a[c] = gamma * a[c] + g[at * d + c] * inv;
              bsum[c] = gamma * bsum[c] + g[at * d + c] * means[at * d + c] * inv;
            }
            if (window > 0 && k + window < pos.size()) {
              const auto ahead = b * len + pos[k + window];
              const double inv_ahead = 1.0 / norm[ahead];
              for (std::size_t c = 0; c < d; ++c) {
                a[c] -= gamma_w * g[ahead * d + c] * inv_ahead;
                bsum[c] -= gamma_w * g[ahead * d + c] * means[ahead * d + c] * inv_ahead;
              }
            }
            for (std::size_t c = 0; c < d; ++c) gz[at * d + c] += 2.0 * (zv[at * d + c] * a[c] - bsum[c]);
          }
        }
      });
}

namespace {

EwmaStats ewma_stats(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window,
                     double floor) {
  auto mu = recency_mean(z, mask, alpha, window);
  auto var = diff::clamp_min(recency_variance(z, mask, alpha, window), floor);
  return {std::move(mu), std::move(var)};
}

}  // namespace

EwmaStats ewma_complete(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, double floor) {
  return ewma_stats(z, mask, alpha, 0, floor);
}

EwmaStats ewma_short(const Tensor& z, std::span<const std::uint8_t> mask, double alpha, std::size_t window,
                     double floor) {
  if (window < 1) throw std::invalid_argument("ewma_short: window must be at least 1");
  return ewma_stats(z, mask, alpha, window, floor);
}

std::array<Tensor, 4> temporal_representations(const Tensor& x, const Tensor& t, const std::array<EwmaStats, 4>& stats,
                                                const GroupBranchParams& params, const ModelConfig& config) {
  if (x.shape() != t.shape()) {
    throw std::invalid_argument("temporal_representations: shape mismatch " + diff::shape_str(x.shape()) + " vs " +
                                diff::shape_str(t.shape()));
  }
  const std::array<bool, 4> enabled = {config.use_x_complete, config.use_t_complete, config.use_x_short,
                                       config.use_t_short};
  const std::array<const Tensor*, 4> current = {&x, &t, &x, &t};
  std::array<Tensor, 4> out;
  for (std::size_t s = 0; s < 4; ++s) {
    if (!enabled[s]) {
      out[s] = Tensor::zeros(x.shape());
      continue;
    }
    const auto& st = stats[s];
    if (st.mean.shape() != x.shape() || st.variance.shape() != x.shape()) {
      throw std::invalid_argument("temporal_representations: statistics shape mismatch for stream " +
                                  std::to_string(s));
    }
    const std::array<Tensor, 3> parts = {*current[s], st.mean, st.variance};
    out[s] = params.streams[s](diff::concat_last(parts));
  }
  return out;
}

Tensor membership(const std::array<Tensor, 4>& features, const GroupBranchParams& params, double tau,
                  const Tensor& position_mask) {
  if (!(tau > 0.0)) throw std::invalid_argument("membership: temperature must be positive");
  const auto complete = diff::add(features[kXComplete], features[kTComplete]);
  const auto recent = diff::add(features[kXShort], features[kTShort]);
  const std::array<Tensor, 2> parts = {complete, recent};
  const auto logits = diff::scale(params.affinity(diff::concat_last(parts)), 1.0 / tau);
  return diff::softmax_last(diff::mul(logits, position_mask));
}

Tensor group_representation(const Tensor& c, const Tensor& groups) { return diff::matmul(c, groups, true); }

GroupBranchOutput group_branch(const Tensor& x, std::span<const std::uint8_t> mask, const Tensor& position_mask,
                               const GroupBranchParams& params, const ModelConfig& config) {
  const auto t = transitions(x, mask);
  std::array<EwmaStats, 4> stats;
  if (config.use_x_complete) stats[kXComplete] = ewma_complete(x, mask, config.alpha_complete, config.variance_floor);
  if (config.use_t_complete) stats[kTComplete] = ewma_complete(t, mask, config.alpha_complete, config.variance_floor);
  if (config.use_x_short) {
    stats[kXShort] = ewma_short(x, mask, config.alpha_short, config.window, config.variance_floor);
  }
  if (config.use_t_short) {
    stats[kTShort] = ewma_short(t, mask, config.alpha_short, config.window, config.variance_floor);
  }
  const auto features = temporal_representations(x, t, stats, params, config);
  auto c = membership(features, params, config.tau, position_mask);
  auto g = group_representation(c, params.groups);
  return {std::move(g), std::move(c)};
}

}  // namespace grit::group
