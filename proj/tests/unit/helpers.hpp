#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "grit/config.hpp"
#include "grit/gradcheck.hpp"
#include "grit/trainer.hpp"
#include "grit/dataio.hpp"
#include "grit/model.hpp"
#include "grit/tensor.hpp"

namespace testutil {

using grit::diff::Tensor;

inline Tensor random_tensor(grit::diff::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(grit::diff::numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Split whose users step through `items` items cyclically (i -> i + 1), each
/// from its own random start, with lengths in [min_len, max_len].
inline grit::data::SplitDataset cyclic_split(std::size_t users, std::size_t items, std::size_t min_len,
                                             std::size_t max_len, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, items - 1);
  std::uniform_int_distribution<std::size_t> len(min_len, max_len);
  grit::data::Dataset ds;
  ds.item_ids.emplace_back();
  for (std::size_t i = 1; i <= items; ++i) ds.item_ids.push_back(std::to_string(i));
  for (std::size_t u = 0; u < users; ++u) {
    ds.user_ids.push_back(std::to_string(u + 1));
    std::vector<grit::data::ItemId> seq;
    auto cur = start(rng);
    const auto n = len(rng);
    for (std::size_t k = 0; k < n; ++k) {
      seq.push_back(static_cast<grit::data::ItemId>(cur + 1));
      cur = (cur + 1) % items;
    }
    ds.sequences.push_back(std::move(seq));
  }
  return grit::data::leave_one_out_split(ds);
}

/// Small model configuration for fast tests, dropout off.
inline grit::ModelConfig tiny_config(std::size_t items, std::size_t max_len = 8) {
  grit::ModelConfig c;
  c.item_count = items;
  c.hidden = 8;
  c.max_len = max_len;
  c.layers = 2;
  c.heads = 2;
  c.groups = 3;
  c.dropout = 0.0;
  c.attn_dropout = 0.0;
  c.init_std = 0.5;
  c.layer_norm_eps = 1e-12;
  return c;
}

/// Finite-difference check of the full training loss on a toy batch: two
/// users, ten items, L = 8, kappa = 3, dropout off. Samples `samples`
/// coordinates uniformly over all trainable parameters and returns the
/// largest relative error.
inline double toy_loss_gradcheck(std::size_t samples, std::uint64_t seed) {
  grit::data::Dataset ds;
  ds.item_ids.emplace_back();
  for (int i = 1; i <= 10; ++i) ds.item_ids.push_back(std::to_string(i));
  ds.user_ids = {"1", "2"};
  ds.sequences = {{3, 1, 4, 1, 5, 9, 2, 6, 5, 3, 5}, {2, 7, 1, 8, 2, 8, 10}};
  const auto split = grit::data::leave_one_out_split(ds);
  auto cfg = tiny_config(10, 8);
  cfg.groups = 3;
  cfg.init_std = 0.3;
  const auto model = grit::init_model(cfg, seed);
  const auto batches = grit::data::make_batches(split, 8, 2, seed);
  const auto& batch = batches.front();
  const auto targets = grit::train::loss_targets(batch, split);
  auto loss = [&] {
    std::mt19937_64 rng(0);
    return grit::train::batch_loss(model, batch, targets, true, rng);
  };

  const auto params = model.trainable_parameters();
  std::size_t total = 0;
  for (const auto& p : params) total += p.second.numel();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<std::vector<std::size_t>> coords(params.size());
  for (std::size_t s = 0; s < samples; ++s) {
    auto flat = pick(rng);
    std::size_t i = 0;
    while (flat >= params[i].second.numel()) flat -= params[i++].second.numel();
    coords[i].push_back(flat);
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (coords[i].empty()) continue;
    const auto r = grit::diff::finite_difference_check(loss, params[i].second, 1e-5, coords[i]);
    worst = std::max(worst, r.max_relative_error);
  }
  return worst;
}

/// Recency-weighted mean and clamped two-pass variance recomputed from
/// explicit weights at every step of one row z [n, d]. window == 0 uses the whole
/// prefix; otherwise the last `window` slots, zero-filled before the start
/// with their weights kept.
struct EwmaReference {
  std::vector<double> mean;
  std::vector<double> variance;
};

inline EwmaReference ewma_reference(const std::vector<double>& z, std::size_t n, std::size_t d, double alpha,
                                    std::size_t window, double floor) {
  const double gamma = 1.0 - alpha;
  EwmaReference r{std::vector<double>(n * d), std::vector<double>(n * d)};
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t span = window == 0 ? i + 1 : window;
    auto slot = [&](std::size_t back, std::size_t c) { return back > i ? 0.0 : z[(i - back) * d + c]; };
    double mass = 0.0;
    for (std::size_t back = 0; back < span; ++back) mass += std::pow(gamma, static_cast<double>(back));
    for (std::size_t c = 0; c < d; ++c) {
      double s = 0.0;
      for (std::size_t back = 0; back < span; ++back) s += std::pow(gamma, static_cast<double>(back)) * slot(back, c);
      const double mu = s / mass;
      double dev = 0.0;
      for (std::size_t back = 0; back < span; ++back) {
        const double e = slot(back, c) - mu;
        dev += std::pow(gamma, static_cast<double>(back)) * e * e;
      }
      r.mean[i * d + c] = mu;
      r.variance[i * d + c] = std::max(dev / mass, floor);
    }
  }
  return r;
}

/// Fresh directory under the system temp dir, removed by the destructor.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("grit-test-" + tag + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
