#pragma once

#include <array>
#include <cstddef>
#include <filesystem>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <vector>

#include "grit/dataio.hpp"
#include "grit/model.hpp"

namespace grit::eval {

inline constexpr std::array<std::size_t, 3> kCutoffs{5, 10, 20};

/// 1 + the number of real items scoring at least as high as the target, the
/// target itself excluded (ties count against the target).
std::size_t rank_target(std::span<const double> scores, data::ItemId target);

struct Metrics {
  double recall = 0.0;
  double ndcg = 0.0;
  double mrr = 0.0;
};

/// Single-relevant-item Recall@k, NDCG@k and MRR@k averaged over `ranks`.
Metrics metrics_at_k(std::span<const std::size_t> ranks, std::size_t k);

struct EvalReport {
  std::map<std::size_t, Metrics> at;  // keyed by cutoff
  std::vector<std::int32_t> users;    // dense user index, ascending
  std::vector<std::size_t> ranks;     // target rank per user
  std::size_t non_finite = 0;         // users whose scores were not finite

  std::size_t user_count() const { return users.size(); }
  double recall(std::size_t k) const { return at.at(k).recall; }
  double ndcg(std::size_t k) const { return at.at(k).ndcg; }
  double mrr(std::size_t k) const { return at.at(k).mrr; }

  /// {"recall": {"5": .., "10": .., "20": ..}, "ndcg": .., "mrr": .., "users": n}
  nlohmann::json to_json() const;
  void write_ranks_csv(const std::filesystem::path& path, const data::Dataset* names = nullptr) const;
};

/// Aggregates per-user ranks at every cutoff. Metrics are NaN when any user
/// had non-finite scores.
EvalReport make_report(std::vector<std::int32_t> users, std::vector<std::size_t> ranks, std::size_t non_finite = 0);

struct EvalOptions {
  bool exclude_history = false;  // mask the context items (target exempt)
  std::size_t batch_size = 256;
};

/// Full-item ranking of every user's held-out item for `phase`.
EvalReport evaluate(const GritModel& model, const data::SplitDataset& split, data::Phase phase,
                    const EvalOptions& options = {});

}  // namespace grit::eval
