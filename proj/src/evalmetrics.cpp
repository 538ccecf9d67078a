#include "grit/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "grit/tensor.hpp"

namespace grit::eval {

std::size_t rank_target(std::span<const double> scores, data::ItemId target) {
  if (target == data::kPad) throw std::invalid_argument("rank_target: target is the padding item");
  if (target < 0 || static_cast<std::size_t>(target) >= scores.size()) {
    throw std::out_of_range("rank_target: target " + std::to_string(target) + " outside " +
                            std::to_string(scores.size()) + " scores");
  }
  const double t = scores[static_cast<std::size_t>(target)];
  std::size_t above = 0;
  for (std::size_t j = 1; j < scores.size(); ++j) {
    if (j != static_cast<std::size_t>(target) && scores[j] >= t) ++above;
  }
  return above + 1;
}

Metrics metrics_at_k(std::span<const std::size_t> ranks, std::size_t k) {
  if (ranks.empty()) throw std::invalid_argument("metrics_at_k: empty rank list");
  if (k == 0) throw std::invalid_argument("metrics_at_k: k must be at least 1");
  Metrics m;
  for (auto r : ranks) {
    if (r == 0) throw std::invalid_argument("metrics_at_k: ranks are 1-based");
    if (r > k) continue;
    const double rank = static_cast<double>(r);
    m.recall += 1.0;
    m.ndcg += 1.0 / std::log2(rank + 1.0);
    m.mrr += 1.0 / rank;
  }
  const double n = static_cast<double>(ranks.size());
  m.recall /= n;
  m.ndcg /= n;
  m.mrr /= n;
  return m;
}

EvalReport make_report(std::vector<std::int32_t> users, std::vector<std::size_t> ranks, std::size_t non_finite) {
  if (users.size() != ranks.size()) throw std::invalid_argument("make_report: users/ranks size mismatch");
  EvalReport r;
  for (auto k : kCutoffs) {
    if (non_finite > 0) {
      const double nan = std::numeric_limits<double>::quiet_NaN();
      r.at[k] = {nan, nan, nan};
    } else {
      r.at[k] = metrics_at_k(ranks, k);
    }
  }
  r.users = std::move(users);
  r.ranks = std::move(ranks);
  r.non_finite = non_finite;
  return r;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  for (const auto& [k, m] : at) {
    const auto key = std::to_string(k);
    j["recall"][key] = m.recall;
    j["ndcg"][key] = m.ndcg;
    j["mrr"][key] = m.mrr;
  }
  j["users"] = users.size();
  if (non_finite > 0) j["non_finite_users"] = non_finite;
  return j;
}

void EvalReport::write_ranks_csv(const std::filesystem::path& path, const data::Dataset* names) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "user,rank\n";
  for (std::size_t i = 0; i < users.size(); ++i) {
    const auto u = static_cast<std::size_t>(users[i]);
    if (names != nullptr && u < names->user_ids.size()) {
      os << names->user_ids[u];
    } else {
      os << u;
    }
    os << ',' << ranks[i] << '\n';
  }
}

EvalReport evaluate(const GritModel& model, const data::SplitDataset& split, data::Phase phase,
                    const EvalOptions& options) {
  if (options.batch_size == 0) throw std::invalid_argument("evaluate: batch size must be positive");
  diff::NoGradGuard no_grad;
  std::mt19937_64 unused_rng(0);
  const auto table = model.embeddings.items;
  const auto d = model.config.hidden;
  const auto len = model.config.max_len;
  const auto n_users = split.user_count();

  std::vector<std::int32_t> users(n_users);
  std::vector<std::size_t> ranks(n_users);
  std::size_t non_finite = 0;
  for (std::size_t start = 0; start < n_users; start += options.batch_size) {
    const auto n = std::min(options.batch_size, n_users - start);
    std::vector<std::vector<data::ItemId>> contexts(n);
    std::vector<std::int32_t> batch_users(n);
    for (std::size_t i = 0; i < n; ++i) {
      contexts[i] = split.context(start + i, phase);
      batch_users[i] = static_cast<std::int32_t>(start + i);
    }
    const auto batch = data::context_batch(contexts, batch_users, len);
    const auto out = forward(model, batch, false, unused_rng).hidden;
    const auto hidden = out.values();
    for (std::size_t i = 0; i < n; ++i) {
      const auto last = hidden.subspan((i * len + len - 1) * d, d);
      auto scores = score(last, table);
      auto s = scores.values();
      const auto target = split.target(start + i, phase);
      if (options.exclude_history) {
        for (auto item : contexts[i]) {
          if (item != target) s[static_cast<std::size_t>(item)] = -std::numeric_limits<double>::infinity();
        }
      }
      if (!std::all_of(s.begin() + 1, s.end(), [](double v) { return std::isfinite(v) || v < 0; })) ++non_finite;
      users[start + i] = static_cast<std::int32_t>(start + i);
      ranks[start + i] = rank_target(s, target);
    }
  }
  return make_report(std::move(users), std::move(ranks), non_finite);
}

}  // namespace grit::eval
