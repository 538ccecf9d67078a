#include "grit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <ostream>

#include "grit/evalmetrics.hpp"
#include "grit/rng.hpp"

namespace grit::train {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

}  // namespace

LossTargets loss_targets(const data::SequenceBatch& batch, const data::SplitDataset& split) {
  LossTargets out;
  out.excluded.offsets.push_back(0);
  std::vector<std::uint8_t> seen(split.item_count + 1, 0);
  std::vector<data::ItemId> history;
  for (std::size_t r = 0; r < batch.rows; ++r) {
    const auto& seq = split.train.at(static_cast<std::size_t>(batch.users[r]));
    history.clear();
    auto remember = [&](data::ItemId item) {
      if (!seen[static_cast<std::size_t>(item)]) {
        seen[static_cast<std::size_t>(item)] = 1;
        history.push_back(item);
      }
    };
    for (std::int32_t i = 0; i < batch.first_index[r]; ++i) remember(seq[static_cast<std::size_t>(i)]);
    for (std::size_t c = 0; c < batch.length; ++c) {
      if (!batch.real(r, c)) continue;
      remember(batch.item(r, c));
      const auto target = batch.target(r, c);
      if (target == data::kPad) continue;
      out.positions.push_back(static_cast<std::int32_t>(r * batch.length + c));
      out.targets.push_back(target);
      out.excluded.ids.push_back(data::kPad);
      for (auto item : history) {
        if (item != target) out.excluded.ids.push_back(item);
      }
      out.excluded.offsets.push_back(out.excluded.ids.size());
    }
    for (auto item : history) seen[static_cast<std::size_t>(item)] = 0;
  }
  return out;
}

namespace {

void check_targets(const LossTargets& t) {
  if (t.positions.size() != t.targets.size() || t.excluded.offsets.size() != t.positions.size() + 1) {
    throw std::invalid_argument("loss targets are inconsistent");
  }
  if (t.positions.empty()) throw std::invalid_argument("batch has no valid prediction position");
  for (std::size_t i = 0; i < t.targets.size(); ++i) {
    if (t.targets[i] == data::kPad) {
      throw std::invalid_argument("valid position " + std::to_string(t.positions[i]) + " has the padding target");
    }
  }
}

}  // namespace

Tensor masked_cross_entropy(const Tensor& logits, const data::SequenceBatch& batch, const LossTargets& targets) {
  check_targets(targets);
  if (logits.rank() != 3 || logits.dim(0) != batch.rows || logits.dim(1) != batch.length) {
    throw std::invalid_argument("masked_cross_entropy: logits " + diff::shape_str(logits.shape()) +
                                " do not match the batch");
  }
  const auto flat = diff::reshape(logits, {batch.rows * batch.length, logits.dim(2)});
  const auto rows = diff::gather_rows(flat, targets.positions, {targets.positions.size()});
  return diff::softmax_cross_entropy(rows, targets.targets, targets.excluded);
}

Tensor batch_loss(const GritModel& model, const data::SequenceBatch& batch, const LossTargets& targets, bool training,
                  std::mt19937_64& rng) {
  check_targets(targets);
  const auto hidden = forward(model, batch, training, rng).hidden;
  const auto flat = diff::reshape(hidden, {batch.rows * batch.length, model.config.hidden});
  const auto rows = diff::gather_rows(flat, targets.positions, {targets.positions.size()});
  const auto logits = score_rows(rows, model.embeddings.items);
  return diff::softmax_cross_entropy(logits, targets.targets, targets.excluded);
}

OptimizerState make_optimizer_state(std::span<const NamedTensor> params, double weight_decay) {
  OptimizerState s;
  s.weight_decay = weight_decay;
  for (const auto& p : params) {
    s.first.emplace_back(p.second.numel(), 0.0);
    s.second.emplace_back(p.second.numel(), 0.0);
  }
  return s;
}

StepResult adamw_step(std::span<const NamedTensor> params, OptimizerState& state, double learning_rate,
                      double grad_clip, std::ostream* warnings) {
  if (state.first.size() != params.size()) throw std::invalid_argument("adamw_step: optimizer state does not match");
  StepResult result;
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    if (!p.requires_grad() || !p.has_grad()) continue;
    bool finite = true;
    for (double g : p.grad()) {
      finite = finite && std::isfinite(g);
      sq += g * g;
    }
    if (!finite) result.non_finite.push_back(name);
  }
  result.grad_norm = std::sqrt(sq);
  if (!result.non_finite.empty()) {
    if (warnings != nullptr) {
      *warnings << "warning: skipping optimizer step, non-finite gradient in";
      for (const auto& n : result.non_finite) *warnings << ' ' << n;
      *warnings << '\n';
    }
    return result;
  }
  const double clip = grad_clip > 0.0 && result.grad_norm > grad_clip ? grad_clip / result.grad_norm : 1.0;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  const double decay = 1.0 - learning_rate * state.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].first;
    Tensor p = params[i].second;
    if (!p.requires_grad()) continue;
    if (state.first[i].size() != p.numel()) throw std::invalid_argument("adamw_step: moment shape mismatch for " + name);
    auto w = p.values();
    auto& m = state.first[i];
    auto& v = state.second[i];
    const std::span<const double> g = p.has_grad() ? p.grad() : std::span<const double>{};
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g.empty() ? 0.0 : g[j] * clip;
      m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * gj;
      v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * gj * gj;
      w[j] = w[j] * decay - learning_rate * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + kAdamEps);
    }
    if (name == "embed.items") std::fill_n(w.begin(), p.dim(1), 0.0);
  }
  result.applied = true;
  return result;
}

nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},
          {"train_loss", r.train_loss},
          {"recall@10", r.recall10},
          {"mrr@10", r.mrr10},
          {"elapsed_s", r.elapsed_s}};
}

FitResult fit(GritModel model, const data::SplitDataset& split, const TrainConfig& config, const FitOptions& options) {
  config.validate();
  if (split.item_count != model.config.item_count) {
    throw std::invalid_argument("fit: model has " + std::to_string(model.config.item_count) +
                                " items but the dataset has " + std::to_string(split.item_count));
  }
  const auto params = model.trainable_parameters();
  auto state = make_optimizer_state(params, config.weight_decay);
  std::ofstream log;
  if (options.log_path) {
    log.open(*options.log_path, std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write " + options.log_path->string());
  }

  FitResult result{model.clone(), {}, 0, -std::numeric_limits<double>::infinity(), false};
  const auto start = std::chrono::steady_clock::now();
  std::size_t stale = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto order_seed = make_stream(config.seed, "epoch-order", epoch)();
    const auto batches = data::make_batches(split, model.config.max_len, config.batch_size, order_seed);
    auto dropout_rng = make_stream(config.seed, "dropout", epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const auto& batch : batches) {
      const auto targets = loss_targets(batch, split);
      if (targets.positions.empty()) continue;
      for (auto p : params) p.second.zero_grad();
      auto loss = batch_loss(model, batch, targets, true, dropout_rng);
      loss.backward();
      adamw_step(params, state, config.learning_rate, config.grad_clip, options.progress);
      loss_sum += loss.item() * static_cast<double>(targets.positions.size());
      loss_count += targets.positions.size();
    }

    const auto report = eval::evaluate(model, split, data::Phase::kValid,
                                       {config.exclude_history_in_eval, config.eval_batch_size});
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_count > 0 ? loss_sum / static_cast<double>(loss_count) : 0.0;
    rec.recall10 = report.recall(10);
    rec.mrr10 = report.mrr(10);
    rec.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (std::isnan(rec.recall10) || std::isnan(rec.mrr10)) {
      throw std::runtime_error("validation metric is NaN at epoch " + std::to_string(epoch) + " (train loss " +
                               std::to_string(rec.train_loss) + ", " + std::to_string(report.non_finite) +
                               " users with non-finite scores, " + std::to_string(state.step) + " optimizer steps)");
    }
    result.log.push_back(rec);
    if (log.is_open()) log << to_json(rec).dump() << '\n' << std::flush;

    const bool improved = rec.recall10 > result.best_recall10;
    if (improved) {
      result.best_recall10 = rec.recall10;
      result.best_epoch = epoch;
      result.best.copy_values_from(model);
      if (options.checkpoint_path) save_checkpoint(*options.checkpoint_path, model);
      stale = 0;
    } else {
      ++stale;
    }
    if (options.progress != nullptr) {
      *options.progress << "epoch " << epoch << " loss " << std::fixed << std::setprecision(4) << rec.train_loss
                        << " valid recall@10 " << rec.recall10 << " mrr@10 " << rec.mrr10 << (improved ? " *" : "")
                        << " (" << std::setprecision(1) << rec.elapsed_s << "s)\n"
                        << std::defaultfloat << std::flush;
    }
    if (options.on_epoch && !options.on_epoch(rec, model)) break;
    if (stale >= config.patience) {
      result.early_stopped = true;
      break;
    }
  }
  return result;
}

}  // namespace grit::train
