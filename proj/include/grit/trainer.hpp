#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "grit/config.hpp"
#include "grit/dataio.hpp"
#include "grit/model.hpp"
#include "grit/ops.hpp"

namespace grit::train {

/// Valid prediction positions of a batch with their targets and the columns
/// masked out of each softmax: padding plus every item the user has seen up
/// to and including that position (earlier chunks too), the target excepted.
struct LossTargets {
  std::vector<std::int32_t> positions;  // flat index r * L + c
  std::vector<std::int32_t> targets;
  diff::ExcludedColumns excluded;
};

LossTargets loss_targets(const data::SequenceBatch& batch, const data::SplitDataset& split);

/// Mean cross-entropy over the valid positions of logits [B, L, m + 1].
/// Throws std::invalid_argument if a listed position has the padding target.
Tensor masked_cross_entropy(const Tensor& logits, const data::SequenceBatch& batch, const LossTargets& targets);

/// Same loss computed from the model, scoring only the valid positions.
Tensor batch_loss(const GritModel& model, const data::SequenceBatch& batch, const LossTargets& targets, bool training,
                  std::mt19937_64& rng);

struct OptimizerState {
  std::vector<std::vector<double>> first;   // one per parameter, same order
  std::vector<std::vector<double>> second;
  std::uint64_t step = 0;
  double weight_decay = 0.0;
};

OptimizerState make_optimizer_state(std::span<const NamedTensor> params, double weight_decay);

struct StepResult {
  bool applied = false;
  double grad_norm = 0.0;
  std::vector<std::string> non_finite;  // parameters whose gradient was not finite
};

/// One AdamW update (beta1 0.9, beta2 0.999, eps 1e-8, decoupled decay, bias
/// correction) using each parameter's accumulated gradient. The whole step is
/// skipped when any gradient is non-finite. Frozen tensors are never touched
/// and row 0 of embed.items is zeroed afterwards.
StepResult adamw_step(std::span<const NamedTensor> params, OptimizerState& state, double learning_rate,
                      double grad_clip = 0.0, std::ostream* warnings = nullptr);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double recall10 = 0.0;
  double mrr10 = 0.0;
  double elapsed_s = 0.0;
};

nlohmann::json to_json(const EpochRecord& r);

struct FitOptions {
  std::optional<std::filesystem::path> checkpoint_path;  // best model, rewritten on improvement
  std::optional<std::filesystem::path> log_path;         // line-JSON, one record per epoch
  std::ostream* progress = nullptr;
  /// Called after each epoch with the current (not best) model; returning
  /// false stops training.
  std::function<bool(const EpochRecord&, const GritModel&)> on_epoch;
};

struct FitResult {
  GritModel best;
  std::vector<EpochRecord> log;
  std::size_t best_epoch = 0;
  double best_recall10 = 0.0;
  bool early_stopped = false;
};

/// Trains with early stopping on validation Recall@10 and returns the best
/// model. Throws std::runtime_error if a validation metric is NaN.
FitResult fit(GritModel model, const data::SplitDataset& split, const TrainConfig& config,
              const FitOptions& options = {});

}  // namespace grit::train
