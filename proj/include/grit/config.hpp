#pragma once

#include <cstddef>
#include <cstdint>
#include <nlohmann/json.hpp>
#include <string>
#include <string_view>

namespace grit {

enum class PositionalMode { kFixedSinusoidal, kLearnableSinusoidal, kFullyLearnable };

std::string_view to_string(PositionalMode mode);
PositionalMode parse_positional_mode(std::string_view name);

/// Architecture hyperparameters. Defaults follow the published setup where
/// one is given (d=64, L=50, 2 layers, 4 heads, tau=2, decays 0.01/0.05,
/// window 5).
struct ModelConfig {
  std::size_t item_count = 0;  // m; the embedding table has m + 1 rows
  std::size_t hidden = 64;     // d
  std::size_t max_len = 50;    // L
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_hidden = 0;  // 0 means 4 * hidden
  std::size_t groups = 64;     // kappa
  double beta = 0.3;
  double tau = 2.0;
  double alpha_complete = 0.01;
  double alpha_short = 0.05;
  std::size_t window = 5;
  double variance_floor = 1e-6;
  double dropout = 0.3;       // embedding, residual and FFN dropout
  double attn_dropout = 0.1;  // attention probabilities
  double layer_norm_eps = 1e-12;
  double init_std = 0.02;
  PositionalMode positional = PositionalMode::kFullyLearnable;
  bool use_x_complete = true;
  bool use_t_complete = true;
  bool use_x_short = true;
  bool use_t_short = true;
  bool group_branch = true;     // false drops the group path entirely (u = e)
  bool mlp_hidden_layer = false;  // one GELU hidden layer inside each MLP

  std::size_t ffn_width() const { return ffn_hidden == 0 ? 4 * hidden : ffn_hidden; }
  /// Throws UsageError describing the first violated constraint.
  void validate() const;
};

struct TrainConfig {
  double learning_rate = 0.001;
  double weight_decay = 0.01;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 500;
  std::size_t patience = 10;
  std::uint64_t seed = 42;
  double grad_clip = 0.0;  // global-norm clip, 0 disables
  bool exclude_history_in_eval = false;
  std::size_t eval_batch_size = 256;

  void validate() const;
};

/// Everything a CLI run needs, serialised as one flat JSON object.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  std::string dataset;     // prepared dataset cache
  std::string output_dir = "runs/default";

  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const RunConfig& c);

/// Unknown keys throw UsageError.
ModelConfig model_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Applies "key=value" to a flat RunConfig JSON; the value is parsed as JSON
/// when possible and as a string otherwise.
void apply_override(nlohmann::json& flat, std::string_view assignment);

}  // namespace grit
