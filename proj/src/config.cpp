#include "grit/config.hpp"

#include <set>

#include "grit/errors.hpp"

namespace grit {

using nlohmann::json;

std::string_view to_string(PositionalMode mode) {
  switch (mode) {
    case PositionalMode::kFixedSinusoidal:
      return "fixed_sinusoidal";
    case PositionalMode::kLearnableSinusoidal:
      return "learnable_sinusoidal_init";
    case PositionalMode::kFullyLearnable:
      return "fully_learnable";
  }
  return "fully_learnable";
}

PositionalMode parse_positional_mode(std::string_view name) {
  if (name == "fixed_sinusoidal") return PositionalMode::kFixedSinusoidal;
  if (name == "learnable_sinusoidal_init") return PositionalMode::kLearnableSinusoidal;
  if (name == "fully_learnable") return PositionalMode::kFullyLearnable;
  throw UsageError("unknown positional mode '" + std::string(name) + "'");
}

namespace {

template <class Config, class F>
void visit_fields(Config& c, F&& f) {
  if constexpr (std::is_same_v<std::remove_const_t<Config>, ModelConfig>) {
    f("item_count", c.item_count);
    f("hidden", c.hidden);
    f("max_len", c.max_len);
    f("layers", c.layers);
    f("heads", c.heads);
    f("ffn_hidden", c.ffn_hidden);
    f("groups", c.groups);
    f("beta", c.beta);
    f("tau", c.tau);
    f("alpha_complete", c.alpha_complete);
    f("alpha_short", c.alpha_short);
    f("window", c.window);
    f("variance_floor", c.variance_floor);
    f("dropout", c.dropout);
    f("attn_dropout", c.attn_dropout);
    f("layer_norm_eps", c.layer_norm_eps);
    f("init_std", c.init_std);
    f("positional", c.positional);
    f("use_x_complete", c.use_x_complete);
    f("use_t_complete", c.use_t_complete);
    f("use_x_short", c.use_x_short);
    f("use_t_short", c.use_t_short);
    f("group_branch", c.group_branch);
    f("mlp_hidden_layer", c.mlp_hidden_layer);
  } else {
    f("learning_rate", c.learning_rate);
    f("weight_decay", c.weight_decay);
    f("batch_size", c.batch_size);
    f("max_epochs", c.max_epochs);
    f("patience", c.patience);
    f("seed", c.seed);
    f("grad_clip", c.grad_clip);
    f("exclude_history_in_eval", c.exclude_history_in_eval);
    f("eval_batch_size", c.eval_batch_size);
  }
}

struct Writer {
  json& out;
  template <class T>
  void operator()(const char* key, const T& v) {
    out[key] = v;
  }
  void operator()(const char* key, const PositionalMode& v) { out[key] = std::string(to_string(v)); }
};

struct Reader {
  const json& in;
  std::set<std::string>& seen;
  template <class T>
  void operator()(const char* key, T& v) {
    const auto it = in.find(key);
    if (it == in.end()) return;
    seen.insert(key);
    try {
      if constexpr (std::is_same_v<T, PositionalMode>) {
        v = parse_positional_mode(it->template get<std::string>());
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw UsageError("");
        v = it->template get<bool>();
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw UsageError("");
        if (std::is_unsigned_v<T> && !it->is_number_unsigned() && it->template get<std::int64_t>() < 0) {
          throw UsageError("");
        }
        v = it->template get<T>();
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw UsageError("");
        v = it->template get<T>();
      } else {
        v = it->template get<T>();
      }
    } catch (const UsageError& e) {
      if (std::string_view(e.what()).empty()) {
        throw UsageError(std::string("config key '") + key + "' has the wrong type: " + it->dump());
      }
      throw;
    } catch (const json::exception&) {
      throw UsageError(std::string("config key '") + key + "' has the wrong type: " + it->dump());
    }
  }
};

void reject_unknown(const json& j, const std::set<std::string>& seen) {
  for (const auto& [key, _] : j.items()) {
    if (!seen.contains(key)) throw UsageError("unknown config key '" + key + "'");
  }
}

void require(bool ok, const std::string& what) {
  if (!ok) throw UsageError("invalid configuration: " + what);
}

}  // namespace

void ModelConfig::validate() const {
  require(hidden > 0, "hidden must be positive");
  require(max_len >= 2, "max_len must be at least 2");
  require(layers >= 1, "layers must be at least 1");
  require(heads >= 1 && hidden % heads == 0, "hidden must be divisible by heads");
  require(ffn_width() >= hidden, "ffn_hidden must be at least hidden");
  require(groups >= 1, "groups must be at least 1");
  require(beta >= 0.0 && beta <= 1.0, "beta must lie in [0, 1]");
  require(tau > 0.0, "tau must be positive");
  require(alpha_complete > 0.0 && alpha_complete < 1.0, "alpha_complete must lie in (0, 1)");
  require(alpha_short > 0.0 && alpha_short < 1.0, "alpha_short must lie in (0, 1)");
  require(window >= 1, "window must be at least 1");
  require(variance_floor > 0.0, "variance_floor must be positive");
  require(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  require(attn_dropout >= 0.0 && attn_dropout < 1.0, "attn_dropout must lie in [0, 1)");
  require(layer_norm_eps > 0.0, "layer_norm_eps must be positive");
  require(init_std > 0.0, "init_std must be positive");
  require(positional == PositionalMode::kFullyLearnable || hidden % 2 == 0,
          "sinusoidal positional encodings need an even hidden size");
}

void TrainConfig::validate() const {
  require(learning_rate >= 0.0, "learning_rate must be non-negative");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(batch_size >= 1, "batch_size must be positive");
  require(max_epochs >= 1, "max_epochs must be positive");
  require(patience >= 1, "patience must be at least 1");
  require(grad_clip >= 0.0, "grad_clip must be non-negative");
  require(eval_batch_size >= 1, "eval_batch_size must be positive");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
}

json to_json(const ModelConfig& c) {
  json j = json::object();
  visit_fields(c, Writer{j});
  return j;
}

json to_json(const TrainConfig& c) {
  json j = json::object();
  visit_fields(c, Writer{j});
  return j;
}

json to_json(const RunConfig& c) {
  json j = to_json(c.model);
  j.update(to_json(c.train));
  j["dataset"] = c.dataset;
  j["output_dir"] = c.output_dir;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("model config must be a JSON object");
  ModelConfig c;
  std::set<std::string> seen;
  visit_fields(c, Reader{j, seen});
  reject_unknown(j, seen);
  return c;
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw UsageError("run config must be a JSON object");
  RunConfig c;
  std::set<std::string> seen;
  visit_fields(c.model, Reader{j, seen});
  visit_fields(c.train, Reader{j, seen});
  Reader paths{j, seen};
  paths("dataset", c.dataset);
  paths("output_dir", c.output_dir);
  reject_unknown(j, seen);
  return c;
}

void apply_override(json& flat, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw UsageError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string text(assignment.substr(eq + 1));
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  flat[key] = value;
}

}  // namespace grit
