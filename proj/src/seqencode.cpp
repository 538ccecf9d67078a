#include "grit/seqencode.hpp"

#include <cmath>

#include "grit/errors.hpp"
#include "grit/ops.hpp"
#include "grit/rng.hpp"

namespace grit {

using diff::Tensor;

std::vector<NamedTensor> EmbeddingTables::parameters() const {
  return {{"embed.items", items}, {"embed.positional", positional}, {"embed.norm.gain", norm_gain},
          {"embed.norm.bias", norm_bias}};
}

Tensor sinusoidal_table(std::size_t length, std::size_t dim) {
  if (dim % 2 != 0) throw UsageError("sinusoidal positional encoding needs an even dimension, got " + std::to_string(dim));
  std::vector<double> v(length * dim);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t k = 0; k < dim / 2; ++k) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
      v[pos * dim + 2 * k] = std::sin(static_cast<double>(pos) * freq);
      v[pos * dim + 2 * k + 1] = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return Tensor::from({length, dim}, std::move(v));
}

EmbeddingTables init_tables(const ModelConfig& config, std::uint64_t seed) {
  const auto d = config.hidden;
  if (config.positional != PositionalMode::kFullyLearnable && d % 2 != 0) {
    throw UsageError("sinusoidal positional encoding needs an even hidden size, got " + std::to_string(d));
  }
  EmbeddingTables t;
  t.mode = config.positional;
  t.items = Tensor::zeros({config.item_count + 1, d}, true);
  auto rng = make_stream(seed, "embed.items");
  fill_truncated_normal(t.items.values().subspan(d), config.init_std, rng);

  if (config.positional == PositionalMode::kFullyLearnable) {
    t.positional = Tensor::zeros({config.max_len, d}, true);
    auto prng = make_stream(seed, "embed.positional");
    fill_truncated_normal(t.positional.values(), config.init_std, prng);
  } else {
    t.positional = sinusoidal_table(config.max_len, d);
    t.positional.set_requires_grad(config.positional == PositionalMode::kLearnableSinusoidal);
  }
  t.norm_gain = Tensor::full({d}, 1.0, true);
  t.norm_bias = Tensor::zeros({d}, true);
  return t;
}

Tensor position_mask(const data::SequenceBatch& batch) {
  std::vector<double> m(batch.mask.begin(), batch.mask.end());
  return Tensor::from({batch.rows, batch.length, 1}, std::move(m));
}

Tensor encode_sequence(const data::SequenceBatch& batch, const EmbeddingTables& tables, const ModelConfig& config,
                       bool training, std::mt19937_64& rng) {
  if (batch.length != tables.positional.dim(0)) {
    throw std::invalid_argument("encode_sequence: batch length " + std::to_string(batch.length) +
                                " does not match positional table of " + std::to_string(tables.positional.dim(0)) +
                                " rows");
  }
  const auto v = diff::gather_rows(tables.items, batch.item_ids, {batch.rows, batch.length});
  const auto summed = diff::add(v, tables.positional);
  const auto normed = diff::layer_norm(summed, tables.norm_gain, tables.norm_bias, config.layer_norm_eps);
  const auto dropped = diff::dropout(normed, config.dropout, training, rng);
  return diff::mul(dropped, position_mask(batch));
}

}  // namespace grit
