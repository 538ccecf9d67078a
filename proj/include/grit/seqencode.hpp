#pragma once

#include <random>
#include <string>
#include <utility>
#include <vector>

#include "grit/config.hpp"
#include "grit/dataio.hpp"
#include "grit/tensor.hpp"

namespace grit {

using NamedTensor = std::pair<std::string, diff::Tensor>;

/// Item table (row 0 is the padding token, kept at zero), positional table
/// with exactly max_len rows, and the input layer-norm affine parameters.
struct EmbeddingTables {
  diff::Tensor items;       // [m + 1, d]
  diff::Tensor positional;  // [L, d]; frozen in fixed_sinusoidal mode
  diff::Tensor norm_gain;   // [d]
  diff::Tensor norm_bias;   // [d]
  PositionalMode mode = PositionalMode::kFullyLearnable;

  std::vector<NamedTensor> parameters() const;
};

/// Standard sinusoid: even columns sin(pos / 10000^(2k/d)), odd columns cos.
diff::Tensor sinusoidal_table(std::size_t length, std::size_t dim);

EmbeddingTables init_tables(const ModelConfig& config, std::uint64_t seed);

/// Dropout(LayerNorm(item + position)) per position, with padded positions
/// set to zero afterwards. Returns [B, L, d].
diff::Tensor encode_sequence(const data::SequenceBatch& batch, const EmbeddingTables& tables, const ModelConfig& config,
                             bool training, std::mt19937_64& rng);

/// [B, L, 1] tensor holding 1 at real positions and 0 at padding.
diff::Tensor position_mask(const data::SequenceBatch& batch);

}  // namespace grit
