#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "grit/config.hpp"
#include "grit/dataio.hpp"
#include "grit/groupdyn.hpp"
#include "grit/seqencode.hpp"
#include "grit/tensor.hpp"

namespace grit {

using diff::Tensor;

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const;
};

struct AttentionParams {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  Tensor norm_gain;
  Tensor norm_bias;
};

struct FeedForwardParams {
  Linear expand;    // W1, b1: d -> d_ff
  Linear contract;  // W2, b2: d_ff -> d
  Tensor norm_gain;
  Tensor norm_bias;
};

struct BlockParams {
  AttentionParams attention;
  group::GroupBranchParams group;
  FeedForwardParams ffn;
};

/// Embedding tables plus `layers` encoder blocks. The item table doubles as
/// the output scoring matrix.
struct GritModel {
  ModelConfig config;
  EmbeddingTables embeddings;
  std::vector<BlockParams> blocks;

  /// Every tensor in a fixed order with stable names, frozen ones included.
  std::vector<NamedTensor> parameters() const;
  /// Only the tensors the optimiser updates.
  std::vector<NamedTensor> trainable_parameters() const;
  /// Independent copy of every parameter.
  GritModel clone() const;
  void copy_values_from(const GritModel& other);
};

/// Parameters drawn from independent per-tensor streams of `seed`, so the
/// attention path initialises identically with or without the group branch.
GritModel init_model(const ModelConfig& config, std::uint64_t seed);

/// Additive [B*H, L, L] mask: -inf for future keys and padded keys.
Tensor causal_attention_mask(std::span<const std::uint8_t> mask, std::size_t rows, std::size_t len, std::size_t heads);

/// Multi-head causal self-attention with residual dropout, residual add and
/// layer norm: e = LN(x + Dropout(MHA(x))).
Tensor self_attention(const Tensor& x, const Tensor& attention_mask, const AttentionParams& params,
                      const ModelConfig& config, bool training, std::mt19937_64& rng);

/// u = beta g + (1 - beta) e.
Tensor fuse(const Tensor& e, const Tensor& g, double beta);

/// o = LN(Dropout(W2 GELU(W1 u + b1) + b2) + u).
Tensor feed_forward(const Tensor& u, const FeedForwardParams& params, const ModelConfig& config, bool training,
                    std::mt19937_64& rng);

struct ForwardResult {
  Tensor hidden;                    // [B, L, d], zero at padding
  std::vector<Tensor> memberships;  // per block, [B, L, kappa]; empty without group branch
};

ForwardResult forward(const GritModel& model, const data::SequenceBatch& batch, bool training, std::mt19937_64& rng);

/// Dot product of one hidden state with every item row; the padding index
/// scores -inf. Returns [m + 1].
Tensor score(std::span<const double> hidden, const Tensor& item_table);

/// Scores for every row of hidden [N, d] against the table, [N, m + 1]; the
/// padding column is left as computed.
Tensor score_rows(const Tensor& hidden, const Tensor& item_table);

inline constexpr std::string_view kCheckpointMagic = "GRITCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const GritModel& model);
GritModel load_checkpoint(const std::filesystem::path& path);

}  // namespace grit
