#include "grit/model.hpp"

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>

#include "grit/errors.hpp"
#include "grit/ops.hpp"
#include "grit/rng.hpp"

namespace grit {

namespace {

Linear make_linear(std::size_t in, std::size_t out, double init_std, std::uint64_t seed, const std::string& name) {
  Linear l{Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
  auto rng = make_stream(seed, name);
  fill_truncated_normal(l.weight.values(), init_std, rng);
  return l;
}

void collect(const Linear& l, const std::string& prefix, std::vector<NamedTensor>& out) {
  out.emplace_back(prefix + ".weight", l.weight);
  out.emplace_back(prefix + ".bias", l.bias);
}

}  // namespace

Tensor Linear::operator()(const Tensor& x) const { return diff::add(diff::matmul(x, weight), bias); }

std::vector<NamedTensor> GritModel::parameters() const {
  auto out = embeddings.parameters();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto prefix = "block" + std::to_string(b);
    const auto& blk = blocks[b];
    collect(blk.attention.query, prefix + ".attention.query", out);
    collect(blk.attention.key, prefix + ".attention.key", out);
    collect(blk.attention.value, prefix + ".attention.value", out);
    collect(blk.attention.output, prefix + ".attention.output", out);
    out.emplace_back(prefix + ".attention.norm.gain", blk.attention.norm_gain);
    out.emplace_back(prefix + ".attention.norm.bias", blk.attention.norm_bias);
    if (config.group_branch) blk.group.collect(prefix + ".group", out);
    collect(blk.ffn.expand, prefix + ".ffn.expand", out);
    collect(blk.ffn.contract, prefix + ".ffn.contract", out);
    out.emplace_back(prefix + ".ffn.norm.gain", blk.ffn.norm_gain);
    out.emplace_back(prefix + ".ffn.norm.bias", blk.ffn.norm_bias);
  }
  return out;
}

std::vector<NamedTensor> GritModel::trainable_parameters() const {
  auto all = parameters();
  std::erase_if(all, [](const NamedTensor& p) { return !p.second.requires_grad(); });
  return all;
}

GritModel GritModel::clone() const {
  auto copy = init_model(config, 0);
  copy.copy_values_from(*this);
  return copy;
}

void GritModel::copy_values_from(const GritModel& other) {
  auto mine = parameters();
  const auto theirs = other.parameters();
  if (mine.size() != theirs.size()) throw std::invalid_argument("copy_values_from: parameter sets differ");
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i].first != theirs[i].first || mine[i].second.shape() != theirs[i].second.shape()) {
      throw std::invalid_argument("copy_values_from: mismatch at " + mine[i].first);
    }
    const auto src = theirs[i].second.values();
    std::copy(src.begin(), src.end(), mine[i].second.values().begin());
  }
}

GritModel init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  GritModel m;
  m.config = config;
  m.embeddings = init_tables(config, seed);
  const auto d = config.hidden;
  const auto std = config.init_std;
  for (std::size_t b = 0; b < config.layers; ++b) {
    const auto prefix = "block" + std::to_string(b);
    BlockParams blk;
    blk.attention.query = make_linear(d, d, std, seed, prefix + ".attention.query");
    blk.attention.key = make_linear(d, d, std, seed, prefix + ".attention.key");
    blk.attention.value = make_linear(d, d, std, seed, prefix + ".attention.value");
    blk.attention.output = make_linear(d, d, std, seed, prefix + ".attention.output");
    blk.attention.norm_gain = Tensor::full({d}, 1.0, true);
    blk.attention.norm_bias = Tensor::zeros({d}, true);
    if (config.group_branch) {
      auto rng = make_stream(seed, prefix + ".group");
      blk.group = group::init_group_params(config, rng);
    }
    blk.ffn.expand = make_linear(d, config.ffn_width(), std, seed, prefix + ".ffn.expand");
    blk.ffn.contract = make_linear(config.ffn_width(), d, std, seed, prefix + ".ffn.contract");
    blk.ffn.norm_gain = Tensor::full({d}, 1.0, true);
    blk.ffn.norm_bias = Tensor::zeros({d}, true);
    m.blocks.push_back(std::move(blk));
  }
  return m;
}

Tensor causal_attention_mask(std::span<const std::uint8_t> mask, std::size_t rows, std::size_t len, std::size_t heads) {
  const double neg_inf = -std::numeric_limits<double>::infinity();
  std::vector<double> v(rows * heads * len * len, 0.0);
  for (std::size_t b = 0; b < rows; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* block = v.data() + (b * heads + h) * len * len;
      for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
          if (j > i || !mask[b * len + j]) block[i * len + j] = neg_inf;
        }
      }
    }
  }
  return Tensor::from({rows * heads, len, len}, std::move(v));
}

namespace {

// [B, L, d] -> [B*H, L, d/H]
Tensor split_heads(const Tensor& x, std::size_t heads) {
  const auto b = x.dim(0);
  const auto l = x.dim(1);
  const auto dh = x.dim(2) / heads;
  return diff::reshape(diff::swap_axes12(diff::reshape(x, {b, l, heads, dh})), {b * heads, l, dh});
}

// [B*H, L, d/H] -> [B, L, d]
Tensor merge_heads(const Tensor& x, std::size_t rows, std::size_t heads) {
  const auto l = x.dim(1);
  const auto dh = x.dim(2);
  return diff::reshape(diff::swap_axes12(diff::reshape(x, {rows, heads, l, dh})), {rows, l, heads * dh});
}

}  // namespace

Tensor self_attention(const Tensor& x, const Tensor& attention_mask, const AttentionParams& params,
                      const ModelConfig& config, bool training, std::mt19937_64& rng) {
  const auto rows = x.dim(0);
  const auto heads = config.heads;
  const auto q = split_heads(params.query(x), heads);
  const auto k = split_heads(params.key(x), heads);
  const auto v = split_heads(params.value(x), heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.hidden / heads));
  const auto logits = diff::scale(diff::bmm(q, k, true), scale);
  const auto probs = diff::dropout(diff::softmax_last(logits, &attention_mask), config.attn_dropout, training, rng);
  const auto context = merge_heads(diff::bmm(probs, v), rows, heads);
  const auto projected = diff::dropout(params.output(context), config.dropout, training, rng);
  return diff::layer_norm(diff::add(x, projected), params.norm_gain, params.norm_bias, config.layer_norm_eps);
}

Tensor fuse(const Tensor& e, const Tensor& g, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("fuse: beta must lie in [0, 1]");
  if (e.shape() != g.shape()) {
    throw std::invalid_argument("fuse: shape mismatch " + diff::shape_str(e.shape()) + " vs " +
                                diff::shape_str(g.shape()));
  }
  return diff::add(diff::scale(g, beta), diff::scale(e, 1.0 - beta));
}

Tensor feed_forward(const Tensor& u, const FeedForwardParams& params, const ModelConfig& config, bool training,
                    std::mt19937_64& rng) {
  const auto y = diff::gelu(params.expand(u));
  const auto z = diff::dropout(params.contract(y), config.dropout, training, rng);
  return diff::layer_norm(diff::add(z, u), params.norm_gain, params.norm_bias, config.layer_norm_eps);
}

ForwardResult forward(const GritModel& model, const data::SequenceBatch& batch, bool training, std::mt19937_64& rng) {
  const auto& cfg = model.config;
  if (batch.length != cfg.max_len) {
    throw std::invalid_argument("forward: batch length " + std::to_string(batch.length) + " differs from max_len " +
                                std::to_string(cfg.max_len));
  }
  const auto pmask = position_mask(batch);
  const auto attn_mask = causal_attention_mask(batch.mask, batch.rows, batch.length, cfg.heads);
  ForwardResult out;
  auto h = encode_sequence(batch, model.embeddings, cfg, training, rng);
  for (const auto& blk : model.blocks) {
    const auto e = self_attention(h, attn_mask, blk.attention, cfg, training, rng);
    Tensor u = e;
    if (cfg.group_branch) {
      auto branch = group::group_branch(h, batch.mask, pmask, blk.group, cfg);
      u = fuse(e, branch.representation, cfg.beta);
      out.memberships.push_back(std::move(branch.membership));
    }
    h = diff::mul(feed_forward(u, blk.ffn, cfg, training, rng), pmask);
  }
  out.hidden = h;
  return out;
}

Tensor score(std::span<const double> hidden, const Tensor& item_table) {
  const auto rows = item_table.dim(0);
  const auto d = item_table.dim(1);
  if (hidden.size() != d) {
    throw std::invalid_argument("score: hidden state of " + std::to_string(hidden.size()) + " values for table " +
                                diff::shape_str(item_table.shape()));
  }
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> table(item_table.values().data(), static_cast<Eigen::Index>(rows),
                                 static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::VectorXd> h(hidden.data(), static_cast<Eigen::Index>(d));
  std::vector<double> s(rows);
  Eigen::Map<Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(rows)).noalias() = table * h;
  s[data::kPad] = -std::numeric_limits<double>::infinity();
  return Tensor::from({rows}, std::move(s));
}

Tensor score_rows(const Tensor& hidden, const Tensor& item_table) { return diff::matmul(hidden, item_table, true); }

namespace {

template <class T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& is, const std::filesystem::path& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) throw DataError("truncated checkpoint " + path.string());
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const GritModel& model) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  put(os, kCheckpointVersion);
  const auto cfg = to_json(model.config).dump();
  put(os, static_cast<std::uint64_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  const auto params = model.parameters();
  put(os, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, t] : params) {
    put(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put(os, static_cast<std::uint32_t>(t.rank()));
    for (auto extent : t.shape()) put(os, static_cast<std::uint64_t>(extent));
    const auto v = t.values();
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("error while writing checkpoint " + path.string());
}

GritModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read checkpoint " + path.string());
  std::string magic(kCheckpointMagic.size(), '\0');
  is.read(magic.data(), static_cast<std::streamsize>(magic.size()));
  if (!is || magic != kCheckpointMagic) throw DataError(path.string() + " is not a checkpoint");
  const auto version = get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto cfg_len = get<std::uint64_t>(is, path);
  std::string cfg(cfg_len, '\0');
  is.read(cfg.data(), static_cast<std::streamsize>(cfg_len));
  if (!is) throw DataError("truncated checkpoint " + path.string());
  const auto config = model_config_from_json(nlohmann::json::parse(cfg));
  auto model = init_model(config, 0);
  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : model.parameters()) by_name.emplace(name, t);
  const auto count = get<std::uint64_t>(is, path);
  if (count != by_name.size()) throw DataError("checkpoint tensor count does not match its config");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is, path);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(is, path);
    diff::Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::size_t>(get<std::uint64_t>(is, path));
    const auto it = by_name.find(name);
    if (it == by_name.end() || it->second.shape() != shape) {
      throw DataError("checkpoint tensor '" + name + "' " + diff::shape_str(shape) + " does not fit the model");
    }
    auto v = it->second.values();
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!is) throw DataError("truncated checkpoint " + path.string());
  }
  return model;
}

}  // namespace grit
