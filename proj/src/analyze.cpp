#include "grit/analyze.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <ostream>

#include "grit/errors.hpp"
#include "grit/tensor.hpp"

namespace grit::analyze {

SimilarityMatrix column_similarity(const Tensor& groups, std::ostream* warnings) {
  if (groups.rank() != 2) throw std::invalid_argument("column_similarity: expected [d, kappa], got " +
                                                      diff::shape_str(groups.shape()));
  const auto d = groups.dim(0);
  const auto k = groups.dim(1);
  const auto g = groups.values();
  std::vector<double> norms(k, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t a = 0; a < k; ++a) norms[a] += g[i * k + a] * g[i * k + a];
  }
  SimilarityMatrix m;
  m.groups = k;
  m.values.assign(k * k, 0.0);
  for (std::size_t a = 0; a < k; ++a) {
    norms[a] = std::sqrt(norms[a]);
    if (norms[a] == 0.0) m.zero_columns.push_back(a);
  }
  for (std::size_t a = 0; a < k; ++a) {
    m.values[a * k + a] = 1.0;
    if (norms[a] == 0.0) continue;
    for (std::size_t b = a + 1; b < k; ++b) {
      if (norms[b] == 0.0) continue;
      double dot = 0.0;
      for (std::size_t i = 0; i < d; ++i) dot += g[i * k + a] * g[i * k + b];
      const double c = std::clamp(dot / (norms[a] * norms[b]), -1.0, 1.0);
      m.values[a * k + b] = c;
      m.values[b * k + a] = c;
    }
  }
  if (warnings != nullptr && !m.zero_columns.empty()) {
    *warnings << "warning: " << m.zero_columns.size() << " group column(s) have zero norm:";
    for (auto c : m.zero_columns) *warnings << ' ' << c;
    *warnings << '\n';
  }
  return m;
}

SimilarityMatrix group_similarity(const GritModel& model, std::size_t block_index, std::ostream* warnings) {
  if (!model.config.group_branch) throw UsageError("model has no group branch");
  if (block_index >= model.blocks.size()) {
    throw UsageError("block index " + std::to_string(block_index) + " out of range for " +
                     std::to_string(model.blocks.size()) + " blocks");
  }
  return column_similarity(model.blocks[block_index].group.groups, warnings);
}

MembershipTimeline membership_timeline(const GritModel& model, std::size_t user, const data::SplitDataset& split) {
  if (!model.config.group_branch) throw UsageError("model has no group branch");
  if (user >= split.user_count()) throw UsageError("unknown user index " + std::to_string(user));
  diff::NoGradGuard no_grad;
  std::mt19937_64 unused_rng(0);
  const std::vector<std::vector<data::ItemId>> contexts{split.full_sequence(user)};
  const std::vector<std::int32_t> users{static_cast<std::int32_t>(user)};
  const auto batch = data::context_batch(contexts, users, model.config.max_len);
  const auto result = forward(model, batch, false, unused_rng);
  const auto c = result.memberships.back().values();
  const auto k = model.config.groups;

  MembershipTimeline t;
  t.groups = k;
  for (std::size_t pos = 0; pos < batch.length; ++pos) {
    if (!batch.real(0, pos)) continue;
    t.items.push_back(batch.item(0, pos));
    t.rows.insert(t.rows.end(), c.begin() + static_cast<std::ptrdiff_t>(pos * k),
                  c.begin() + static_cast<std::ptrdiff_t>((pos + 1) * k));
  }
  return t;
}

namespace {

std::ofstream open_for_write(const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << std::setprecision(17);
  return os;
}

}  // namespace

void write_similarity_csv(const std::filesystem::path& path, const SimilarityMatrix& m) {
  auto os = open_for_write(path);
  os << "group";
  for (std::size_t b = 0; b < m.groups; ++b) os << ',' << b;
  os << '\n';
  for (std::size_t a = 0; a < m.groups; ++a) {
    os << a;
    for (std::size_t b = 0; b < m.groups; ++b) os << ',' << m.at(a, b);
    os << '\n';
  }
}

void write_similarity_gnuplot(const std::filesystem::path& path, const SimilarityMatrix& m) {
  auto os = open_for_write(path);
  for (std::size_t a = 0; a < m.groups; ++a) {
    for (std::size_t b = 0; b < m.groups; ++b) os << (b ? " " : "") << m.at(a, b);
    os << '\n';
  }
}

void write_timeline_csv(const std::filesystem::path& path, const MembershipTimeline& t) {
  auto os = open_for_write(path);
  os << "timestep";
  for (std::size_t g = 0; g < t.groups; ++g) os << ",g" << g;
  os << '\n';
  for (std::size_t s = 0; s < t.steps(); ++s) {
    os << s;
    for (std::size_t g = 0; g < t.groups; ++g) os << ',' << t.rows[s * t.groups + g];
    os << '\n';
  }
}

}  // namespace grit::analyze
