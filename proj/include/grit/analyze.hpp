#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <vector>

#include "grit/dataio.hpp"
#include "grit/model.hpp"

namespace grit::analyze {

/// kappa x kappa cosine similarities between the columns of G, row-major.
struct SimilarityMatrix {
  std::size_t groups = 0;
  std::vector<double> values;
  std::vector<std::size_t> zero_columns;  // columns with zero norm

  double at(std::size_t a, std::size_t b) const { return values[a * groups + b]; }
};

/// Cosine similarity of the columns of groups [d, kappa]. A zero-norm column
/// gets a zero row and column with 1 on the diagonal, and a warning.
SimilarityMatrix column_similarity(const Tensor& groups, std::ostream* warnings = nullptr);

/// Similarity matrix of the G of block `block_index`.
SimilarityMatrix group_similarity(const GritModel& model, std::size_t block_index, std::ostream* warnings = nullptr);

/// Final-block memberships of one user at every real position.
struct MembershipTimeline {
  std::size_t groups = 0;
  std::vector<data::ItemId> items;  // item at each timestep
  std::vector<double> rows;         // steps x groups, row-major

  std::size_t steps() const { return items.size(); }
};

/// Runs the model on the user's full sequence truncated to the most recent
/// max_len items. Throws UsageError for an unknown user or a model without
/// the group branch.
MembershipTimeline membership_timeline(const GritModel& model, std::size_t user, const data::SplitDataset& split);

/// Header row of group indices, then one row per group.
void write_similarity_csv(const std::filesystem::path& path, const SimilarityMatrix& m);
/// Whitespace-separated matrix for gnuplot's `plot 'file' matrix with image`.
void write_similarity_gnuplot(const std::filesystem::path& path, const SimilarityMatrix& m);
/// timestep,g0..g{kappa-1}
void write_timeline_csv(const std::filesystem::path& path, const MembershipTimeline& t);

}  // namespace grit::analyze
