#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace grit::data {

using ItemId = std::int32_t;
inline constexpr ItemId kPad = 0;

enum class LogFormat {
  kMovieLens,  // user \t item \t rating \t timestamp
  kCsv,        // user_id,item_id,timestamp[,...] with optional header
};

LogFormat parse_format(std::string_view name);

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  std::vector<Interaction> records;  // file order
  std::size_t skipped = 0;           // malformed lines dropped
};

/// Throws DataError when the file cannot be read or more than 1% of its
/// non-blank lines are malformed.
InteractionLog load_log(const std::filesystem::path& path, LogFormat format);
InteractionLog parse_log(std::string_view text, LogFormat format);

/// Dense, chronologically ordered interaction sequences. Item index 0 is the
/// padding token; real items are numbered 1..item_count().
struct Dataset {
  std::vector<std::string> user_ids;  // dense user -> raw id
  std::vector<std::string> item_ids;  // dense item -> raw id; [0] is ""
  std::vector<std::vector<ItemId>> sequences;

  std::size_t user_count() const { return user_ids.size(); }
  std::size_t item_count() const { return item_ids.empty() ? 0 : item_ids.size() - 1; }
  std::size_t interaction_count() const;
  double sparsity() const;

  std::optional<std::size_t> user_index(const std::string& raw) const;
  std::optional<ItemId> item_index(const std::string& raw) const;

 private:
  mutable std::unordered_map<std::string, std::size_t> user_lookup_;
  mutable std::unordered_map<std::string, ItemId> item_lookup_;
};

/// Iterated k-core filter on users and items, then dense re-indexing with raw
/// ids in natural order (digit runs compare numerically). Each user's items
/// are sorted by timestamp, ties kept in file order. Throws DataError if
/// nothing survives.
Dataset five_core_filter(const InteractionLog& log, std::size_t min_count = 5);

/// Rebuilds a raw log from a dataset (timestamps become sequence positions).
InteractionLog to_log(const Dataset& ds);

enum class Phase { kValid, kTest };

struct SplitDataset {
  std::vector<std::vector<ItemId>> train;
  std::vector<ItemId> valid;
  std::vector<ItemId> test;
  std::size_t item_count = 0;

  std::size_t user_count() const { return train.size(); }
  /// Model input for ranking the held-out item of `phase`: the train prefix
  /// for validation, train prefix plus validation item for test.
  std::vector<ItemId> context(std::size_t user, Phase phase) const;
  ItemId target(std::size_t user, Phase phase) const { return phase == Phase::kValid ? valid[user] : test[user]; }
  /// The complete chronological sequence.
  std::vector<ItemId> full_sequence(std::size_t user) const;
};

/// Leave-one-out: last item is the test target, the one before it the
/// validation target. Throws DataError listing users with fewer than 3 items.
SplitDataset leave_one_out_split(const Dataset& ds);

/// Left-padded batch of item windows, row-major B x L.
struct SequenceBatch {
  std::size_t rows = 0;
  std::size_t length = 0;
  std::vector<ItemId> item_ids;
  std::vector<std::uint8_t> mask;  // 1 = real item
  std::vector<ItemId> targets;     // next item per position, 0 where none
  std::vector<std::int32_t> users;
  // Position of the row's first real item within the user's train sequence.
  std::vector<std::int32_t> first_index;

  ItemId item(std::size_t r, std::size_t c) const { return item_ids[r * length + c]; }
  bool real(std::size_t r, std::size_t c) const { return mask[r * length + c] != 0; }
  ItemId target(std::size_t r, std::size_t c) const { return targets[r * length + c]; }
  std::size_t pad_count(std::size_t row) const;
};

struct Chunk {
  std::size_t begin = 0;  // index into the sequence
  std::size_t size = 0;
};

/// End-anchored, non-overlapping chunks of at most `max_len` items, oldest
/// first. The most recent chunk is always full unless the sequence is short.
std::vector<Chunk> end_anchored_chunks(std::size_t sequence_length, std::size_t max_len);

/// Training batches over every chunk of every train sequence, shuffled with
/// `shuffle_seed`. The target of a chunk's last position is the next item of
/// the train sequence when one exists.
std::vector<SequenceBatch> make_batches(const SplitDataset& split, std::size_t max_len, std::size_t batch_size,
                                        std::uint64_t shuffle_seed);

/// One left-padded row per context, truncated to the most recent `max_len`
/// items. Targets are all zero.
SequenceBatch context_batch(std::span<const std::vector<ItemId>> contexts, std::span<const std::int32_t> users,
                            std::size_t max_len);

/// Versioned JSON cache of a filtered dataset plus the fingerprint of the
/// source file it was built from.
struct CachedDataset {
  Dataset dataset;
  std::string source_fingerprint;
};

inline constexpr std::string_view kDatasetFormatTag = "grit-dataset/1";

void save_dataset(const std::filesystem::path& path, const Dataset& ds, const std::string& source_fingerprint);
CachedDataset load_dataset(const std::filesystem::path& path);

/// Size plus FNV-1a hash of the file's bytes.
std::string file_fingerprint(const std::filesystem::path& path);

}  // namespace grit::data
