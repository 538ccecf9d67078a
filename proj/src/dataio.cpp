#include "grit/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <nlohmann/json.hpp>
#include <sstream>

#include "grit/errors.hpp"
#include "grit/rng.hpp"

namespace grit::data {

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  s = s.substr(b, e - b + 1);
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
  return s;
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::optional<std::int64_t> parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || ptr != end || s.empty()) return std::nullopt;
  return v;
}

// Integers compare numerically and sort before non-integers.
bool natural_less(const std::string& a, const std::string& b) {
  const auto ia = parse_int(a);
  const auto ib = parse_int(b);
  if (ia && ib) return *ia != *ib ? *ia < *ib : a < b;
  if (ia != ib) return ia.has_value();
  return a < b;
}

}  // namespace

LogFormat parse_format(std::string_view name) {
  if (name == "movielens" || name == "ml" || name == "tsv" || name == "udata") return LogFormat::kMovieLens;
  if (name == "csv") return LogFormat::kCsv;
  throw UsageError("unknown log format '" + std::string(name) + "' (expected movielens or csv)");
}

InteractionLog parse_log(std::string_view text, LogFormat format) {
  InteractionLog log;
  std::vector<std::size_t> bad_lines;
  std::size_t content_lines = 0;
  std::size_t user_col = 0;
  std::size_t item_col = 1;
  std::size_t time_col = format == LogFormat::kMovieLens ? 3 : 2;
  const char sep = format == LogFormat::kMovieLens ? '\t' : ',';
  bool first = true;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split(line, sep);
    if (first && format == LogFormat::kCsv) {
      first = false;
      const auto find = [&fields](std::string_view name) -> std::optional<std::size_t> {
        for (std::size_t i = 0; i < fields.size(); ++i) {
          if (fields[i] == name) return i;
        }
        return std::nullopt;
      };
      const auto u = find("user_id");
      const auto i = find("item_id");
      const auto t = find("timestamp");
      if (u || i || t) {
        if (!(u && i && t)) throw DataError("csv header must name user_id, item_id and timestamp");
        user_col = *u;
        item_col = *i;
        time_col = *t;
        continue;
      }
    }
    first = false;
    ++content_lines;
    const auto needed = std::max({user_col, item_col, time_col}) + 1;
    std::optional<std::int64_t> ts;
    if (fields.size() >= needed) ts = parse_int(fields[time_col]);
    if (fields.size() < needed || fields[user_col].empty() || fields[item_col].empty() || !ts) {
      bad_lines.push_back(line_no);
      continue;
    }
    log.records.push_back({std::string(fields[user_col]), std::string(fields[item_col]), *ts});
  }
  log.skipped = bad_lines.size();
  if (bad_lines.size() * 100 > content_lines) {
    std::ostringstream os;
    os << bad_lines.size() << " of " << content_lines << " lines are malformed (more than 1%); first at lines";
    for (std::size_t i = 0; i < std::min<std::size_t>(10, bad_lines.size()); ++i) os << ' ' << bad_lines[i];
    throw DataError(os.str());
  }
  return log;
}

InteractionLog load_log(const std::filesystem::path& path, LogFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read interaction log " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  if (in.bad()) throw DataError("error while reading " + path.string());
  return parse_log(buf.str(), format);
}

std::size_t Dataset::interaction_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

double Dataset::sparsity() const {
  const double cells = static_cast<double>(user_count()) * static_cast<double>(item_count());
  return cells == 0.0 ? 0.0 : 1.0 - static_cast<double>(interaction_count()) / cells;
}

std::optional<std::size_t> Dataset::user_index(const std::string& raw) const {
  if (user_lookup_.size() != user_ids.size()) {
    user_lookup_.clear();
    for (std::size_t u = 0; u < user_ids.size(); ++u) user_lookup_.emplace(user_ids[u], u);
  }
  const auto it = user_lookup_.find(raw);
  if (it == user_lookup_.end()) return std::nullopt;
  return it->second;
}

std::optional<ItemId> Dataset::item_index(const std::string& raw) const {
  if (item_lookup_.size() + 1 != item_ids.size()) {
    item_lookup_.clear();
    for (std::size_t i = 1; i < item_ids.size(); ++i) item_lookup_.emplace(item_ids[i], static_cast<ItemId>(i));
  }
  const auto it = item_lookup_.find(raw);
  if (it == item_lookup_.end()) return std::nullopt;
  return it->second;
}

Dataset five_core_filter(const InteractionLog& log, std::size_t min_count) {
  if (log.records.empty()) throw DataError("interaction log is empty");
  std::vector<bool> alive(log.records.size(), true);
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string_view, std::size_t> users;
    std::unordered_map<std::string_view, std::size_t> items;
    for (std::size_t r = 0; r < log.records.size(); ++r) {
      if (!alive[r]) continue;
      ++users[log.records[r].user];
      ++items[log.records[r].item];
    }
    for (std::size_t r = 0; r < log.records.size(); ++r) {
      if (alive[r] && (users[log.records[r].user] < min_count || items[log.records[r].item] < min_count)) {
        alive[r] = false;
        changed = true;
      }
    }
  }

  std::map<std::string, std::vector<std::size_t>, decltype(&natural_less)> by_user(&natural_less);
  std::map<std::string, ItemId, decltype(&natural_less)> item_order(&natural_less);
  for (std::size_t r = 0; r < log.records.size(); ++r) {
    if (!alive[r]) continue;
    by_user[log.records[r].user].push_back(r);
    item_order.emplace(log.records[r].item, 0);
  }
  if (by_user.empty()) throw DataError("dataset eliminated by 5-core");

  Dataset ds;
  ds.item_ids.emplace_back();
  for (auto& [raw, idx] : item_order) {
    idx = static_cast<ItemId>(ds.item_ids.size());
    ds.item_ids.push_back(raw);
  }
  for (auto& [raw, rows] : by_user) {
    std::stable_sort(rows.begin(), rows.end(), [&log](std::size_t a, std::size_t b) {
      return log.records[a].timestamp < log.records[b].timestamp;
    });
    std::vector<ItemId> seq;
    seq.reserve(rows.size());
    for (auto r : rows) seq.push_back(item_order.at(log.records[r].item));
    ds.user_ids.push_back(raw);
    ds.sequences.push_back(std::move(seq));
  }
  return ds;
}

InteractionLog to_log(const Dataset& ds) {
  InteractionLog log;
  for (std::size_t u = 0; u < ds.user_count(); ++u) {
    for (std::size_t i = 0; i < ds.sequences[u].size(); ++i) {
      log.records.push_back({ds.user_ids[u], ds.item_ids[static_cast<std::size_t>(ds.sequences[u][i])],
                             static_cast<std::int64_t>(i)});
    }
  }
  return log;
}

std::vector<ItemId> SplitDataset::context(std::size_t user, Phase phase) const {
  auto ctx = train.at(user);
  if (phase == Phase::kTest) ctx.push_back(valid[user]);
  return ctx;
}

std::vector<ItemId> SplitDataset::full_sequence(std::size_t user) const {
  auto seq = context(user, Phase::kTest);
  seq.push_back(test[user]);
  return seq;
}

SplitDataset leave_one_out_split(const Dataset& ds) {
  std::vector<std::string> short_users;
  for (std::size_t u = 0; u < ds.user_count(); ++u) {
    if (ds.sequences[u].size() < 3) short_users.push_back(ds.user_ids[u]);
  }
  if (!short_users.empty()) {
    std::string msg = "sequences shorter than 3 for users:";
    for (const auto& u : short_users) msg += " " + u;
    throw DataError(msg);
  }
  SplitDataset split;
  split.item_count = ds.item_count();
  for (const auto& seq : ds.sequences) {
    split.train.emplace_back(seq.begin(), seq.end() - 2);
    split.valid.push_back(seq[seq.size() - 2]);
    split.test.push_back(seq.back());
  }
  return split;
}

std::size_t SequenceBatch::pad_count(std::size_t row) const {
  std::size_t c = 0;
  while (c < length && !real(row, c)) ++c;
  return c;
}

std::vector<Chunk> end_anchored_chunks(std::size_t sequence_length, std::size_t max_len) {
  std::vector<Chunk> chunks;
  std::size_t end = sequence_length;
  while (end > 0) {
    const auto size = std::min(max_len, end);
    chunks.push_back({end - size, size});
    end -= size;
  }
  std::reverse(chunks.begin(), chunks.end());
  return chunks;
}

namespace {

struct RowSpec {
  std::int32_t user;
  Chunk chunk;
};

void fill_row(SequenceBatch& b, std::size_t r, std::span<const ItemId> items, std::span<const ItemId> targets) {
  const auto pads = b.length - items.size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    b.item_ids[r * b.length + pads + i] = items[i];
    b.mask[r * b.length + pads + i] = 1;
    if (i < targets.size()) b.targets[r * b.length + pads + i] = targets[i];
  }
}

SequenceBatch empty_batch(std::size_t rows, std::size_t len) {
  SequenceBatch b;
  b.rows = rows;
  b.length = len;
  b.item_ids.assign(rows * len, kPad);
  b.mask.assign(rows * len, 0);
  b.targets.assign(rows * len, kPad);
  b.users.assign(rows, 0);
  b.first_index.assign(rows, 0);
  return b;
}

}  // namespace

std::vector<SequenceBatch> make_batches(const SplitDataset& split, std::size_t max_len, std::size_t batch_size,
                                        std::uint64_t shuffle_seed) {
  if (max_len < 2) throw std::invalid_argument("make_batches: max length must be at least 2");
  if (batch_size == 0) throw std::invalid_argument("make_batches: batch size must be positive");
  std::vector<RowSpec> rows;
  for (std::size_t u = 0; u < split.user_count(); ++u) {
    for (const auto& c : end_anchored_chunks(split.train[u].size(), max_len)) {
      rows.push_back({static_cast<std::int32_t>(u), c});
    }
  }
  auto rng = make_stream(shuffle_seed, "shuffle");
  for (std::size_t i = rows.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(rows[i - 1], rows[pick(rng)]);
  }
  std::vector<SequenceBatch> batches;
  for (std::size_t start = 0; start < rows.size(); start += batch_size) {
    const auto n = std::min(batch_size, rows.size() - start);
    auto b = empty_batch(n, max_len);
    for (std::size_t r = 0; r < n; ++r) {
      const auto& spec = rows[start + r];
      const auto& seq = split.train[static_cast<std::size_t>(spec.user)];
      const std::span<const ItemId> items(seq.data() + spec.chunk.begin, spec.chunk.size);
      const auto tgt_end = std::min(seq.size(), spec.chunk.begin + spec.chunk.size + 1);
      const std::span<const ItemId> targets(seq.data() + spec.chunk.begin + 1, tgt_end - spec.chunk.begin - 1);
      fill_row(b, r, items, targets);
      b.users[r] = spec.user;
      b.first_index[r] = static_cast<std::int32_t>(spec.chunk.begin);
    }
    batches.push_back(std::move(b));
  }
  return batches;
}

SequenceBatch context_batch(std::span<const std::vector<ItemId>> contexts, std::span<const std::int32_t> users,
                            std::size_t max_len) {
  if (contexts.size() != users.size()) throw std::invalid_argument("context_batch: contexts/users size mismatch");
  auto b = empty_batch(contexts.size(), max_len);
  for (std::size_t r = 0; r < contexts.size(); ++r) {
    const auto& ctx = contexts[r];
    const auto n = std::min(max_len, ctx.size());
    const auto begin = ctx.size() - n;
    fill_row(b, r, std::span<const ItemId>(ctx.data() + begin, n), {});
    b.users[r] = users[r];
    b.first_index[r] = static_cast<std::int32_t>(begin);
  }
  return b;
}

std::string file_fingerprint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  std::uint64_t size = 0;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    const auto n = static_cast<std::size_t>(in.gcount());
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
    size += n;
  }
  std::ostringstream os;
  os << size << ':' << std::hex << h;
  return os.str();
}

void save_dataset(const std::filesystem::path& path, const Dataset& ds, const std::string& source_fingerprint) {
  nlohmann::json j;
  j["format"] = kDatasetFormatTag;
  j["source"] = source_fingerprint;
  j["users"] = ds.user_ids;
  j["items"] = ds.item_ids;
  j["sequences"] = ds.sequences;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write dataset cache " + path.string());
  out << j.dump() << '\n';
  if (!out) throw DataError("error while writing " + path.string());
}

CachedDataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read dataset cache " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset cache " + path.string() + ": " + e.what());
  }
  if (!j.is_object() || j.value("format", "") != kDatasetFormatTag) {
    throw DataError("dataset cache " + path.string() + " lacks format tag " + std::string(kDatasetFormatTag));
  }
  CachedDataset out;
  try {
    out.source_fingerprint = j.at("source").get<std::string>();
    out.dataset.user_ids = j.at("users").get<std::vector<std::string>>();
    out.dataset.item_ids = j.at("items").get<std::vector<std::string>>();
    out.dataset.sequences = j.at("sequences").get<std::vector<std::vector<ItemId>>>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed dataset cache " + path.string() + ": " + e.what());
  }
  const auto& ds = out.dataset;
  if (ds.sequences.size() != ds.user_ids.size() || ds.item_ids.empty()) {
    throw DataError("dataset cache " + path.string() + " is inconsistent");
  }
  for (const auto& seq : ds.sequences) {
    for (auto id : seq) {
      if (id <= kPad || static_cast<std::size_t>(id) > ds.item_count()) {
        throw DataError("dataset cache " + path.string() + " holds out-of-range item " + std::to_string(id));
      }
    }
  }
  return out;
}

}  // namespace grit::data
