#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "grit/dataio.hpp"
#include "grit/evalmetrics.hpp"
#include "helpers.hpp"

namespace eval = grit::eval;

namespace {

// Model whose last hidden state is `b` everywhere: the final feed-forward
// norm has zero gain, so its output is its bias.
grit::GritModel constant_hidden_model(std::size_t items, std::vector<double> b) {
  auto c = testutil::tiny_config(items);
  auto m = grit::init_model(c, 1);
  auto& last = m.blocks.back().ffn;
  std::fill(last.norm_gain.values().begin(), last.norm_gain.values().end(), 0.0);
  std::copy(b.begin(), b.end(), last.norm_bias.values().begin());
  std::fill(m.embeddings.items.values().begin(), m.embeddings.items.values().end(), 0.0);
  return m;
}

void set_row(grit::GritModel& m, std::size_t item, const std::vector<double>& v, double factor) {
  for (std::size_t k = 0; k < v.size(); ++k) m.embeddings.items.values()[item * v.size() + k] = factor * v[k];
}

}  // namespace

TEST_CASE("target rank with pessimistic ties") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(eval::rank_target(std::vector<double>{-inf, 0.1, 0.9, 0.3}, 2) == 1);
  CHECK(eval::rank_target(std::vector<double>{-inf, 0.9, 0.9, 0.9, 0.1}, 2) == 3);
  CHECK(eval::rank_target(std::vector<double>{-inf, 0.5, 0.5, 0.5, 0.5, 0.5}, 4) == 5);
  CHECK(eval::rank_target(std::vector<double>{-inf, 0.2, 0.4, -inf}, 1) == 2);
  CHECK_THROWS_AS(eval::rank_target(std::vector<double>{-inf, 1.0}, 0), std::invalid_argument);
  CHECK_THROWS_AS(eval::rank_target(std::vector<double>{-inf, 1.0}, 2), std::out_of_range);

  // Optimistic ties never rank worse.
  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> level(0, 4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(12);
    s[0] = -inf;
    for (std::size_t i = 1; i < s.size(); ++i) s[i] = level(rng);
    const auto t = static_cast<grit::data::ItemId>(1 + trial % 11);
    std::size_t strictly = 1;
    for (std::size_t i = 1; i < s.size(); ++i) strictly += s[i] > s[static_cast<std::size_t>(t)] ? 1 : 0;
    CHECK(strictly <= eval::rank_target(s, t));
  }
}

TEST_CASE("single-item metric closed forms") {
  const std::vector<std::size_t> one{1};
  for (std::size_t k : {1, 5, 20}) {
    const auto m = eval::metrics_at_k(one, k);
    CHECK(m.recall == 1.0);
    CHECK(m.ndcg == 1.0);
    CHECK(m.mrr == 1.0);
  }
  const auto three = eval::metrics_at_k(std::vector<std::size_t>{3}, 5);
  CHECK(three.recall == 1.0);
  CHECK(three.ndcg == 0.5);
  CHECK(three.mrr == doctest::Approx(1.0 / 3.0).epsilon(1e-16));
  const auto six = eval::metrics_at_k(std::vector<std::size_t>{6}, 5);
  CHECK(six.recall == 0.0);
  CHECK(six.ndcg == 0.0);
  CHECK(six.mrr == 0.0);
  CHECK_THROWS_AS(eval::metrics_at_k(std::vector<std::size_t>{}, 5), std::invalid_argument);
  CHECK_THROWS_AS(eval::metrics_at_k(one, 0), std::invalid_argument);
  CHECK_THROWS_AS(eval::metrics_at_k(std::vector<std::size_t>{0}, 5), std::invalid_argument);
}

TEST_CASE("aggregation matches a per-user recomputation") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> rank(1, 60);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> ranks(1 + trial * 7);
    for (auto& r : ranks) r = rank(rng);
    std::vector<std::int32_t> users(ranks.size());
    std::iota(users.begin(), users.end(), 0);
    const auto report = eval::make_report(users, ranks);
    for (std::size_t k : eval::kCutoffs) {
      double recall = 0.0;
      double ndcg = 0.0;
      double mrr = 0.0;
      for (auto r : ranks) {
        if (r > k) continue;
        recall += 1.0;
        ndcg += 1.0 / std::log2(static_cast<double>(r) + 1.0);
        mrr += 1.0 / static_cast<double>(r);
      }
      const double n = static_cast<double>(ranks.size());
      CHECK(std::abs(report.recall(k) - recall / n) <= 1e-12);
      CHECK(std::abs(report.ndcg(k) - ndcg / n) <= 1e-12);
      CHECK(std::abs(report.mrr(k) - mrr / n) <= 1e-12);
      CHECK(report.ndcg(k) <= report.recall(k));
    }
    CHECK(report.recall(5) <= report.recall(10));
    CHECK(report.recall(10) <= report.recall(20));
    CHECK(report.mrr(5) <= report.mrr(10));
    CHECK(report.mrr(10) <= report.mrr(20));
  }
  const auto nan_report = eval::make_report({0, 1}, {1, 2}, 1);
  CHECK(std::isnan(nan_report.recall(10)));
}

TEST_CASE("report serialisation") {
  const auto r = eval::make_report({0, 1}, {1, 7});
  const auto j = r.to_json();
  CHECK(j.at("recall").at("5") == 0.5);
  CHECK(j.at("recall").at("10") == 1.0);
  CHECK(j.at("users") == 2);
  testutil::TempDir dir("ranks");
  grit::data::Dataset names;
  names.user_ids = {"u7", "u9"};
  r.write_ranks_csv(dir / "ranks.csv", &names);
  std::ifstream in(dir / "ranks.csv");
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  CHECK(all == "user,rank\nu7,1\nu9,7\n");
}

TEST_CASE("evaluation of a model that always scores the target first") {
  // Every user's test item is 5 and validation item 4.
  grit::data::Dataset ds;
  ds.item_ids = {"", "1", "2", "3", "4", "5", "6"};
  ds.user_ids = {"a", "b", "c"};
  ds.sequences = {{1, 2, 6, 4, 5}, {3, 1, 4, 5}, {2, 2, 3, 1, 6, 1, 4, 5}};
  const auto split = grit::data::leave_one_out_split(ds);
  const std::vector<double> b = {0.5, -0.25, 1.0, 0.0, 0.75, -0.5, 0.25, 0.1};
  auto m = constant_hidden_model(6, b);
  set_row(m, 5, b, 1.0);
  const auto perfect = eval::evaluate(m, split, grit::data::Phase::kTest, {false, 2});
  for (std::size_t k : eval::kCutoffs) {
    CHECK(perfect.recall(k) == 1.0);
    CHECK(perfect.ndcg(k) == 1.0);
    CHECK(perfect.mrr(k) == 1.0);
  }
  CHECK(perfect.users == std::vector<std::int32_t>{0, 1, 2});

  // Item 1 outscores the target but sits in every user's history.
  set_row(m, 1, b, 2.0);
  const auto plain = eval::evaluate(m, split, grit::data::Phase::kTest);
  CHECK(plain.ranks == std::vector<std::size_t>{2, 2, 2});
  const auto masked = eval::evaluate(m, split, grit::data::Phase::kTest, {true, 256});
  CHECK(masked.ranks == std::vector<std::size_t>{1, 1, 1});

  // Validation ranks item 4, which none of the contexts contain.
  set_row(m, 4, b, 3.0);
  const auto valid = eval::evaluate(m, split, grit::data::Phase::kValid, {true, 1});
  CHECK(valid.ranks == std::vector<std::size_t>{1, 1, 1});
}

TEST_CASE("untrained model ranks near chance on ML-100K") {
  const std::filesystem::path path = std::filesystem::path(GRIT_DATA_DIR) / "ml-100k" / "u.data";
  if (!std::filesystem::exists(path)) return;
  const auto ds = grit::data::five_core_filter(grit::data::load_log(path, grit::data::LogFormat::kMovieLens));
  const auto split = grit::data::leave_one_out_split(ds);
  grit::ModelConfig c;
  c.item_count = split.item_count;
  const auto report = eval::evaluate(grit::init_model(c, 3), split, grit::data::Phase::kTest);
  CHECK(std::abs(report.recall(10) - 10.0 / 1349.0) <= 0.005);
}
