#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "grit/cli.hpp"
#include "grit/model.hpp"
#include "helpers.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result grit_run(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = grit::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(read_file(p)); }

// Cyclic interaction log in MovieLens layout; every user has at least 8
// interactions over 10 items.
void write_cyclic_log(const fs::path& path) {
  const auto split = testutil::cyclic_split(30, 10, 8, 14, 11);
  std::ofstream os(path);
  for (std::size_t u = 0; u < split.user_count(); ++u) {
    const auto seq = split.full_sequence(u);
    for (std::size_t i = 0; i < seq.size(); ++i) os << "u" << u + 1 << '\t' << seq[i] << "\t4\t" << 1000 + i << '\n';
  }
}

const std::vector<std::string> kTinySets = {"--set", "hidden=8",       "--set", "heads=2",      "--set", "groups=3",
                                            "--set", "max_len=8",      "--set", "layers=1",     "--set", "max_epochs=2",
                                            "--set", "batch_size=16",  "--set", "dropout=0.2",  "--set", "init_std=0.1"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinySets.begin(), kTinySets.end());
  return args;
}

struct Prepared {
  testutil::TempDir dir{"cli"};
  fs::path log;
  fs::path cache;

  Prepared() {
    log = dir / "log.tsv";
    cache = dir / "data.json";
    write_cyclic_log(log);
    REQUIRE(grit_run({"prepare", "--input", log.string(), "--output", cache.string()}).code == 0);
  }
};

}  // namespace

TEST_CASE("prepare prints statistics and is idempotent") {
  testutil::TempDir dir("prepare");
  write_cyclic_log(dir / "log.tsv");
  const auto cache = (dir / "data.json").string();
  const auto first = grit_run({"prepare", "--input", (dir / "log.tsv").string(), "--output", cache});
  REQUIRE(first.code == 0);
  CHECK(first.out.find("users: 30\n") != std::string::npos);
  CHECK(first.out.find("items: 10\n") != std::string::npos);
  CHECK(first.out.find("sparsity: ") != std::string::npos);
  const auto bytes = read_file(cache);

  const auto second = grit_run({"prepare", "--input", (dir / "log.tsv").string(), "--output", cache});
  CHECK(second.code == 0);
  CHECK(second.out.find("up to date; nothing to do") != std::string::npos);
  CHECK(read_file(cache) == bytes);

  // A different core threshold invalidates the cache.
  const auto third =
      grit_run({"prepare", "--input", (dir / "log.tsv").string(), "--output", cache, "--min-count", "6"});
  CHECK(third.code == 0);
  CHECK(third.out.find("nothing to do") == std::string::npos);
}

TEST_CASE("exit codes") {
  testutil::TempDir dir("codes");
  CHECK(grit_run({}).code == 1);
  CHECK(grit_run({"frobnicate"}).code == 1);
  CHECK(grit_run({"--help"}).code == 0);
  CHECK(grit_run({"prepare", "--input", (dir / "none.tsv").string(), "--output", (dir / "x.json").string()}).code ==
        2);
  std::ofstream(dir / "junk.tsv") << "a\nb\nc\n";
  CHECK(grit_run({"prepare", "--input", (dir / "junk.tsv").string(), "--output", (dir / "x.json").string()}).code ==
        2);
  CHECK(grit_run({"train", "--dataset", "whatever.json", "--set", "bogus_key=1"}).code == 1);
  CHECK(grit_run({"train", "--set", "hidden=8"}).code == 1);
  CHECK(grit_run({"eval", "--checkpoint", (dir / "missing.ckpt").string(), "--dataset", "d.json"}).code == 2);
  CHECK(grit_run({"eval", "--checkpoint", "a", "--dataset", "b", "--ranks"}).code == 1);
  CHECK(grit_run({"analyze-timeline", "--checkpoint", "a", "--dataset", "b", "--output", "c"}).code == 1);
  CHECK(grit_run({"analyze-timeline", "--checkpoint", "a", "--dataset", "b", "--output", "c", "--user", "1",
                  "--user-index", "0"})
            .code == 1);
}

TEST_CASE("train writes a complete run directory and replays byte for byte") {
  Prepared p;
  const auto run_a = (p.dir / "a").string();
  const auto a = grit_run(with_tiny({"train", "--quiet", "--dataset", p.cache.string(), "--output", run_a}));
  REQUIRE(a.code == 0);
  for (const char* f : {"config.json", "train_log.jsonl", "model.ckpt", "valid_report.json", "test_report.json",
                        "summary.json"}) {
    CHECK(fs::exists(fs::path(run_a) / f));
  }
  CHECK(a.out.find("test: R@5=") != std::string::npos);
  const auto cfg = read_json(fs::path(run_a) / "config.json");
  CHECK(cfg.at("hidden") == 8);
  CHECK(cfg.at("seed") == 42);

  const auto run_b = (p.dir / "b").string();
  const auto b = grit_run({"train", "--quiet", "--config", (fs::path(run_a) / "config.json").string(), "--output", run_b});
  REQUIRE(b.code == 0);
  CHECK(read_file(fs::path(run_a) / "model.ckpt") == read_file(fs::path(run_b) / "model.ckpt"));
  CHECK(read_file(fs::path(run_a) / "test_report.json") == read_file(fs::path(run_b) / "test_report.json"));

  ::setenv("GRIT_SEED", "77", 1);
  const auto run_c = (p.dir / "c").string();
  const auto c = grit_run(with_tiny({"train", "--quiet", "--dataset", p.cache.string(), "--output", run_c}));
  ::setenv("GRIT_SEED", "seven", 1);
  const auto bad = grit_run(with_tiny({"train", "--quiet", "--dataset", p.cache.string(), "--output", run_c}));
  ::unsetenv("GRIT_SEED");
  REQUIRE(c.code == 0);
  CHECK(read_json(fs::path(run_c) / "config.json").at("seed") == 77);
  CHECK(read_file(fs::path(run_a) / "model.ckpt") != read_file(fs::path(run_c) / "model.ckpt"));
  CHECK(bad.code == 1);

  SUBCASE("analysis commands on the trained checkpoint") {
    const auto ckpt = (fs::path(run_a) / "model.ckpt").string();
    const auto out_dir = p.dir / "analysis";
    REQUIRE(grit_run({"analyze-groups", "--checkpoint", ckpt, "--output", out_dir.string()}).code == 0);
    CHECK(fs::exists(out_dir / "group_similarity_block0.csv"));
    CHECK(fs::exists(out_dir / "group_similarity_block0.dat"));
    CHECK(grit_run({"analyze-groups", "--checkpoint", ckpt, "--output", out_dir.string(), "--block", "3"}).code == 1);

    REQUIRE(grit_run({"analyze-timeline", "--checkpoint", ckpt, "--dataset", p.cache.string(), "--user", "u3",
                      "--output", out_dir.string()})
                .code == 0);
    const auto csv = read_file(out_dir / "membership_timeline_useru3.csv");
    CHECK(csv.rfind("timestep,g0,g1,g2\n", 0) == 0);
    CHECK(grit_run({"analyze-timeline", "--checkpoint", ckpt, "--dataset", p.cache.string(), "--user", "nobody",
                    "--output", out_dir.string()})
              .code == 1);
    REQUIRE(grit_run({"analyze-timeline", "--checkpoint", ckpt, "--dataset", p.cache.string(), "--user-index", "0",
                      "--output", out_dir.string()})
                .code == 0);
    CHECK(fs::exists(out_dir / "membership_timeline_useru1.csv"));
  }

  SUBCASE("eval reproduces the test report") {
    const auto ckpt = (fs::path(run_a) / "model.ckpt").string();
    const auto out_dir = p.dir / "eval";
    const auto r = grit_run({"eval", "--checkpoint", ckpt, "--dataset", p.cache.string(), "--phase", "test",
                             "--output", out_dir.string(), "--ranks"});
    REQUIRE(r.code == 0);
    CHECK(read_json(out_dir / "report_test.json") == read_json(fs::path(run_a) / "test_report.json"));
    CHECK(read_file(out_dir / "ranks_test.csv").rfind("user,rank\nu1,", 0) == 0);
    std::ofstream(p.dir / "occupied") << "x";
    CHECK(grit_run({"eval", "--checkpoint", ckpt, "--dataset", p.cache.string(), "--output",
                    (p.dir / "occupied").string()})
              .code == 3);
  }
}

TEST_CASE("eval on a stub checkpoint that ranks every target first") {
  testutil::TempDir dir("stub");
  grit::data::Dataset ds;
  ds.item_ids = {"", "10", "20", "30", "40", "50"};
  ds.user_ids = {"1", "2", "3", "4"};
  ds.sequences = {{1, 2, 3, 5}, {2, 4, 1, 3, 5}, {4, 3, 5}, {1, 1, 2, 4, 3, 5}};
  grit::data::save_dataset(dir / "data.json", ds, "stub");

  auto c = testutil::tiny_config(5);
  auto m = grit::init_model(c, 1);
  const std::vector<double> b = {0.3, -0.2, 0.8, 0.1, -0.6, 0.4, 0.2, -0.1};
  auto& ffn = m.blocks.back().ffn;
  std::fill(ffn.norm_gain.values().begin(), ffn.norm_gain.values().end(), 0.0);
  std::copy(b.begin(), b.end(), ffn.norm_bias.values().begin());
  auto items = m.embeddings.items.values();
  std::fill(items.begin(), items.end(), 0.0);
  std::copy(b.begin(), b.end(), items.begin() + 5 * 8);
  grit::save_checkpoint(dir / "stub.ckpt", m);

  const auto r = grit_run({"eval", "--checkpoint", (dir / "stub.ckpt").string(), "--dataset",
                           (dir / "data.json").string(), "--output", (dir / "out").string()});
  REQUIRE(r.code == 0);
  const auto report = read_json(dir / "out" / "report_test.json");
  for (const char* metric : {"recall", "ndcg", "mrr"}) {
    for (const char* k : {"5", "10", "20"}) CHECK(report.at(metric).at(k) == 1.0);
  }

  grit::data::Dataset bigger = ds;
  bigger.item_ids.push_back("60");
  grit::data::save_dataset(dir / "bigger.json", bigger, "stub");
  CHECK(grit_run({"eval", "--checkpoint", (dir / "stub.ckpt").string(), "--dataset", (dir / "bigger.json").string()})
            .code == 2);
  std::ofstream(dir / "broken.json") << "{";
  CHECK(grit_run({"eval", "--checkpoint", (dir / "stub.ckpt").string(), "--dataset", (dir / "broken.json").string()})
            .code == 2);
}

TEST_CASE("sweep trains every grid point and picks the best mean of recall and mrr") {
  Prepared p;
  std::ofstream(p.dir / "grid.json") << R"({"beta": [0.2, 0.8]})";
  const auto root = p.dir / "sweep";
  const auto r = grit_run(with_tiny({"sweep", "--dataset", p.cache.string(), "--output", root.string(), "--grid",
                                     (p.dir / "grid.json").string()}));
  REQUIRE(r.code == 0);
  std::map<std::string, double> scores;
  for (const char* run : {"run_000", "run_001"}) {
    REQUIRE(fs::exists(root / run / "train_log.jsonl"));
    std::ifstream log(root / run / "train_log.jsonl");
    std::string line;
    double best_recall = -1.0;
    double best_score = 0.0;
    while (std::getline(log, line)) {
      const auto j = json::parse(line);
      const double recall = j.at("recall@10");
      if (recall > best_recall) {
        best_recall = recall;
        best_score = (recall + j.at("mrr@10").get<double>()) / 2.0;
      }
    }
    scores[run] = best_score;
  }
  CHECK(read_json(root / "run_001" / "config.json").at("beta") == 0.8);
  const auto best = read_json(root / "best.json");
  const auto expected = scores["run_001"] > scores["run_000"] ? "run_001" : "run_000";
  CHECK(best.at("run") == expected);
  CHECK(best.at("score").get<double>() == doctest::Approx(scores[expected]).epsilon(1e-15));

  std::ifstream csv(root / "summary.csv");
  std::string header;
  std::getline(csv, header);
  CHECK(header == "run,beta,best_epoch,recall@10,mrr@10,score");
  std::size_t rows = 0;
  for (std::string line; std::getline(csv, line);) ++rows;
  CHECK(rows == 2);

  std::ofstream(p.dir / "badgrid.json") << R"({"beta": []})";
  CHECK(grit_run(with_tiny({"sweep", "--dataset", p.cache.string(), "--output", root.string(), "--grid",
                            (p.dir / "badgrid.json").string()}))
            .code == 1);
}
