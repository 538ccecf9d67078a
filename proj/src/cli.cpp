#include "grit/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "grit/analyze.hpp"
#include "grit/config.hpp"
#include "grit/dataio.hpp"
#include "grit/errors.hpp"
#include "grit/evalmetrics.hpp"
#include "grit/model.hpp"
#include "grit/runtime.hpp"
#include "grit/trainer.hpp"

namespace grit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError(path.string() + " is not valid JSON");
  return j;
}

void write_json_file(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

struct ConfigArgs {
  std::string config_file;
  std::vector<std::string> overrides;
  std::string dataset;
  std::string output;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_file, "JSON run configuration")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "Override a configuration key (key=value), repeatable");
    cmd->add_option("--dataset", dataset, "Prepared dataset cache");
    cmd->add_option("--output", output, "Run directory");
  }

  /// Config file, then --set overrides, then GRIT_SEED, then path flags.
  json resolve_flat() const {
    json flat = config_file.empty() ? json::object() : read_json_file(config_file);
    if (!flat.is_object()) throw UsageError("run config must be a JSON object");
    for (const auto& o : overrides) apply_override(flat, o);
    if (const char* env = std::getenv("GRIT_SEED"); env != nullptr && *env != '\0') {
      try {
        std::size_t used = 0;
        const auto seed = std::stoull(env, &used);
        if (used != std::string_view(env).size()) throw std::invalid_argument(env);
        flat["seed"] = seed;
      } catch (const std::exception&) {
        throw UsageError(std::string("GRIT_SEED must be a non-negative integer, got '") + env + "'");
      }
    }
    if (!dataset.empty()) flat["dataset"] = dataset;
    if (!output.empty()) flat["output_dir"] = output;
    return flat;
  }
};

struct LoadedData {
  data::Dataset dataset;
  data::SplitDataset split;
};

LoadedData load_prepared(const std::string& path) {
  if (path.empty()) throw UsageError("no dataset given (use --dataset or the 'dataset' config key)");
  auto cached = data::load_dataset(path);
  auto split = data::leave_one_out_split(cached.dataset);
  return {std::move(cached.dataset), std::move(split)};
}

void print_stats(std::ostream& out, const data::Dataset& ds) {
  out << "users: " << ds.user_count() << '\n'
      << "items: " << ds.item_count() << '\n'
      << "interactions: " << ds.interaction_count() << '\n'
      << "sparsity: " << std::fixed << std::setprecision(4) << 100.0 * ds.sparsity() << "%\n"
      << std::defaultfloat;
}

void print_report(std::ostream& out, const std::string& label, const eval::EvalReport& r) {
  out << label << ':';
  for (auto k : eval::kCutoffs) {
    out << std::fixed << std::setprecision(4) << " R@" << k << '=' << r.recall(k) << " N@" << k << '=' << r.ndcg(k)
        << " M@" << k << '=' << r.mrr(k);
  }
  out << std::defaultfloat << '\n';
}

// ---- prepare -------------------------------------------------------------

struct PrepareArgs {
  std::string input;
  std::string format = "movielens";
  std::string output;
  std::size_t min_count = 5;
};

int cmd_prepare(const PrepareArgs& a, std::ostream& out) {
  const auto fmt = data::parse_format(a.format);
  const auto fingerprint =
      data::file_fingerprint(a.input) + ";format=" + a.format + ";core=" + std::to_string(a.min_count);
  if (fs::exists(a.output)) {
    try {
      auto cached = data::load_dataset(a.output);
      if (cached.source_fingerprint == fingerprint) {
        out << "dataset cache " << a.output << " is up to date; nothing to do\n";
        print_stats(out, cached.dataset);
        return 0;
      }
    } catch (const DataError&) {
      // unreadable or stale cache: rebuild it
    }
  }
  const auto log = data::load_log(a.input, fmt);
  const auto ds = data::five_core_filter(log, a.min_count);
  data::leave_one_out_split(ds);
  if (a.output.find('/') != std::string::npos) fs::create_directories(fs::path(a.output).parent_path());
  data::save_dataset(a.output, ds, fingerprint);
  if (log.skipped > 0) out << "skipped " << log.skipped << " malformed line(s)\n";
  print_stats(out, ds);
  return 0;
}

// ---- train ---------------------------------------------------------------

struct TrainOutcome {
  train::FitResult fit;
  eval::EvalReport valid;
  eval::EvalReport test;
};

TrainOutcome train_run(RunConfig cfg, const LoadedData& d, std::ostream* progress) {
  cfg.model.item_count = d.split.item_count;
  cfg.validate();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  write_json_file(dir / "config.json", to_json(cfg));

  train::FitOptions opts;
  opts.checkpoint_path = dir / "model.ckpt";
  opts.log_path = dir / "train_log.jsonl";
  opts.progress = progress;
  auto fit = train::fit(init_model(cfg.model, cfg.train.seed), d.split, cfg.train, opts);

  const eval::EvalOptions eopts{cfg.train.exclude_history_in_eval, cfg.train.eval_batch_size};
  auto valid = eval::evaluate(fit.best, d.split, data::Phase::kValid, eopts);
  auto test = eval::evaluate(fit.best, d.split, data::Phase::kTest, eopts);
  auto summary = json{{"best_epoch", fit.best_epoch}, {"epochs", fit.log.size()}, {"early_stopped", fit.early_stopped}};
  write_json_file(dir / "valid_report.json", valid.to_json());
  write_json_file(dir / "test_report.json", test.to_json());
  write_json_file(dir / "summary.json", summary);
  return {std::move(fit), std::move(valid), std::move(test)};
}

int cmd_train(const ConfigArgs& a, bool quiet, std::ostream& out) {
  const auto cfg = run_config_from_json(a.resolve_flat());
  const auto d = load_prepared(cfg.dataset);
  const auto outcome = train_run(cfg, d, quiet ? nullptr : &out);
  out << "best epoch " << outcome.fit.best_epoch << " of " << outcome.fit.log.size() << '\n';
  print_report(out, "valid", outcome.valid);
  print_report(out, "test", outcome.test);
  out << "outputs in " << cfg.output_dir << '\n';
  return 0;
}

// ---- eval ----------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string dataset;
  std::string phase = "test";
  std::string output;
  bool ranks = false;
  bool exclude_history = false;
  std::size_t batch_size = 256;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  const auto phase = a.phase == "valid" ? data::Phase::kValid : data::Phase::kTest;
  const auto model = load_checkpoint(a.checkpoint);
  const auto d = load_prepared(a.dataset);
  if (model.config.item_count != d.split.item_count) {
    throw DataError("checkpoint has " + std::to_string(model.config.item_count) + " items but the dataset has " +
                    std::to_string(d.split.item_count));
  }
  const auto report = eval::evaluate(model, d.split, phase, {a.exclude_history, a.batch_size});
  out << report.to_json().dump(2) << '\n';
  if (!a.output.empty()) {
    fs::create_directories(a.output);
    write_json_file(fs::path(a.output) / ("report_" + a.phase + ".json"), report.to_json());
    if (a.ranks) report.write_ranks_csv(fs::path(a.output) / ("ranks_" + a.phase + ".csv"), &d.dataset);
  }
  return 0;
}

// ---- sweep ---------------------------------------------------------------

json default_grid() {
  return {{"groups", {64, 128, 256}}, {"beta", {0.1, 0.3, 0.5, 0.7, 0.9}}, {"dropout", {0.1, 0.2, 0.3, 0.4, 0.5}}};
}

std::vector<json> expand_grid(const json& grid) {
  if (!grid.is_object() || grid.empty()) throw UsageError("sweep grid must be a non-empty JSON object");
  std::vector<json> points{json::object()};
  for (const auto& [key, values] : grid.items()) {
    if (!values.is_array() || values.empty()) throw UsageError("grid entry '" + key + "' must be a non-empty array");
    std::vector<json> next;
    for (const auto& p : points) {
      for (const auto& v : values) {
        auto q = p;
        q[key] = v;
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  return points;
}

struct SweepRow {
  std::string run;
  json point;
  std::size_t best_epoch = 0;
  double recall10 = 0.0;
  double mrr10 = 0.0;
  double score() const { return (recall10 + mrr10) / 2.0; }
};

int cmd_sweep(const ConfigArgs& a, const std::string& grid_file, std::size_t jobs, std::ostream& out,
              std::ostream& err) {
  const auto base = a.resolve_flat();
  const auto grid = grid_file.empty() ? default_grid() : read_json_file(grid_file);
  const auto points = expand_grid(grid);
  const auto base_cfg = run_config_from_json(base);
  const fs::path root = base_cfg.output_dir;
  std::vector<RunConfig> configs;
  for (std::size_t i = 0; i < points.size(); ++i) {
    auto flat = base;
    flat.update(points[i]);
    std::ostringstream name;
    name << "run_" << std::setw(3) << std::setfill('0') << i;
    flat["output_dir"] = (root / name.str()).string();
    configs.push_back(run_config_from_json(flat));
    configs.back().validate();
  }
  const auto d = load_prepared(base_cfg.dataset);
  fs::create_directories(root);

  std::vector<SweepRow> rows(points.size());
  std::atomic<std::size_t> next{0};
  std::mutex io;
  std::exception_ptr failure;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        const auto outcome = train_run(configs[i], d, nullptr);
        const auto& best = outcome.fit.log.at(outcome.fit.best_epoch - 1);
        rows[i] = {fs::path(configs[i].output_dir).filename().string(), points[i], outcome.fit.best_epoch,
                   best.recall10, best.mrr10};
        std::lock_guard lock(io);
        out << rows[i].run << ' ' << points[i].dump() << " score " << rows[i].score() << '\n' << std::flush;
      } catch (...) {
        std::lock_guard lock(io);
        if (!failure) failure = std::current_exception();
        next = configs.size();
      }
    }
  };
  const auto n_workers = std::clamp<std::size_t>(jobs, 1, configs.size());
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::ofstream csv(root / "summary.csv");
  if (!csv) throw std::runtime_error("cannot write " + (root / "summary.csv").string());
  csv << "run";
  for (const auto& [key, _] : grid.items()) csv << ',' << key;
  csv << ",best_epoch,recall@10,mrr@10,score\n" << std::setprecision(17);
  std::size_t best = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv << rows[i].run;
    for (const auto& [key, _] : grid.items()) csv << ',' << rows[i].point[key].dump();
    csv << ',' << rows[i].best_epoch << ',' << rows[i].recall10 << ',' << rows[i].mrr10 << ',' << rows[i].score()
        << '\n';
    if (rows[i].score() > rows[best].score()) best = i;
  }
  write_json_file(root / "best.json", {{"run", rows[best].run},
                                       {"config", rows[best].point},
                                       {"recall@10", rows[best].recall10},
                                       {"mrr@10", rows[best].mrr10},
                                       {"score", rows[best].score()}});
  out << "best " << rows[best].run << ' ' << rows[best].point.dump() << " score " << rows[best].score() << '\n';
  (void)err;
  return 0;
}

// ---- analyze -------------------------------------------------------------

int cmd_analyze_groups(const std::string& checkpoint, std::optional<std::size_t> block, const std::string& output,
                       std::ostream& out, std::ostream& err) {
  const auto model = load_checkpoint(checkpoint);
  const auto index = block.value_or(model.blocks.size() - 1);
  const auto m = analyze::group_similarity(model, index, &err);
  fs::create_directories(output);
  const auto stem = fs::path(output) / ("group_similarity_block" + std::to_string(index));
  analyze::write_similarity_csv(stem.string() + ".csv", m);
  analyze::write_similarity_gnuplot(stem.string() + ".dat", m);
  out << "wrote " << stem.string() << ".csv and .dat (" << m.groups << " groups)\n";
  return 0;
}

int cmd_analyze_timeline(const std::string& checkpoint, const std::string& dataset, const std::string& raw_user,
                         std::optional<std::size_t> user_index, const std::string& output, std::ostream& out) {
  const auto model = load_checkpoint(checkpoint);
  const auto d = load_prepared(dataset);
  std::size_t user = 0;
  if (user_index) {
    user = *user_index;
  } else {
    const auto found = d.dataset.user_index(raw_user);
    if (!found) throw UsageError("unknown user '" + raw_user + "'");
    user = *found;
  }
  const auto t = analyze::membership_timeline(model, user, d.split);
  fs::create_directories(output);
  const auto name = user < d.dataset.user_ids.size() ? d.dataset.user_ids[user] : std::to_string(user);
  const auto path = fs::path(output) / ("membership_timeline_user" + name + ".csv");
  analyze::write_timeline_csv(path, t);
  out << "wrote " << path.string() << " (" << t.steps() << " timesteps)\n";
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Group-informed transformer for sequential recommendation"};
  app.require_subcommand(1);

  PrepareArgs prep;
  auto* prepare = app.add_subcommand("prepare", "Filter an interaction log and cache the dataset");
  prepare->add_option("--input", prep.input, "Interaction log")->required();
  prepare->add_option("--format", prep.format, "movielens or csv")
      ->check(CLI::IsMember({"movielens", "csv"}))
      ->capture_default_str();
  prepare->add_option("--output", prep.output, "Dataset cache (JSON)")->required();
  prepare->add_option("--min-count", prep.min_count, "k of the k-core filter")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();

  ConfigArgs train_args;
  bool quiet = false;
  auto* train = app.add_subcommand("train", "Train a model and evaluate the best epoch");
  train_args.attach(train);
  train->add_flag("--quiet", quiet, "No per-epoch progress");

  EvalArgs eval_args;
  auto* evalc = app.add_subcommand("eval", "Rank held-out items with a checkpoint");
  evalc->add_option("--checkpoint", eval_args.checkpoint)->required();
  evalc->add_option("--dataset", eval_args.dataset)->required();
  evalc->add_option("--phase", eval_args.phase)->check(CLI::IsMember({"valid", "test"}))->capture_default_str();
  evalc->add_option("--output", eval_args.output, "Directory for report files");
  evalc->add_flag("--ranks", eval_args.ranks, "Also write per-user ranks")->needs("--output");
  evalc->add_flag("--exclude-history", eval_args.exclude_history, "Mask the context items when ranking");
  evalc->add_option("--batch-size", eval_args.batch_size)->check(CLI::PositiveNumber);

  ConfigArgs sweep_args;
  std::string grid_file;
  std::size_t jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Train every point of a hyperparameter grid");
  sweep_args.attach(sweep);
  sweep->add_option("--grid", grid_file, "JSON object of key -> list of values")->check(CLI::ExistingFile);
  sweep->add_option("--jobs", jobs, "Configurations trained in parallel")->check(CLI::PositiveNumber);

  std::string group_ckpt;
  std::string group_out;
  std::optional<std::size_t> block;
  auto* groups = app.add_subcommand("analyze-groups", "Export cosine similarities between group vectors");
  groups->add_option("--checkpoint", group_ckpt)->required();
  groups->add_option("--block", block, "Encoder block (default: last)");
  groups->add_option("--output", group_out)->required();

  std::string tl_ckpt;
  std::string tl_data;
  std::string tl_user;
  std::optional<std::size_t> tl_index;
  std::string tl_out;
  auto* timeline = app.add_subcommand("analyze-timeline", "Export one user's membership timeline");
  timeline->add_option("--checkpoint", tl_ckpt)->required();
  timeline->add_option("--dataset", tl_data)->required();
  auto* user_opt = timeline->add_option("--user", tl_user, "Raw user id");
  auto* index_opt = timeline->add_option("--user-index", tl_index, "Dense user index");
  user_opt->excludes(index_opt);
  timeline->add_option("--output", tl_out)->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    if (timeline->parsed() && tl_user.empty() && !tl_index) throw UsageError("give --user or --user-index");
    if (prepare->parsed()) return cmd_prepare(prep, out);
    if (train->parsed()) return cmd_train(train_args, quiet, out);
    if (evalc->parsed()) return cmd_eval(eval_args, out);
    if (sweep->parsed()) return cmd_sweep(sweep_args, grid_file, jobs, out, err);
    if (groups->parsed()) return cmd_analyze_groups(group_ckpt, block, group_out, out, err);
    if (timeline->parsed()) return cmd_analyze_timeline(tl_ckpt, tl_data, tl_user, tl_index, tl_out, out);
    return 1;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "runtime error: " << e.what() << '\n';
    return 3;
  }
}

int run(int argc, char** argv) {
  tune_allocator();
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace grit::cli
