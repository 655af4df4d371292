#include "asyncppo/errors.hpp"
#include "asyncppo/harness.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace asyncppo;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const fs::path &dir) {
  ExperimentConfig c;
  c.prompts_per_batch = 8;
  c.responses_per_prompt = 2;
  c.train_steps = 8;
  c.workers = 2;
  c.slots_per_worker = 16;
  c.eval_prompts = 32;
  c.output_dir = dir;
  return c;
}

fs::path scratch(const std::string &name) {
  const auto dir = fs::temp_directory_path() / ("asyncppo_harness_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path &path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::size_t line_count(const fs::path &path) {
  std::ifstream in(path);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);)
    ++n;
  return n;
}

} // namespace

TEST_CASE("sync eta=0 on one worker: every batch is on-policy") {
  auto c = small_config(scratch("sync"));
  c.workers = 1;
  c.schedule = timeline::ScheduleMode::sync;
  const auto r = harness::run_experiment(c, 1, {false, nullptr});
  REQUIRE(r.steps.size() == 8);
  for (std::size_t k = 0; k < r.steps.size(); ++k) {
    CHECK(r.steps[k].step == k);
    CHECK(r.steps[k].train.staleness == StalenessHistogram{{0, 16}});
  }
}

TEST_CASE("async run trains on stale data and conserves tokens") {
  auto c = small_config(scratch("bound"));
  c.eta = 2;
  c.costs.gen_latency_per_token = 0.05;
  const auto r = harness::run_experiment(c, 2, {false, nullptr});
  bool stale = false;
  for (const auto &s : r.steps)
    for (const auto &[lag, count] : s.train.staleness)
      stale = stale || lag > 0;
  CHECK(stale);
  REQUIRE(r.timeline);
  CHECK(r.timeline->conservation_held);
}

TEST_CASE("identical config and seed give byte-identical metrics") {
  const auto a_dir = scratch("det_a");
  const auto b_dir = scratch("det_b");
  auto c = small_config(a_dir);
  c.eta = 3;
  harness::run_experiment(c, 5);
  c.output_dir = b_dir;
  harness::run_experiment(c, 5);
  const auto a = slurp(a_dir / "metrics.jsonl");
  CHECK(!a.empty());
  CHECK(a == slurp(b_dir / "metrics.jsonl"));
  CHECK(line_count(a_dir / "metrics.jsonl") == 8);
  CHECK(slurp(a_dir / "params.txt") == slurp(b_dir / "params.txt"));

  c.output_dir = scratch("det_c");
  harness::run_experiment(c, 6);
  CHECK(slurp(c.output_dir / "metrics.jsonl") != a);
}

TEST_CASE("resuming an on-policy sync run reproduces the uninterrupted run") {
  auto c = small_config(scratch("straight"));
  c.schedule = timeline::ScheduleMode::sync;
  c.train_steps = 10;
  const auto straight = harness::run_experiment(c, 3);

  auto first = c;
  first.train_steps = 4;
  first.output_dir = scratch("first");
  harness::run_experiment(first, 3);

  auto second = c;
  second.output_dir = first.output_dir;
  second.resume_from = first.output_dir;
  const auto resumed = harness::run_experiment(second, 3);
  CHECK(resumed.steps.size() == 6);
  CHECK(resumed.steps.front().step == 4);
  CHECK(slurp(second.output_dir / "params.txt") ==
        slurp(c.output_dir / "params.txt"));
  CHECK(resumed.final_success == straight.final_success);
  CHECK(line_count(second.output_dir / "metrics.jsonl") == 10);

  auto mismatched = c;
  mismatched.features.window = 2;
  mismatched.resume_from = first.output_dir;
  mismatched.output_dir = scratch("mismatch");
  CHECK_THROWS_AS(harness::run_experiment(mismatched, 3), ConfigError);
  mismatched.resume_from = scratch("missing");
  CHECK_THROWS_AS(harness::run_experiment(mismatched, 3), ConfigError);
}

TEST_CASE("export: one curve row per step, timeline rows, empty input") {
  const auto dir = scratch("export");
  auto c = small_config(dir / "run");
  harness::run_experiment(c, 1);
  const auto loaded = harness::load_run(dir / "run");
  CHECK(loaded.steps.size() == 8);
  CHECK(loaded.seed == 1);

  const auto written = harness::export_report({loaded}, dir / "report");
  REQUIRE(!written.empty());
  const auto curve = dir / "report" / "curve_seed_1.csv";
  CHECK(fs::exists(curve));
  CHECK(line_count(curve) == 9);

  timeline::SimConfig sim;
  sim.train_steps = 3;
  sim.record_trace = true;
  auto report = timeline::simulate(timeline::ScheduleMode::async_interruptible,
                                   sim, timeline::CostModel{});
  const auto gantt = harness::export_timeline(report, dir / "gantt.csv");
  CHECK(line_count(gantt) == report.trace.size() + 1);

  const auto none = harness::export_report({}, dir / "empty");
  CHECK(none.empty());
  CHECK(!fs::exists(dir / "empty" / "curve_seed_1.csv"));
}

TEST_CASE("ablation: one run per eta, objective and seed") {
  const auto dir = scratch("ablation");
  auto c = small_config(dir);
  c.train_steps = 3;
  c.seeds = {1, 2};
  const auto table = harness::run_ablation(
      c, {controller::Eta{0}, std::nullopt},
      {trainer::Objective::decoupled, trainer::Objective::naive});
  CHECK(table.cells.size() == 4);
  for (const auto &cell : table.cells)
    CHECK(cell.final_success.size() == 2);
  CHECK(table.find(std::nullopt, trainer::Objective::naive));
  CHECK(fs::exists(dir / "eta_inf_naive" / "seed_2" / "metrics.jsonl"));
  CHECK(fs::exists(dir / "summary.csv"));
  CHECK(line_count(dir / "summary.csv") == 5);

  // Shared seeds: the eta=0 cell trains on-policy for both objectives, which
  // then coincide.
  const auto *d = table.find(controller::Eta{0}, trainer::Objective::decoupled);
  const auto *n = table.find(controller::Eta{0}, trainer::Objective::naive);
  REQUIRE(d);
  REQUIRE(n);
  CHECK(d->final_success == n->final_success);

  CHECK_THROWS_AS(harness::run_ablation(c, {}, {trainer::Objective::naive}),
                  ConfigError);
  CHECK_THROWS_AS(harness::run_ablation(c, {controller::Eta{0}}, {}),
                  ConfigError);
}

TEST_CASE("live mode trains with real threads") {
  auto c = small_config(scratch("live"));
  c.mode = ExecutionMode::live;
  c.eta = 2;
  c.train_steps = 4;
  const auto r = harness::run_experiment(c, 1);
  CHECK(r.steps.size() == 4);
  for (const auto &s : r.steps) {
    std::uint64_t total = 0;
    for (const auto &[lag, count] : s.train.staleness) {
      CHECK(lag <= s.step);
      total += count;
    }
    CHECK(total == 16);
  }
  CHECK(line_count(c.output_dir / "metrics.jsonl") == 4);

  c.schedule = timeline::ScheduleMode::async_noninterruptible;
  CHECK_THROWS_AS(harness::run_experiment(c, 1), ConfigError);
}
