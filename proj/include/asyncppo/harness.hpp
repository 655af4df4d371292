#pragma once

// Experiment driver: wires env, policy, rollout workers, controller and
// trainer, in simulated time (deterministic) or live threads.

#include "asyncppo/config.hpp"
#include "asyncppo/metrics.hpp"
#include "asyncppo/timeline.hpp"
#include "asyncppo/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace asyncppo::harness {

struct StepMetrics {
  std::uint64_t step = 0;
  double time = 0.0; // simulated seconds, or wall seconds in live mode
  double reward_mean = 0.0;
  double success_rate = 0.0; // over the training batch
  double throughput = 0.0;   // tokens trained per second so far
  trainer::TrainRecord train;
  std::optional<double> eval_success;
};

nlohmann::json to_json(const StepMetrics &m);

struct RunRecord {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::vector<StepMetrics> steps;
  double final_success = 0.0; // greedy, held-out prompts
  std::optional<timeline::TimelineReport> timeline; // simulated mode only
  std::filesystem::path output_dir;
};

// Greedy decoding on `count` fresh prompts; fraction answered correctly.
double evaluate_success(const policy::LinearParams &params,
                        const ExperimentConfig &config, std::uint64_t seed,
                        std::size_t count);

struct RunOptions {
  bool write_outputs = true;    // metrics.jsonl, config.yaml, checkpoint
  MetricsSink *extra_sink = nullptr;
};

// Runs one seed to `config.train_steps`. When writing outputs, the directory
// receives config.yaml, metrics.jsonl (one line per step), final.json,
// params.txt and optimizer.txt.
RunRecord run_experiment(const ExperimentConfig &config, std::uint64_t seed,
                         const RunOptions &options = {});

struct AblationCell {
  controller::Eta eta;
  trainer::Objective objective = trainer::Objective::decoupled;
  std::vector<double> final_success; // per seed, in config seed order
  double mean_final_success = 0.0;
  double mean_throughput = 0.0;
};

struct AblationTable {
  std::vector<AblationCell> cells;
  const AblationCell *find(const controller::Eta &eta,
                           trainer::Objective objective) const;
};

// Runs {eta} x {objective} x seeds with shared seeds. Writes one run
// directory per cell and seed plus summary.csv when writing outputs.
AblationTable run_ablation(const ExperimentConfig &base,
                           const std::vector<controller::Eta> &etas,
                           const std::vector<trainer::Objective> &objectives,
                           const RunOptions &options = {});

// Plot-ready delimited files. Returns the paths written; empty input yields
// a warning on stderr and no files.
std::vector<std::filesystem::path>
export_report(const std::vector<RunRecord> &records,
              const std::filesystem::path &out_dir);

std::vector<std::filesystem::path>
export_ablation(const AblationTable &table, const std::filesystem::path &out_dir);

// Gantt-style rows: lane,kind,start,end,version.
std::filesystem::path export_timeline(const timeline::TimelineReport &report,
                                      const std::filesystem::path &path);

// Reads a run directory written by run_experiment.
RunRecord load_run(const std::filesystem::path &dir);

} // namespace asyncppo::harness
