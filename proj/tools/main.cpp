#include "asyncppo/config.hpp"
#include "asyncppo/errors.hpp"
#include "asyncppo/harness.hpp"
#include "asyncppo/kernels.hpp"
#include "asyncppo/timeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <sstream>

using namespace asyncppo;
namespace fs = std::filesystem;

namespace {

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::string eta;
  std::string objective;
  std::string mode;
  std::string out;
};

void add_common(CLI::App *cmd, Overrides &o) {
  cmd->add_option("-c,--config", o.config, "YAML experiment config");
  cmd->add_option("--seed", o.seeds, "seed(s), replacing the config list");
  cmd->add_option("--eta", o.eta, "maximum staleness, or 'inf'");
  cmd->add_option("--objective", o.objective, "decoupled | naive");
  cmd->add_option("--out", o.out, "output directory");
}

ExperimentConfig resolve(const Overrides &o) {
  ExperimentConfig cfg = o.config.empty() ? ExperimentConfig{}
                                          : load_config(o.config);
  if (!o.seeds.empty())
    cfg.seeds = o.seeds;
  if (!o.eta.empty())
    cfg.eta = parse_eta(o.eta);
  if (!o.objective.empty()) {
    cfg.objective = trainer::parse_objective(o.objective);
    cfg.ppo.objective = cfg.objective;
  }
  if (!o.out.empty())
    cfg.output_dir = o.out;
  return cfg;
}

std::vector<std::string> split(const std::string &s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty())
      out.push_back(item);
  return out;
}

int cmd_run(const Overrides &o, const std::string &resume) {
  ExperimentConfig cfg = resolve(o);
  if (!o.mode.empty())
    cfg.mode = parse_execution_mode(o.mode);
  if (!resume.empty())
    cfg.resume_from = resume;
  cfg.validate();
  const fs::path root = cfg.output_dir;
  std::vector<harness::RunRecord> records;
  for (auto seed : cfg.seeds) {
    ExperimentConfig one = cfg;
    one.seeds = {seed};
    one.output_dir = root / ("seed_" + std::to_string(seed));
    auto record = harness::run_experiment(one, seed);
    std::printf("seed %llu: %zu steps, final success %.4f\n",
                static_cast<unsigned long long>(seed), record.steps.size(),
                record.final_success);
    records.push_back(std::move(record));
  }
  harness::export_report(records, root);
  return 0;
}

int cmd_ablate(const Overrides &o, const std::string &etas,
               const std::string &objectives) {
  ExperimentConfig cfg = resolve(o);
  std::vector<controller::Eta> eta_values;
  for (const auto &e : split(etas))
    eta_values.push_back(parse_eta(e));
  std::vector<trainer::Objective> objs;
  for (const auto &name : split(objectives))
    objs.push_back(trainer::parse_objective(name));
  auto table = harness::run_ablation(cfg, eta_values, objs);
  std::printf("%-8s %-10s %-12s %s\n", "eta", "objective", "success",
              "throughput");
  for (const auto &cell : table.cells)
    std::printf("%-8s %-10s %-12.4f %.4f\n", eta_name(cell.eta).c_str(),
                std::string(trainer::objective_name(cell.objective)).c_str(),
                cell.mean_final_success, cell.mean_throughput);
  return 0;
}

int cmd_simulate(const Overrides &o, const std::string &lengths,
                 std::uint64_t steps, const std::string &trace) {
  ExperimentConfig cfg = resolve(o);
  timeline::SimConfig sim;
  sim.workers = cfg.workers;
  sim.slots_per_worker = cfg.slots_per_worker;
  sim.batch_size = cfg.batch_size();
  sim.eta = cfg.eta;
  sim.train_steps = steps;
  sim.seed = cfg.seeds.empty() ? 1 : cfg.seeds.front();
  sim.lengths.kind = timeline::parse_length_kind(lengths);
  sim.record_trace = !trace.empty();

  std::vector<timeline::ScheduleMode> modes;
  if (o.mode.empty() || o.mode == "all")
    modes = {timeline::ScheduleMode::sync,
             timeline::ScheduleMode::one_step_overlap,
             timeline::ScheduleMode::async_interruptible,
             timeline::ScheduleMode::async_noninterruptible};
  else
    modes = {timeline::parse_schedule_mode(o.mode)};

  std::printf("%-24s %-12s %-12s %-12s %s\n", "mode", "time", "effective",
              "generation", "idle");
  for (auto mode : modes) {
    auto report = timeline::simulate(mode, sim, cfg.costs);
    std::printf("%-24s %-12.2f %-12.4f %-12.4f %.4f\n",
                std::string(timeline::schedule_mode_name(mode)).c_str(),
                report.total_time, report.effective_throughput,
                report.generation_throughput, report.mean_idle_fraction());
    if (!trace.empty()) {
      fs::path path = trace;
      if (modes.size() > 1)
        path = path.parent_path() /
               (path.stem().string() + "_" +
                std::string(timeline::schedule_mode_name(mode)) +
                path.extension().string());
      harness::export_timeline(report, path);
    }
  }
  return 0;
}

int cmd_export(const std::vector<std::string> &runs, const std::string &out) {
  std::vector<harness::RunRecord> records;
  for (const auto &dir : runs) {
    try {
      records.push_back(harness::load_run(dir));
    } catch (const std::exception &e) {
      std::cerr << "warning: skipping " << dir << ": " << e.what() << '\n';
    }
  }
  const auto written = harness::export_report(records, out);
  for (const auto &p : written)
    std::printf("%s\n", p.string().c_str());
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"asynchronous PPO on a toy sequence task"};
  app.require_subcommand(1);
  std::string kernels;
  app.add_option("--kernels", kernels, "scalar | avx2 (default: detect)");

  Overrides run_o, ablate_o, sim_o;
  std::string resume;
  auto *run = app.add_subcommand("run", "train one or more seeds");
  add_common(run, run_o);
  run->add_option("--mode", run_o.mode, "simulated | live");
  run->add_option("--resume", resume, "checkpoint directory of a previous run");

  std::string etas = "0,4,16,inf";
  std::string objectives = "decoupled,naive";
  auto *ablate = app.add_subcommand("ablate", "eta x objective matrix");
  add_common(ablate, ablate_o);
  ablate->add_option("--etas", etas, "comma-separated eta values");
  ablate->add_option("--objectives", objectives, "comma-separated objectives");

  std::string lengths = "pareto";
  std::uint64_t sim_steps = 20;
  std::string trace;
  auto *simulate = app.add_subcommand("simulate", "cost-only timeline model");
  add_common(simulate, sim_o);
  simulate->add_option("--mode", sim_o.mode,
                       "schedule mode, or 'all' (default)");
  simulate->add_option("--lengths", lengths, "fixed | uniform | pareto");
  simulate->add_option("--steps", sim_steps, "train steps to simulate");
  simulate->add_option("--trace", trace, "write Gantt rows to this CSV");

  std::vector<std::string> runs;
  std::string export_out = "report";
  auto *exp = app.add_subcommand("export", "plot-ready files from run dirs");
  exp->add_option("runs", runs, "run directories")->required();
  exp->add_option("--out", export_out, "output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (kernels == "scalar")
      kernels::select(kernels::Backend::scalar);
    else if (kernels == "avx2")
      kernels::select(kernels::Backend::avx2);
    else if (!kernels.empty())
      throw ConfigError("unknown kernel backend '" + kernels + "'");

    if (*run)
      return cmd_run(run_o, resume);
    if (*ablate)
      return cmd_ablate(ablate_o, etas, objectives);
    if (*simulate)
      return cmd_simulate(sim_o, lengths, sim_steps, trace);
    if (*exp)
      return cmd_export(runs, export_out);
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
