#include "asyncppo/harness.hpp"

#include "asyncppo/errors.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>
#include <unordered_set>

namespace asyncppo::harness {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kPromptStream = 0x70726f6d7074ULL;
constexpr std::uint64_t kSampleStream = 0x73616d706c65ULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kInitStream = 0x696e6974ULL;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix(splitmix(splitmix(a) ^ b) ^ c);
}

rollout::GenerateRequest make_request(const ExperimentConfig &config,
                                      std::uint64_t seed, std::uint64_t k) {
  rollout::GenerateRequest req;
  req.trajectory_id = static_cast<std::int64_t>(k);
  // The responses of one prompt share its seed and so its tokens.
  const std::uint64_t group = k / config.responses_per_prompt;
  req.prompt = env::make_prompt(mix(seed, kPromptStream, group),
                                config.task_kind, config.task);
  req.max_new_tokens = config.max_new_tokens;
  req.temperature = config.temperature;
  req.seed = mix(seed, kSampleStream, k);
  return req;
}

std::string format_eta(const controller::Eta &eta) { return eta_name(eta); }

// Replays every token under the snapshot of the version that emitted it.
void audit_batch(const controller::Batch &batch, const rollout::ParamsStore &store,
                 const policy::FeatureSpec &spec,
                 std::unordered_set<std::int64_t> &consumed) {
  for (const auto &traj : batch.trajectories) {
    if (!consumed.insert(traj.id).second)
      throw InvariantViolation("single-use replay: trajectory " +
                               std::to_string(traj.id) + " consumed twice");
    if (traj.tokens.size() != traj.behavior_logprobs.size() ||
        traj.tokens.size() != traj.versions.size())
      throw InvariantViolation("trajectory " + std::to_string(traj.id) +
                               ": token, log-prob and version counts differ");
    if (!traj.versions.empty() && traj.versions.front() != traj.start_version)
      throw InvariantViolation("trajectory " + std::to_string(traj.id) +
                               ": start version differs from first token");
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
      if (t > 0 && traj.versions[t] < traj.versions[t - 1])
        throw InvariantViolation("trajectory " + std::to_string(traj.id) +
                                 ": versions go backwards");
      auto snap = store.snapshot(traj.versions[t]);
      if (!snap)
        throw InvariantViolation("behavior audit: no snapshot of version " +
                                 std::to_string(traj.versions[t]));
      const auto ctx = policy::make_context(
          spec, traj.prompt,
          std::span<const Token>(traj.tokens.data(), t));
      const double lp = policy::log_prob(snap->values, ctx, traj.tokens[t]);
      if (!(std::abs(lp - traj.behavior_logprobs[t]) <= 1e-12))
        throw InvariantViolation(
            "behavior audit: trajectory " + std::to_string(traj.id) +
            " token " + std::to_string(t) + " log-prob mismatch");
    }
  }
}

// Owns the parameters and optimizer state between steps.
class PpoLearner {
public:
  PpoLearner(const ExperimentConfig &config, std::uint64_t seed,
             policy::VersionedParams initial, policy::OptimizerState opt,
             rollout::ParamsStore &store)
      : config_(config), seed_(seed),
        params_(std::make_shared<policy::VersionedParams>(std::move(initial))),
        opt_(std::move(opt)), store_(store) {}

  policy::ParamsPtr params() const { return params_; }
  const policy::OptimizerState &optimizer() const { return opt_; }
  std::uint64_t tokens_trained() const { return tokens_; }

  // Trains on one batch; the next version goes into the store history but
  // publication to workers is up to the caller.
  std::pair<policy::ParamsPtr, StepMetrics> step(controller::Batch batch,
                                                 double now) {
    if (batch.step_index != params_->version)
      throw InvariantViolation("trainer: batch for version " +
                               std::to_string(batch.step_index) +
                               " but parameters are at " +
                               std::to_string(params_->version));
    if (config_.audit)
      audit_batch(batch, store_, config_.features, consumed_);

    StepMetrics m;
    m.step = batch.step_index;
    double reward_sum = 0.0;
    std::size_t correct = 0;
    for (const auto &traj : batch.trajectories) {
      reward_sum += traj.reward->reward;
      correct += traj.reward->correct ? 1 : 0;
    }
    const double n = static_cast<double>(batch.trajectories.size());
    m.reward_mean = reward_sum / n;
    m.success_rate = static_cast<double>(correct) / n;

    const auto staleness = batch.staleness;
    auto tb = trainer::make_train_batch(std::move(batch.trajectories),
                                        batch.step_index, config_.features);
    auto result = trainer::train_step(tb, *params_, opt_, config_.ppo);
    result.record.staleness = staleness;
    tokens_ += result.record.tokens;

    params_ = std::make_shared<policy::VersionedParams>(std::move(result.params));
    store_.publish(params_);

    m.time = now;
    m.throughput = now > 0.0 ? static_cast<double>(tokens_) / now : 0.0;
    m.train = result.record;
    const std::uint64_t done = params_->version;
    if (config_.eval_every > 0 && done % config_.eval_every == 0)
      m.eval_success = evaluate_success(params_->values, config_, seed_,
                                        config_.eval_prompts);
    return {params_, m};
  }

private:
  const ExperimentConfig &config_;
  std::uint64_t seed_;
  policy::ParamsPtr params_;
  policy::OptimizerState opt_;
  rollout::ParamsStore &store_;
  std::unordered_set<std::int64_t> consumed_;
  std::uint64_t tokens_ = 0;
};

class StepLog {
public:
  StepLog(RunRecord &record, std::ostream *out, MetricsSink *extra)
      : record_(record), out_(out), extra_(extra) {}

  void append(StepMetrics m) {
    const auto j = to_json(m);
    if (out_) {
      *out_ << j.dump() << '\n';
      out_->flush();
    }
    if (extra_)
      extra_->emit(j);
    record_.steps.push_back(std::move(m));
  }

private:
  RunRecord &record_;
  std::ostream *out_;
  MetricsSink *extra_;
};

class SimulatedTrainer final : public timeline::TrainingBackend {
public:
  SimulatedTrainer(PpoLearner &learner, StepLog &log)
      : learner_(learner), log_(log) {}

  Outcome train(controller::Batch batch, double now) override {
    auto [params, metrics] = learner_.step(std::move(batch), now);
    Outcome out;
    out.tokens = metrics.train.tokens;
    out.params = params;
    log_.append(std::move(metrics));
    return out;
  }

private:
  PpoLearner &learner_;
  StepLog &log_;
};

timeline::EngineConfig engine_config(const ExperimentConfig &config,
                                     std::uint64_t initial_version,
                                     std::uint64_t steps) {
  timeline::EngineConfig ec;
  ec.mode = config.schedule;
  ec.batch_size = config.batch_size();
  ec.eta = config.eta;
  ec.slots_per_worker = config.slots_per_worker;
  ec.train_steps = steps;
  ec.initial_version = initial_version;
  return ec;
}

timeline::TimelineReport
run_simulated(const ExperimentConfig &config, std::uint64_t seed,
              std::uint64_t initial_version, std::uint64_t steps,
              PpoLearner &learner, StepLog &log) {
  std::vector<std::unique_ptr<rollout::RolloutWorker>> workers;
  std::vector<std::unique_ptr<timeline::PolicyWorkerBackend>> adapters;
  std::vector<timeline::GenerationBackend *> backends;
  for (int w = 0; w < config.workers; ++w) {
    workers.push_back(std::make_unique<rollout::RolloutWorker>(
        w, config.features, learner.params()));
    adapters.push_back(
        std::make_unique<timeline::PolicyWorkerBackend>(*workers.back()));
    backends.push_back(adapters.back().get());
  }
  SimulatedTrainer trainer(learner, log);
  const std::uint64_t offset = initial_version * config.batch_size();
  auto factory = [&config, seed, offset](std::uint64_t k) {
    return make_request(config, seed, offset + k);
  };
  timeline::Engine engine(engine_config(config, initial_version, steps),
                          config.costs, backends, trainer, factory,
                          env::RewardService(config.costs.reward_latency));
  return engine.run();
}

// Worker threads decode, one thread scores, the calling thread trains.
void run_live(const ExperimentConfig &config, std::uint64_t seed,
              std::uint64_t initial_version, std::uint64_t steps,
              PpoLearner &learner, StepLog &log) {
  if (config.schedule == timeline::ScheduleMode::one_step_overlap ||
      config.schedule == timeline::ScheduleMode::async_noninterruptible)
    throw ConfigError("live mode supports the sync and async_interruptible "
                      "schedules");
  timeline::EngineConfig ec = engine_config(config, initial_version, steps);

  std::vector<std::unique_ptr<rollout::RolloutWorker>> workers;
  std::vector<rollout::RolloutWorker *> ptrs;
  for (int w = 0; w < config.workers; ++w) {
    workers.push_back(std::make_unique<rollout::RolloutWorker>(
        w, config.features, learner.params()));
    ptrs.push_back(workers.back().get());
  }
  controller::RolloutController ctrl(
      {config.batch_size(), timeline::effective_eta(ec), initial_version},
      env::RewardService(0.0), ptrs);

  std::mutex mu;
  std::condition_variable reward_cv;
  std::condition_variable batch_cv;
  std::deque<rollout::Trajectory> reward_queue;
  std::atomic<bool> stop{false};
  std::atomic<std::uint64_t> next_request{initial_version * config.batch_size()};
  std::exception_ptr failure;

  auto fail = [&](std::exception_ptr e) {
    std::lock_guard lock(mu);
    if (!failure)
      failure = e;
    stop = true;
    reward_cv.notify_all();
    batch_cv.notify_all();
  };

  auto worker_loop = [&](rollout::RolloutWorker &worker) {
    try {
      while (!stop) {
        while (worker.in_flight() < config.slots_per_worker &&
               ctrl.admit_request())
          worker.submit(make_request(config, seed, next_request++));
        if (worker.in_flight() == 0) {
          std::this_thread::sleep_for(std::chrono::microseconds(200));
          continue;
        }
        auto outcome = worker.decode_step();
        if (!outcome.completed.empty()) {
          std::lock_guard lock(mu);
          for (auto &traj : outcome.completed)
            reward_queue.push_back(std::move(traj));
          reward_cv.notify_one();
        }
      }
    } catch (...) {
      fail(std::current_exception());
    }
  };

  auto reward_loop = [&] {
    try {
      for (;;) {
        rollout::Trajectory traj;
        {
          std::unique_lock lock(mu);
          reward_cv.wait(lock, [&] { return stop || !reward_queue.empty(); });
          if (stop)
            return;
          traj = std::move(reward_queue.front());
          reward_queue.pop_front();
        }
        ctrl.on_response(std::move(traj));
        batch_cv.notify_one();
      }
    } catch (...) {
      fail(std::current_exception());
    }
  };

  std::vector<std::thread> threads;
  for (auto &w : workers)
    threads.emplace_back(worker_loop, std::ref(*w));
  threads.emplace_back(reward_loop);

  const auto start = std::chrono::steady_clock::now();
  try {
    for (std::uint64_t s = 0; s < steps; ++s) {
      std::optional<controller::Batch> batch;
      while (!(batch = ctrl.form_batch())) {
        std::unique_lock lock(mu);
        if (stop)
          break;
        batch_cv.wait_for(lock, std::chrono::milliseconds(2));
      }
      if (!batch)
        break;
      const double now = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
      auto [params, metrics] = learner.step(std::move(*batch), now);
      ctrl.on_weights_published(params);
      log.append(std::move(metrics));
    }
  } catch (...) {
    fail(std::current_exception());
  }
  {
    std::lock_guard lock(mu);
    stop = true;
  }
  reward_cv.notify_all();
  for (auto &t : threads)
    t.join();
  if (failure)
    std::rethrow_exception(failure);
}

void write_text(const fs::path &path, const std::string &text) {
  std::ofstream out(path);
  if (!out)
    throw ConfigError("cannot write " + path.string());
  out << text;
}

nlohmann::json final_json(const RunRecord &record) {
  nlohmann::json j = {{"seed", record.seed},
                      {"steps", record.steps.size()},
                      {"final_success", record.final_success}};
  if (record.timeline)
    j["timeline"] = timeline::to_json(*record.timeline);
  return j;
}

} // namespace

nlohmann::json to_json(const StepMetrics &m) {
  nlohmann::json j = {{"step", m.step},
                      {"time", m.time},
                      {"reward_mean", m.reward_mean},
                      {"success_rate", m.success_rate},
                      {"throughput", m.throughput},
                      {"train", trainer::to_json(m.train)}};
  if (m.eval_success)
    j["eval_success"] = *m.eval_success;
  return j;
}

double evaluate_success(const policy::LinearParams &params,
                        const ExperimentConfig &config, std::uint64_t seed,
                        std::size_t count) {
  if (count == 0)
    return 0.0;
  std::size_t correct = 0;
  std::vector<Token> generated;
  for (std::size_t k = 0; k < count; ++k) {
    const auto prompt = env::make_prompt(mix(seed, kEvalStream, k),
                                         config.task_kind, config.task);
    generated.clear();
    for (int t = 0; t < config.max_new_tokens; ++t) {
      const auto ctx = policy::make_context(config.features, prompt, generated);
      const Token tok = policy::greedy(params, ctx);
      generated.push_back(tok);
      if (tok == env::kEos)
        break;
    }
    correct += env::evaluate_reward(prompt, generated).correct ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(count);
}

RunRecord run_experiment(const ExperimentConfig &config, std::uint64_t seed,
                         const RunOptions &options) {
  config.validate();
  RunRecord record;
  record.config = config;
  record.seed = seed;
  record.output_dir = config.output_dir;

  policy::VersionedParams initial;
  policy::OptimizerState opt;
  if (!config.resume_from.empty()) {
    initial = policy::load_params(config.resume_from / "params.txt");
    std::ifstream in(config.resume_from / "optimizer.txt");
    if (!in)
      throw ConfigError("resume: cannot read " +
                        (config.resume_from / "optimizer.txt").string());
    opt = policy::read_optimizer(in);
    if (initial.values.features != config.features.dim() ||
        initial.values.vocab != static_cast<std::size_t>(config.task.vocab_size) ||
        !opt.first_moment.same_shape(initial.values))
      throw ConfigError("resume: checkpoint shape does not match the config");
  } else {
    initial = policy::initial_params(config.features, config.init_scale,
                                     mix(seed, kInitStream, 0));
    opt = policy::OptimizerState::for_params(initial.values);
  }
  const std::uint64_t v0 = initial.version;
  const std::uint64_t steps =
      config.train_steps > v0 ? config.train_steps - v0 : 0;

  std::ofstream metrics_out;
  if (options.write_outputs) {
    fs::create_directories(config.output_dir);
    save_config(config.output_dir / "config.yaml", config);
    metrics_out.open(config.output_dir / "metrics.jsonl",
                     v0 > 0 ? std::ios::app : std::ios::trunc);
    if (!metrics_out)
      throw ConfigError("cannot write " +
                        (config.output_dir / "metrics.jsonl").string());
  }
  StepLog log(record, options.write_outputs ? &metrics_out : nullptr,
              options.extra_sink);

  auto first = std::make_shared<policy::VersionedParams>(initial);
  rollout::ParamsStore store(first, config.audit);
  PpoLearner learner(config, seed, std::move(initial), std::move(opt), store);

  if (steps > 0) {
    if (config.mode == ExecutionMode::simulated)
      record.timeline = run_simulated(config, seed, v0, steps, learner, log);
    else
      run_live(config, seed, v0, steps, learner, log);
  }

  record.final_success = evaluate_success(learner.params()->values, config,
                                          seed, config.eval_prompts);
  if (options.write_outputs) {
    policy::save_params(config.output_dir / "params.txt", *learner.params());
    std::ofstream opt_out(config.output_dir / "optimizer.txt");
    policy::write_optimizer(opt_out, learner.optimizer());
    write_text(config.output_dir / "final.json",
               final_json(record).dump(2) + "\n");
  }
  return record;
}

const AblationCell *AblationTable::find(const controller::Eta &eta,
                                        trainer::Objective objective) const {
  for (const auto &cell : cells)
    if (cell.eta == eta && cell.objective == objective)
      return &cell;
  return nullptr;
}

AblationTable run_ablation(const ExperimentConfig &base,
                           const std::vector<controller::Eta> &etas,
                           const std::vector<trainer::Objective> &objectives,
                           const RunOptions &options) {
  if (etas.empty())
    throw ConfigError("ablation needs at least one eta value");
  if (objectives.empty())
    throw ConfigError("ablation needs at least one objective");
  base.validate();
  AblationTable table;
  for (const auto &eta : etas) {
    for (auto objective : objectives) {
      AblationCell cell;
      cell.eta = eta;
      cell.objective = objective;
      const std::string name = "eta_" + format_eta(eta) + "_" +
                               std::string(trainer::objective_name(objective));
      std::vector<RunRecord> records;
      for (auto seed : base.seeds) {
        ExperimentConfig cfg = base;
        cfg.eta = eta;
        cfg.objective = objective;
        cfg.ppo.objective = objective;
        cfg.seeds = {seed};
        cfg.output_dir = base.output_dir / name / ("seed_" + std::to_string(seed));
        auto record = run_experiment(cfg, seed, options);
        cell.final_success.push_back(record.final_success);
        if (record.timeline)
          cell.mean_throughput += record.timeline->effective_throughput;
        else if (!record.steps.empty())
          cell.mean_throughput += record.steps.back().throughput;
        records.push_back(std::move(record));
      }
      const double n = static_cast<double>(cell.final_success.size());
      for (double s : cell.final_success)
        cell.mean_final_success += s;
      if (n > 0) {
        cell.mean_final_success /= n;
        cell.mean_throughput /= n;
      }
      if (options.write_outputs)
        export_report(records, base.output_dir / name);
      table.cells.push_back(std::move(cell));
    }
  }
  if (options.write_outputs)
    export_ablation(table, base.output_dir);
  return table;
}

std::vector<fs::path> export_report(const std::vector<RunRecord> &records,
                                    const fs::path &out_dir) {
  std::vector<fs::path> written;
  if (records.empty()) {
    std::cerr << "warning: no runs to export\n";
    return written;
  }
  fs::create_directories(out_dir);
  for (const auto &record : records) {
    if (record.steps.empty()) {
      std::cerr << "warning: run with seed " << record.seed
                << " has no steps, skipped\n";
      continue;
    }
    const auto path =
        out_dir / ("curve_seed_" + std::to_string(record.seed) + ".csv");
    std::ofstream out(path);
    out << std::setprecision(17);
    out << "step,time,reward_mean,success_rate,loss,clip_fraction,mean_ratio,"
           "tokens,throughput,max_staleness,eval_success\n";
    for (const auto &m : record.steps) {
      const std::uint64_t max_stale =
          m.train.staleness.empty() ? 0 : m.train.staleness.rbegin()->first;
      out << m.step << ',' << m.time << ',' << m.reward_mean << ','
          << m.success_rate << ',' << m.train.loss << ','
          << m.train.clip_fraction << ',' << m.train.mean_ratio << ','
          << m.train.tokens << ',' << m.throughput << ',' << max_stale << ',';
      if (m.eval_success)
        out << *m.eval_success;
      out << '\n';
    }
    written.push_back(path);
    if (record.timeline && !record.timeline->trace.empty())
      written.push_back(export_timeline(
          *record.timeline,
          out_dir / ("timeline_seed_" + std::to_string(record.seed) + ".csv")));
  }
  return written;
}

std::vector<fs::path> export_ablation(const AblationTable &table,
                                      const fs::path &out_dir) {
  std::vector<fs::path> written;
  if (table.cells.empty()) {
    std::cerr << "warning: empty ablation table\n";
    return written;
  }
  fs::create_directories(out_dir);
  const auto summary = out_dir / "summary.csv";
  std::ofstream out(summary);
  out << std::setprecision(17);
  out << "eta,objective,mean_final_success,mean_throughput,per_seed\n";
  for (const auto &cell : table.cells) {
    out << format_eta(cell.eta) << ',' << trainer::objective_name(cell.objective)
        << ',' << cell.mean_final_success << ',' << cell.mean_throughput << ',';
    for (std::size_t i = 0; i < cell.final_success.size(); ++i)
      out << (i ? ";" : "") << cell.final_success[i];
    out << '\n';
  }
  written.push_back(summary);

  const auto by_eta = out_dir / "throughput_vs_eta.csv";
  std::ofstream tp(by_eta);
  tp << std::setprecision(17) << "eta,objective,mean_throughput\n";
  for (const auto &cell : table.cells)
    tp << format_eta(cell.eta) << ',' << trainer::objective_name(cell.objective)
       << ',' << cell.mean_throughput << '\n';
  written.push_back(by_eta);
  return written;
}

fs::path export_timeline(const timeline::TimelineReport &report,
                         const fs::path &path) {
  if (path.has_parent_path())
    fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out)
    throw ConfigError("cannot write " + path.string());
  out << std::setprecision(17) << "lane,kind,start,end,version\n";
  for (const auto &iv : report.trace)
    out << iv.lane << ',' << iv.kind << ',' << iv.start << ',' << iv.end << ','
        << iv.version << '\n';
  return path;
}

RunRecord load_run(const fs::path &dir) {
  RunRecord record;
  record.output_dir = dir;
  record.config = load_config(dir / "config.yaml");
  std::ifstream metrics(dir / "metrics.jsonl");
  if (!metrics)
    throw ConfigError("load_run: missing " + (dir / "metrics.jsonl").string());
  std::string line;
  while (std::getline(metrics, line)) {
    if (line.empty())
      continue;
    const auto j = nlohmann::json::parse(line);
    StepMetrics m;
    m.step = j.at("step").get<std::uint64_t>();
    m.time = j.at("time").get<double>();
    m.reward_mean = j.at("reward_mean").get<double>();
    m.success_rate = j.at("success_rate").get<double>();
    m.throughput = j.at("throughput").get<double>();
    const auto &t = j.at("train");
    m.train.step_index = t.at("step").get<std::uint64_t>();
    m.train.loss = t.at("loss").get<double>();
    m.train.mean_ratio = t.at("mean_ratio").get<double>();
    m.train.clip_fraction = t.at("clip_fraction").get<double>();
    m.train.grad_norm = t.at("grad_norm").get<double>();
    m.train.tokens = t.at("tokens").get<std::size_t>();
    for (const auto &[k, v] : t.at("staleness").items())
      m.train.staleness[std::stoull(k)] = v.get<std::uint64_t>();
    if (j.contains("eval_success"))
      m.eval_success = j.at("eval_success").get<double>();
    record.steps.push_back(std::move(m));
  }
  std::ifstream final_in(dir / "final.json");
  if (final_in) {
    const auto j = nlohmann::json::parse(final_in);
    record.seed = j.at("seed").get<std::uint64_t>();
    record.final_success = j.at("final_success").get<double>();
  } else {
    std::cerr << "warning: " << (dir / "final.json").string()
              << " missing, run incomplete\n";
  }
  return record;
}

} // namespace asyncppo::harness
