#pragma once

// Experiment configuration, read from and written to YAML.

#include "asyncppo/controller.hpp"
#include "asyncppo/env.hpp"
#include "asyncppo/policy.hpp"
#include "asyncppo/timeline.hpp"
#include "asyncppo/trainer.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace asyncppo {

enum class ExecutionMode { simulated, live };

ExecutionMode parse_execution_mode(std::string_view name);
std::string_view execution_mode_name(ExecutionMode mode);

// "inf" / "unbounded" map to nullopt.
controller::Eta parse_eta(std::string_view text);
std::string eta_name(const controller::Eta &eta);

struct ExperimentConfig {
  env::TaskKind task_kind = env::TaskKind::copy;
  env::TaskConfig task;

  // Reference scale is 512 prompts x 16 responses.
  std::uint64_t prompts_per_batch = 32;
  std::uint64_t responses_per_prompt = 4;
  controller::Eta eta = 0;
  trainer::Objective objective = trainer::Objective::decoupled;
  std::uint64_t train_steps = 300;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  ExecutionMode mode = ExecutionMode::simulated;
  timeline::ScheduleMode schedule = timeline::ScheduleMode::async_interruptible;
  int workers = 4;
  std::size_t slots_per_worker = 64;
  timeline::CostModel costs;

  policy::FeatureSpec features;
  double init_scale = 0.0;
  double temperature = 1.0;
  int max_new_tokens = 8;
  trainer::PpoConfig ppo;

  std::size_t eval_prompts = 256;
  std::uint64_t eval_every = 0; // 0: final evaluation only
  bool audit = true;            // replay behavior log-probs every batch

  std::filesystem::path output_dir = "runs/default";
  std::filesystem::path resume_from; // checkpoint directory, optional

  std::uint64_t batch_size() const {
    return prompts_per_batch * responses_per_prompt;
  }
  void validate() const;
};

ExperimentConfig load_config(const std::filesystem::path &path);
ExperimentConfig parse_config(const std::string &yaml_text);
std::string dump_config(const ExperimentConfig &config);
void save_config(const std::filesystem::path &path,
                 const ExperimentConfig &config);

} // namespace asyncppo
