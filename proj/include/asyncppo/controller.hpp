#pragma once

// Rollout controller: staleness-gated admission, reward routing into a
// single-use replay buffer, oldest-first batch formation and weight broadcast.

#include "asyncppo/env.hpp"
#include "asyncppo/metrics.hpp"
#include "asyncppo/policy.hpp"
#include "asyncppo/rollout.hpp"

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <unordered_set>
#include <utility>
#include <vector>

namespace asyncppo::controller {

// nullopt = unbounded staleness.
using Eta = std::optional<std::uint64_t>;

struct AdmissionState {
  std::uint64_t admitted = 0; // N_r: admitted trajectories, finished or not
  std::uint64_t version = 0;  // i: latest published policy version
  Eta eta;                    // maximum permitted staleness
  std::uint64_t batch_size = 1;

  // floor((N_r - 1) / B) <= i + eta for the current N_r. Vacuous at N_r = 0.
  bool holds() const;
  // Whether admitting one more request keeps the inequality.
  bool admits_next() const;
};

class StalenessGate {
public:
  // A gate resumed at version v starts with N_r = v * B, as if the first v
  // batches had been generated under it.
  StalenessGate(std::uint64_t batch_size, Eta eta,
                std::uint64_t initial_version = 0);

  // Decision and N_r increment happen under one lock.
  bool try_admit();
  // Requires new_version == version + 1.
  void advance_version(std::uint64_t new_version);

  AdmissionState state() const;
  std::uint64_t admissions() const;
  std::uint64_t rejections() const;

private:
  mutable std::mutex mu_;
  AdmissionState state_;
  std::uint64_t rejections_ = 0;
};

// Completed, rewarded, unconsumed trajectories ordered by
// (start_version, arrival).
class ReplayBuffer {
public:
  // False on a duplicate id (including ids already consumed).
  bool insert(rollout::Trajectory traj);
  // Removes and returns the `count` oldest trajectories, marked consumed, or
  // nullopt when fewer are buffered.
  std::optional<std::vector<rollout::Trajectory>> take_oldest(std::size_t count);

  std::size_t size() const;
  // start_version of every buffered trajectory, in batching order.
  std::vector<std::uint64_t> ordered_versions() const;

private:
  using Key = std::pair<std::uint64_t, std::uint64_t>;
  mutable std::mutex mu_;
  std::map<Key, rollout::Trajectory> entries_;
  std::unordered_set<std::int64_t> seen_ids_;
  std::uint64_t arrivals_ = 0;
};

struct Batch {
  std::uint64_t step_index = 0; // policy version the batch trains from
  std::vector<rollout::Trajectory> trajectories;
  StalenessHistogram staleness;
};

enum class ResponseStatus { buffered, duplicate, reward_failed };

struct ControllerConfig {
  std::uint64_t batch_size = 128;
  Eta eta = 0;
  std::uint64_t initial_version = 0;
};

struct ControllerCounters {
  std::uint64_t admissions = 0;
  std::uint64_t rejections = 0;
  std::uint64_t buffered = 0;
  std::uint64_t duplicates = 0;
  std::uint64_t reward_failures = 0;
  std::uint64_t batches = 0;
  std::uint64_t gate_audits = 0;
};

class RolloutController {
public:
  RolloutController(ControllerConfig config, env::RewardService rewards,
                    std::vector<rollout::RolloutWorker *> workers = {},
                    MetricsSink *metrics = nullptr);

  // Gate check with an audit of the inequality after every acceptance.
  bool admit_request();

  // Scores the trajectory and buffers it. A failed evaluation drops the
  // trajectory; N_r is not decremented.
  ResponseStatus on_response(rollout::Trajectory traj);

  // Pulls the B oldest trajectories when available.
  std::optional<Batch> form_batch();

  // Advances i and broadcasts update_weights to every worker. Out-of-order
  // publication is a ConfigError.
  std::vector<rollout::UpdateAck> on_weights_published(policy::ParamsPtr params);

  void add_worker(rollout::RolloutWorker *worker);

  const StalenessGate &gate() const { return gate_; }
  std::size_t buffer_depth() const { return buffer_.size(); }
  ControllerCounters counters() const;
  const ControllerConfig &config() const { return config_; }

private:
  ControllerConfig config_;
  env::RewardService rewards_;
  std::vector<rollout::RolloutWorker *> workers_;
  MetricsSink *metrics_;
  StalenessGate gate_;
  ReplayBuffer buffer_;
  std::mutex batch_mu_;
  mutable std::mutex counters_mu_;
  ControllerCounters counters_;
};

} // namespace asyncppo::controller
