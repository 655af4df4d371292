#include "asyncppo/controller.hpp"

#include "asyncppo/errors.hpp"

namespace asyncppo::controller {

bool AdmissionState::holds() const {
  if (admitted == 0 || !eta)
    return true;
  return (admitted - 1) / batch_size <= version + *eta;
}

bool AdmissionState::admits_next() const {
  if (!eta)
    return true;
  return admitted / batch_size <= version + *eta;
}

StalenessGate::StalenessGate(std::uint64_t batch_size, Eta eta,
                             std::uint64_t initial_version) {
  if (batch_size == 0)
    throw ConfigError("batch size must be positive");
  state_.batch_size = batch_size;
  state_.eta = eta;
  state_.version = initial_version;
  state_.admitted = initial_version * batch_size;
}

bool StalenessGate::try_admit() {
  std::lock_guard lock(mu_);
  if (!state_.admits_next()) {
    ++rejections_;
    return false;
  }
  ++state_.admitted;
  return true;
}

void StalenessGate::advance_version(std::uint64_t new_version) {
  std::lock_guard lock(mu_);
  if (new_version != state_.version + 1)
    throw ConfigError("out-of-order weight publication: version " +
                      std::to_string(new_version) + " after " +
                      std::to_string(state_.version));
  state_.version = new_version;
}

AdmissionState StalenessGate::state() const {
  std::lock_guard lock(mu_);
  return state_;
}

std::uint64_t StalenessGate::admissions() const {
  std::lock_guard lock(mu_);
  return state_.admitted;
}

std::uint64_t StalenessGate::rejections() const {
  std::lock_guard lock(mu_);
  return rejections_;
}

// ---------------------------------------------------------------------------

bool ReplayBuffer::insert(rollout::Trajectory traj) {
  if (!traj.reward)
    throw InvariantViolation("replay buffer: trajectory " +
                             std::to_string(traj.id) + " has no reward");
  std::lock_guard lock(mu_);
  if (!seen_ids_.insert(traj.id).second)
    return false;
  const Key key{traj.start_version, arrivals_++};
  entries_.emplace(key, std::move(traj));
  return true;
}

std::optional<std::vector<rollout::Trajectory>>
ReplayBuffer::take_oldest(std::size_t count) {
  std::lock_guard lock(mu_);
  if (entries_.size() < count)
    return std::nullopt;
  std::vector<rollout::Trajectory> out;
  out.reserve(count);
  auto it = entries_.begin();
  for (std::size_t k = 0; k < count; ++k) {
    auto node = entries_.extract(it++);
    node.mapped().consumed = true;
    out.push_back(std::move(node.mapped()));
  }
  return out;
}

std::size_t ReplayBuffer::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

std::vector<std::uint64_t> ReplayBuffer::ordered_versions() const {
  std::lock_guard lock(mu_);
  std::vector<std::uint64_t> out;
  out.reserve(entries_.size());
  for (const auto &[key, traj] : entries_)
    out.push_back(key.first);
  return out;
}

// ---------------------------------------------------------------------------

RolloutController::RolloutController(ControllerConfig config,
                                     env::RewardService rewards,
                                     std::vector<rollout::RolloutWorker *> workers,
                                     MetricsSink *metrics)
    : config_(config), rewards_(std::move(rewards)),
      workers_(std::move(workers)), metrics_(metrics),
      gate_(config.batch_size, config.eta, config.initial_version) {}

void RolloutController::add_worker(rollout::RolloutWorker *worker) {
  workers_.push_back(worker);
}

bool RolloutController::admit_request() {
  const bool accepted = gate_.try_admit();
  std::lock_guard lock(counters_mu_);
  if (!accepted) {
    ++counters_.rejections;
    return false;
  }
  ++counters_.admissions;
  ++counters_.gate_audits;
  if (!gate_.state().holds())
    throw InvariantViolation("gate safety: floor((N_r-1)/B) <= i + eta "
                             "violated after admission");
  return true;
}

ResponseStatus RolloutController::on_response(rollout::Trajectory traj) {
  if (!traj.finished())
    throw InvariantViolation("on_response: trajectory " +
                             std::to_string(traj.id) + " is not complete");
  try {
    traj.reward = rewards_.evaluate(traj.prompt, traj.tokens, traj.id);
  } catch (const std::exception &) {
    std::lock_guard lock(counters_mu_);
    ++counters_.reward_failures;
    return ResponseStatus::reward_failed;
  }
  const bool fresh = buffer_.insert(std::move(traj));
  std::lock_guard lock(counters_mu_);
  if (!fresh) {
    ++counters_.duplicates;
    return ResponseStatus::duplicate;
  }
  ++counters_.buffered;
  return ResponseStatus::buffered;
}

std::optional<Batch> RolloutController::form_batch() {
  std::lock_guard batch_lock(batch_mu_);
  auto taken = buffer_.take_oldest(config_.batch_size);
  if (!taken)
    return std::nullopt;
  Batch batch;
  batch.step_index = gate_.state().version;
  batch.trajectories = std::move(*taken);
  for (const auto &traj : batch.trajectories) {
    if (traj.start_version > batch.step_index)
      throw InvariantViolation("batch formation: trajectory newer than the "
                               "current policy version");
    ++batch.staleness[batch.step_index - traj.start_version];
  }
  ControllerCounters snapshot;
  {
    std::lock_guard lock(counters_mu_);
    ++counters_.batches;
    snapshot = counters_;
  }
  if (metrics_) {
    metrics_->emit({{"event", "batch"},
                    {"step", batch.step_index},
                    {"staleness", histogram_to_json(batch.staleness)},
                    {"buffer_depth", buffer_.size()},
                    {"admissions", snapshot.admissions},
                    {"rejections", snapshot.rejections},
                    {"reward_failures", snapshot.reward_failures}});
  }
  return batch;
}

std::vector<rollout::UpdateAck>
RolloutController::on_weights_published(policy::ParamsPtr params) {
  if (!params)
    throw ConfigError("publication without parameters");
  gate_.advance_version(params->version);
  std::vector<rollout::UpdateAck> acks;
  acks.reserve(workers_.size());
  for (auto *worker : workers_) {
    auto ack = worker->update_weights(params);
    if (!ack.accepted)
      throw InvariantViolation("weight broadcast: worker " +
                               std::to_string(worker->id()) +
                               " rejected version " +
                               std::to_string(params->version));
    acks.push_back(ack);
  }
  return acks;
}

ControllerCounters RolloutController::counters() const {
  std::lock_guard lock(counters_mu_);
  return counters_;
}

} // namespace asyncppo::controller
