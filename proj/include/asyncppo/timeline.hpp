#pragma once

// Discrete-event model of rollout workers, reward service and trainer.
//
// The Engine drives the real RolloutController (gate, buffer, oldest-first
// batching) on a simulated clock. Generation and training are pluggable:
// simulate() uses length-only synthetic workers and a cost-only trainer,
// while the harness plugs in policy-backed rollout workers and the PPO
// trainer so that the same schedule produces a real training run.

#include "asyncppo/controller.hpp"
#include "asyncppo/metrics.hpp"
#include "asyncppo/rollout.hpp"

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace asyncppo::timeline {

enum class ScheduleMode {
  sync,                  // eta = 0: generate B, train, repeat
  one_step_overlap,      // batch rounds, next round overlaps one train step
  async_interruptible,   // continuous admission, weights swapped mid-sequence
  async_noninterruptible // continuous admission, workers drain before a swap
};

ScheduleMode parse_schedule_mode(std::string_view name);
std::string_view schedule_mode_name(ScheduleMode mode);

struct CostModel {
  double gen_latency_per_token = 1.0;   // one decode step over all sequences
  double train_latency_per_token = 0.01;
  double weight_sync_latency = 2.0;
  double recompute_latency_per_token = 0.001;
  double reward_latency = 0.0;

  void validate() const;
};

struct LengthDistribution {
  enum class Kind { fixed, uniform, pareto };
  Kind kind = Kind::pareto;
  std::size_t fixed_length = 16;
  std::size_t min_length = 4;   // uniform lower bound, pareto scale
  std::size_t max_length = 256; // uniform upper bound, pareto truncation
  double alpha = 1.2;           // pareto tail index

  void validate() const;
  std::size_t draw(std::mt19937_64 &rng) const;
};

LengthDistribution::Kind parse_length_kind(std::string_view name);
std::string_view length_kind_name(LengthDistribution::Kind kind);

struct Interval {
  double start = 0.0;
  double end = 0.0;
  int lane = 0; // worker id, or -1 for the trainer
  std::string kind; // "decode", "sync", "train"
  std::uint64_t version = 0;
};

struct TimelineReport {
  ScheduleMode mode = ScheduleMode::async_interruptible;
  double total_time = 0.0;
  std::vector<double> busy_fraction;
  std::vector<double> idle_fraction;
  double effective_throughput = 0.0;  // tokens trained per simulated second
  double generation_throughput = 0.0; // tokens generated per simulated second
  std::uint64_t tokens_generated = 0;
  std::uint64_t tokens_consumed = 0;
  std::uint64_t trajectories_generated = 0;
  std::uint64_t train_steps = 0;
  std::uint64_t interrupted_sequences = 0;
  std::vector<StalenessHistogram> batch_staleness;
  bool conservation_held = true;
  std::vector<Interval> trace;

  double mean_idle_fraction() const;
};

nlohmann::json to_json(const TimelineReport &report, bool include_trace = false);

// One simulated rollout worker.
class GenerationBackend {
public:
  virtual ~GenerationBackend() = default;
  virtual void submit(rollout::GenerateRequest request) = 0;
  virtual rollout::DecodeOutcome decode_step() = 0;
  virtual rollout::UpdateAck update_weights(policy::ParamsPtr params) = 0;
  virtual std::size_t in_flight() const = 0;
};

class TrainingBackend {
public:
  virtual ~TrainingBackend() = default;
  struct Outcome {
    policy::ParamsPtr params; // next version, published when training ends
    std::uint64_t tokens = 0; // tokens consumed, charged at the train cost
  };
  virtual Outcome train(controller::Batch batch, double now) = 0;
};

// Adapter over the policy-backed rollout worker.
class PolicyWorkerBackend final : public GenerationBackend {
public:
  explicit PolicyWorkerBackend(rollout::RolloutWorker &worker)
      : worker_(worker) {}
  void submit(rollout::GenerateRequest request) override;
  rollout::DecodeOutcome decode_step() override;
  rollout::UpdateAck update_weights(policy::ParamsPtr params) override;
  std::size_t in_flight() const override;

private:
  rollout::RolloutWorker &worker_;
};

// Emits placeholder tokens until request.max_new_tokens, ending with EOS.
class SyntheticWorker final : public GenerationBackend {
public:
  void submit(rollout::GenerateRequest request) override;
  rollout::DecodeOutcome decode_step() override;
  rollout::UpdateAck update_weights(policy::ParamsPtr params) override;
  std::size_t in_flight() const override { return active_.size(); }

private:
  struct Pending {
    rollout::GenerateRequest request;
    rollout::Trajectory traj;
  };
  std::uint64_t version_ = 0;
  std::vector<Pending> active_;
};

struct EngineConfig {
  ScheduleMode mode = ScheduleMode::async_interruptible;
  std::uint64_t batch_size = 64;
  controller::Eta eta = 4; // used by the async modes
  std::size_t slots_per_worker = 32;
  std::uint64_t train_steps = 20;
  std::uint64_t initial_version = 0; // version the workers start from
  bool record_trace = false;
};

controller::Eta effective_eta(const EngineConfig &config);

class Engine {
public:
  using RequestFactory = std::function<rollout::GenerateRequest(std::uint64_t)>;

  Engine(EngineConfig config, CostModel costs,
         std::vector<GenerationBackend *> workers, TrainingBackend &trainer,
         RequestFactory make_request, env::RewardService rewards,
         MetricsSink *metrics = nullptr);

  TimelineReport run();

  const controller::RolloutController &controller() const { return controller_; }

private:
  struct Lane {
    GenerationBackend *backend = nullptr;
    bool stepping = false;
    bool syncing = false;
    double busy = 0.0;
    double open_start = 0.0; // start of the in-progress interval
    double open_end = 0.0;
    std::vector<policy::ParamsPtr> pending;
    std::uint64_t version = 0;
    rollout::DecodeOutcome outcome;
  };
  enum class EventType { step_done, sync_done, reward_done, train_done };
  struct Event {
    double time = 0.0;
    std::uint64_t seq = 0;
    EventType type = EventType::step_done;
    int lane = -1;
    std::size_t payload = 0;
  };
  struct Later {
    bool operator()(const Event &a, const Event &b) const {
      return a.time != b.time ? a.time > b.time : a.seq > b.seq;
    }
  };

  void schedule(double time, EventType type, int lane, std::size_t payload = 0);
  bool accepting(const Lane &lane) const;
  void dispatch();
  void start_step(int lane);
  void start_sync(int lane);
  void on_step_done(int lane);
  void on_sync_done(int lane);
  void on_train_done(std::size_t payload);
  void try_train();
  void advance_lane(int lane);
  void add_interval(double start, double end, int lane, const char *kind,
                    std::uint64_t version);

  EngineConfig config_;
  CostModel costs_;
  std::vector<Lane> lanes_;
  TrainingBackend &trainer_;
  RequestFactory make_request_;
  MetricsSink *metrics_;
  controller::RolloutController controller_;
  bool interruptible_;
  bool round_barrier_;

  std::vector<Event> heap_;
  std::uint64_t next_seq_ = 0;
  double now_ = 0.0;

  std::uint64_t next_request_ = 0;
  std::uint64_t round_completed_ = 0; // trajectories finished in this round
  std::vector<rollout::Trajectory> reward_queue_;
  std::vector<policy::ParamsPtr> published_;
  bool trainer_busy_ = false;
  double train_start_ = 0.0;
  std::uint64_t steps_done_ = 0;

  TimelineReport report_;
};

struct SimConfig {
  int workers = 4;
  std::size_t slots_per_worker = 32;
  std::uint64_t batch_size = 64;
  controller::Eta eta = 4;
  std::uint64_t train_steps = 20;
  LengthDistribution lengths;
  std::uint64_t seed = 1;
  bool record_trace = false;

  void validate() const;
};

// Cost-only replay over synthetic lengths. Request k always receives the same
// length for a given seed, so every mode sees the same workload.
TimelineReport simulate(ScheduleMode mode, const SimConfig &config,
                        const CostModel &costs);

} // namespace asyncppo::timeline
