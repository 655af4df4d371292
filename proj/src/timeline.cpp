#include "asyncppo/timeline.hpp"

#include "asyncppo/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace asyncppo::timeline {

ScheduleMode parse_schedule_mode(std::string_view name) {
  if (name == "sync")
    return ScheduleMode::sync;
  if (name == "one_step_overlap")
    return ScheduleMode::one_step_overlap;
  if (name == "async_interruptible")
    return ScheduleMode::async_interruptible;
  if (name == "async_noninterruptible")
    return ScheduleMode::async_noninterruptible;
  throw ConfigError("unknown schedule mode '" + std::string(name) + "'");
}

std::string_view schedule_mode_name(ScheduleMode mode) {
  switch (mode) {
  case ScheduleMode::sync:
    return "sync";
  case ScheduleMode::one_step_overlap:
    return "one_step_overlap";
  case ScheduleMode::async_interruptible:
    return "async_interruptible";
  case ScheduleMode::async_noninterruptible:
    return "async_noninterruptible";
  }
  throw ConfigError("unknown schedule mode");
}

void CostModel::validate() const {
  if (gen_latency_per_token < 0.0 || train_latency_per_token < 0.0 ||
      weight_sync_latency < 0.0 || recompute_latency_per_token < 0.0 ||
      reward_latency < 0.0)
    throw ConfigError("cost model latencies must be non-negative");
  if (!std::isfinite(gen_latency_per_token + train_latency_per_token +
                     weight_sync_latency + recompute_latency_per_token +
                     reward_latency))
    throw ConfigError("cost model latencies must be finite");
}

LengthDistribution::Kind parse_length_kind(std::string_view name) {
  if (name == "fixed")
    return LengthDistribution::Kind::fixed;
  if (name == "uniform")
    return LengthDistribution::Kind::uniform;
  if (name == "pareto")
    return LengthDistribution::Kind::pareto;
  throw ConfigError("unknown length distribution '" + std::string(name) + "'");
}

std::string_view length_kind_name(LengthDistribution::Kind kind) {
  switch (kind) {
  case LengthDistribution::Kind::fixed:
    return "fixed";
  case LengthDistribution::Kind::uniform:
    return "uniform";
  case LengthDistribution::Kind::pareto:
    return "pareto";
  }
  throw ConfigError("unknown length distribution");
}

void LengthDistribution::validate() const {
  switch (kind) {
  case Kind::fixed:
    if (fixed_length < 1)
      throw ConfigError("fixed length must be >= 1");
    break;
  case Kind::uniform:
  case Kind::pareto:
    if (min_length < 1 || max_length < min_length)
      throw ConfigError("length bounds must satisfy 1 <= min <= max");
    if (kind == Kind::pareto && !(alpha > 0.0 && std::isfinite(alpha)))
      throw ConfigError("pareto alpha must be positive");
    break;
  }
}

std::size_t LengthDistribution::draw(std::mt19937_64 &rng) const {
  switch (kind) {
  case Kind::fixed:
    return fixed_length;
  case Kind::uniform:
    return min_length + static_cast<std::size_t>(
                            rng() % (max_length - min_length + 1));
  case Kind::pareto: {
    // Inverse CDF of a Pareto(min_length, alpha) truncated at max_length.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    const double lo = static_cast<double>(min_length);
    const double hi = static_cast<double>(max_length);
    const double tail = std::pow(lo / hi, alpha);
    const double x = lo / std::pow(1.0 - u * (1.0 - tail), 1.0 / alpha);
    return std::clamp(static_cast<std::size_t>(x), min_length, max_length);
  }
  }
  throw ConfigError("unknown length distribution");
}

double TimelineReport::mean_idle_fraction() const {
  if (idle_fraction.empty())
    return 0.0;
  return std::accumulate(idle_fraction.begin(), idle_fraction.end(), 0.0) /
         static_cast<double>(idle_fraction.size());
}

nlohmann::json to_json(const TimelineReport &r, bool include_trace) {
  nlohmann::json staleness = nlohmann::json::array();
  for (const auto &h : r.batch_staleness)
    staleness.push_back(histogram_to_json(h));
  nlohmann::json j = {{"mode", schedule_mode_name(r.mode)},
                      {"total_time", r.total_time},
                      {"busy_fraction", r.busy_fraction},
                      {"idle_fraction", r.idle_fraction},
                      {"effective_throughput", r.effective_throughput},
                      {"generation_throughput", r.generation_throughput},
                      {"tokens_generated", r.tokens_generated},
                      {"tokens_consumed", r.tokens_consumed},
                      {"trajectories_generated", r.trajectories_generated},
                      {"train_steps", r.train_steps},
                      {"interrupted_sequences", r.interrupted_sequences},
                      {"conservation_held", r.conservation_held},
                      {"batch_staleness", staleness}};
  if (include_trace) {
    nlohmann::json trace = nlohmann::json::array();
    for (const auto &iv : r.trace)
      trace.push_back({{"start", iv.start},
                       {"end", iv.end},
                       {"lane", iv.lane},
                       {"kind", iv.kind},
                       {"version", iv.version}});
    j["trace"] = std::move(trace);
  }
  return j;
}

// ---------------------------------------------------------------------------

void PolicyWorkerBackend::submit(rollout::GenerateRequest request) {
  worker_.submit(std::move(request));
}
rollout::DecodeOutcome PolicyWorkerBackend::decode_step() {
  return worker_.decode_step();
}
rollout::UpdateAck PolicyWorkerBackend::update_weights(policy::ParamsPtr params) {
  return worker_.update_weights(std::move(params));
}
std::size_t PolicyWorkerBackend::in_flight() const { return worker_.in_flight(); }

void SyntheticWorker::submit(rollout::GenerateRequest request) {
  request.validate();
  rollout::Trajectory traj;
  traj.id = request.trajectory_id;
  traj.prompt = request.prompt;
  active_.push_back({std::move(request), std::move(traj)});
}

rollout::DecodeOutcome SyntheticWorker::decode_step() {
  rollout::DecodeOutcome out;
  std::vector<Pending> running;
  for (auto &p : active_) {
    auto &traj = p.traj;
    if (traj.tokens.empty())
      traj.start_version = version_;
    const bool last =
        static_cast<int>(traj.tokens.size()) + 1 >= p.request.max_new_tokens;
    traj.tokens.push_back(last ? env::kEos : Token{0});
    traj.behavior_logprobs.push_back(0.0);
    traj.versions.push_back(version_);
    ++out.tokens_emitted;
    if (last)
      out.completed.push_back(std::move(traj));
    else
      running.push_back(std::move(p));
  }
  active_ = std::move(running);
  return out;
}

rollout::UpdateAck SyntheticWorker::update_weights(policy::ParamsPtr params) {
  rollout::UpdateAck ack;
  ack.version = version_;
  if (!params || params->version != version_ + 1)
    return ack;
  version_ = params->version;
  ack.accepted = true;
  ack.version = version_;
  for (const auto &p : active_) {
    if (p.traj.tokens.empty())
      continue;
    ++ack.sequences_switched;
    ack.recomputed_tokens += p.traj.sequence_length();
  }
  return ack;
}

// ---------------------------------------------------------------------------

controller::Eta effective_eta(const EngineConfig &config) {
  switch (config.mode) {
  case ScheduleMode::sync:
    return 0;
  case ScheduleMode::one_step_overlap:
    return 1;
  default:
    return config.eta;
  }
}

Engine::Engine(EngineConfig config, CostModel costs,
               std::vector<GenerationBackend *> workers,
               TrainingBackend &trainer, RequestFactory make_request,
               env::RewardService rewards, MetricsSink *metrics)
    : config_(config), costs_(costs), trainer_(trainer),
      make_request_(std::move(make_request)), metrics_(metrics),
      controller_({config.batch_size, effective_eta(config),
                   config.initial_version},
                  std::move(rewards), {}, metrics),
      interruptible_(config.mode == ScheduleMode::async_interruptible),
      round_barrier_(config.mode == ScheduleMode::one_step_overlap) {
  costs_.validate();
  if (workers.empty())
    throw ConfigError("timeline needs at least one worker");
  if (config_.slots_per_worker < 1)
    throw ConfigError("slots_per_worker must be >= 1");
  for (auto *w : workers) {
    Lane lane;
    lane.backend = w;
    lane.version = config_.initial_version;
    lanes_.push_back(std::move(lane));
  }
  report_.mode = config_.mode;
}

void Engine::schedule(double time, EventType type, int lane,
                      std::size_t payload) {
  heap_.push_back({time, next_seq_++, type, lane, payload});
  std::push_heap(heap_.begin(), heap_.end(), Later{});
}

void Engine::add_interval(double start, double end, int lane, const char *kind,
                          std::uint64_t version) {
  if (config_.record_trace)
    report_.trace.push_back({start, end, lane, kind, version});
}

bool Engine::accepting(const Lane &lane) const {
  if (lane.syncing)
    return false;
  if (!interruptible_ && !lane.pending.empty())
    return false; // draining before a swap
  return lane.backend->in_flight() < config_.slots_per_worker;
}

void Engine::dispatch() {
  for (;;) {
    if (round_barrier_ &&
        next_request_ / config_.batch_size >
            report_.trajectories_generated / config_.batch_size)
      break;
    int best = -1;
    for (int l = 0; l < static_cast<int>(lanes_.size()); ++l) {
      if (!accepting(lanes_[l]))
        continue;
      if (best < 0 || lanes_[l].backend->in_flight() <
                          lanes_[best].backend->in_flight())
        best = l;
    }
    if (best < 0)
      break;
    if (!controller_.admit_request())
      break;
    lanes_[best].backend->submit(make_request_(next_request_++));
  }
  for (int l = 0; l < static_cast<int>(lanes_.size()); ++l)
    advance_lane(l);
}

void Engine::advance_lane(int l) {
  Lane &lane = lanes_[l];
  if (lane.stepping || lane.syncing)
    return;
  const std::size_t in_flight = lane.backend->in_flight();
  if (!lane.pending.empty() && (interruptible_ || in_flight == 0)) {
    start_sync(l);
    return;
  }
  if (in_flight > 0)
    start_step(l);
}

void Engine::start_step(int l) {
  Lane &lane = lanes_[l];
  lane.outcome = lane.backend->decode_step();
  lane.stepping = true;
  lane.open_start = now_;
  lane.open_end = now_ + costs_.gen_latency_per_token;
  schedule(lane.open_end, EventType::step_done, l);
}

void Engine::start_sync(int l) {
  Lane &lane = lanes_[l];
  rollout::UpdateAck last;
  for (auto &params : lane.pending) {
    last = lane.backend->update_weights(params);
    if (!last.accepted)
      throw InvariantViolation("weight broadcast: worker " + std::to_string(l) +
                               " rejected version " +
                               std::to_string(params->version));
  }
  lane.pending.clear();
  lane.version = last.version;
  report_.interrupted_sequences += last.sequences_switched;
  const double cost =
      costs_.weight_sync_latency +
      costs_.recompute_latency_per_token *
          static_cast<double>(last.recomputed_tokens);
  lane.syncing = true;
  lane.open_start = now_;
  lane.open_end = now_ + cost;
  schedule(lane.open_end, EventType::sync_done, l);
}

void Engine::on_step_done(int l) {
  Lane &lane = lanes_[l];
  lane.stepping = false;
  lane.busy += lane.open_end - lane.open_start;
  add_interval(lane.open_start, lane.open_end, l, "decode", lane.version);
  report_.tokens_generated += lane.outcome.tokens_emitted;
  for (auto &traj : lane.outcome.completed) {
    ++report_.trajectories_generated;
    reward_queue_.push_back(std::move(traj));
    schedule(now_ + costs_.reward_latency, EventType::reward_done, -1,
             reward_queue_.size() - 1);
  }
  lane.outcome = {};
}

void Engine::on_sync_done(int l) {
  Lane &lane = lanes_[l];
  lane.syncing = false;
  lane.busy += lane.open_end - lane.open_start;
  add_interval(lane.open_start, lane.open_end, l, "sync", lane.version);
}

void Engine::try_train() {
  if (trainer_busy_ || steps_done_ >= config_.train_steps)
    return;
  auto batch = controller_.form_batch();
  if (!batch)
    return;
  report_.batch_staleness.push_back(batch->staleness);
  auto outcome = trainer_.train(std::move(*batch), now_);
  if (!outcome.params)
    throw InvariantViolation("training backend returned no parameters");
  report_.tokens_consumed += outcome.tokens;
  if (report_.tokens_consumed > report_.tokens_generated)
    report_.conservation_held = false;
  trainer_busy_ = true;
  train_start_ = now_;
  published_.push_back(std::move(outcome.params));
  schedule(now_ + costs_.train_latency_per_token *
                      static_cast<double>(outcome.tokens),
           EventType::train_done, -1, published_.size() - 1);
}

void Engine::on_train_done(std::size_t payload) {
  trainer_busy_ = false;
  ++steps_done_;
  auto params = published_[payload];
  add_interval(train_start_, now_, -1, "train", params->version - 1);
  controller_.on_weights_published(params);
  for (auto &lane : lanes_)
    lane.pending.push_back(params);
  if (metrics_)
    metrics_->emit({{"event", "publish"},
                    {"version", params->version},
                    {"time", now_}});
  try_train();
}

TimelineReport Engine::run() {
  dispatch();
  while (steps_done_ < config_.train_steps) {
    if (heap_.empty())
      throw InvariantViolation("timeline stalled: no pending events after " +
                               std::to_string(steps_done_) + " train steps");
    std::pop_heap(heap_.begin(), heap_.end(), Later{});
    const Event ev = heap_.back();
    heap_.pop_back();
    now_ = ev.time;
    switch (ev.type) {
    case EventType::step_done:
      on_step_done(ev.lane);
      break;
    case EventType::sync_done:
      on_sync_done(ev.lane);
      break;
    case EventType::reward_done:
      controller_.on_response(std::move(reward_queue_[ev.payload]));
      try_train();
      break;
    case EventType::train_done:
      on_train_done(ev.payload);
      break;
    }
    // Requests go out once every event at this instant has been applied, so
    // lanes freed together share the new work.
    if (heap_.empty() || heap_.front().time > now_)
      dispatch();
  }

  report_.total_time = now_;
  report_.train_steps = steps_done_;
  for (auto &lane : lanes_) {
    double busy = lane.busy;
    if (lane.stepping || lane.syncing)
      busy += std::max(0.0, std::min(lane.open_end, now_) - lane.open_start);
    const double frac = now_ > 0.0 ? busy / now_ : 0.0;
    report_.busy_fraction.push_back(frac);
    report_.idle_fraction.push_back(1.0 - frac);
  }
  if (now_ > 0.0) {
    report_.effective_throughput =
        static_cast<double>(report_.tokens_consumed) / now_;
    report_.generation_throughput =
        static_cast<double>(report_.tokens_generated) / now_;
  }
  return report_;
}

// ---------------------------------------------------------------------------

void SimConfig::validate() const {
  if (workers < 1)
    throw ConfigError("worker count must be >= 1");
  if (slots_per_worker < 1)
    throw ConfigError("slots_per_worker must be >= 1");
  if (batch_size < 1)
    throw ConfigError("batch size must be >= 1");
  if (train_steps < 1)
    throw ConfigError("train_steps must be >= 1");
  lengths.validate();
}

namespace {

class CostOnlyTrainer final : public TrainingBackend {
public:
  Outcome train(controller::Batch batch, double) override {
    Outcome out;
    for (const auto &traj : batch.trajectories)
      out.tokens += traj.tokens.size();
    auto next = std::make_shared<policy::VersionedParams>();
    next->version = batch.step_index + 1;
    out.params = std::move(next);
    return out;
  }
};

} // namespace

TimelineReport simulate(ScheduleMode mode, const SimConfig &config,
                        const CostModel &costs) {
  config.validate();
  costs.validate();
  std::vector<SyntheticWorker> workers(static_cast<std::size_t>(config.workers));
  std::vector<GenerationBackend *> backends;
  for (auto &w : workers)
    backends.push_back(&w);
  CostOnlyTrainer trainer;

  const auto lengths = config.lengths;
  const auto seed = config.seed;
  auto make_request = [lengths, seed](std::uint64_t k) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed),
                      static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(k),
                      static_cast<std::uint32_t>(k >> 32)};
    std::mt19937_64 rng(seq);
    rollout::GenerateRequest req;
    req.trajectory_id = static_cast<std::int64_t>(k);
    req.prompt.id = static_cast<std::int64_t>(k);
    req.prompt.tokens = {env::kSep};
    req.max_new_tokens = static_cast<int>(lengths.draw(rng));
    return req;
  };
  env::RewardService rewards(
      costs.reward_latency,
      [](const env::Prompt &, std::span<const Token>, std::int64_t id) {
        return env::RewardResult{id, env::kCorrectReward, true};
      });

  EngineConfig ec;
  ec.mode = mode;
  ec.batch_size = config.batch_size;
  ec.eta = config.eta;
  ec.slots_per_worker = config.slots_per_worker;
  ec.train_steps = config.train_steps;
  ec.record_trace = config.record_trace;
  Engine engine(ec, costs, backends, trainer, make_request, std::move(rewards));
  return engine.run();
}

} // namespace asyncppo::timeline
