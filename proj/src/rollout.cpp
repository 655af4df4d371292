#include "asyncppo/rollout.hpp"

#include "asyncppo/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <numeric>

namespace asyncppo::rollout {

void GenerateRequest::validate() const {
  if (max_new_tokens < 1)
    throw ConfigError("max_new_tokens must be >= 1");
  if (!(temperature > 0.0))
    throw ConfigError("temperature must be positive");
}

std::vector<Segment> segments(const Trajectory &traj) {
  std::vector<Segment> out;
  for (std::size_t t = 0; t < traj.versions.size(); ++t) {
    if (out.empty() || out.back().version != traj.versions[t])
      out.push_back({traj.versions[t], t, t + 1});
    else
      out.back().end = t + 1;
  }
  return out;
}

double stitched_behavior_logprob(const Trajectory &traj) {
  return std::accumulate(traj.behavior_logprobs.begin(),
                         traj.behavior_logprobs.end(), 0.0);
}

// ---------------------------------------------------------------------------

ParamsStore::ParamsStore(bool keep_history) : keep_history_(keep_history) {}

ParamsStore::ParamsStore(policy::ParamsPtr initial, bool keep_history)
    : keep_history_(keep_history) {
  publish(std::move(initial));
}

void ParamsStore::publish(policy::ParamsPtr params) {
  if (!params)
    throw InvariantViolation("cannot publish empty parameters");
  std::lock_guard lock(mu_);
  if (current_ && params->version != current_->version + 1)
    throw InvariantViolation("version monotonicity: publishing version " +
                             std::to_string(params->version) + " after " +
                             std::to_string(current_->version));
  if (keep_history_)
    history_[params->version] = params;
  current_ = std::move(params);
}

policy::ParamsPtr ParamsStore::current() const {
  std::lock_guard lock(mu_);
  return current_;
}

policy::ParamsPtr ParamsStore::snapshot(std::uint64_t version) const {
  std::lock_guard lock(mu_);
  if (auto it = history_.find(version); it != history_.end())
    return it->second;
  if (current_ && current_->version == version)
    return current_;
  return nullptr;
}

// ---------------------------------------------------------------------------

void TraceWriter::write(const TokenTrace &r) {
  nlohmann::json j = {{"traj", r.trajectory_id}, {"step", r.step},
                      {"version", r.version},    {"token", r.token},
                      {"logprob", r.logprob}};
  std::lock_guard lock(mu_);
  out_ << j.dump() << '\n';
}

TokenTrace parse_trace_line(const std::string &line) {
  const auto j = nlohmann::json::parse(line);
  TokenTrace r;
  r.trajectory_id = j.at("traj").get<std::int64_t>();
  r.step = j.at("step").get<std::size_t>();
  r.version = j.at("version").get<std::uint64_t>();
  r.token = j.at("token").get<Token>();
  r.logprob = j.at("logprob").get<double>();
  return r;
}

// ---------------------------------------------------------------------------

namespace {

// Samples one token for `traj` under `params` and records it. Returns true
// when the sequence is finished afterwards.
bool emit_token(const policy::VersionedParams &params,
                const policy::FeatureSpec &spec, const GenerateRequest &request,
                Trajectory &traj, policy::Rng &rng, TraceWriter *trace) {
  const auto ctx = policy::make_context(spec, traj.prompt, traj.tokens);
  const auto s =
      policy::sample_with_log_prob(params.values, ctx, rng, request.temperature);
  if (traj.tokens.empty())
    traj.start_version = params.version;
  const std::size_t step = traj.tokens.size();
  traj.tokens.push_back(s.token);
  traj.behavior_logprobs.push_back(s.log_prob);
  traj.versions.push_back(params.version);
  if (trace)
    trace->write({traj.id, step, params.version, s.token, s.log_prob});
  if (s.token == env::kEos)
    return true;
  if (static_cast<int>(traj.tokens.size()) >= request.max_new_tokens) {
    traj.truncated = true;
    return true;
  }
  return false;
}

Trajectory start_trajectory(const GenerateRequest &request) {
  Trajectory traj;
  traj.id = request.trajectory_id;
  traj.prompt = request.prompt;
  return traj;
}

} // namespace

Trajectory generate(const GenerateRequest &request, const ParamsSource &source,
                    const policy::FeatureSpec &spec, TraceWriter *trace) {
  request.validate();
  Trajectory traj = start_trajectory(request);
  policy::Rng rng(request.seed);
  std::uint64_t last_version = 0;
  for (;;) {
    const auto params = source.current();
    if (!params)
      throw ParamsUnavailable("no parameters available for trajectory " +
                              std::to_string(request.trajectory_id));
    if (!traj.tokens.empty() && params->version < last_version)
      throw InvariantViolation("version monotonicity: parameter source went "
                               "backwards mid-generation");
    last_version = params->version;
    if (emit_token(*params, spec, request, traj, rng, trace))
      return traj;
  }
}

// ---------------------------------------------------------------------------

RolloutWorker::RolloutWorker(int id, policy::FeatureSpec spec,
                             policy::ParamsPtr initial)
    : id_(id), spec_(spec), params_(std::move(initial)) {
  if (!params_)
    throw ParamsUnavailable("rollout worker needs initial parameters");
}

std::uint64_t RolloutWorker::version() const {
  std::lock_guard lock(mu_);
  return params_->version;
}

std::size_t RolloutWorker::in_flight() const {
  std::lock_guard lock(mu_);
  return active_.size();
}

void RolloutWorker::submit(GenerateRequest request) {
  request.validate();
  std::lock_guard lock(mu_);
  Sequence seq{request, start_trajectory(request), policy::Rng(request.seed),
               params_->version};
  active_.push_back(std::move(seq));
}

DecodeOutcome RolloutWorker::decode_step() {
  std::lock_guard lock(mu_);
  DecodeOutcome out;
  std::vector<Sequence> still_running;
  still_running.reserve(active_.size());
  for (auto &seq : active_) {
    if (seq.context_version != params_->version)
      throw InvariantViolation("no torn tokens: sequence context built under "
                               "a stale version");
    ++out.tokens_emitted;
    if (emit_token(*params_, spec_, seq.request, seq.traj, seq.rng, trace_))
      out.completed.push_back(std::move(seq.traj));
    else
      still_running.push_back(std::move(seq));
  }
  active_ = std::move(still_running);
  return out;
}

UpdateAck RolloutWorker::update_weights(policy::ParamsPtr params) {
  std::lock_guard lock(mu_);
  UpdateAck ack;
  ack.version = params_->version;
  if (!params || params->version != params_->version + 1)
    return ack;
  params_ = std::move(params);
  // Contexts are rebuilt from the token prefix under the new weights. A
  // sequence that has not emitted a token yet holds no state to rebuild.
  for (auto &seq : active_) {
    seq.context_version = params_->version;
    if (seq.traj.tokens.empty())
      continue;
    ++ack.sequences_switched;
    ack.recomputed_tokens += seq.traj.sequence_length();
  }
  ack.accepted = true;
  ack.version = params_->version;
  return ack;
}

std::vector<GenerateRequest> RolloutWorker::abort_all() {
  std::lock_guard lock(mu_);
  std::vector<GenerateRequest> requests;
  requests.reserve(active_.size());
  for (auto &seq : active_)
    requests.push_back(std::move(seq.request));
  active_.clear();
  return requests;
}

void RolloutWorker::set_trace(TraceWriter *trace) {
  std::lock_guard lock(mu_);
  trace_ = trace;
}

} // namespace asyncppo::rollout
