#pragma once

// Interruptible streaming generation.
//
// A RolloutWorker decodes all of its in-flight sequences one token per step.
// update_weights() is mutually exclusive with a decode step, so every token is
// emitted under exactly one parameter version; it returns once all in-flight
// sequences have switched, without waiting for any of them to finish.

#include "asyncppo/env.hpp"
#include "asyncppo/policy.hpp"

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <vector>

namespace asyncppo::rollout {

struct Trajectory {
  std::int64_t id = 0;
  env::Prompt prompt;
  std::vector<Token> tokens;
  std::vector<double> behavior_logprobs;
  std::vector<std::uint64_t> versions;
  std::uint64_t start_version = 0;
  std::optional<env::RewardResult> reward;
  bool consumed = false;
  bool truncated = false; // hit max_new_tokens without EOS

  bool finished() const {
    return truncated || (!tokens.empty() && tokens.back() == env::kEos);
  }
  std::size_t sequence_length() const {
    return prompt.tokens.size() + tokens.size();
  }
};

struct GenerateRequest {
  std::int64_t trajectory_id = 0;
  env::Prompt prompt;
  int max_new_tokens = 8;
  double temperature = 1.0;
  std::uint64_t seed = 0; // per-sequence sampling stream

  void validate() const;
};

// One contiguous run of tokens emitted under a single version.
struct Segment {
  std::uint64_t version = 0;
  std::size_t begin = 0;
  std::size_t end = 0; // exclusive
};

std::vector<Segment> segments(const Trajectory &traj);

// Log-likelihood of the whole response under the stitched behavior policy:
// the sum of the per-token behavior log-probabilities.
double stitched_behavior_logprob(const Trajectory &traj);

class ParamsSource {
public:
  virtual ~ParamsSource() = default;
  // nullptr when no parameters are available.
  virtual policy::ParamsPtr current() const = 0;
};

// Thread-safe holder of the latest published snapshot, optionally retaining
// every published version for audits.
class ParamsStore final : public ParamsSource {
public:
  explicit ParamsStore(bool keep_history = false);
  ParamsStore(policy::ParamsPtr initial, bool keep_history = false);

  // Requires version == current version + 1 (or any version when empty).
  void publish(policy::ParamsPtr params);
  policy::ParamsPtr current() const override;
  policy::ParamsPtr snapshot(std::uint64_t version) const;

private:
  mutable std::mutex mu_;
  policy::ParamsPtr current_;
  bool keep_history_;
  std::map<std::uint64_t, policy::ParamsPtr> history_;
};

struct TokenTrace {
  std::int64_t trajectory_id = 0;
  std::size_t step = 0;
  std::uint64_t version = 0;
  Token token = 0;
  double logprob = 0.0;
};

// One JSON object per line: {"traj":..,"step":..,"version":..,"token":..,
// "logprob":..}. Thread-safe.
class TraceWriter {
public:
  explicit TraceWriter(std::ostream &out) : out_(out) {}
  void write(const TokenTrace &record);

private:
  std::mutex mu_;
  std::ostream &out_;
};

// Parses one line written by TraceWriter.
TokenTrace parse_trace_line(const std::string &line);

// Runs one request to completion, reading `source` at every token boundary;
// a newer snapshot there is an interruption. Throws ParamsUnavailable when
// the source yields nothing; no partial trajectory is returned in that case.
Trajectory generate(const GenerateRequest &request, const ParamsSource &source,
                    const policy::FeatureSpec &spec,
                    TraceWriter *trace = nullptr);

struct DecodeOutcome {
  std::size_t tokens_emitted = 0;
  std::vector<Trajectory> completed;
};

struct UpdateAck {
  bool accepted = false;
  std::uint64_t version = 0;
  std::size_t sequences_switched = 0;
  std::size_t recomputed_tokens = 0; // prefix tokens whose context was rebuilt
};

class RolloutWorker {
public:
  RolloutWorker(int id, policy::FeatureSpec spec, policy::ParamsPtr initial);

  RolloutWorker(const RolloutWorker &) = delete;
  RolloutWorker &operator=(const RolloutWorker &) = delete;

  int id() const { return id_; }
  std::uint64_t version() const;
  std::size_t in_flight() const;

  void submit(GenerateRequest request);

  // Emits one token for every in-flight sequence under the current version
  // and hands back the sequences that finished.
  DecodeOutcome decode_step();

  // Rejected (accepted = false, no state change) unless the version is
  // exactly current + 1.
  UpdateAck update_weights(policy::ParamsPtr params);

  // Drops all in-flight sequences and returns their requests for requeueing.
  std::vector<GenerateRequest> abort_all();

  void set_trace(TraceWriter *trace);

private:
  struct Sequence {
    GenerateRequest request;
    Trajectory traj;
    policy::Rng rng;
    std::uint64_t context_version = 0;
  };

  int id_;
  policy::FeatureSpec spec_;
  mutable std::mutex mu_;
  policy::ParamsPtr params_;
  std::vector<Sequence> active_;
  TraceWriter *trace_ = nullptr;
};

} // namespace asyncppo::rollout
