#pragma once

// Synthetic prompt distributions and the rule-based reward service.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace asyncppo {

using Token = std::int32_t;

namespace env {

// Fixed 16-symbol vocabulary: digits 0-9, separator, end-of-sequence and
// four reserved ids that no task ever targets.
inline constexpr int kVocabSize = 16;
inline constexpr Token kSep = 10;
inline constexpr Token kEos = 11;
inline constexpr int kNumDigits = 10;

inline constexpr double kCorrectReward = 5.0;
inline constexpr double kIncorrectReward = -5.0;

enum class TaskKind { copy, modular_sum };

TaskKind parse_task_kind(std::string_view name);
std::string_view task_kind_name(TaskKind kind);

struct TaskConfig {
  int vocab_size = kVocabSize;
  int min_payload = 1; // copy task payload length range
  int max_payload = 3;
  int max_prompt_len = 8;
  double reward_latency = 0.0; // simulated seconds per evaluation

  void validate() const;
};

struct Prompt {
  std::int64_t id = 0;
  std::vector<Token> tokens; // payload followed by kSep
  TaskKind task_kind = TaskKind::copy;
  std::vector<Token> target;

  std::span<const Token> payload() const {
    return std::span<const Token>(tokens).first(tokens.size() - 1);
  }
  bool operator==(const Prompt &) const = default;
};

struct RewardResult {
  std::int64_t trajectory_id = 0;
  double reward = kIncorrectReward; // attributed to the final token only
  bool correct = false;

  bool operator==(const RewardResult &) const = default;
};

// Deterministic in (seed, kind, config). The prompt id is the seed.
Prompt make_prompt(std::uint64_t seed, TaskKind kind,
                   const TaskConfig &config = {});

// Correct iff the tokens before the first EOS equal the target exactly.
// A response without EOS (truncated at max length) is incorrect.
RewardResult evaluate_reward(const Prompt &prompt,
                             std::span<const Token> response,
                             std::int64_t trajectory_id = 0);

// Wraps evaluate_reward with a configurable simulated latency. The scoring
// function can be replaced, which is how failure paths are exercised.
class RewardService {
public:
  using Scorer = std::function<RewardResult(const Prompt &,
                                            std::span<const Token>,
                                            std::int64_t)>;

  explicit RewardService(double latency = 0.0);
  RewardService(double latency, Scorer scorer);

  double latency() const { return latency_; }

  // Pure with respect to its arguments; safe to call concurrently.
  RewardResult evaluate(const Prompt &prompt, std::span<const Token> response,
                        std::int64_t trajectory_id) const;

private:
  double latency_;
  Scorer scorer_;
};

} // namespace env
} // namespace asyncppo
