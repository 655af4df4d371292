#include "asyncppo/env.hpp"

#include "asyncppo/errors.hpp"

#include <algorithm>
#include <random>

namespace asyncppo::env {

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy")
    return TaskKind::copy;
  if (name == "modular_sum")
    return TaskKind::modular_sum;
  throw ConfigError("unknown task_kind '" + std::string(name) + "'");
}

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
  case TaskKind::copy:
    return "copy";
  case TaskKind::modular_sum:
    return "modular_sum";
  }
  throw ConfigError("unknown task_kind");
}

void TaskConfig::validate() const {
  if (vocab_size < 12)
    throw ConfigError("vocab_size must be >= 12 (10 digits, separator, EOS)");
  if (min_payload < 1 || max_payload < min_payload)
    throw ConfigError("payload length range must satisfy 1 <= min <= max");
  if (max_payload + 1 > max_prompt_len)
    throw ConfigError("max_prompt_len must fit the payload plus separator");
  if (max_prompt_len < 3)
    throw ConfigError("max_prompt_len must be >= 3 (modular_sum needs two "
                      "digits plus separator)");
  if (reward_latency < 0.0)
    throw ConfigError("reward_latency must be non-negative");
}

Prompt make_prompt(std::uint64_t seed, TaskKind kind, const TaskConfig &config) {
  config.validate();
  // Seed mixing so adjacent seeds give unrelated prompts.
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32), 0x70726dU};
  std::mt19937_64 rng(seq);
  auto digit = [&rng] { return static_cast<Token>(rng() % kNumDigits); };

  Prompt prompt;
  prompt.id = static_cast<std::int64_t>(seed);
  prompt.task_kind = kind;
  switch (kind) {
  case TaskKind::copy: {
    const auto span = static_cast<std::uint64_t>(config.max_payload -
                                                 config.min_payload + 1);
    const int len = config.min_payload + static_cast<int>(rng() % span);
    for (int i = 0; i < len; ++i)
      prompt.tokens.push_back(digit());
    prompt.target = prompt.tokens;
    break;
  }
  case TaskKind::modular_sum: {
    const Token a = digit();
    const Token b = digit();
    prompt.tokens = {a, b};
    prompt.target = {static_cast<Token>((a + b) % kNumDigits)};
    break;
  }
  default:
    throw ConfigError("unknown task_kind");
  }
  prompt.tokens.push_back(kSep);
  return prompt;
}

RewardResult evaluate_reward(const Prompt &prompt,
                             std::span<const Token> response,
                             std::int64_t trajectory_id) {
  RewardResult result;
  result.trajectory_id = trajectory_id;
  const auto eos = std::find(response.begin(), response.end(), kEos);
  if (eos != response.end()) {
    const std::span<const Token> answer(response.begin(), eos);
    result.correct = std::equal(answer.begin(), answer.end(),
                                prompt.target.begin(), prompt.target.end());
  }
  result.reward = result.correct ? kCorrectReward : kIncorrectReward;
  return result;
}

RewardService::RewardService(double latency)
    : RewardService(latency, [](const Prompt &p, std::span<const Token> r,
                                std::int64_t id) {
        return evaluate_reward(p, r, id);
      }) {}

RewardService::RewardService(double latency, Scorer scorer)
    : latency_(latency), scorer_(std::move(scorer)) {
  if (latency_ < 0.0)
    throw ConfigError("reward latency must be non-negative");
}

RewardResult RewardService::evaluate(const Prompt &prompt,
                                     std::span<const Token> response,
                                     std::int64_t trajectory_id) const {
  return scorer_(prompt, response, trajectory_id);
}

} // namespace asyncppo::env
