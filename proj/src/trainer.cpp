#include "asyncppo/trainer.hpp"

#include "asyncppo/errors.hpp"
#include "asyncppo/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace asyncppo::trainer {

Objective parse_objective(std::string_view name) {
  if (name == "decoupled")
    return Objective::decoupled;
  if (name == "naive")
    return Objective::naive;
  throw ConfigError("unknown objective '" + std::string(name) + "'");
}

std::string_view objective_name(Objective objective) {
  return objective == Objective::decoupled ? "decoupled" : "naive";
}

void PpoConfig::validate() const {
  if (!(clip_eps > 0.0 && clip_eps < 1.0))
    throw ConfigError("clip epsilon must lie in (0, 1)");
  if (minibatches < 1)
    throw ConfigError("minibatch count must be >= 1");
  if (microbatch_capacity < 1)
    throw ConfigError("micro-batch capacity must be >= 1");
  if (min_microbatches < 1)
    throw ConfigError("k_min must be >= 1");
  adam.validate();
}

std::size_t TrainBatch::token_count() const {
  std::size_t n = 0;
  for (const auto &traj : trajectories)
    n += traj.tokens.size();
  return n;
}

TrainBatch make_train_batch(std::vector<rollout::Trajectory> trajectories,
                            std::uint64_t step_index,
                            const policy::FeatureSpec &spec) {
  TrainBatch batch;
  batch.step_index = step_index;
  batch.trajectories = std::move(trajectories);
  batch.contexts.reserve(batch.trajectories.size());
  for (const auto &traj : batch.trajectories) {
    std::vector<policy::ContextFeatures> ctxs;
    ctxs.reserve(traj.tokens.size());
    const std::span<const Token> tokens(traj.tokens);
    for (std::size_t t = 0; t < tokens.size(); ++t)
      ctxs.push_back(policy::make_context(spec, traj.prompt, tokens.first(t)));
    batch.contexts.push_back(std::move(ctxs));
  }
  return batch;
}

std::vector<std::vector<double>> compute_advantages(const TrainBatch &batch) {
  std::vector<std::vector<double>> adv(batch.trajectories.size());
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto &traj : batch.trajectories) {
    if (!traj.reward)
      throw InvariantViolation("compute_advantages: trajectory " +
                               std::to_string(traj.id) + " has no reward");
    sum += traj.reward->reward * static_cast<double>(traj.tokens.size());
    n += traj.tokens.size();
  }
  if (n == 0)
    return adv;
  const double mean = sum / static_cast<double>(n);
  double sq = 0.0;
  for (const auto &traj : batch.trajectories) {
    const double d = traj.reward->reward - mean;
    sq += d * d * static_cast<double>(traj.tokens.size());
  }
  const double stddev = std::sqrt(sq / static_cast<double>(n));
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const auto &traj = batch.trajectories[i];
    const double value =
        stddev > 0.0 ? (traj.reward->reward - mean) / stddev : 0.0;
    adv[i].assign(traj.tokens.size(), value);
  }
  return adv;
}

std::vector<std::vector<double>>
recompute_prox_logprobs(const TrainBatch &batch,
                        const policy::LinearParams &params) {
  std::vector<std::vector<double>> out(batch.trajectories.size());
  for (std::size_t i = 0; i < batch.trajectories.size(); ++i) {
    const auto &traj = batch.trajectories[i];
    out[i].reserve(traj.tokens.size());
    for (std::size_t t = 0; t < traj.tokens.size(); ++t)
      out[i].push_back(
          policy::log_prob(params, batch.contexts[i][t], traj.tokens[t]));
  }
  return out;
}

void prepare(TrainBatch &batch, const policy::LinearParams &params) {
  batch.prox_logprobs = recompute_prox_logprobs(batch, params);
  batch.advantages = compute_advantages(batch);
}

namespace {

TokenTerm clipped_surrogate(double r, double u, double advantage, double eps) {
  TokenTerm term;
  if (!std::isfinite(r) || !std::isfinite(u)) {
    term.excluded = true;
    return term;
  }
  term.ratio = u;
  const double unclipped = u * advantage;
  const double clipped = std::clamp(u, 1.0 - eps, 1.0 + eps) * advantage;
  if (clipped < unclipped) {
    // The clipped branch binds and is flat in theta.
    term.value = r * clipped;
    term.clipped = true;
  } else {
    term.value = r * unclipped;
    term.grad_coeff = r * unclipped; // d(u)/d(log pi_theta) = u
  }
  return term;
}

} // namespace

TokenTerm decoupled_term(double behavior_logprob, double prox_logprob,
                         double logprob, double advantage, double eps) {
  const double r = std::exp(prox_logprob - behavior_logprob);
  const double u = std::exp(logprob - prox_logprob);
  return clipped_surrogate(r, u, advantage, eps);
}

TokenTerm naive_term(double behavior_logprob, double logprob, double advantage,
                     double eps) {
  return clipped_surrogate(1.0, std::exp(logprob - behavior_logprob), advantage,
                           eps);
}

void accumulate_loss(const TrainBatch &batch, const policy::LinearParams &params,
                     Objective objective, double eps,
                     std::span<const std::size_t> trajectory_indices,
                     LossResult &acc) {
  if (objective == Objective::decoupled && !batch.prepared())
    throw InvariantViolation("decoupled loss needs proximal log-probs");
  if (batch.advantages.size() != batch.trajectories.size())
    throw InvariantViolation("loss needs advantages for every trajectory");
  if (!acc.grad.same_shape(params))
    acc.grad = policy::Gradient::zeros_like(params);

  for (const std::size_t i : trajectory_indices) {
    const auto &traj = batch.trajectories[i];
    for (std::size_t t = 0; t < traj.tokens.size(); ++t) {
      const auto &ctx = batch.contexts[i][t];
      const auto lsm = policy::log_softmax(policy::logits(params, ctx));
      const auto token = static_cast<std::size_t>(traj.tokens[t]);
      const double behav = traj.behavior_logprobs[t];
      const double adv = batch.advantages[i][t];
      const TokenTerm term =
          objective == Objective::decoupled
              ? decoupled_term(behav, batch.prox_logprobs[i][t], lsm[token], adv,
                               eps)
              : naive_term(behav, lsm[token], adv, eps);
      if (term.excluded) {
        ++acc.excluded;
        continue;
      }
      ++acc.tokens;
      acc.loss -= term.value;
      acc.ratio_sum += term.ratio;
      if (term.clipped)
        ++acc.clipped;
      if (term.grad_coeff == 0.0)
        continue;
      for (std::size_t v = 0; v < params.vocab; ++v) {
        const double residual = (v == token ? 1.0 : 0.0) - std::exp(lsm[v]);
        const double coeff = -term.grad_coeff * residual;
        kernels::axpy(coeff, ctx.vector,
                      std::span<double>(acc.grad.weights)
                          .subspan(v * params.features, params.features));
        acc.grad.bias[v] += coeff;
      }
    }
  }
}

void finalize_loss(LossResult &acc) {
  if (acc.tokens == 0)
    return;
  const double inv = 1.0 / static_cast<double>(acc.tokens);
  acc.loss *= inv;
  acc.grad.scale(inv);
}

LossResult ppo_loss(const TrainBatch &batch, const policy::LinearParams &params,
                    Objective objective, double eps) {
  std::vector<std::size_t> all(batch.trajectories.size());
  std::iota(all.begin(), all.end(), std::size_t{0});
  LossResult acc;
  acc.grad = policy::Gradient::zeros_like(params);
  accumulate_loss(batch, params, objective, eps, all, acc);
  finalize_loss(acc);
  return acc;
}

LossResult decoupled_ppo_loss(const TrainBatch &batch,
                              const policy::LinearParams &params, double eps) {
  return ppo_loss(batch, params, Objective::decoupled, eps);
}

LossResult naive_ppo_loss(const TrainBatch &batch,
                          const policy::LinearParams &params, double eps) {
  return ppo_loss(batch, params, Objective::naive, eps);
}

MicrobatchPlan allocate_microbatches(std::span<const std::size_t> lengths,
                                     std::size_t capacity, std::size_t k_min) {
  if (k_min < 1)
    throw ConfigError("allocate_microbatches: k_min must be >= 1");
  for (std::size_t i = 0; i < lengths.size(); ++i)
    if (lengths[i] > capacity)
      throw ConfigError("allocate_microbatches: sequence " + std::to_string(i) +
                        " has length " + std::to_string(lengths[i]) +
                        " above capacity " + std::to_string(capacity));

  std::vector<std::size_t> order(lengths.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return lengths[a] > lengths[b];
  });

  MicrobatchPlan plan;
  plan.capacity = capacity;
  plan.min_groups = k_min;
  std::vector<std::size_t> load;
  for (const std::size_t idx : order) {
    const std::size_t len = lengths[idx];
    std::size_t best = plan.groups.size();
    for (std::size_t g = 0; g < plan.groups.size(); ++g) {
      if (load[g] + len > capacity)
        continue;
      if (best == plan.groups.size() ||
          plan.groups[g].size() < plan.groups[best].size())
        best = g;
    }
    if (plan.groups.size() < k_min || best == plan.groups.size()) {
      plan.groups.push_back({idx});
      load.push_back(len);
    } else {
      plan.groups[best].push_back(idx);
      load[best] += len;
    }
  }
  return plan;
}

StepResult optimize(const TrainBatch &batch,
                    const policy::VersionedParams &params,
                    policy::OptimizerState &opt, const PpoConfig &config) {
  config.validate();
  const auto n = batch.trajectories.size();
  if (n < static_cast<std::size_t>(config.minibatches))
    throw ConfigError("batch of " + std::to_string(n) +
                      " trajectories cannot be split into " +
                      std::to_string(config.minibatches) + " minibatches");
  if (!batch.prepared())
    throw InvariantViolation("train step on an unprepared batch");

  StepResult result;
  result.params = params;
  TrainRecord &rec = result.record;
  rec.step_index = batch.step_index;
  for (const auto &traj : batch.trajectories)
    ++rec.staleness[batch.step_index - std::min(batch.step_index,
                                                traj.start_version)];

  const auto m = static_cast<std::size_t>(config.minibatches);
  std::size_t clipped = 0;
  double ratio_sum = 0.0;
  for (std::size_t mb = 0; mb < m; ++mb) {
    // Strided split keeps each minibatch's staleness mix close to the batch's.
    std::vector<std::size_t> members;
    for (std::size_t i = mb; i < n; i += m)
      members.push_back(i);

    std::vector<std::size_t> lengths;
    lengths.reserve(members.size());
    for (const std::size_t i : members)
      lengths.push_back(batch.trajectories[i].sequence_length());
    const auto plan = allocate_microbatches(lengths, config.microbatch_capacity,
                                            config.min_microbatches);
    rec.microbatches += plan.groups.size();

    LossResult acc;
    acc.grad = policy::Gradient::zeros_like(result.params.values);
    for (const auto &group : plan.groups) {
      std::vector<std::size_t> idx;
      idx.reserve(group.size());
      for (const std::size_t g : group)
        idx.push_back(members[g]);
      accumulate_loss(batch, result.params.values, config.objective,
                      config.clip_eps, idx, acc);
    }
    finalize_loss(acc);

    rec.loss += acc.loss / static_cast<double>(m);
    rec.tokens += acc.tokens;
    rec.excluded_tokens += acc.excluded;
    clipped += acc.clipped;
    ratio_sum += acc.ratio_sum;
    rec.grad_norm += std::sqrt(acc.grad.squared_norm()) / static_cast<double>(m);

    result.params = policy::apply_update(result.params, std::move(acc.grad), opt,
                                         config.adam);
    ++rec.optimizer_updates;
  }
  if (rec.tokens) {
    rec.clip_fraction = static_cast<double>(clipped) / static_cast<double>(rec.tokens);
    rec.mean_ratio = ratio_sum / static_cast<double>(rec.tokens);
  }
  result.params.version = params.version + 1;
  return result;
}

StepResult train_step(TrainBatch &batch, const policy::VersionedParams &params,
                      policy::OptimizerState &opt, const PpoConfig &config) {
  prepare(batch, params.values);
  return optimize(batch, params, opt, config);
}

nlohmann::json to_json(const TrainRecord &r) {
  return {{"step", r.step_index},
          {"loss", r.loss},
          {"mean_ratio", r.mean_ratio},
          {"clip_fraction", r.clip_fraction},
          {"grad_norm", r.grad_norm},
          {"tokens", r.tokens},
          {"excluded_tokens", r.excluded_tokens},
          {"optimizer_updates", r.optimizer_updates},
          {"microbatches", r.microbatches},
          {"staleness", histogram_to_json(r.staleness)}};
}

} // namespace asyncppo::trainer
