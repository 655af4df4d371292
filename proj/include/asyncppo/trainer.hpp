#pragma once

// PPO trainer: global-batch advantage normalization, proximal log-prob
// recomputation, the decoupled and naive clipped surrogates, micro-batch
// packing, and minibatch optimizer updates.

#include "asyncppo/metrics.hpp"
#include "asyncppo/policy.hpp"
#include "asyncppo/rollout.hpp"

#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace asyncppo::trainer {

enum class Objective { decoupled, naive };

Objective parse_objective(std::string_view name);
std::string_view objective_name(Objective objective);

struct PpoConfig {
  Objective objective = Objective::decoupled;
  double clip_eps = 0.2;
  int minibatches = 4;
  std::size_t microbatch_capacity = 512; // tokens per packed micro-batch
  std::size_t min_microbatches = 1;
  policy::AdamConfig adam;

  void validate() const;
};

struct TrainBatch {
  std::uint64_t step_index = 0;
  std::vector<rollout::Trajectory> trajectories;
  // Per trajectory, per token. Features do not depend on the parameters, so
  // they are built once per batch.
  std::vector<std::vector<policy::ContextFeatures>> contexts;
  std::vector<std::vector<double>> prox_logprobs;
  std::vector<std::vector<double>> advantages;

  std::size_t token_count() const;
  bool prepared() const { return !prox_logprobs.empty() || trajectories.empty(); }
};

TrainBatch make_train_batch(std::vector<rollout::Trajectory> trajectories,
                            std::uint64_t step_index,
                            const policy::FeatureSpec &spec);

// gamma = lambda = 1, no critic, terminal reward: every token's raw advantage
// is the trajectory reward. Normalized to zero mean and unit population
// standard deviation over all tokens of the batch; all zeros when the
// standard deviation is zero.
std::vector<std::vector<double>> compute_advantages(const TrainBatch &batch);

// log pi(token | ctx) under `params` for every token of the batch.
std::vector<std::vector<double>>
recompute_prox_logprobs(const TrainBatch &batch,
                        const policy::LinearParams &params);

// Fills prox_logprobs and advantages once; they stay frozen for all minibatch
// updates of the step.
void prepare(TrainBatch &batch, const policy::LinearParams &params);

// Per-token surrogate value and d(value)/d(log pi_theta).
struct TokenTerm {
  double value = 0.0;
  double grad_coeff = 0.0;
  double ratio = 1.0; // u: pi_theta over the trust-region center
  bool clipped = false;
  bool excluded = false;
};

// r * min(u A, clip(u, 1-eps, 1+eps) A), r = pi_prox / pi_behav,
// u = pi_theta / pi_prox.
TokenTerm decoupled_term(double behavior_logprob, double prox_logprob,
                         double logprob, double advantage, double eps);

// min(u A, clip(u, 1-eps, 1+eps) A), u = pi_theta / pi_behav.
TokenTerm naive_term(double behavior_logprob, double logprob, double advantage,
                     double eps);

struct LossResult {
  double loss = 0.0; // negated token-mean objective
  policy::Gradient grad;
  std::size_t tokens = 0;
  std::size_t clipped = 0;
  std::size_t excluded = 0;
  double ratio_sum = 0.0;

  double clip_fraction() const {
    return tokens ? static_cast<double>(clipped) / static_cast<double>(tokens)
                  : 0.0;
  }
  double mean_ratio() const {
    return tokens ? ratio_sum / static_cast<double>(tokens) : 0.0;
  }
};

// Sums objective and gradient over the listed trajectories into `acc`
// without normalizing. `acc.grad` must be shaped like `params`.
void accumulate_loss(const TrainBatch &batch, const policy::LinearParams &params,
                     Objective objective, double eps,
                     std::span<const std::size_t> trajectory_indices,
                     LossResult &acc);

// Turns accumulated sums into the negated token mean and its gradient.
void finalize_loss(LossResult &acc);

LossResult ppo_loss(const TrainBatch &batch, const policy::LinearParams &params,
                    Objective objective, double eps = 0.2);

LossResult decoupled_ppo_loss(const TrainBatch &batch,
                              const policy::LinearParams &params,
                              double eps = 0.2);
LossResult naive_ppo_loss(const TrainBatch &batch,
                          const policy::LinearParams &params, double eps = 0.2);

struct MicrobatchPlan {
  std::vector<std::vector<std::size_t>> groups; // indices into the input
  std::size_t capacity = 0;
  std::size_t min_groups = 1;
};

// Sort descending; open a new group while fewer than k_min exist or nothing
// fits, else place into the fitting group with the fewest sequences (lowest
// index on ties). Throws ConfigError on a length above capacity.
MicrobatchPlan allocate_microbatches(std::span<const std::size_t> lengths,
                                     std::size_t capacity, std::size_t k_min);

struct TrainRecord {
  std::uint64_t step_index = 0;
  double loss = 0.0; // mean over minibatches, before each update
  double mean_ratio = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0; // mean pre-clip norm over minibatches
  std::size_t tokens = 0;
  std::size_t excluded_tokens = 0;
  std::size_t optimizer_updates = 0;
  std::size_t microbatches = 0;
  StalenessHistogram staleness;
};

struct StepResult {
  policy::VersionedParams params; // version + 1, not yet published
  TrainRecord record;
};

// Minibatch updates on an already prepared batch.
StepResult optimize(const TrainBatch &batch,
                    const policy::VersionedParams &params,
                    policy::OptimizerState &opt, const PpoConfig &config);

// prepare() followed by optimize().
StepResult train_step(TrainBatch &batch, const policy::VersionedParams &params,
                      policy::OptimizerState &opt, const PpoConfig &config);

nlohmann::json to_json(const TrainRecord &record);

} // namespace asyncppo::trainer
