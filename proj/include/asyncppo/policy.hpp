#pragma once

// Linear-softmax policy over a windowed one-hot context, its analytic score
// function, and an AdamW optimizer with global-norm clipping.

#include "asyncppo/env.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <random>
#include <span>
#include <vector>

namespace asyncppo::policy {

using Rng = std::mt19937_64;

// Uniform double in [0, 1) from the top 53 bits; independent of the
// standard library's distribution implementations.
inline double uniform01(Rng &rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Context layout, all blocks one-hot:
//   [task kind: 2]
//   [prompt payload token aligned with the output position, or "past end": V+1]
//   [last `window` generated tokens, most recent first, or "none": window*(V+1)]
//   [(first, second) payload digit pair when both are digits: 100]
struct FeatureSpec {
  int vocab_size = env::kVocabSize;
  int window = 4;

  std::size_t dim() const;
  void validate() const;
  bool operator==(const FeatureSpec &) const = default;
};

struct ContextFeatures {
  std::vector<double> vector;
};

// Deterministic function of (prompt, generated prefix) only.
ContextFeatures make_context(const FeatureSpec &spec, const env::Prompt &prompt,
                             std::span<const Token> generated);

struct LinearParams {
  std::size_t vocab = 0;
  std::size_t features = 0;
  std::vector<double> weights; // vocab x features, row-major
  std::vector<double> bias;    // vocab

  static LinearParams zeros(std::size_t vocab, std::size_t features);
  static LinearParams zeros_like(const LinearParams &other) {
    return zeros(other.vocab, other.features);
  }

  bool same_shape(const LinearParams &other) const {
    return vocab == other.vocab && features == other.features;
  }
  bool all_finite() const;
  std::size_t size() const { return weights.size() + bias.size(); }

  // Flat accessors over [weights..., bias...].
  double &at(std::size_t flat_index);
  double at(std::size_t flat_index) const;

  double dot(const LinearParams &other) const;
  double squared_norm() const;
  void axpy(double alpha, const LinearParams &x);
  void scale(double alpha);

  bool operator==(const LinearParams &) const = default;
};

using Gradient = LinearParams;

struct VersionedParams {
  std::uint64_t version = 0;
  LinearParams values;
};

using ParamsPtr = std::shared_ptr<const VersionedParams>;

// Fresh version-0 parameters. `init_scale` = 0 gives the uniform policy.
VersionedParams initial_params(const FeatureSpec &spec, double init_scale = 0.0,
                               std::uint64_t seed = 0);

// weights * features + bias
std::vector<double> logits(const LinearParams &params,
                           const ContextFeatures &ctx);

std::vector<double> log_softmax(std::span<const double> logits);

double log_prob(const LinearParams &params, const ContextFeatures &ctx,
                Token token);

// Draws from softmax(logits / temperature).
Token sample(const LinearParams &params, const ContextFeatures &ctx, Rng &rng,
             double temperature);

// Token probabilities plus the sampled token, for callers that need both.
struct SampleResult {
  Token token = 0;
  double log_prob = 0.0; // log softmax(logits)[token] at temperature 1
};
SampleResult sample_with_log_prob(const LinearParams &params,
                                  const ContextFeatures &ctx, Rng &rng,
                                  double temperature);

// Highest-logit token, lowest index on ties.
Token greedy(const LinearParams &params, const ContextFeatures &ctx);

// d log pi(token | ctx) / d params: residual (onehot - softmax) outer
// features for the weights, the residual itself for the bias.
Gradient grad_log_prob(const LinearParams &params, const ContextFeatures &ctx,
                       Token token);

// out += scale * grad_log_prob(...). Returns log pi(token | ctx).
double accumulate_grad_log_prob(const LinearParams &params,
                                const ContextFeatures &ctx, Token token,
                                double scale, Gradient &out);

struct AdamConfig {
  double lr = 2e-2;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.05;
  double max_grad_norm = 1.0;

  void validate() const;
};

struct OptimizerState {
  LinearParams first_moment;
  LinearParams second_moment;
  std::uint64_t step = 0;

  static OptimizerState for_params(const LinearParams &params);
};

// Rescales `grad` in place so its global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
double clip_grad_norm(Gradient &grad, double max_norm);

// One clipped AdamW step. The version is left unchanged: publication is the
// controller's business. Weight decay applies to weights, not biases.
VersionedParams apply_update(const VersionedParams &params, Gradient grad,
                             OptimizerState &opt, const AdamConfig &config);

// Text checkpoint format, exact through hexadecimal floats:
//   asyncppo-params 1
//   version <n>
//   shape <vocab> <features>
//   <vocab lines of weights>
//   <one line of bias>
void write_params(std::ostream &out, const VersionedParams &params);
VersionedParams read_params(std::istream &in);
void save_params(const std::filesystem::path &path,
                 const VersionedParams &params);
VersionedParams load_params(const std::filesystem::path &path);

void write_optimizer(std::ostream &out, const OptimizerState &opt);
OptimizerState read_optimizer(std::istream &in);

} // namespace asyncppo::policy
