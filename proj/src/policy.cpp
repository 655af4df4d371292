#include "asyncppo/policy.hpp"

#include "asyncppo/errors.hpp"
#include "asyncppo/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>

namespace asyncppo::policy {

namespace {
constexpr std::size_t kTaskBlock = 2;
constexpr std::size_t kPairBlock = env::kNumDigits * env::kNumDigits;

bool is_digit(Token t) { return t >= 0 && t < env::kNumDigits; }
} // namespace

std::size_t FeatureSpec::dim() const {
  const auto slot = static_cast<std::size_t>(vocab_size) + 1;
  return kTaskBlock + slot + static_cast<std::size_t>(window) * slot +
         kPairBlock;
}

void FeatureSpec::validate() const {
  if (vocab_size < 12)
    throw ConfigError("feature vocab_size must be >= 12");
  if (window < 0)
    throw ConfigError("context window must be non-negative");
}

ContextFeatures make_context(const FeatureSpec &spec, const env::Prompt &prompt,
                             std::span<const Token> generated) {
  const auto slot = static_cast<std::size_t>(spec.vocab_size) + 1;
  const std::size_t none = slot - 1;
  ContextFeatures ctx;
  ctx.vector.assign(spec.dim(), 0.0);
  auto &x = ctx.vector;

  x[prompt.task_kind == env::TaskKind::copy ? 0 : 1] = 1.0;

  std::size_t offset = kTaskBlock;
  const auto payload = prompt.payload();
  const std::size_t pos = generated.size();
  x[offset + (pos < payload.size() ? static_cast<std::size_t>(payload[pos])
                                   : none)] = 1.0;
  offset += slot;

  for (int j = 0; j < spec.window; ++j) {
    const auto back = static_cast<std::size_t>(j) + 1;
    const std::size_t id = back <= generated.size()
                               ? static_cast<std::size_t>(
                                     generated[generated.size() - back])
                               : none;
    x[offset + id] = 1.0;
    offset += slot;
  }

  if (payload.size() >= 2 && is_digit(payload[0]) && is_digit(payload[1]))
    x[offset + static_cast<std::size_t>(payload[0] * env::kNumDigits +
                                        payload[1])] = 1.0;
  return ctx;
}

LinearParams LinearParams::zeros(std::size_t vocab, std::size_t features) {
  LinearParams p;
  p.vocab = vocab;
  p.features = features;
  p.weights.assign(vocab * features, 0.0);
  p.bias.assign(vocab, 0.0);
  return p;
}

bool LinearParams::all_finite() const {
  auto finite = [](double v) { return std::isfinite(v); };
  return std::all_of(weights.begin(), weights.end(), finite) &&
         std::all_of(bias.begin(), bias.end(), finite);
}

double &LinearParams::at(std::size_t i) {
  return i < weights.size() ? weights[i] : bias[i - weights.size()];
}

double LinearParams::at(std::size_t i) const {
  return i < weights.size() ? weights[i] : bias[i - weights.size()];
}

double LinearParams::dot(const LinearParams &other) const {
  if (!same_shape(other))
    throw InvariantViolation("parameter shape mismatch");
  return kernels::dot(weights, other.weights) + kernels::dot(bias, other.bias);
}

double LinearParams::squared_norm() const {
  return kernels::sum_squares(weights) + kernels::sum_squares(bias);
}

void LinearParams::axpy(double alpha, const LinearParams &x) {
  if (!same_shape(x))
    throw InvariantViolation("parameter shape mismatch");
  kernels::axpy(alpha, x.weights, weights);
  kernels::axpy(alpha, x.bias, bias);
}

void LinearParams::scale(double alpha) {
  kernels::scale(alpha, weights);
  kernels::scale(alpha, bias);
}

VersionedParams initial_params(const FeatureSpec &spec, double init_scale,
                               std::uint64_t seed) {
  spec.validate();
  VersionedParams p;
  p.values = LinearParams::zeros(static_cast<std::size_t>(spec.vocab_size),
                                 spec.dim());
  if (init_scale != 0.0) {
    Rng rng(seed);
    for (double &w : p.values.weights)
      w = init_scale * (2.0 * uniform01(rng) - 1.0);
  }
  return p;
}

std::vector<double> logits(const LinearParams &params,
                           const ContextFeatures &ctx) {
  if (ctx.vector.size() != params.features)
    throw InvariantViolation("context feature dimension " +
                             std::to_string(ctx.vector.size()) +
                             " does not match parameters (" +
                             std::to_string(params.features) + ")");
  std::vector<double> out(params.vocab);
  kernels::gemv(params.weights, params.vocab, params.features, ctx.vector,
                params.bias, out);
  return out;
}

std::vector<double> log_softmax(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double v : z)
    sum += std::exp(v - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    out[i] = z[i] - lse;
  return out;
}

namespace {

void check_token(const LinearParams &params, Token token) {
  if (token < 0 || static_cast<std::size_t>(token) >= params.vocab)
    throw InvariantViolation("token " + std::to_string(token) +
                             " outside vocabulary");
}

Token draw(std::span<const double> z, Rng &rng, double temperature) {
  if (!(temperature > 0.0))
    throw ConfigError("sampling temperature must be positive");
  const double m = *std::max_element(z.begin(), z.end());
  std::vector<double> w(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    w[i] = std::exp((z[i] - m) / temperature);
    total += w[i];
  }
  const double u = uniform01(rng) * total;
  double acc = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (w[i] <= 0.0)
      continue;
    acc += w[i];
    last_nonzero = i;
    if (u < acc)
      return static_cast<Token>(i);
  }
  return static_cast<Token>(last_nonzero);
}

} // namespace

double log_prob(const LinearParams &params, const ContextFeatures &ctx,
                Token token) {
  check_token(params, token);
  return log_softmax(logits(params, ctx))[static_cast<std::size_t>(token)];
}

Token sample(const LinearParams &params, const ContextFeatures &ctx, Rng &rng,
             double temperature) {
  return draw(logits(params, ctx), rng, temperature);
}

SampleResult sample_with_log_prob(const LinearParams &params,
                                  const ContextFeatures &ctx, Rng &rng,
                                  double temperature) {
  const auto z = logits(params, ctx);
  SampleResult r;
  r.token = draw(z, rng, temperature);
  r.log_prob = log_softmax(z)[static_cast<std::size_t>(r.token)];
  return r;
}

Token greedy(const LinearParams &params, const ContextFeatures &ctx) {
  const auto z = logits(params, ctx);
  return static_cast<Token>(std::max_element(z.begin(), z.end()) - z.begin());
}

double accumulate_grad_log_prob(const LinearParams &params,
                                const ContextFeatures &ctx, Token token,
                                double scale, Gradient &out) {
  check_token(params, token);
  if (!out.same_shape(params))
    throw InvariantViolation("gradient shape mismatch");
  const auto lp = log_softmax(logits(params, ctx));
  for (std::size_t v = 0; v < params.vocab; ++v) {
    const double residual =
        (static_cast<Token>(v) == token ? 1.0 : 0.0) - std::exp(lp[v]);
    const double coeff = scale * residual;
    if (coeff == 0.0)
      continue;
    kernels::axpy(coeff, ctx.vector,
                  std::span<double>(out.weights)
                      .subspan(v * params.features, params.features));
    out.bias[v] += coeff;
  }
  return lp[static_cast<std::size_t>(token)];
}

Gradient grad_log_prob(const LinearParams &params, const ContextFeatures &ctx,
                       Token token) {
  Gradient g = Gradient::zeros_like(params);
  accumulate_grad_log_prob(params, ctx, token, 1.0, g);
  return g;
}

void AdamConfig::validate() const {
  if (!(lr > 0.0))
    throw ConfigError("learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0))
    throw ConfigError("Adam epsilon must be positive");
  if (weight_decay < 0.0)
    throw ConfigError("weight decay must be non-negative");
  if (!(max_grad_norm > 0.0))
    throw ConfigError("gradient clipping norm must be positive");
}

OptimizerState OptimizerState::for_params(const LinearParams &params) {
  return {LinearParams::zeros_like(params), LinearParams::zeros_like(params),
          0};
}

double clip_grad_norm(Gradient &grad, double max_norm) {
  const double norm = std::sqrt(grad.squared_norm());
  if (norm > max_norm)
    grad.scale(max_norm / norm);
  return norm;
}

VersionedParams apply_update(const VersionedParams &params, Gradient grad,
                             OptimizerState &opt, const AdamConfig &config) {
  if (!grad.same_shape(params.values) ||
      !opt.first_moment.same_shape(params.values))
    throw InvariantViolation("optimizer shape mismatch");
  if (!grad.all_finite())
    throw TrainingAborted("non-finite gradient at optimizer step " +
                          std::to_string(opt.step + 1));
  clip_grad_norm(grad, config.max_grad_norm);

  ++opt.step;
  kernels::AdamwCoefficients c;
  c.lr = config.lr;
  c.beta1 = config.beta1;
  c.beta2 = config.beta2;
  c.eps = config.eps;
  c.bias_correction1 = 1.0 - std::pow(config.beta1, static_cast<double>(opt.step));
  c.bias_correction2 = 1.0 - std::pow(config.beta2, static_cast<double>(opt.step));

  VersionedParams next = params;
  c.weight_decay = config.weight_decay;
  kernels::adamw(next.values.weights, grad.weights, opt.first_moment.weights,
                 opt.second_moment.weights, c);
  c.weight_decay = 0.0;
  kernels::adamw(next.values.bias, grad.bias, opt.first_moment.bias,
                 opt.second_moment.bias, c);
  if (!next.values.all_finite())
    throw TrainingAborted("non-finite parameters after optimizer step " +
                          std::to_string(opt.step));
  return next;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

constexpr const char *kParamsMagic = "asyncppo-params";
constexpr const char *kOptimizerMagic = "asyncppo-optimizer";

std::string hexfloat(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_double(const std::string &s) {
  char *end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || *end != '\0')
    throw ConfigError("malformed number '" + s + "' in checkpoint");
  return v;
}

void write_matrix(std::ostream &out, const LinearParams &p) {
  out << "shape " << p.vocab << ' ' << p.features << '\n';
  for (std::size_t r = 0; r < p.vocab; ++r) {
    for (std::size_t c = 0; c < p.features; ++c)
      out << (c ? " " : "") << hexfloat(p.weights[r * p.features + c]);
    out << '\n';
  }
  for (std::size_t r = 0; r < p.vocab; ++r)
    out << (r ? " " : "") << hexfloat(p.bias[r]);
  out << '\n';
}

void expect_word(std::istream &in, const std::string &word) {
  std::string got;
  if (!(in >> got) || got != word)
    throw ConfigError("checkpoint: expected '" + word + "', got '" + got + "'");
}

LinearParams read_matrix(std::istream &in) {
  expect_word(in, "shape");
  std::size_t vocab = 0, features = 0;
  if (!(in >> vocab >> features))
    throw ConfigError("checkpoint: malformed shape line");
  LinearParams p = LinearParams::zeros(vocab, features);
  std::string tok;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(in >> tok))
      throw ConfigError("checkpoint: truncated parameter data");
    p.at(i) = parse_double(tok);
  }
  return p;
}

} // namespace

void write_params(std::ostream &out, const VersionedParams &params) {
  out << kParamsMagic << " 1\n";
  out << "version " << params.version << '\n';
  write_matrix(out, params.values);
}

VersionedParams read_params(std::istream &in) {
  expect_word(in, kParamsMagic);
  expect_word(in, "1");
  expect_word(in, "version");
  VersionedParams p;
  if (!(in >> p.version))
    throw ConfigError("checkpoint: malformed version");
  p.values = read_matrix(in);
  return p;
}

void save_params(const std::filesystem::path &path,
                 const VersionedParams &params) {
  std::ofstream out(path);
  if (!out)
    throw ConfigError("cannot write checkpoint " + path.string());
  write_params(out, params);
}

VersionedParams load_params(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read checkpoint " + path.string());
  return read_params(in);
}

void write_optimizer(std::ostream &out, const OptimizerState &opt) {
  out << kOptimizerMagic << " 1\n";
  out << "step " << opt.step << '\n';
  write_matrix(out, opt.first_moment);
  write_matrix(out, opt.second_moment);
}

OptimizerState read_optimizer(std::istream &in) {
  expect_word(in, kOptimizerMagic);
  expect_word(in, "1");
  expect_word(in, "step");
  OptimizerState opt;
  if (!(in >> opt.step))
    throw ConfigError("checkpoint: malformed optimizer step");
  opt.first_moment = read_matrix(in);
  opt.second_moment = read_matrix(in);
  return opt;
}

} // namespace asyncppo::policy
