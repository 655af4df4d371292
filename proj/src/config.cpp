#include "asyncppo/config.hpp"

#include "asyncppo/errors.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

namespace asyncppo {

ExecutionMode parse_execution_mode(std::string_view name) {
  if (name == "simulated")
    return ExecutionMode::simulated;
  if (name == "live")
    return ExecutionMode::live;
  throw ConfigError("unknown execution mode '" + std::string(name) + "'");
}

std::string_view execution_mode_name(ExecutionMode mode) {
  return mode == ExecutionMode::live ? "live" : "simulated";
}

controller::Eta parse_eta(std::string_view text) {
  if (text == "inf" || text == "unbounded")
    return std::nullopt;
  std::uint64_t value = 0;
  std::size_t used = 0;
  try {
    value = std::stoull(std::string(text), &used);
  } catch (const std::exception &) {
    used = 0;
  }
  if (used == 0 || used != text.size() || text.front() == '-')
    throw ConfigError("eta must be a non-negative integer or 'inf', got '" +
                      std::string(text) + "'");
  return value;
}

std::string eta_name(const controller::Eta &eta) {
  return eta ? std::to_string(*eta) : std::string("inf");
}

void ExperimentConfig::validate() const {
  task.validate();
  features.validate();
  if (features.vocab_size != task.vocab_size)
    throw ConfigError("policy vocabulary must match the task vocabulary");
  if (prompts_per_batch < 1 || responses_per_prompt < 1)
    throw ConfigError("batch must have at least one prompt and one response");
  if (train_steps < 1)
    throw ConfigError("train_steps must be >= 1");
  if (seeds.empty())
    throw ConfigError("at least one seed is required");
  if (workers < 1)
    throw ConfigError("workers must be >= 1");
  if (slots_per_worker < 1)
    throw ConfigError("slots_per_worker must be >= 1");
  costs.validate();
  if (!(temperature > 0.0))
    throw ConfigError("temperature must be positive");
  if (max_new_tokens < 1)
    throw ConfigError("max_new_tokens must be >= 1");
  ppo.validate();
  if (batch_size() < static_cast<std::uint64_t>(ppo.minibatches))
    throw ConfigError("batch size must be at least the minibatch count");
  const auto longest = static_cast<std::size_t>(task.max_prompt_len) +
                       static_cast<std::size_t>(max_new_tokens);
  if (longest > ppo.microbatch_capacity)
    throw ConfigError("micro-batch capacity is below the longest sequence");
  if (eval_prompts < 1)
    throw ConfigError("eval prompts must be >= 1");
}

namespace {

void check_keys(const YAML::Node &node, const std::string &where,
                const std::set<std::string> &allowed) {
  if (!node.IsMap())
    throw ConfigError("config section '" + where + "' must be a mapping");
  for (const auto &kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key))
      throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

template <typename T> void read(const YAML::Node &node, const char *key, T &out) {
  if (const auto v = node[key]) {
    try {
      out = v.as<T>();
    } catch (const YAML::Exception &e) {
      throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
  }
}

ExperimentConfig from_yaml(const YAML::Node &root) {
  ExperimentConfig c;
  if (!root || root.IsNull())
    return c;
  check_keys(root, "root",
             {"task", "batch", "eta", "objective", "train_steps", "seeds",
              "execution", "costs", "policy", "ppo", "optimizer", "eval",
              "audit", "output_dir", "resume_from"});

  if (const auto t = root["task"]) {
    check_keys(t, "task",
               {"kind", "vocab_size", "min_payload", "max_payload",
                "max_prompt_len", "reward_latency"});
    if (t["kind"])
      c.task_kind = env::parse_task_kind(t["kind"].as<std::string>());
    read(t, "vocab_size", c.task.vocab_size);
    read(t, "min_payload", c.task.min_payload);
    read(t, "max_payload", c.task.max_payload);
    read(t, "max_prompt_len", c.task.max_prompt_len);
    read(t, "reward_latency", c.task.reward_latency);
    c.features.vocab_size = c.task.vocab_size;
  }
  if (const auto b = root["batch"]) {
    check_keys(b, "batch", {"prompts", "responses_per_prompt"});
    read(b, "prompts", c.prompts_per_batch);
    read(b, "responses_per_prompt", c.responses_per_prompt);
  }
  if (root["eta"])
    c.eta = parse_eta(root["eta"].as<std::string>());
  if (root["objective"])
    c.objective = trainer::parse_objective(root["objective"].as<std::string>());
  read(root, "train_steps", c.train_steps);
  read(root, "seeds", c.seeds);

  if (const auto e = root["execution"]) {
    check_keys(e, "execution", {"mode", "schedule", "workers", "slots_per_worker"});
    if (e["mode"])
      c.mode = parse_execution_mode(e["mode"].as<std::string>());
    if (e["schedule"])
      c.schedule = timeline::parse_schedule_mode(e["schedule"].as<std::string>());
    read(e, "workers", c.workers);
    read(e, "slots_per_worker", c.slots_per_worker);
  }
  if (const auto k = root["costs"]) {
    check_keys(k, "costs",
               {"gen_latency_per_token", "train_latency_per_token",
                "weight_sync_latency", "recompute_latency_per_token"});
    read(k, "gen_latency_per_token", c.costs.gen_latency_per_token);
    read(k, "train_latency_per_token", c.costs.train_latency_per_token);
    read(k, "weight_sync_latency", c.costs.weight_sync_latency);
    read(k, "recompute_latency_per_token", c.costs.recompute_latency_per_token);
  }
  if (const auto p = root["policy"]) {
    check_keys(p, "policy", {"window", "init_scale", "temperature", "max_new_tokens"});
    read(p, "window", c.features.window);
    read(p, "init_scale", c.init_scale);
    read(p, "temperature", c.temperature);
    read(p, "max_new_tokens", c.max_new_tokens);
  }
  if (const auto p = root["ppo"]) {
    check_keys(p, "ppo",
               {"clip_eps", "minibatches", "microbatch_capacity", "min_microbatches"});
    read(p, "clip_eps", c.ppo.clip_eps);
    read(p, "minibatches", c.ppo.minibatches);
    read(p, "microbatch_capacity", c.ppo.microbatch_capacity);
    read(p, "min_microbatches", c.ppo.min_microbatches);
  }
  if (const auto o = root["optimizer"]) {
    check_keys(o, "optimizer",
               {"lr", "beta1", "beta2", "eps", "weight_decay", "max_grad_norm"});
    read(o, "lr", c.ppo.adam.lr);
    read(o, "beta1", c.ppo.adam.beta1);
    read(o, "beta2", c.ppo.adam.beta2);
    read(o, "eps", c.ppo.adam.eps);
    read(o, "weight_decay", c.ppo.adam.weight_decay);
    read(o, "max_grad_norm", c.ppo.adam.max_grad_norm);
  }
  if (const auto v = root["eval"]) {
    check_keys(v, "eval", {"prompts", "every"});
    read(v, "prompts", c.eval_prompts);
    read(v, "every", c.eval_every);
  }
  read(root, "audit", c.audit);
  if (root["output_dir"])
    c.output_dir = root["output_dir"].as<std::string>();
  if (root["resume_from"])
    c.resume_from = root["resume_from"].as<std::string>();
  c.ppo.objective = c.objective;
  c.costs.reward_latency = c.task.reward_latency;
  return c;
}

} // namespace

ExperimentConfig parse_config(const std::string &yaml_text) {
  YAML::Node root;
  try {
    root = YAML::Load(yaml_text);
  } catch (const YAML::Exception &e) {
    throw ConfigError(std::string("config is not valid YAML: ") + e.what());
  }
  auto config = from_yaml(root);
  config.validate();
  return config;
}

ExperimentConfig load_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig &c) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out << YAML::BeginMap;
  out << YAML::Key << "task" << YAML::Value << YAML::BeginMap
      << YAML::Key << "kind" << YAML::Value
      << std::string(env::task_kind_name(c.task_kind))
      << YAML::Key << "vocab_size" << YAML::Value << c.task.vocab_size
      << YAML::Key << "min_payload" << YAML::Value << c.task.min_payload
      << YAML::Key << "max_payload" << YAML::Value << c.task.max_payload
      << YAML::Key << "max_prompt_len" << YAML::Value << c.task.max_prompt_len
      << YAML::Key << "reward_latency" << YAML::Value << c.task.reward_latency
      << YAML::EndMap;
  out << YAML::Key << "batch" << YAML::Value << YAML::BeginMap
      << YAML::Key << "prompts" << YAML::Value << c.prompts_per_batch
      << YAML::Key << "responses_per_prompt" << YAML::Value
      << c.responses_per_prompt << YAML::EndMap;
  out << YAML::Key << "eta" << YAML::Value << eta_name(c.eta);
  out << YAML::Key << "objective" << YAML::Value
      << std::string(trainer::objective_name(c.objective));
  out << YAML::Key << "train_steps" << YAML::Value << c.train_steps;
  out << YAML::Key << "seeds" << YAML::Value << YAML::Flow << c.seeds;
  out << YAML::Key << "execution" << YAML::Value << YAML::BeginMap
      << YAML::Key << "mode" << YAML::Value
      << std::string(execution_mode_name(c.mode))
      << YAML::Key << "schedule" << YAML::Value
      << std::string(timeline::schedule_mode_name(c.schedule))
      << YAML::Key << "workers" << YAML::Value << c.workers
      << YAML::Key << "slots_per_worker" << YAML::Value << c.slots_per_worker
      << YAML::EndMap;
  out << YAML::Key << "costs" << YAML::Value << YAML::BeginMap
      << YAML::Key << "gen_latency_per_token" << YAML::Value
      << c.costs.gen_latency_per_token
      << YAML::Key << "train_latency_per_token" << YAML::Value
      << c.costs.train_latency_per_token
      << YAML::Key << "weight_sync_latency" << YAML::Value
      << c.costs.weight_sync_latency
      << YAML::Key << "recompute_latency_per_token" << YAML::Value
      << c.costs.recompute_latency_per_token << YAML::EndMap;
  out << YAML::Key << "policy" << YAML::Value << YAML::BeginMap
      << YAML::Key << "window" << YAML::Value << c.features.window
      << YAML::Key << "init_scale" << YAML::Value << c.init_scale
      << YAML::Key << "temperature" << YAML::Value << c.temperature
      << YAML::Key << "max_new_tokens" << YAML::Value << c.max_new_tokens
      << YAML::EndMap;
  out << YAML::Key << "ppo" << YAML::Value << YAML::BeginMap
      << YAML::Key << "clip_eps" << YAML::Value << c.ppo.clip_eps
      << YAML::Key << "minibatches" << YAML::Value << c.ppo.minibatches
      << YAML::Key << "microbatch_capacity" << YAML::Value
      << c.ppo.microbatch_capacity
      << YAML::Key << "min_microbatches" << YAML::Value << c.ppo.min_microbatches
      << YAML::EndMap;
  out << YAML::Key << "optimizer" << YAML::Value << YAML::BeginMap
      << YAML::Key << "lr" << YAML::Value << c.ppo.adam.lr
      << YAML::Key << "beta1" << YAML::Value << c.ppo.adam.beta1
      << YAML::Key << "beta2" << YAML::Value << c.ppo.adam.beta2
      << YAML::Key << "eps" << YAML::Value << c.ppo.adam.eps
      << YAML::Key << "weight_decay" << YAML::Value << c.ppo.adam.weight_decay
      << YAML::Key << "max_grad_norm" << YAML::Value << c.ppo.adam.max_grad_norm
      << YAML::EndMap;
  out << YAML::Key << "eval" << YAML::Value << YAML::BeginMap
      << YAML::Key << "prompts" << YAML::Value << c.eval_prompts
      << YAML::Key << "every" << YAML::Value << c.eval_every << YAML::EndMap;
  out << YAML::Key << "audit" << YAML::Value << c.audit;
  out << YAML::Key << "output_dir" << YAML::Value << c.output_dir.string();
  out << YAML::Key << "resume_from" << YAML::Value << c.resume_from.string();
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

void save_config(const std::filesystem::path &path,
                 const ExperimentConfig &config) {
  std::ofstream out(path);
  if (!out)
    throw ConfigError("cannot write config " + path.string());
  out << dump_config(config);
}

} // namespace asyncppo
