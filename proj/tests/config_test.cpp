#include "asyncppo/config.hpp"
#include "asyncppo/errors.hpp"

#include <doctest.h>

#include <filesystem>

using namespace asyncppo;

TEST_CASE("defaults validate") {
  ExperimentConfig c;
  CHECK_NOTHROW(c.validate());
  CHECK(c.batch_size() == 128);
  CHECK(c.eta == controller::Eta{0});
}

TEST_CASE("dump and parse round-trip") {
  ExperimentConfig c;
  c.task_kind = env::TaskKind::modular_sum;
  c.prompts_per_batch = 8;
  c.responses_per_prompt = 2;
  c.eta = std::nullopt;
  c.objective = trainer::Objective::naive;
  c.ppo.objective = c.objective;
  c.train_steps = 17;
  c.seeds = {4, 9};
  c.mode = ExecutionMode::live;
  c.schedule = timeline::ScheduleMode::sync;
  c.workers = 3;
  c.costs.gen_latency_per_token = 0.1 + 1.0 / 3.0;
  c.costs.weight_sync_latency = 0.7;
  c.ppo.adam.lr = 0.0123456789012345;
  c.ppo.clip_eps = 0.25;
  c.eval_every = 5;
  c.output_dir = "out/x";

  const auto back = parse_config(dump_config(c));
  CHECK(back.task_kind == c.task_kind);
  CHECK(back.prompts_per_batch == 8);
  CHECK(back.responses_per_prompt == 2);
  CHECK(!back.eta);
  CHECK(back.objective == trainer::Objective::naive);
  CHECK(back.ppo.objective == trainer::Objective::naive);
  CHECK(back.train_steps == 17);
  CHECK(back.seeds == std::vector<std::uint64_t>{4, 9});
  CHECK(back.mode == ExecutionMode::live);
  CHECK(back.schedule == timeline::ScheduleMode::sync);
  CHECK(back.workers == 3);
  CHECK(back.costs.gen_latency_per_token == c.costs.gen_latency_per_token);
  CHECK(back.costs.weight_sync_latency == c.costs.weight_sync_latency);
  CHECK(back.ppo.adam.lr == c.ppo.adam.lr);
  CHECK(back.ppo.clip_eps == c.ppo.clip_eps);
  CHECK(back.eval_every == 5);
  CHECK(back.output_dir == std::filesystem::path("out/x"));
  CHECK(dump_config(back) == dump_config(c));
}

TEST_CASE("partial files keep defaults") {
  const auto c = parse_config("eta: 4\noptimizer:\n  lr: 0.05\n");
  CHECK(c.eta == controller::Eta{4});
  CHECK(c.ppo.adam.lr == 0.05);
  CHECK(c.train_steps == ExperimentConfig{}.train_steps);
  CHECK(c.ppo.adam.beta2 == ExperimentConfig{}.ppo.adam.beta2);
}

TEST_CASE("eta spellings") {
  CHECK(!parse_eta("inf"));
  CHECK(!parse_eta("unbounded"));
  CHECK(parse_eta("0") == controller::Eta{0});
  CHECK(parse_eta("16") == controller::Eta{16});
  CHECK_THROWS_AS(parse_eta("-1"), ConfigError);
  CHECK_THROWS_AS(parse_eta("four"), ConfigError);
  CHECK_THROWS_AS(parse_eta(""), ConfigError);
  CHECK(eta_name(std::nullopt) == "inf");
  CHECK(eta_name(controller::Eta{3}) == "3");
}

TEST_CASE("unknown keys and bad values are rejected") {
  CHECK_THROWS_AS(parse_config("etta: 4\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("optimizer:\n  learning_rate: 1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("task: copy\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("train_steps: many\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("objective: vanilla\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("execution:\n  mode: remote\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("eta: [1, 2\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/config.yaml"), ConfigError);
}

TEST_CASE("validation") {
  auto bad = [](auto mutate) {
    ExperimentConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](auto &c) { c.train_steps = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.seeds.clear(); }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.workers = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.prompts_per_batch = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.temperature = 0.0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.max_new_tokens = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.eval_prompts = 0; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(bad([](auto &c) { c.ppo.microbatch_capacity = 2; }).validate(),
                  ConfigError);
}
