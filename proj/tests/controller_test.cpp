#include "asyncppo/controller.hpp"
#include "asyncppo/errors.hpp"

#include <doctest.h>

#include <algorithm>
#include <atomic>
#include <random>
#include <thread>

using namespace asyncppo;
using namespace asyncppo::controller;

namespace {

const policy::FeatureSpec kSpec;

policy::ParamsPtr version(std::uint64_t v) {
  auto p = policy::initial_params(kSpec);
  p.version = v;
  return std::make_shared<policy::VersionedParams>(std::move(p));
}

rollout::Trajectory finished(std::int64_t id, std::uint64_t start_version,
                             bool correct = true) {
  rollout::Trajectory t;
  t.id = id;
  t.prompt = env::make_prompt(static_cast<std::uint64_t>(id), env::TaskKind::copy);
  t.tokens = correct ? t.prompt.target : std::vector<Token>{env::kSep};
  t.tokens.push_back(env::kEos);
  t.behavior_logprobs.assign(t.tokens.size(), -1.0);
  t.versions.assign(t.tokens.size(), start_version);
  t.start_version = start_version;
  return t;
}

rollout::Trajectory rewarded(std::int64_t id, std::uint64_t start_version) {
  auto t = finished(id, start_version);
  t.reward = env::evaluate_reward(t.prompt, t.tokens, id);
  return t;
}

// floor((n - 1) / B) <= i + eta, evaluated directly.
bool oracle(std::uint64_t n, std::uint64_t b, std::uint64_t i, std::uint64_t eta) {
  return n == 0 || (n - 1) / b <= i + eta;
}

} // namespace

TEST_CASE("B=4, i=0, eta=0 admits four requests") {
  StalenessGate gate(4, 0);
  for (int k = 0; k < 4; ++k)
    CHECK(gate.try_admit());
  CHECK_FALSE(gate.try_admit());
  CHECK(gate.admissions() == 4);
  CHECK(gate.rejections() == 1);
}

TEST_CASE("B=512, i=3, eta=2 admits while N_r <= 3072") {
  StalenessGate gate(512, 2);
  for (std::uint64_t v = 1; v <= 3; ++v)
    gate.advance_version(v);
  std::uint64_t accepted = 0;
  while (gate.try_admit())
    ++accepted;
  CHECK(accepted == 3072);
  CHECK(oracle(3072, 512, 3, 2));
  CHECK_FALSE(oracle(3073, 512, 3, 2));
}

TEST_CASE("unbounded eta always admits") {
  StalenessGate gate(2, std::nullopt);
  for (int k = 0; k < 10000; ++k)
    REQUIRE(gate.try_admit());
  CHECK(gate.state().holds());
}

TEST_CASE("gate agrees with a direct evaluation of the inequality") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t b = 1 + rng() % 9, eta = rng() % 4;
    StalenessGate gate(b, eta);
    std::uint64_t n = 0, i = 0;
    for (int ev = 0; ev < 100; ++ev) {
      if (rng() % 4 == 0) {
        gate.advance_version(++i);
        continue;
      }
      const bool expect = oracle(n + 1, b, i, eta);
      REQUIRE(gate.try_admit() == expect);
      n += expect;
      REQUIRE(oracle(n, b, i, eta));
    }
  }
}

TEST_CASE("a resumed gate counts the batches already trained") {
  StalenessGate gate(4, 1, 10);
  CHECK(gate.state().version == 10);
  CHECK(gate.admissions() == 40);
  int accepted = 0;
  while (gate.try_admit())
    ++accepted;
  CHECK(accepted == 8);
}

TEST_CASE("out-of-order publication is a configuration error") {
  StalenessGate gate(4, 0);
  CHECK_THROWS_AS(gate.advance_version(2), ConfigError);
  gate.advance_version(1);
  CHECK_THROWS_AS(gate.advance_version(1), ConfigError);
}

TEST_CASE("concurrent admissions never over-admit") {
  StalenessGate gate(16, 1);
  std::atomic<int> accepted{0};
  std::vector<std::thread> threads;
  for (int t = 0; t < 8; ++t)
    threads.emplace_back([&] {
      for (int k = 0; k < 1000; ++k)
        accepted += gate.try_admit();
    });
  for (auto &t : threads)
    t.join();
  CHECK(accepted == 32);
  CHECK(gate.admissions() == 32);
}

TEST_CASE("replay buffer ordering and uniqueness") {
  ReplayBuffer buf;
  CHECK(buf.insert(rewarded(1, 2)));
  CHECK(buf.insert(rewarded(2, 0)));
  CHECK(buf.insert(rewarded(3, 1)));
  CHECK(buf.ordered_versions() == std::vector<std::uint64_t>{0, 1, 2});
  CHECK_FALSE(buf.insert(rewarded(2, 0)));
  CHECK(buf.size() == 3);
  CHECK_THROWS_AS(buf.insert(finished(9, 0)), InvariantViolation);

  const auto taken = buf.take_oldest(2);
  REQUIRE(taken);
  CHECK((*taken)[0].id == 2);
  CHECK((*taken)[1].id == 3);
  CHECK((*taken)[0].consumed);
  // Consumed ids stay known: a redelivery is still a duplicate.
  CHECK_FALSE(buf.insert(rewarded(2, 0)));
}

TEST_CASE("batch formation") {
  const std::uint64_t B = 8;
  RolloutController ctrl({B, std::nullopt}, env::RewardService{});
  SUBCASE("B - 1 buffered is not ready") {
    for (int k = 0; k < 7; ++k)
      ctrl.on_response(finished(k, 0));
    CHECK_FALSE(ctrl.form_batch());
  }
  SUBCASE("B + 3 buffered yields the B oldest") {
    ctrl.on_weights_published(version(1));
    ctrl.on_weights_published(version(2));
    std::mt19937_64 rng(5);
    std::vector<std::pair<std::uint64_t, std::int64_t>> expected;
    for (std::int64_t k = 0; k < 11; ++k) {
      const std::uint64_t v = rng() % 3;
      ctrl.on_response(finished(k, v));
      expected.push_back({v, k});
    }
    std::stable_sort(expected.begin(), expected.end(),
                     [](auto &a, auto &b) { return a.first < b.first; });
    const auto batch = ctrl.form_batch();
    REQUIRE(batch);
    REQUIRE(batch->trajectories.size() == B);
    for (std::size_t k = 0; k < B; ++k)
      CHECK(batch->trajectories[k].id == expected[k].second);
    CHECK(batch->step_index == 2);
    CHECK(ctrl.buffer_depth() == 3);
    std::uint64_t counted = 0;
    for (auto [s, n] : batch->staleness) {
      CHECK(s <= 2);
      counted += n;
    }
    CHECK(counted == B);
  }
  SUBCASE("rewards are attached") {
    for (int k = 0; k < 8; ++k)
      ctrl.on_response(finished(k, 0, k % 2 == 0));
    const auto batch = ctrl.form_batch();
    REQUIRE(batch);
    for (const auto &t : batch->trajectories) {
      REQUIRE(t.reward);
      CHECK(t.reward->reward == (t.id % 2 == 0 ? 5.0 : -5.0));
    }
  }
}

TEST_CASE("reward failures are dropped and counted") {
  env::RewardService failing(0.0, [](const env::Prompt &,
                                     std::span<const Token>,
                                     std::int64_t id) -> env::RewardResult {
    if (id == 3)
      throw std::runtime_error("scorer crashed");
    return {id, 5.0, true};
  });
  RolloutController ctrl({4, 0}, failing);
  for (int k = 0; k < 4; ++k)
    REQUIRE(ctrl.admit_request());
  CHECK(ctrl.on_response(finished(3, 0)) == ResponseStatus::reward_failed);
  CHECK(ctrl.on_response(finished(4, 0)) == ResponseStatus::buffered);
  CHECK(ctrl.on_response(finished(4, 0)) == ResponseStatus::duplicate);
  const auto c = ctrl.counters();
  CHECK(c.reward_failures == 1);
  CHECK(c.duplicates == 1);
  CHECK(ctrl.gate().admissions() == 4);
  CHECK_THROWS_AS(ctrl.on_response(rollout::Trajectory{}), InvariantViolation);
}

TEST_CASE("publication broadcasts and re-opens admission") {
  rollout::RolloutWorker w0(0, kSpec, version(0)), w1(1, kSpec, version(0));
  RolloutController ctrl({2, 0}, env::RewardService{}, {&w0, &w1});
  CHECK(ctrl.admit_request());
  CHECK(ctrl.admit_request());
  CHECK_FALSE(ctrl.admit_request());
  const auto acks = ctrl.on_weights_published(version(1));
  REQUIRE(acks.size() == 2);
  for (const auto &a : acks) {
    CHECK(a.accepted);
    CHECK(a.version == 1);
    CHECK(a.sequences_switched == 0);
  }
  CHECK(w0.version() == 1);
  CHECK(w1.version() == 1);
  CHECK(ctrl.admit_request());
  CHECK_THROWS_AS(ctrl.on_weights_published(version(3)), ConfigError);
}

TEST_CASE("eta=0 batches are on-policy") {
  RolloutController ctrl({4, 0}, env::RewardService{});
  std::int64_t id = 0;
  for (std::uint64_t step = 0; step < 5; ++step) {
    while (ctrl.admit_request())
      ctrl.on_response(finished(id++, step));
    const auto batch = ctrl.form_batch();
    REQUIRE(batch);
    CHECK(batch->staleness == StalenessHistogram{{0, 4}});
    for (const auto &t : batch->trajectories)
      CHECK(t.start_version == batch->step_index);
    ctrl.on_weights_published(version(step + 1));
  }
}

TEST_CASE("metrics record batches") {
  MetricsCollector sink;
  RolloutController ctrl({2, 0}, env::RewardService{}, {}, &sink);
  ctrl.on_response(finished(0, 0));
  ctrl.on_response(finished(1, 0));
  REQUIRE(ctrl.form_batch());
  const auto records = sink.records();
  REQUIRE(records.size() == 1);
  CHECK(records[0]["event"] == "batch");
  CHECK(records[0]["staleness"]["0"] == 2);
}
