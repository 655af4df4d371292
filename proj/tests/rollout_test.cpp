#include "asyncppo/errors.hpp"
#include "asyncppo/rollout.hpp"

#include <doctest.h>

#include <atomic>
#include <cmath>
#include <functional>
#include <sstream>
#include <thread>

using namespace asyncppo;
using namespace asyncppo::rollout;

namespace {

const policy::FeatureSpec kSpec;

// Random parameters with EOS strongly suppressed, so sequences run to
// max_new_tokens and interruptions land mid-sequence.
policy::ParamsPtr make_version(std::uint64_t version, std::uint64_t seed,
                               bool allow_eos = false) {
  auto p = policy::initial_params(kSpec, 0.5, seed);
  p.version = version;
  if (!allow_eos)
    p.values.bias[env::kEos] = -50.0;
  return std::make_shared<policy::VersionedParams>(std::move(p));
}

// Serves versions from a script indexed by the number of reads so far.
class ScriptedSource final : public ParamsSource {
public:
  ScriptedSource(std::vector<policy::ParamsPtr> versions,
                 std::function<std::size_t(std::size_t)> pick)
      : versions_(std::move(versions)), pick_(std::move(pick)) {}
  policy::ParamsPtr current() const override {
    return versions_.at(pick_(reads_++));
  }
  std::size_t reads() const { return reads_; }

private:
  std::vector<policy::ParamsPtr> versions_;
  std::function<std::size_t(std::size_t)> pick_;
  mutable std::size_t reads_ = 0;
};

class EmptySource final : public ParamsSource {
public:
  policy::ParamsPtr current() const override { return nullptr; }
};

GenerateRequest request(std::int64_t id, int max_new = 8) {
  GenerateRequest r;
  r.trajectory_id = id;
  r.prompt = env::make_prompt(static_cast<std::uint64_t>(id) + 100,
                              env::TaskKind::copy);
  r.max_new_tokens = max_new;
  r.seed = static_cast<std::uint64_t>(id) * 7919 + 1;
  return r;
}

// log pi(token_t | ctx_t) under the snapshot recorded for each token.
double replay(const Trajectory &traj,
              const std::map<std::uint64_t, policy::ParamsPtr> &snaps,
              std::size_t t) {
  const auto ctx = policy::make_context(
      kSpec, traj.prompt, std::span<const Token>(traj.tokens.data(), t));
  return policy::log_prob(snaps.at(traj.versions[t])->values, ctx,
                          traj.tokens[t]);
}

} // namespace

TEST_CASE("uninterrupted generation is on-policy") {
  const auto p = make_version(5, 1, true);
  ParamsStore store(p);
  const auto traj = generate(request(1), store, kSpec);
  REQUIRE(traj.finished());
  CHECK(traj.start_version == 5);
  for (auto v : traj.versions)
    CHECK(v == 5);
  for (std::size_t t = 0; t < traj.tokens.size(); ++t)
    CHECK(replay(traj, {{5, p}}, t) == traj.behavior_logprobs[t]);
}

TEST_CASE("interruption after token 3 switches versions 5 -> 6") {
  ScriptedSource src({make_version(5, 1), make_version(6, 2)},
                     [](std::size_t read) { return read < 3 ? 0 : 1; });
  const auto traj = generate(request(2), src, kSpec);
  CHECK(traj.versions ==
        std::vector<std::uint64_t>{5, 5, 5, 6, 6, 6, 6, 6});
  CHECK(traj.start_version == 5);
  CHECK(traj.truncated);
  const auto segs = segments(traj);
  REQUIRE(segs.size() == 2);
  CHECK(segs[0].end == 3);
  CHECK(segs[1].begin == 3);
}

TEST_CASE("an update after EOS leaves the trajectory unaffected") {
  const auto v5 = make_version(5, 1, true);
  ScriptedSource plain({v5}, [](std::size_t) { return 0; });
  const auto base = generate(request(3), plain, kSpec);
  const std::size_t n = base.tokens.size();
  ScriptedSource late({v5, make_version(6, 2, true)},
                      [n](std::size_t read) { return read < n ? 0 : 1; });
  const auto traj = generate(request(3), late, kSpec);
  CHECK(traj.tokens == base.tokens);
  CHECK(traj.behavior_logprobs == base.behavior_logprobs);
  CHECK(traj.versions == base.versions);
}

TEST_CASE("the source is read once per token") {
  ScriptedSource src({make_version(0, 1)}, [](std::size_t) { return 0; });
  const auto traj = generate(request(4, 6), src, kSpec);
  CHECK(src.reads() == traj.tokens.size());
}

TEST_CASE("missing parameters raise ParamsUnavailable") {
  EmptySource src;
  CHECK_THROWS_AS(generate(request(5), src, kSpec), ParamsUnavailable);
  CHECK_THROWS_AS(RolloutWorker(0, kSpec, nullptr), ParamsUnavailable);
}

TEST_CASE("a source going backwards is an invariant violation") {
  ScriptedSource src({make_version(5, 1), make_version(4, 2)},
                     [](std::size_t read) { return read < 2 ? 0 : 1; });
  CHECK_THROWS_AS(generate(request(6), src, kSpec), InvariantViolation);
}

TEST_CASE("worker and generate agree without interruptions") {
  const auto p = make_version(0, 3, true);
  RolloutWorker worker(0, kSpec, p);
  ParamsStore store(p);
  for (int id = 0; id < 10; ++id)
    worker.submit(request(id));
  std::vector<Trajectory> done;
  while (worker.in_flight() > 0)
    for (auto &t : worker.decode_step().completed)
      done.push_back(std::move(t));
  REQUIRE(done.size() == 10);
  for (const auto &t : done) {
    const auto ref = generate(request(t.id), store, kSpec);
    CHECK(t.tokens == ref.tokens);
    CHECK(t.behavior_logprobs == ref.behavior_logprobs);
  }
}

TEST_CASE("update with 8 sequences in flight") {
  RolloutWorker worker(0, kSpec, make_version(0, 1));
  for (int id = 0; id < 8; ++id)
    worker.submit(request(id));
  for (int step = 0; step < 3; ++step)
    worker.decode_step();

  SUBCASE("every sequence reports a boundary at its current position") {
    const auto ack = worker.update_weights(make_version(1, 2));
    CHECK(ack.accepted);
    CHECK(ack.version == 1);
    CHECK(ack.sequences_switched == 8);
    std::vector<Trajectory> done;
    while (worker.in_flight() > 0)
      for (auto &t : worker.decode_step().completed)
        done.push_back(std::move(t));
    REQUIRE(done.size() == 8);
    for (const auto &t : done)
      CHECK(t.versions ==
            std::vector<std::uint64_t>{0, 0, 0, 1, 1, 1, 1, 1});
  }
  SUBCASE("back-to-back updates skip the middle version") {
    CHECK(worker.update_weights(make_version(1, 2)).accepted);
    CHECK(worker.update_weights(make_version(2, 3)).accepted);
    while (worker.in_flight() > 0)
      for (auto &t : worker.decode_step().completed) {
        CHECK(std::find(t.versions.begin(), t.versions.end(), 1) ==
              t.versions.end());
        CHECK(std::is_sorted(t.versions.begin(), t.versions.end()));
      }
  }
  SUBCASE("a version gap of 2 is rejected without state change") {
    const auto ack = worker.update_weights(make_version(2, 3));
    CHECK_FALSE(ack.accepted);
    CHECK(worker.version() == 0);
    CHECK(worker.in_flight() == 8);
    CHECK_FALSE(worker.update_weights(make_version(0, 3)).accepted);
  }
}

TEST_CASE("stitched likelihood equals the product of segment likelihoods") {
  std::map<std::uint64_t, policy::ParamsPtr> snaps;
  std::vector<policy::ParamsPtr> list;
  for (std::uint64_t v = 0; v < 4; ++v) {
    snaps[v] = make_version(v, 40 + v);
    list.push_back(snaps[v]);
  }
  // Switch points after tokens 2, 4 and 5.
  ScriptedSource src(list, [](std::size_t read) {
    return read < 2 ? 0 : read < 4 ? 1 : read < 5 ? 2 : 3;
  });
  const auto traj = generate(request(7), src, kSpec);
  CHECK(segments(traj).size() == 4);
  double total = 0.0;
  for (const auto &seg : segments(traj)) {
    double seg_ll = 0.0;
    for (std::size_t t = seg.begin; t < seg.end; ++t)
      seg_ll += replay(traj, snaps, t);
    total += seg_ll;
  }
  CHECK(std::abs(stitched_behavior_logprob(traj) - total) <= 1e-12);
}

TEST_CASE("trace lines round-trip") {
  std::stringstream ss;
  TraceWriter writer(ss);
  ParamsStore store(make_version(3, 5, true));
  const auto traj = generate(request(8), store, kSpec, &writer);
  std::string line;
  std::size_t n = 0;
  while (std::getline(ss, line)) {
    const auto r = parse_trace_line(line);
    CHECK(r.trajectory_id == 8);
    CHECK(r.step == n);
    CHECK(r.version == 3);
    CHECK(r.token == traj.tokens[n]);
    CHECK(r.logprob == traj.behavior_logprobs[n]);
    ++n;
  }
  CHECK(n == traj.tokens.size());
}

TEST_CASE("concurrent updates never tear a token") {
  std::map<std::uint64_t, policy::ParamsPtr> snaps;
  for (std::uint64_t v = 0; v <= 50; ++v)
    snaps[v] = make_version(v, 200 + v, true);
  RolloutWorker worker(0, kSpec, snaps[0]);
  std::atomic<bool> stop{false};
  std::vector<Trajectory> done;
  std::thread decoder([&] {
    std::int64_t id = 0;
    while (!stop) {
      while (worker.in_flight() < 16)
        worker.submit(request(id++, 12));
      for (auto &t : worker.decode_step().completed)
        done.push_back(std::move(t));
    }
  });
  for (std::uint64_t v = 1; v <= 50; ++v) {
    REQUIRE(worker.update_weights(snaps[v]).accepted);
    std::this_thread::sleep_for(std::chrono::microseconds(200));
  }
  stop = true;
  decoder.join();
  REQUIRE(!done.empty());
  for (const auto &t : done) {
    CHECK(std::is_sorted(t.versions.begin(), t.versions.end()));
    for (std::size_t i = 0; i < t.tokens.size(); ++i)
      CHECK(std::abs(replay(t, snaps, i) - t.behavior_logprobs[i]) <= 1e-12);
  }
}

TEST_CASE("params store") {
  ParamsStore store(make_version(0, 1), true);
  CHECK_THROWS_AS(store.publish(make_version(2, 1)), InvariantViolation);
  store.publish(make_version(1, 2));
  CHECK(store.current()->version == 1);
  CHECK(store.snapshot(0)->version == 0);
  CHECK(store.snapshot(9) == nullptr);
}

TEST_CASE("request validation") {
  auto r = request(1);
  r.max_new_tokens = 0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
  r = request(1);
  r.temperature = 0.0;
  CHECK_THROWS_AS(r.validate(), ConfigError);
}
