#pragma once

#include <json.hpp>

#include <cstdint>
#include <map>
#include <mutex>
#include <ostream>
#include <vector>

namespace asyncppo {

// Staleness (in policy versions) -> trajectory count.
using StalenessHistogram = std::map<std::uint64_t, std::uint64_t>;

nlohmann::json histogram_to_json(const StalenessHistogram &hist);

// Receiver of line-delimited structured records.
class MetricsSink {
public:
  virtual ~MetricsSink() = default;
  virtual void emit(const nlohmann::json &record) = 0;
};

class JsonlMetricsWriter final : public MetricsSink {
public:
  explicit JsonlMetricsWriter(std::ostream &out) : out_(out) {}
  void emit(const nlohmann::json &record) override;

private:
  std::mutex mu_;
  std::ostream &out_;
};

class MetricsCollector final : public MetricsSink {
public:
  void emit(const nlohmann::json &record) override;
  std::vector<nlohmann::json> records() const;

private:
  mutable std::mutex mu_;
  std::vector<nlohmann::json> records_;
};

} // namespace asyncppo
