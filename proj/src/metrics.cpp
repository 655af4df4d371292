#include "asyncppo/metrics.hpp"

#include <string>

namespace asyncppo {

nlohmann::json histogram_to_json(const StalenessHistogram &hist) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto &[staleness, count] : hist)
    j[std::to_string(staleness)] = count;
  return j;
}

void JsonlMetricsWriter::emit(const nlohmann::json &record) {
  std::lock_guard lock(mu_);
  out_ << record.dump() << '\n';
  out_.flush();
}

void MetricsCollector::emit(const nlohmann::json &record) {
  std::lock_guard lock(mu_);
  records_.push_back(record);
}

std::vector<nlohmann::json> MetricsCollector::records() const {
  std::lock_guard lock(mu_);
  return records_;
}

} // namespace asyncppo
