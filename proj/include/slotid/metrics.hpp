#pragma once

// JSON-lines metrics stream: one object per line with experiment id, step, metric name, value, seed.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

namespace slotid {

class MetricsWriter {
 public:
  MetricsWriter() = default;
  MetricsWriter(std::ostream* os, std::string experiment, std::uint64_t seed)
      : os_(os), experiment_(std::move(experiment)), seed_(seed) {}

  static MetricsWriter to_file(const std::filesystem::path& path, std::string experiment, std::uint64_t seed) {
    MetricsWriter w;
    w.file_ = std::make_shared<std::ofstream>(path);
    if (!*w.file_) throw std::runtime_error("cannot open " + path.string());
    w.os_ = w.file_.get();
    w.experiment_ = std::move(experiment);
    w.seed_ = seed;
    return w;
  }

  bool enabled() const { return os_ != nullptr; }

  /// Steps must be non-decreasing within one experiment.
  void write(long step, const std::string& metric, double value) {
    if (!os_) return;
    if (step < last_step_) throw std::logic_error("metrics: step went backwards");
    last_step_ = step;
    nlohmann::json j;
    j["experiment"] = experiment_;
    j["step"] = step;
    j["metric"] = metric;
    j["value"] = std::isfinite(value) ? nlohmann::json(value) : nlohmann::json(nullptr);
    j["seed"] = seed_;
    *os_ << j.dump() << '\n';
  }

  void write(long step, const std::map<std::string, double>& values) {
    for (const auto& [k, v] : values) write(step, k, v);
  }

  void flush() {
    if (os_) os_->flush();
  }

 private:
  std::shared_ptr<std::ofstream> file_;
  std::ostream* os_ = nullptr;
  std::string experiment_;
  std::uint64_t seed_ = 0;
  long last_step_ = std::numeric_limits<long>::min();
};

}  // namespace slotid
