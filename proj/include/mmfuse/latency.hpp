#pragma once

// Steady-state single-stream latency harness and the shared LatencyReport
// JSON document (schemas/latency_report.schema.json).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmfuse/errors.hpp"

namespace mmfuse {

inline constexpr int kLatencySchemaVersion = 1;

struct LatencyReport {
  int schema_version = kLatencySchemaVersion;
  std::string model_name;
  std::string strategy;
  std::string runtime = "in_process";  // in_process | exchange_runtime | optimized_runtime
  std::size_t warmup_iters = 0;
  std::size_t timed_iters = 0;
  std::size_t batch_size = 1;
  double mean_ms = 0, median_ms = 0, p95_ms = 0, std_ms = 0, min_ms = 0, max_ms = 0;
  std::string hardware;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(LatencyReport, schema_version, model_name, strategy, runtime,
                                                warmup_iters, timed_iters, batch_size, mean_ms, median_ms, p95_ms,
                                                std_ms, min_ms, max_ms, hardware)

inline void validate_runtime_tag(const std::string& tag) {
  if (tag != "in_process" && tag != "exchange_runtime" && tag != "optimized_runtime")
    throw ValidationError("unknown runtime tag '" + tag + "'");
}

/// CPU model string from /proc/cpuinfo, or "unknown".
inline std::string probe_hardware() {
  std::ifstream in("/proc/cpuinfo");
  for (std::string line; std::getline(in, line);)
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) {
        auto s = line.substr(pos + 1);
        s.erase(0, s.find_first_not_of(' '));
        return s;
      }
    }
  return "unknown";
}

/// Fills the statistics from per-iteration timings in milliseconds.
/// p95 uses the nearest-rank definition; std is the population deviation.
inline void fill_stats(LatencyReport& r, std::vector<double> ms) {
  if (ms.empty()) throw ValidationError("latency: no timings");
  for (double v : ms)
    if (!std::isfinite(v)) throw ValidationError("latency: non-finite timing");
  std::sort(ms.begin(), ms.end());
  const std::size_t n = ms.size();
  r.timed_iters = n;
  r.min_ms = ms.front();
  r.max_ms = ms.back();
  r.mean_ms = std::accumulate(ms.begin(), ms.end(), 0.0) / static_cast<double>(n);
  r.median_ms = n % 2 ? ms[n / 2] : 0.5 * (ms[n / 2 - 1] + ms[n / 2]);
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(n)));
  r.p95_ms = ms[std::max<std::size_t>(rank, 1) - 1];
  double var = 0;
  for (double v : ms) var += (v - r.mean_ms) * (v - r.mean_ms);
  r.std_ms = std::sqrt(var / static_cast<double>(n));
}

/// Runs `warmup` discarded calls then `iters` timed calls of `runner`, one at a time.
inline LatencyReport measure_latency(const std::function<void()>& runner, std::size_t warmup, std::size_t iters,
                                     LatencyReport base = {}) {
  if (warmup < 10) throw ValidationError("latency: warmup must be >= 10");
  if (iters < 30) throw ValidationError("latency: timed iterations must be >= 30");
  validate_runtime_tag(base.runtime);
  for (std::size_t i = 0; i < warmup; ++i) runner();
  std::vector<double> ms;
  ms.reserve(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    runner();
    ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  base.warmup_iters = warmup;
  base.batch_size = 1;
  if (base.hardware.empty()) base.hardware = probe_hardware();
  fill_stats(base, std::move(ms));
  return base;
}

inline void save_latency_report(const std::string& path, const LatencyReport& r) {
  std::ofstream o(path);
  if (!o) throw ValidationError("cannot write " + path);
  o << nlohmann::json(r).dump(2) << '\n';
}

/// Parses and checks a report against the schema's required fields and invariants.
inline LatencyReport load_latency_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot read latency report " + path + " (run `mmfuse bench` first)");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  for (const char* key : {"schema_version", "model_name", "runtime", "warmup_iters", "timed_iters", "batch_size", "mean_ms",
                          "median_ms", "p95_ms", "std_ms", "hardware"})
    if (!j.contains(key)) throw FormatError(path + ": missing field '" + key + "'");
  auto r = j.get<LatencyReport>();
  validate_runtime_tag(r.runtime);
  if (r.timed_iters < 30) throw FormatError(path + ": timed_iters below 30");
  if (r.p95_ms < r.median_ms) throw FormatError(path + ": p95_ms below median_ms");
  return r;
}

}  // namespace mmfuse
