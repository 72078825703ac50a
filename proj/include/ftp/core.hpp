#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ftp {

// All timestamps and durations are integer seconds since the stream epoch.
using Seconds = std::int64_t;

inline constexpr Seconds kHour = 3600;
inline constexpr Seconds kDay = 24 * kHour;

// Shortest exact rendering: "2d", "6h", "15m" or "90s".
inline std::string format_duration(Seconds s) {
  if (s != 0 && s % kDay == 0) return std::to_string(s / kDay) + "d";
  if (s != 0 && s % kHour == 0) return std::to_string(s / kHour) + "h";
  if (s != 0 && s % 60 == 0) return std::to_string(s / 60) + "m";
  return std::to_string(s) + "s";
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a caller moves a pipeline or clock backwards in time.
class TimeRegressionError : public Error {
 public:
  using Error::Error;
};

struct Feature {
  std::uint32_t index = 0;
  float value = 1.0f;

  friend bool operator==(const Feature&, const Feature&) = default;
};

using SparseVector = std::vector<Feature>;

enum class Split : std::uint8_t { kTrain = 0, kEval = 1 };

// One logged ad event. conversion_time is empty when no conversion arrives
// within d_max of log_time (later conversions are dropped at ingestion).
struct ImpressionRecord {
  std::uint64_t id = 0;
  Seconds log_time = 0;
  std::optional<Seconds> conversion_time;
  SparseVector features;
  Split split = Split::kTrain;

  bool converts() const { return conversion_time.has_value(); }
  std::optional<Seconds> delay() const {
    if (!conversion_time) return std::nullopt;
    return *conversion_time - log_time;
  }

  friend bool operator==(const ImpressionRecord&, const ImpressionRecord&) = default;
};

// Ordered delay windows d_1 < ... < d_K = d_max.
class TaskSchedule {
 public:
  TaskSchedule() = default;
  explicit TaskSchedule(std::vector<Seconds> delays) : delays_(std::move(delays)) {
    if (delays_.empty()) throw Error("task schedule needs at least one delay");
    if (delays_.front() <= 0) throw Error("task delays must be positive");
    for (std::size_t k = 1; k < delays_.size(); ++k) {
      if (delays_[k] <= delays_[k - 1]) {
        throw Error("task delays must be strictly increasing");
      }
    }
  }

  std::size_t size() const { return delays_.size(); }
  Seconds operator[](std::size_t k) const { return delays_[k]; }
  Seconds d_max() const { return delays_.back(); }
  std::span<const Seconds> delays() const { return delays_; }

  friend bool operator==(const TaskSchedule&, const TaskSchedule&) = default;

 private:
  std::vector<Seconds> delays_;
};

class SimClock {
 public:
  explicit SimClock(Seconds start, Seconds step = kHour) : tau_(start), step_(step) {
    if (step <= 0) throw Error("clock step must be positive");
  }

  Seconds tau() const { return tau_; }
  Seconds step() const { return step_; }
  void advance() { tau_ += step_; }

 private:
  Seconds tau_;
  Seconds step_;
};

// Label observable at time `at`: 1 iff the conversion arrived at or before `at`.
inline int observed_label(const ImpressionRecord& record, Seconds at) {
  if (at < record.log_time) {
    throw Error("observed_label: time " + std::to_string(at) + " precedes log time " +
                std::to_string(record.log_time) + " of record " + std::to_string(record.id));
  }
  return record.conversion_time && *record.conversion_time <= at ? 1 : 0;
}

inline int final_label(const ImpressionRecord& record, Seconds d_max) {
  return observed_label(record, record.log_time + d_max);
}

struct LabeledRecord {
  const ImpressionRecord* record = nullptr;
  int label = 0;
};

// Records logged strictly before tau - d, each labeled with its d-window label.
inline std::vector<LabeledRecord> matured_subset(std::span<const ImpressionRecord> records,
                                                 Seconds tau, Seconds d) {
  if (d <= 0) throw Error("matured_subset: delay must be positive");
  std::vector<LabeledRecord> out;
  for (const auto& r : records) {
    if (r.log_time < tau - d) out.push_back({&r, observed_label(r, r.log_time + d)});
  }
  return out;
}

inline bool sorted_by_log_time(std::span<const ImpressionRecord> records) {
  return std::is_sorted(records.begin(), records.end(),
                        [](const auto& a, const auto& b) { return a.log_time < b.log_time; });
}

// Drops conversions that arrive later than d_max after logging.
inline void coerce_late_conversion(ImpressionRecord& record, Seconds d_max) {
  if (record.conversion_time && *record.conversion_time - record.log_time > d_max) {
    record.conversion_time.reset();
  }
}

}  // namespace ftp
