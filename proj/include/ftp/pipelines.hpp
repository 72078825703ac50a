#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "ftp/core.hpp"
#include "ftp/nn/checkpoint.hpp"

namespace ftp {

// Releases D_{tau,d} incrementally: every train-split record exactly once, as
// soon as s < tau - d, labeled with its d-window label.
class MaturedPipeline {
 public:
  MaturedPipeline(std::span<const ImpressionRecord> records, Seconds delay)
      : records_(records), delay_(delay) {
    if (delay <= 0) throw Error("pipeline delay must be positive");
  }

  std::vector<LabeledRecord> release(Seconds tau) {
    if (last_tau_ && tau < *last_tau_) {
      throw TimeRegressionError("pipeline d=" + std::to_string(delay_) + ": tau moved from " +
                                std::to_string(*last_tau_) + " back to " + std::to_string(tau));
    }
    last_tau_ = tau;
    std::vector<LabeledRecord> out;
    while (cursor_ < records_.size() && records_[cursor_].log_time < tau - delay_) {
      const auto& r = records_[cursor_++];
      if (r.split != Split::kTrain) continue;
      out.push_back({&r, observed_label(r, r.log_time + delay_)});
    }
    released_ += out.size();
    return out;
  }

  Seconds delay() const { return delay_; }
  std::size_t cursor() const { return cursor_; }
  std::size_t released() const { return released_; }

 private:
  std::span<const ImpressionRecord> records_;
  Seconds delay_;
  std::size_t cursor_ = 0;
  std::size_t released_ = 0;
  std::optional<Seconds> last_tau_;
};

struct FakeNegativeEvent {
  std::uint64_t id = 0;
  Seconds emit_time = 0;
  int label = 0;
  const ImpressionRecord* record = nullptr;
};

namespace detail {

inline bool event_order(const FakeNegativeEvent& a, const FakeNegativeEvent& b) {
  if (a.emit_time != b.emit_time) return a.emit_time < b.emit_time;
  if (a.label != b.label) return a.label < b.label;
  return a.id < b.id;
}

}  // namespace detail

// Offline view of the fake-negative stream: each record is emitted as a
// negative at its log time and duplicated as a positive at its conversion time.
inline std::vector<FakeNegativeEvent> emit_fake_negative_stream(std::span<const ImpressionRecord> records,
                                                                Seconds up_to) {
  std::vector<FakeNegativeEvent> out;
  for (const auto& r : records) {
    if (r.log_time <= up_to) out.push_back({r.id, r.log_time, 0, &r});
    if (r.conversion_time && *r.conversion_time <= up_to) out.push_back({r.id, *r.conversion_time, 1, &r});
  }
  std::sort(out.begin(), out.end(), detail::event_order);
  return out;
}

// Online fake-negative pipeline. At each release it emits every event with
// emit_time < tau not yet emitted. Pending records are only asked whether they
// have converted by now, and are dropped once d_max has passed.
class FakeNegativePipeline {
 public:
  FakeNegativePipeline(std::span<const ImpressionRecord> records, Seconds d_max)
      : records_(records), d_max_(d_max) {}

  std::vector<FakeNegativeEvent> release(Seconds tau) {
    if (last_tau_ && tau < *last_tau_) {
      throw TimeRegressionError("fake-negative pipeline: tau moved backwards");
    }
    last_tau_ = tau;
    std::vector<FakeNegativeEvent> out;
    while (cursor_ < records_.size() && records_[cursor_].log_time < tau) {
      const auto& r = records_[cursor_++];
      if (r.split != Split::kTrain) continue;
      out.push_back({r.id, r.log_time, 0, &r});
      pending_.push_back(&r);
    }
    std::size_t keep = 0;
    for (auto* r : pending_) {
      if (r->conversion_time && *r->conversion_time < tau) {
        out.push_back({r->id, *r->conversion_time, 1, r});
        continue;
      }
      if (r->log_time + d_max_ < tau) continue;
      pending_[keep++] = r;
    }
    pending_.resize(keep);
    std::sort(out.begin(), out.end(), detail::event_order);
    return out;
  }

  std::size_t pending() const { return pending_.size(); }

 private:
  std::span<const ImpressionRecord> records_;
  Seconds d_max_;
  std::size_t cursor_ = 0;
  std::vector<const ImpressionRecord*> pending_;
  std::optional<Seconds> last_tau_;
};

// D'_tau: records with the task predictions the online model made at log time.
struct ExtendedLogEntry {
  std::uint64_t id = 0;
  Seconds log_time = 0;
  SparseVector features;
  std::vector<float> task_preds;
  // Filled on maturation (s + d_max < tau).
  std::optional<int> label;
  std::optional<Seconds> conversion_time;
  // The prophet's prediction when the entry matured.
  std::optional<double> prophecy;
};

// Index of the stored prediction closest to the prophecy; ties go to the
// smallest index.
inline std::size_t best_task(double prophecy, std::span<const float> task_preds) {
  std::size_t best = 0;
  double best_gap = std::abs(prophecy - static_cast<double>(task_preds[0]));
  for (std::size_t k = 1; k < task_preds.size(); ++k) {
    const double gap = std::abs(prophecy - static_cast<double>(task_preds[k]));
    if (gap < best_gap) {
      best_gap = gap;
      best = k;
    }
  }
  return best;
}

struct PolicyExample {
  const ExtendedLogEntry* entry = nullptr;
  std::size_t kstar = 0;
  double prophecy = 0.0;
};

namespace detail {

inline void put_u32(std::ostream& o, std::uint32_t v) { nn::detail::put_le<std::uint32_t>(o, v); }

inline std::string encode_entry(const ExtendedLogEntry& e) {
  std::ostringstream o;
  nn::detail::put_le<std::uint64_t>(o, e.id);
  nn::detail::put_le<std::uint64_t>(o, static_cast<std::uint64_t>(e.log_time));
  nn::detail::put_le<std::uint64_t>(o, static_cast<std::uint64_t>(e.conversion_time.value_or(-1)));
  nn::detail::put_le<std::uint8_t>(o, static_cast<std::uint8_t>(e.label.value_or(255)));
  put_u32(o, std::bit_cast<std::uint32_t>(e.prophecy ? static_cast<float>(*e.prophecy) : std::nanf("")));
  put_u32(o, static_cast<std::uint32_t>(e.task_preds.size()));
  for (float p : e.task_preds) put_u32(o, std::bit_cast<std::uint32_t>(p));
  put_u32(o, static_cast<std::uint32_t>(e.features.size()));
  for (const auto& f : e.features) {
    put_u32(o, f.index);
    put_u32(o, std::bit_cast<std::uint32_t>(f.value));
  }
  return o.str();
}

}  // namespace detail

// Appends matured entries as length-prefixed records:
//   u32 payload bytes, then u64 id, i64 s, i64 t (-1 when absent), u8 label
//   (255 when unknown), f32 prophecy (NaN when unknown), u32 K, f32 preds[K],
//   u32 nnz, (u32 index, f32 value)[nnz]
// all little-endian.
class ExtendedLogWriter {
 public:
  explicit ExtendedLogWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::app) {
    if (!out_) throw Error("cannot open extended log " + path);
  }
  void append(const ExtendedLogEntry& e) {
    const auto payload = detail::encode_entry(e);
    detail::put_u32(out_, static_cast<std::uint32_t>(payload.size()));
    out_.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  }
  void flush() { out_.flush(); }

 private:
  std::ofstream out_;
};

inline std::vector<ExtendedLogEntry> read_extended_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open extended log " + path);
  std::vector<ExtendedLogEntry> out;
  using nn::detail::get_le;
  while (in.peek() != std::char_traits<char>::eof()) {
    const auto len = get_le<std::uint32_t>(in);
    const auto start = in.tellg();
    ExtendedLogEntry e;
    e.id = get_le<std::uint64_t>(in);
    e.log_time = static_cast<Seconds>(get_le<std::uint64_t>(in));
    const auto t = static_cast<Seconds>(get_le<std::uint64_t>(in));
    if (t >= 0) e.conversion_time = t;
    const auto label = get_le<std::uint8_t>(in);
    if (label != 255) e.label = label;
    const float prophecy = std::bit_cast<float>(get_le<std::uint32_t>(in));
    if (!std::isnan(prophecy)) e.prophecy = prophecy;
    const auto k = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < k; ++i) e.task_preds.push_back(std::bit_cast<float>(get_le<std::uint32_t>(in)));
    const auto nnz = get_le<std::uint32_t>(in);
    for (std::uint32_t i = 0; i < nnz; ++i) {
      Feature f;
      f.index = get_le<std::uint32_t>(in);
      f.value = std::bit_cast<float>(get_le<std::uint32_t>(in));
      e.features.push_back(f);
    }
    if (in.tellg() - start != static_cast<std::streamoff>(len)) throw Error("corrupt extended log record in " + path);
    out.push_back(std::move(e));
  }
  return out;
}

// Online extended log plus the policy pipeline over its matured subset.
class ExtendedLog {
 public:
  explicit ExtendedLog(Seconds d_max) : d_max_(d_max) {}

  // Stores the online task predictions for a record at its log time.
  const ExtendedLogEntry& capture(const ImpressionRecord& record, std::vector<float> task_preds) {
    if (!ids_.insert(record.id).second) {
      throw Error("extended log: record " + std::to_string(record.id) + " captured twice");
    }
    ExtendedLogEntry e;
    e.id = record.id;
    e.log_time = record.log_time;
    e.features = record.features;
    e.task_preds = std::move(task_preds);
    entries_.push_back(std::move(e));
    sources_.push_back(&record);
    return entries_.back();
  }

  // Newly matured entries (s < tau - d_max) with k* from the prophet. Each
  // entry is consumed once; its label slot is filled at the same time.
  template <class Prophet>
  std::vector<PolicyExample> policy_batch(Seconds tau, Prophet&& prophet) {
    if (last_tau_ && tau < *last_tau_) throw TimeRegressionError("policy pipeline: tau moved backwards");
    last_tau_ = tau;
    std::vector<PolicyExample> out;
    while (cursor_ < entries_.size() && entries_[cursor_].log_time < tau - d_max_) {
      auto& e = entries_[cursor_];
      const auto* src = sources_[cursor_];
      ++cursor_;
      e.label = final_label(*src, d_max_);
      e.conversion_time = e.label == 1 ? src->conversion_time : std::nullopt;
      const double prophecy = prophet(e.features);
      e.prophecy = prophecy;
      if (writer_) writer_->append(e);
      if (src->split != Split::kTrain) continue;
      out.push_back({&e, best_task(prophecy, e.task_preds), prophecy});
    }
    return out;
  }

  void persist_to(const std::string& path) { writer_.emplace(path); }
  void flush() {
    if (writer_) writer_->flush();
  }

  const std::deque<ExtendedLogEntry>& entries() const { return entries_; }
  std::size_t consumed() const { return cursor_; }
  Seconds d_max() const { return d_max_; }

 private:
  Seconds d_max_;
  std::deque<ExtendedLogEntry> entries_;
  std::vector<const ImpressionRecord*> sources_;
  std::unordered_set<std::uint64_t> ids_;
  std::size_t cursor_ = 0;
  std::optional<Seconds> last_tau_;
  std::optional<ExtendedLogWriter> writer_;
};

}  // namespace ftp
