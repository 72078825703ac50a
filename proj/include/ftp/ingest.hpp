#pragma once

#include <zlib.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "ftp/core.hpp"

namespace ftp {

class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

namespace detail {

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> cols;
  std::size_t start = 0;
  while (true) {
    auto pos = line.find('\t', start);
    if (pos == std::string_view::npos) {
      cols.push_back(line.substr(start));
      break;
    }
    cols.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return cols;
}

template <class Int>
std::optional<Int> parse_int(std::string_view s) {
  Int v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline std::string_view chomp(std::string_view line) {
  while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.remove_suffix(1);
  return line;
}

}  // namespace detail

// Maps (field, token) to a global feature index. Field f owns the index range
// [f * n_buckets, (f + 1) * n_buckets); bucket 0 of every field is reserved for
// a missing (empty) token. Other tokens land in 1 + h % (n_buckets - 1), where
// h = splitmix64(fnv1a64(token) ^ splitmix64(f)).
class FeatureHasher {
 public:
  FeatureHasher(std::uint32_t n_fields, std::uint32_t n_buckets)
      : n_fields_(n_fields), n_buckets_(n_buckets) {
    if (n_fields == 0) throw Error("hasher needs at least one field");
    if (n_buckets < 2 || (n_buckets & (n_buckets - 1)) != 0) {
      throw Error("n_buckets must be a power of two >= 2");
    }
    if (static_cast<std::uint64_t>(n_fields) * n_buckets > 0xffffffffULL) {
      throw Error("n_fields * n_buckets exceeds the 32-bit index space");
    }
  }

  std::uint32_t n_fields() const { return n_fields_; }
  std::uint32_t n_buckets() const { return n_buckets_; }
  std::uint32_t dimension() const { return n_fields_ * n_buckets_; }
  std::uint32_t field_of(std::uint32_t index) const { return index / n_buckets_; }

  std::uint32_t bucket(std::uint32_t field, std::string_view token) const {
    if (token.empty()) return 0;
    const std::uint64_t h = detail::splitmix64(detail::fnv1a64(token) ^ detail::splitmix64(field));
    return 1 + static_cast<std::uint32_t>(h % (n_buckets_ - 1));
  }

  std::uint32_t index(std::uint32_t field, std::string_view token) const {
    return field * n_buckets_ + bucket(field, token);
  }

 private:
  std::uint32_t n_fields_;
  std::uint32_t n_buckets_;
};

template <class Tokens>
SparseVector hash_features(const Tokens& raw_fields, const FeatureHasher& hasher) {
  if (raw_fields.size() != hasher.n_fields()) {
    throw Error("hash_features: expected " + std::to_string(hasher.n_fields()) + " fields, got " +
                std::to_string(raw_fields.size()));
  }
  SparseVector x;
  x.reserve(raw_fields.size());
  std::uint32_t f = 0;
  for (const auto& tok : raw_fields) {
    x.push_back({hasher.index(f, std::string_view(tok)), 1.0f});
    ++f;
  }
  return x;
}

// A log line before hashing. Both input formats normalize to this.
struct RawRecord {
  std::uint64_t id = 0;
  Seconds log_time = 0;
  std::optional<Seconds> conversion_time;
  std::vector<std::string> tokens;

  friend bool operator==(const RawRecord&, const RawRecord&) = default;
};

inline constexpr std::size_t kCriteoIntFields = 8;
inline constexpr std::size_t kCriteoCatFields = 9;
inline constexpr std::size_t kCriteoColumns = 2 + kCriteoIntFields + kCriteoCatFields;
inline constexpr Seconds kCriteoDMax = 30 * kDay;

// floor(ln(v)^2) for v > 2, identity below; the usual binning for these logs.
inline std::string bin_integer_feature(std::int64_t v) {
  if (v < 0) return "neg";
  if (v <= 2) return "i" + std::to_string(v);
  const double l = std::log(static_cast<double>(v));
  return "b" + std::to_string(static_cast<std::int64_t>(std::floor(l * l)));
}

// Criteo conversion-log line: click ts, conversion ts or empty, 8 integer
// features, 9 categorical tokens; all tab-separated.
inline RawRecord parse_criteo_line(std::string_view line, std::size_t line_no, Seconds d_max,
                                   std::uint64_t id) {
  line = detail::chomp(line);
  const auto cols = detail::split_tabs(line);
  if (cols.size() != kCriteoColumns) {
    throw ParseError(line_no, "expected " + std::to_string(kCriteoColumns) + " columns, got " +
                                  std::to_string(cols.size()));
  }
  RawRecord r;
  r.id = id;
  auto s = detail::parse_int<Seconds>(cols[0]);
  if (!s) throw ParseError(line_no, "non-numeric click timestamp '" + std::string(cols[0]) + "'");
  r.log_time = *s;
  if (!cols[1].empty()) {
    auto t = detail::parse_int<Seconds>(cols[1]);
    if (!t) throw ParseError(line_no, "non-numeric conversion timestamp '" + std::string(cols[1]) + "'");
    if (*t < r.log_time) throw ParseError(line_no, "conversion precedes click");
    if (*t - r.log_time <= d_max) r.conversion_time = *t;
  }
  r.tokens.reserve(kCriteoIntFields + kCriteoCatFields);
  for (std::size_t i = 0; i < kCriteoIntFields; ++i) {
    const auto col = cols[2 + i];
    if (col.empty()) {
      r.tokens.emplace_back();
      continue;
    }
    auto v = detail::parse_int<std::int64_t>(col);
    if (!v) throw ParseError(line_no, "non-numeric integer feature in column " + std::to_string(3 + i));
    r.tokens.push_back(bin_integer_feature(*v));
  }
  for (std::size_t i = 0; i < kCriteoCatFields; ++i) {
    r.tokens.emplace_back(cols[2 + kCriteoIntFields + i]);
  }
  return r;
}

// Canonical line: id, s, t_or_empty, field tokens; tab-separated.
inline RawRecord parse_canonical_line(std::string_view line, std::size_t line_no,
                                      std::size_t n_fields, Seconds d_max) {
  line = detail::chomp(line);
  const auto cols = detail::split_tabs(line);
  if (cols.size() != 3 + n_fields) {
    throw ParseError(line_no, "expected " + std::to_string(3 + n_fields) + " columns, got " +
                                  std::to_string(cols.size()));
  }
  RawRecord r;
  auto id = detail::parse_int<std::uint64_t>(cols[0]);
  if (!id) throw ParseError(line_no, "non-numeric id");
  r.id = *id;
  auto s = detail::parse_int<Seconds>(cols[1]);
  if (!s) throw ParseError(line_no, "non-numeric log timestamp '" + std::string(cols[1]) + "'");
  r.log_time = *s;
  if (!cols[2].empty()) {
    auto t = detail::parse_int<Seconds>(cols[2]);
    if (!t) throw ParseError(line_no, "non-numeric conversion timestamp '" + std::string(cols[2]) + "'");
    if (*t < r.log_time) throw ParseError(line_no, "conversion precedes log time");
    if (*t - r.log_time <= d_max) r.conversion_time = *t;
  }
  r.tokens.reserve(n_fields);
  for (std::size_t i = 0; i < n_fields; ++i) r.tokens.emplace_back(cols[3 + i]);
  return r;
}

inline void write_canonical(std::ostream& out, const RawRecord& r) {
  out << r.id << '\t' << r.log_time << '\t';
  if (r.conversion_time) out << *r.conversion_time;
  for (const auto& tok : r.tokens) out << '\t' << tok;
  out << '\n';
}

// Deterministic holdout assignment from the record id alone.
inline Split split_for(std::uint64_t id, double holdout_fraction) {
  if (holdout_fraction <= 0.0) return Split::kTrain;
  const double u = static_cast<double>(detail::splitmix64(id ^ 0x5eed5eed5eedULL) >> 11) * 0x1.0p-53;
  return u < holdout_fraction ? Split::kEval : Split::kTrain;
}

inline ImpressionRecord to_record(const RawRecord& raw, const FeatureHasher& hasher,
                                  double holdout_fraction = 0.0) {
  ImpressionRecord r;
  r.id = raw.id;
  r.log_time = raw.log_time;
  r.conversion_time = raw.conversion_time;
  r.features = hash_features(raw.tokens, hasher);
  r.split = split_for(raw.id, holdout_fraction);
  return r;
}

// Line reader over plain or gzip-compressed text (zlib reads both).
class LogReader {
 public:
  explicit LogReader(const std::string& path) : path_(path), file_(gzopen(path.c_str(), "rb")) {
    if (file_ == nullptr) throw Error("cannot open " + path);
    gzbuffer(file_, 1 << 17);
  }
  ~LogReader() {
    if (file_ != nullptr) gzclose(file_);
  }
  LogReader(const LogReader&) = delete;
  LogReader& operator=(const LogReader&) = delete;

  // Returns false at end of file. Strips the trailing newline.
  bool next(std::string& line) {
    line.clear();
    char buf[8192];
    while (true) {
      if (gzgets(file_, buf, sizeof(buf)) == nullptr) {
        int err = 0;
        const char* msg = gzerror(file_, &err);
        if (err != Z_OK && err != Z_BUF_ERROR) throw Error("read error in " + path_ + ": " + msg);
        if (line.empty()) return false;
        break;
      }
      line += buf;
      if (!line.empty() && line.back() == '\n') break;
    }
    ++line_no_;
    while (!line.empty() && (line.back() == '\n' || line.back() == '\r')) line.pop_back();
    return true;
  }

  std::size_t line_no() const { return line_no_; }
  const std::string& path() const { return path_; }

 private:
  std::string path_;
  gzFile file_;
  std::size_t line_no_ = 0;
};

enum class LogFormat { kCanonical, kCriteo };

struct LogSpec {
  std::string path;
  LogFormat format = LogFormat::kCanonical;
  std::size_t n_fields = 0;  // canonical only; Criteo is fixed at 17
  Seconds d_max = kCriteoDMax;
};

inline std::size_t fields_for(const LogSpec& spec) {
  return spec.format == LogFormat::kCriteo ? kCriteoIntFields + kCriteoCatFields : spec.n_fields;
}

// Streams raw records one at a time with bounded memory.
template <class Fn>
std::size_t for_each_raw_record(const LogSpec& spec, Fn&& fn) {
  LogReader reader(spec.path);
  std::string line;
  std::size_t n = 0;
  const std::size_t n_fields = fields_for(spec);
  while (reader.next(line)) {
    if (line.empty()) continue;
    RawRecord r = spec.format == LogFormat::kCriteo
                      ? parse_criteo_line(line, reader.line_no(), spec.d_max, n)
                      : parse_canonical_line(line, reader.line_no(), n_fields, spec.d_max);
    fn(std::move(r));
    ++n;
  }
  return n;
}

// Loads a whole log, hashes features and restores log-time order.
inline std::vector<ImpressionRecord> load_records(const LogSpec& spec, const FeatureHasher& hasher,
                                                  double holdout_fraction = 0.0) {
  if (hasher.n_fields() != fields_for(spec)) {
    throw Error("hasher field count does not match the log format");
  }
  std::vector<ImpressionRecord> out;
  for_each_raw_record(spec, [&](RawRecord&& raw) { out.push_back(to_record(raw, hasher, holdout_fraction)); });
  if (!sorted_by_log_time(out)) {
    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.log_time < b.log_time; });
  }
  return out;
}

}  // namespace ftp
