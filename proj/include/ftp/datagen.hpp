#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ftp/core.hpp"
#include "ftp/ingest.hpp"

namespace ftp {

struct DelayComponent {
  double weight = 1.0;
  double rate = 1.0 / kHour;  // per second
};

// Synthetic stream with a closed-form conversion oracle.
//
// Each record carries one categorical value per field. The conversion score is
// bias + sum of true_weights[offset(f) + value_f]; a converting record draws its
// delay from an exponential mixture. When delay_field >= 0, the value v of that
// field pins mixture component v % M with probability delay_strength, so which
// window is informative depends on x. When item_field >= 0, that field behaves
// like an ad id with a finite lifetime: values are born staggered over the
// horizon and a record only draws among items alive at its log time.
struct GeneratorConfig {
  std::uint64_t seed = 1;
  std::size_t n_records = 10000;
  Seconds start = 0;
  Seconds horizon = 14 * kDay;
  std::vector<std::uint32_t> cardinalities;
  std::vector<double> true_weights;
  double bias = 0.0;
  std::vector<DelayComponent> delay_mixture{{1.0, 1.0 / kHour}};
  Seconds d_max = 2 * kDay;
  int delay_field = -1;
  double delay_strength = 0.0;
  int item_field = -1;
  Seconds item_lifetime = 0;
};

inline std::size_t weight_offset(const GeneratorConfig& cfg, std::size_t field) {
  std::size_t off = 0;
  for (std::size_t f = 0; f < field; ++f) off += cfg.cardinalities[f];
  return off;
}

inline void validate(const GeneratorConfig& cfg) {
  if (cfg.n_records == 0) throw Error("generator: n_records must be > 0");
  if (cfg.horizon <= 0) throw Error("generator: horizon must be > 0");
  if (cfg.d_max <= 0) throw Error("generator: d_max must be > 0");
  if (cfg.cardinalities.empty()) throw Error("generator: need at least one field");
  for (auto c : cfg.cardinalities) {
    if (c == 0) throw Error("generator: zero cardinality");
  }
  const auto dim = std::accumulate(cfg.cardinalities.begin(), cfg.cardinalities.end(), std::size_t{0});
  if (cfg.true_weights.size() != dim) {
    throw Error("generator: true_weights has " + std::to_string(cfg.true_weights.size()) +
                " entries, expected " + std::to_string(dim));
  }
  if (cfg.delay_mixture.empty()) throw Error("generator: empty delay mixture");
  double total = 0.0;
  for (const auto& c : cfg.delay_mixture) {
    if (!(c.weight > 0.0)) throw Error("generator: mixture weights must be positive");
    if (!(c.rate > 0.0)) throw Error("generator: mixture rates must be positive");
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error("generator: mixture weights must sum to 1");
  const auto n_fields = static_cast<int>(cfg.cardinalities.size());
  if (cfg.delay_field >= n_fields) throw Error("generator: delay_field out of range");
  if (cfg.delay_strength < 0.0 || cfg.delay_strength > 1.0) {
    throw Error("generator: delay_strength must lie in [0, 1]");
  }
  if (cfg.item_field >= n_fields) throw Error("generator: item_field out of range");
  if (cfg.item_field >= 0) {
    if (cfg.item_lifetime <= 0) throw Error("generator: item_lifetime must be > 0");
    const double alive = static_cast<double>(cfg.cardinalities[cfg.item_field]) * cfg.item_lifetime /
                         static_cast<double>(cfg.horizon + cfg.item_lifetime);
    if (alive < 1.0) throw Error("generator: fewer than one item alive at a time");
  }
}

// Gaussian weights with a per-field standard deviation.
inline std::vector<double> make_true_weights(std::span<const std::uint32_t> cardinalities,
                                             std::span<const double> field_scales,
                                             std::uint64_t seed) {
  if (field_scales.size() != cardinalities.size()) {
    throw Error("make_true_weights: one scale per field required");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> w;
  for (std::size_t f = 0; f < cardinalities.size(); ++f) {
    for (std::uint32_t v = 0; v < cardinalities[f]; ++v) w.push_back(field_scales[f] * normal(rng));
  }
  return w;
}

using CategoricalRow = std::vector<std::uint32_t>;

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double oracle_score(std::span<const std::uint32_t> values, const GeneratorConfig& cfg) {
  double z = cfg.bias;
  std::size_t off = 0;
  for (std::size_t f = 0; f < values.size(); ++f) {
    z += cfg.true_weights[off + values[f]];
    off += cfg.cardinalities[f];
  }
  return z;
}

// P(a conversion eventually happens | x), before d_max truncation.
inline double true_cvr(std::span<const std::uint32_t> values, const GeneratorConfig& cfg) {
  return sigmoid(oracle_score(values, cfg));
}

inline std::vector<double> component_probs(std::span<const std::uint32_t> values,
                                           const GeneratorConfig& cfg) {
  std::vector<double> p;
  p.reserve(cfg.delay_mixture.size());
  for (const auto& c : cfg.delay_mixture) p.push_back(c.weight);
  if (cfg.delay_field >= 0 && cfg.delay_strength > 0.0) {
    const auto pinned = values[cfg.delay_field] % cfg.delay_mixture.size();
    for (std::size_t j = 0; j < p.size(); ++j) {
      p[j] = (1.0 - cfg.delay_strength) * p[j] + (j == pinned ? cfg.delay_strength : 0.0);
    }
  }
  return p;
}

// P(delay <= u | x, converts) under the untruncated mixture.
inline double delay_cdf(std::span<const std::uint32_t> values, const GeneratorConfig& cfg, double u) {
  if (u < 0) return 0.0;
  const auto p = component_probs(values, cfg);
  double acc = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) acc += p[j] * (1.0 - std::exp(-cfg.delay_mixture[j].rate * u));
  return acc;
}

// P(y_{d_max} = 1 | x): the target the models are scored against.
inline double final_cvr(std::span<const std::uint32_t> values, const GeneratorConfig& cfg) {
  return true_cvr(values, cfg) * delay_cdf(values, cfg, static_cast<double>(cfg.d_max));
}

// Draws the conversion outcome for one record: the delay in seconds, or empty
// when it does not convert or the delay exceeds d_max.
template <class Rng>
std::optional<Seconds> sample_outcome(std::span<const std::uint32_t> values,
                                      const GeneratorConfig& cfg, Rng& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (unif(rng) >= true_cvr(values, cfg)) return std::nullopt;
  const auto p = component_probs(values, cfg);
  double u = unif(rng);
  std::size_t j = 0;
  while (j + 1 < p.size() && u >= p[j]) {
    u -= p[j];
    ++j;
  }
  std::exponential_distribution<double> expo(cfg.delay_mixture[j].rate);
  const double d = expo(rng);
  if (d > static_cast<double>(cfg.d_max)) return std::nullopt;
  return static_cast<Seconds>(std::floor(d));
}

struct GeneratedStream {
  std::vector<RawRecord> records;
  std::vector<CategoricalRow> values;
  std::vector<double> final_cvr;  // oracle P(y_{d_max}=1 | x) per record
};

namespace detail {

template <class Rng>
std::uint32_t draw_item(const GeneratorConfig& cfg, Seconds s, Rng& rng) {
  const auto c = cfg.cardinalities[cfg.item_field];
  const double spacing = static_cast<double>(cfg.horizon + cfg.item_lifetime) / c;
  const double a = static_cast<double>(s - cfg.start) / spacing - 0.5;
  auto lo = static_cast<std::int64_t>(std::floor(a)) + 1;
  auto hi = static_cast<std::int64_t>(std::floor(a + cfg.item_lifetime / spacing));
  lo = std::clamp<std::int64_t>(lo, 0, c - 1);
  hi = std::clamp<std::int64_t>(hi, lo, c - 1);
  std::uniform_int_distribution<std::int64_t> pick(lo, hi);
  return static_cast<std::uint32_t>(pick(rng));
}

}  // namespace detail

inline GeneratedStream generate_stream(const GeneratorConfig& cfg) {
  validate(cfg);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<Seconds> when(cfg.start, cfg.start + cfg.horizon - 1);
  std::vector<Seconds> times(cfg.n_records);
  for (auto& s : times) s = when(rng);
  std::sort(times.begin(), times.end());

  GeneratedStream out;
  out.records.reserve(cfg.n_records);
  out.values.reserve(cfg.n_records);
  out.final_cvr.reserve(cfg.n_records);
  const auto n_fields = cfg.cardinalities.size();
  for (std::size_t i = 0; i < cfg.n_records; ++i) {
    CategoricalRow values(n_fields);
    for (std::size_t f = 0; f < n_fields; ++f) {
      if (static_cast<int>(f) == cfg.item_field) {
        values[f] = detail::draw_item(cfg, times[i], rng);
      } else {
        std::uniform_int_distribution<std::uint32_t> pick(0, cfg.cardinalities[f] - 1);
        values[f] = pick(rng);
      }
    }
    RawRecord r;
    r.id = i;
    r.log_time = times[i];
    if (auto d = sample_outcome(values, cfg, rng)) r.conversion_time = times[i] + *d;
    r.tokens.reserve(n_fields);
    for (auto v : values) r.tokens.push_back(std::to_string(v));
    out.final_cvr.push_back(final_cvr(values, cfg));
    out.values.push_back(std::move(values));
    out.records.push_back(std::move(r));
  }
  return out;
}

inline std::vector<ImpressionRecord> to_records(const GeneratedStream& stream,
                                                const FeatureHasher& hasher,
                                                double holdout_fraction = 0.0) {
  std::vector<ImpressionRecord> out;
  out.reserve(stream.records.size());
  for (const auto& raw : stream.records) out.push_back(to_record(raw, hasher, holdout_fraction));
  return out;
}

inline void write_stream(std::ostream& out, const GeneratedStream& stream) {
  for (const auto& r : stream.records) write_canonical(out, r);
}

}  // namespace ftp
