#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <toml.hpp>

#include "ftp/core.hpp"
#include "ftp/datagen.hpp"
#include "ftp/ingest.hpp"
#include "ftp/learners.hpp"
#include "ftp/nn/network.hpp"
#include "ftp/sim.hpp"

namespace ftp {

// A configuration problem, tagged with the dotted path of the offending field.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& what) : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class DataSource { kSynthetic, kFile };

struct SyntheticSpec {
  std::size_t n_records = 10000;
  Seconds start = 0;
  Seconds horizon = 7 * kDay;
  std::vector<std::uint32_t> cardinalities{50, 6, 20, 30};
  std::vector<double> field_scales{1.0, 0.5, 0.5, 0.5};
  // Weights are drawn from this seed when set, else from the run seed.
  std::optional<std::uint64_t> weight_seed;
  double bias = -2.0;
  std::vector<DelayComponent> delay_mixture{{0.5, 1.0 / (kHour / 4)}, {0.5, 1.0 / (16 * kHour)}};
  int delay_field = -1;
  double delay_strength = 0.0;
  int item_field = -1;
  Seconds item_lifetime = 0;
};

struct DataSpec {
  DataSource source = DataSource::kSynthetic;
  std::string path;
  LogFormat format = LogFormat::kCanonical;
  std::size_t n_fields = 0;
  Seconds d_max = 48 * kHour;
  double holdout_fraction = 0.0;
};

struct ModelSpec {
  std::uint32_t embed_dim = 8;
  std::uint32_t hidden = 128;
  double leaky_slope = 0.01;
  double embed_init = 0.05;
  bool init_bias_from_base_rate = true;
};

struct RunConfig {
  std::vector<std::uint64_t> seeds{1};
  std::string output_dir = "runs/default";
  DataSpec data;
  SyntheticSpec synthetic;
  std::uint32_t n_buckets = 1u << 20;
  std::optional<TaskSchedule> schedule;
  ModelSpec model;
  TrainConfig train;
  SimConfig sim;
  bool plot_data = false;
  std::vector<LearnerSpec> learners;

  std::size_t n_fields() const {
    if (data.source == DataSource::kSynthetic) return synthetic.cardinalities.size();
    return data.format == LogFormat::kCriteo ? kCriteoIntFields + kCriteoCatFields : data.n_fields;
  }
  const TaskSchedule& tasks() const { return *schedule; }
};

namespace detail {

// "90" (seconds), "15m", "1.5h", "2d".
inline std::optional<Seconds> parse_duration_text(const std::string& text) {
  if (text.empty()) return std::nullopt;
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(text, &pos);
  } catch (const std::exception&) {
    return std::nullopt;
  }
  const std::string unit = text.substr(pos);
  double mult = 1.0;
  if (unit.empty() || unit == "s") {
    mult = 1.0;
  } else if (unit == "m") {
    mult = 60.0;
  } else if (unit == "h") {
    mult = static_cast<double>(kHour);
  } else if (unit == "d") {
    mult = static_cast<double>(kDay);
  } else {
    return std::nullopt;
  }
  if (!std::isfinite(v)) return std::nullopt;
  return static_cast<Seconds>(std::llround(v * mult));
}

inline std::string join(const std::string& a, const std::string& b) { return a.empty() ? b : a + "." + b; }

inline void check_keys(const toml::table& t, const std::string& where, std::initializer_list<const char*> allowed) {
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : t) {
    if (!ok.count(std::string(k.str()))) throw ConfigError(join(where, std::string(k.str())), "unknown key");
  }
}

inline Seconds duration_of(const toml::node& n, const std::string& field) {
  if (auto i = n.value_exact<std::int64_t>()) return *i;
  if (auto s = n.value_exact<std::string>()) {
    if (auto d = parse_duration_text(*s)) return *d;
    throw ConfigError(field, "cannot parse duration '" + *s + "' (use seconds or a suffix s/m/h/d)");
  }
  throw ConfigError(field, "expected a duration (integer seconds or a string like \"6h\")");
}

inline double number_of(const toml::node& n, const std::string& field) {
  if (auto d = n.value<double>()) return *d;
  throw ConfigError(field, "expected a number");
}

inline std::int64_t integer_of(const toml::node& n, const std::string& field) {
  if (auto i = n.value_exact<std::int64_t>()) return *i;
  throw ConfigError(field, "expected an integer");
}

inline bool bool_of(const toml::node& n, const std::string& field) {
  if (auto b = n.value_exact<bool>()) return *b;
  throw ConfigError(field, "expected true or false");
}

inline std::string string_of(const toml::node& n, const std::string& field) {
  if (auto s = n.value_exact<std::string>()) return *s;
  throw ConfigError(field, "expected a string");
}

inline const toml::table* table_of(const toml::table& root, const char* key) {
  const auto* n = root.get(key);
  if (!n) return nullptr;
  if (!n->is_table()) throw ConfigError(key, "expected a table");
  return n->as_table();
}

inline const toml::array& array_of(const toml::node& n, const std::string& field) {
  if (!n.is_array()) throw ConfigError(field, "expected an array");
  return *n.as_array();
}

template <class Fn>
void with(const toml::table* t, const std::string& where, const char* key, Fn&& fn) {
  if (!t) return;
  if (const auto* n = t->get(key)) fn(*n, join(where, key));
}

inline LearnerKind parse_kind(const std::string& s, const std::string& field) {
  if (s == "ftp") return LearnerKind::kFtp;
  if (s == "prophet") return LearnerKind::kProphet;
  if (s == "prophet_star") return LearnerKind::kProphetStar;
  if (s == "waiting") return LearnerKind::kWaiting;
  if (s == "pu") return LearnerKind::kPu;
  if (s == "fnw") return LearnerKind::kFnw;
  if (s == "fnc") return LearnerKind::kFnc;
  throw ConfigError(field, "unknown learner kind '" + s + "'");
}

inline TaskSchedule parse_schedule(const toml::node& n, const std::string& field) {
  std::vector<Seconds> d;
  const auto& arr = array_of(n, field);
  for (std::size_t i = 0; i < arr.size(); ++i) d.push_back(duration_of(arr[i], field + "[" + std::to_string(i) + "]"));
  try {
    return TaskSchedule(std::move(d));
  } catch (const Error& e) {
    throw ConfigError(field, e.what());
  }
}

inline void parse_train_keys(const toml::table& t, const std::string& where, TrainConfig& tc) {
  with(&t, where, "lr", [&](const toml::node& n, const std::string& f) { tc.adam.lr = number_of(n, f); });
  with(&t, where, "l2", [&](const toml::node& n, const std::string& f) { tc.adam.l2 = number_of(n, f); });
  with(&t, where, "beta1", [&](const toml::node& n, const std::string& f) { tc.adam.beta1 = number_of(n, f); });
  with(&t, where, "beta2", [&](const toml::node& n, const std::string& f) { tc.adam.beta2 = number_of(n, f); });
  with(&t, where, "eps", [&](const toml::node& n, const std::string& f) { tc.adam.eps = number_of(n, f); });
  with(&t, where, "batch_size", [&](const toml::node& n, const std::string& f) {
    const auto v = integer_of(n, f);
    if (v <= 0) throw ConfigError(f, "must be positive");
    tc.batch_size = static_cast<std::size_t>(v);
  });
  with(&t, where, "policy_batch_size", [&](const toml::node& n, const std::string& f) {
    const auto v = integer_of(n, f);
    if (v <= 0) throw ConfigError(f, "must be positive");
    tc.policy_batch_size = static_cast<std::size_t>(v);
  });
  with(&t, where, "policy_lr_scale",
       [&](const toml::node& n, const std::string& f) { tc.policy_lr_scale = number_of(n, f); });
  with(&t, where, "pu_non_negative",
       [&](const toml::node& n, const std::string& f) { tc.pu_non_negative = bool_of(n, f); });
  if (!(tc.adam.lr > 0.0)) throw ConfigError(join(where, "lr"), "must be positive");
  if (tc.adam.l2 < 0.0) throw ConfigError(join(where, "l2"), "must be non-negative");
}

#define FTP_TRAIN_KEYS "lr", "l2", "beta1", "beta2", "eps", "batch_size", "policy_batch_size", "policy_lr_scale", \
                       "pu_non_negative"

inline LogFormat parse_format(const std::string& s, const std::string& field) {
  if (s == "canonical") return LogFormat::kCanonical;
  if (s == "criteo") return LogFormat::kCriteo;
  throw ConfigError(field, "unknown format '" + s + "' (canonical or criteo)");
}

inline const char* format_name(LogFormat f) { return f == LogFormat::kCriteo ? "criteo" : "canonical"; }

}  // namespace detail

// Applies "section.key=value" overrides; the value is parsed as TOML.
inline void apply_override(toml::table& root, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string value = assignment.substr(eq + 1);
  toml::table parsed;
  try {
    parsed = toml::parse("v = " + value);
  } catch (const toml::parse_error&) {
    try {
      parsed = toml::parse("v = \"" + value + "\"");
    } catch (const toml::parse_error& e) {
      throw ConfigError(path, std::string("bad override value: ") + std::string(e.description()));
    }
  }
  toml::table* t = &root;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      t->insert_or_assign(key, *parsed.get("v"));
      return;
    }
    auto* child = t->get(key);
    if (!child) {
      t->insert(key, toml::table{});
      child = t->get(key);
    }
    if (!child->is_table()) throw ConfigError(path, "'" + key + "' is not a table");
    t = child->as_table();
    start = dot + 1;
  }
}

// Resolves a parsed TOML document into a validated RunConfig. Relative data
// paths are taken relative to `base_dir`.
inline RunConfig resolve_config(const toml::table& root, const std::filesystem::path& base_dir = {}) {
  using namespace detail;
  check_keys(root, "", {"run", "data", "synthetic", "features", "schedule", "model", "train", "sim", "learners"});
  RunConfig c;

  if (const auto* run = table_of(root, "run")) {
    check_keys(*run, "run", {"seeds", "output_dir"});
    with(run, "run", "seeds", [&](const toml::node& n, const std::string& f) {
      c.seeds.clear();
      const auto& arr = array_of(n, f);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto v = integer_of(arr[i], f + "[" + std::to_string(i) + "]");
        if (v < 0) throw ConfigError(f, "seeds must be non-negative");
        c.seeds.push_back(static_cast<std::uint64_t>(v));
      }
    });
    with(run, "run", "output_dir", [&](const toml::node& n, const std::string& f) { c.output_dir = string_of(n, f); });
  }
  if (c.seeds.empty()) throw ConfigError("run.seeds", "at least one seed is required");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size()) {
    throw ConfigError("run.seeds", "duplicate seed");
  }

  if (const auto* data = table_of(root, "data")) {
    check_keys(*data, "data", {"source", "path", "format", "n_fields", "d_max", "holdout_fraction"});
    with(data, "data", "source", [&](const toml::node& n, const std::string& f) {
      const auto s = string_of(n, f);
      if (s == "synthetic") {
        c.data.source = DataSource::kSynthetic;
      } else if (s == "file") {
        c.data.source = DataSource::kFile;
      } else {
        throw ConfigError(f, "unknown source '" + s + "' (synthetic or file)");
      }
    });
    with(data, "data", "path", [&](const toml::node& n, const std::string& f) { c.data.path = string_of(n, f); });
    with(data, "data", "format", [&](const toml::node& n, const std::string& f) {
      c.data.format = parse_format(string_of(n, f), f);
    });
    with(data, "data", "n_fields", [&](const toml::node& n, const std::string& f) {
      const auto v = integer_of(n, f);
      if (v <= 0) throw ConfigError(f, "must be positive");
      c.data.n_fields = static_cast<std::size_t>(v);
    });
    with(data, "data", "d_max", [&](const toml::node& n, const std::string& f) { c.data.d_max = duration_of(n, f); });
    with(data, "data", "holdout_fraction",
         [&](const toml::node& n, const std::string& f) { c.data.holdout_fraction = number_of(n, f); });
  }
  if (c.data.d_max <= 0) throw ConfigError("data.d_max", "must be positive");
  if (c.data.holdout_fraction < 0.0 || c.data.holdout_fraction >= 1.0) {
    throw ConfigError("data.holdout_fraction", "must be in [0, 1)");
  }
  if (c.data.source == DataSource::kFile) {
    if (c.data.path.empty()) throw ConfigError("data.path", "required when data.source = \"file\"");
    std::filesystem::path p(c.data.path);
    if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
    if (!std::filesystem::exists(p)) throw ConfigError("data.path", "no such file: " + p.string());
    c.data.path = std::filesystem::absolute(p).lexically_normal().string();
    if (c.data.format == LogFormat::kCanonical && c.data.n_fields == 0) {
      throw ConfigError("data.n_fields", "required for canonical logs");
    }
  }

  if (const auto* syn = table_of(root, "synthetic")) {
    check_keys(*syn, "synthetic", {"n_records", "start", "horizon", "cardinalities", "field_scales", "weight_seed",
                                   "bias", "delay_mixture", "delay_field", "delay_strength", "item_field",
                                   "item_lifetime"});
    auto& s = c.synthetic;
    with(syn, "synthetic", "n_records", [&](const toml::node& n, const std::string& f) {
      const auto v = integer_of(n, f);
      if (v <= 0) throw ConfigError(f, "must be positive");
      s.n_records = static_cast<std::size_t>(v);
    });
    with(syn, "synthetic", "start", [&](const toml::node& n, const std::string& f) { s.start = duration_of(n, f); });
    with(syn, "synthetic", "horizon", [&](const toml::node& n, const std::string& f) { s.horizon = duration_of(n, f); });
    with(syn, "synthetic", "cardinalities", [&](const toml::node& n, const std::string& f) {
      s.cardinalities.clear();
      const auto& arr = array_of(n, f);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const auto v = integer_of(arr[i], f + "[" + std::to_string(i) + "]");
        if (v <= 0) throw ConfigError(f, "cardinalities must be positive");
        s.cardinalities.push_back(static_cast<std::uint32_t>(v));
      }
    });
    with(syn, "synthetic", "field_scales", [&](const toml::node& n, const std::string& f) {
      s.field_scales.clear();
      const auto& arr = array_of(n, f);
      for (std::size_t i = 0; i < arr.size(); ++i) s.field_scales.push_back(number_of(arr[i], f));
    });
    with(syn, "synthetic", "weight_seed", [&](const toml::node& n, const std::string& f) {
      s.weight_seed = static_cast<std::uint64_t>(integer_of(n, f));
    });
    with(syn, "synthetic", "bias", [&](const toml::node& n, const std::string& f) { s.bias = number_of(n, f); });
    with(syn, "synthetic", "delay_mixture", [&](const toml::node& n, const std::string& f) {
      s.delay_mixture.clear();
      const auto& arr = array_of(n, f);
      for (std::size_t i = 0; i < arr.size(); ++i) {
        const std::string at = f + "[" + std::to_string(i) + "]";
        if (!arr[i].is_table()) throw ConfigError(at, "expected a table with weight and mean");
        const auto& t = *arr[i].as_table();
        check_keys(t, at, {"weight", "mean"});
        DelayComponent comp;
        with(&t, at, "weight", [&](const toml::node& m, const std::string& g) { comp.weight = number_of(m, g); });
        const auto* mean = t.get("mean");
        if (!mean) throw ConfigError(at + ".mean", "required");
        const Seconds m = duration_of(*mean, at + ".mean");
        if (m <= 0) throw ConfigError(at + ".mean", "must be positive");
        comp.rate = 1.0 / static_cast<double>(m);
        s.delay_mixture.push_back(comp);
      }
    });
    with(syn, "synthetic", "delay_field",
         [&](const toml::node& n, const std::string& f) { s.delay_field = static_cast<int>(integer_of(n, f)); });
    with(syn, "synthetic", "delay_strength",
         [&](const toml::node& n, const std::string& f) { s.delay_strength = number_of(n, f); });
    with(syn, "synthetic", "item_field",
         [&](const toml::node& n, const std::string& f) { s.item_field = static_cast<int>(integer_of(n, f)); });
    with(syn, "synthetic", "item_lifetime",
         [&](const toml::node& n, const std::string& f) { s.item_lifetime = duration_of(n, f); });
  }
  if (c.data.source == DataSource::kSynthetic) {
    const auto& s = c.synthetic;
    if (s.field_scales.size() != s.cardinalities.size()) {
      throw ConfigError("synthetic.field_scales", "needs one entry per cardinality");
    }
    GeneratorConfig probe;
    probe.n_records = s.n_records;
    probe.horizon = s.horizon;
    probe.cardinalities = s.cardinalities;
    probe.true_weights.assign(std::accumulate(s.cardinalities.begin(), s.cardinalities.end(), std::size_t{0}), 0.0);
    probe.delay_mixture = s.delay_mixture;
    probe.d_max = c.data.d_max;
    probe.delay_field = s.delay_field;
    probe.delay_strength = s.delay_strength;
    probe.item_field = s.item_field;
    probe.item_lifetime = s.item_lifetime;
    try {
      validate(probe);
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError("synthetic", e.what());
    }
  }

  if (const auto* feat = table_of(root, "features")) {
    check_keys(*feat, "features", {"n_buckets"});
    with(feat, "features", "n_buckets", [&](const toml::node& n, const std::string& f) {
      const auto v = integer_of(n, f);
      if (v < 2 || v > (1LL << 30) || (v & (v - 1)) != 0) throw ConfigError(f, "must be a power of two >= 2");
      c.n_buckets = static_cast<std::uint32_t>(v);
    });
  }

  if (const auto* sch = table_of(root, "schedule")) {
    check_keys(*sch, "schedule", {"delays"});
    with(sch, "schedule", "delays", [&](const toml::node& n, const std::string& f) { c.schedule = parse_schedule(n, f); });
  }
  if (!c.schedule) {
    if (c.data.d_max == 30 * kDay) {
      c.schedule = TaskSchedule({1 * kDay, 7 * kDay, 14 * kDay, 21 * kDay, 30 * kDay});
    } else if (c.data.d_max == 48 * kHour) {
      c.schedule = TaskSchedule({1 * kHour, 6 * kHour, 24 * kHour, 48 * kHour});
    } else {
      throw ConfigError("schedule.delays", "required when data.d_max is neither 48h nor 30d");
    }
  }
  if (c.schedule->d_max() != c.data.d_max) {
    throw ConfigError("schedule.delays", "last delay (" + std::to_string(c.schedule->d_max()) +
                                             "s) must equal data.d_max (" + std::to_string(c.data.d_max) + "s)");
  }

  if (const auto* model = table_of(root, "model")) {
    check_keys(*model, "model", {"embed_dim", "hidden", "leaky_slope", "embed_init", "init_bias_from_base_rate"});
    auto positive_u32 = [](const toml::node& n, const std::string& f) {
      const auto v = integer_of(n, f);
      if (v <= 0 || v > 1 << 16) throw ConfigError(f, "must be in [1, 65536]");
      return static_cast<std::uint32_t>(v);
    };
    with(model, "model", "embed_dim",
         [&](const toml::node& n, const std::string& f) { c.model.embed_dim = positive_u32(n, f); });
    with(model, "model", "hidden", [&](const toml::node& n, const std::string& f) { c.model.hidden = positive_u32(n, f); });
    with(model, "model", "leaky_slope",
         [&](const toml::node& n, const std::string& f) { c.model.leaky_slope = number_of(n, f); });
    with(model, "model", "embed_init",
         [&](const toml::node& n, const std::string& f) { c.model.embed_init = number_of(n, f); });
    with(model, "model", "init_bias_from_base_rate",
         [&](const toml::node& n, const std::string& f) { c.model.init_bias_from_base_rate = bool_of(n, f); });
  }

  if (const auto* train = table_of(root, "train")) {
    check_keys(*train, "train", {FTP_TRAIN_KEYS});
    parse_train_keys(*train, "train", c.train);
  }

  c.sim.d_max = c.data.d_max;
  if (const auto* sim = table_of(root, "sim")) {
    check_keys(*sim, "sim", {"step", "warmup_fraction", "eval_begin", "eval_end", "plot_data"});
    with(sim, "sim", "step", [&](const toml::node& n, const std::string& f) {
      c.sim.step = duration_of(n, f);
      if (c.sim.step <= 0) throw ConfigError(f, "must be positive");
    });
    with(sim, "sim", "warmup_fraction", [&](const toml::node& n, const std::string& f) {
      c.sim.warmup_fraction = number_of(n, f);
      if (c.sim.warmup_fraction < 0.0 || c.sim.warmup_fraction >= 1.0) throw ConfigError(f, "must be in [0, 1)");
    });
    with(sim, "sim", "eval_begin", [&](const toml::node& n, const std::string& f) { c.sim.eval_begin = duration_of(n, f); });
    with(sim, "sim", "eval_end", [&](const toml::node& n, const std::string& f) { c.sim.eval_end = duration_of(n, f); });
    with(sim, "sim", "plot_data", [&](const toml::node& n, const std::string& f) { c.plot_data = bool_of(n, f); });
  }

  const auto* learners = root.get("learners");
  if (!learners) throw ConfigError("learners", "at least one [[learners]] entry is required");
  const auto& arr = array_of(*learners, "learners");
  std::set<std::string> names;
  for (std::size_t i = 0; i < arr.size(); ++i) {
    const std::string at = "learners[" + std::to_string(i) + "]";
    if (!arr[i].is_table()) throw ConfigError(at, "expected a table");
    const auto& t = *arr[i].as_table();
    check_keys(t, at, {"kind", "name", "delay", "schedule", FTP_TRAIN_KEYS});
    LearnerSpec spec;
    const auto* kind = t.get("kind");
    if (!kind) throw ConfigError(at + ".kind", "required");
    spec.kind = parse_kind(string_of(*kind, at + ".kind"), at + ".kind");
    with(&t, at, "name", [&](const toml::node& n, const std::string& f) { spec.name = string_of(n, f); });
    with(&t, at, "delay", [&](const toml::node& n, const std::string& f) {
      if (spec.kind != LearnerKind::kWaiting) throw ConfigError(f, "only waiting learners take a delay");
      spec.waiting_delay = duration_of(n, f);
      if (*spec.waiting_delay <= 0) throw ConfigError(f, "must be positive");
      if (*spec.waiting_delay > c.data.d_max) throw ConfigError(f, "must not exceed data.d_max");
    });
    if (spec.kind == LearnerKind::kWaiting && !spec.waiting_delay) throw ConfigError(at + ".delay", "required for waiting");
    with(&t, at, "schedule", [&](const toml::node& n, const std::string& f) {
      if (spec.kind != LearnerKind::kFtp) throw ConfigError(f, "only ftp learners take a schedule");
      spec.schedule = parse_schedule(n, f);
      if (spec.schedule->d_max() != c.data.d_max) throw ConfigError(f, "last delay must equal data.d_max");
    });
    if (spec.kind == LearnerKind::kFtp && !spec.schedule) spec.schedule = c.schedule;
    spec.train = c.train;
    parse_train_keys(t, at, spec.train);
    spec.name = detail::default_name(spec);
    if (spec.name.find(',') != std::string::npos || spec.name.find('/') != std::string::npos) {
      throw ConfigError(at + ".name", "must not contain ',' or '/'");
    }
    if (!names.insert(spec.name).second) throw ConfigError(at + ".name", "duplicate learner name '" + spec.name + "'");
    c.learners.push_back(std::move(spec));
  }
  if (c.learners.empty()) throw ConfigError("learners", "at least one learner is required");
  return c;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  toml::table root;
  try {
    root = toml::parse_file(path);
  } catch (const toml::parse_error& e) {
    if (!std::filesystem::exists(path)) throw ConfigError("config", "no such file: " + path);
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    throw ConfigError(path, msg.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  return resolve_config(root, std::filesystem::path(path).parent_path());
}

// The fully resolved configuration as TOML; loading it reproduces the run.
inline toml::table to_toml(const RunConfig& c) {
  toml::table root;
  toml::array seeds;
  for (auto s : c.seeds) seeds.push_back(static_cast<std::int64_t>(s));
  root.insert("run", toml::table{{"seeds", seeds}, {"output_dir", c.output_dir}});

  toml::table data{{"source", c.data.source == DataSource::kFile ? "file" : "synthetic"},
                   {"d_max", c.data.d_max},
                   {"holdout_fraction", c.data.holdout_fraction}};
  if (c.data.source == DataSource::kFile) {
    data.insert("path", c.data.path);
    data.insert("format", detail::format_name(c.data.format));
    if (c.data.format == LogFormat::kCanonical) data.insert("n_fields", static_cast<std::int64_t>(c.data.n_fields));
  }
  root.insert("data", data);

  if (c.data.source == DataSource::kSynthetic) {
    const auto& s = c.synthetic;
    toml::array cards, scales, mixture;
    for (auto v : s.cardinalities) cards.push_back(static_cast<std::int64_t>(v));
    for (auto v : s.field_scales) scales.push_back(v);
    for (const auto& m : s.delay_mixture) {
      mixture.push_back(toml::table{{"weight", m.weight}, {"mean", static_cast<std::int64_t>(std::llround(1.0 / m.rate))}});
    }
    toml::table syn{{"n_records", static_cast<std::int64_t>(s.n_records)},
                    {"start", s.start},
                    {"horizon", s.horizon},
                    {"cardinalities", cards},
                    {"field_scales", scales},
                    {"bias", s.bias},
                    {"delay_mixture", mixture},
                    {"delay_field", s.delay_field},
                    {"delay_strength", s.delay_strength},
                    {"item_field", s.item_field},
                    {"item_lifetime", s.item_lifetime}};
    if (s.weight_seed) syn.insert("weight_seed", static_cast<std::int64_t>(*s.weight_seed));
    root.insert("synthetic", syn);
  }

  root.insert("features", toml::table{{"n_buckets", static_cast<std::int64_t>(c.n_buckets)}});
  toml::array delays;
  for (auto d : c.schedule->delays()) delays.push_back(d);
  root.insert("schedule", toml::table{{"delays", delays}});
  root.insert("model", toml::table{{"embed_dim", static_cast<std::int64_t>(c.model.embed_dim)},
                                   {"hidden", static_cast<std::int64_t>(c.model.hidden)},
                                   {"leaky_slope", c.model.leaky_slope},
                                   {"embed_init", c.model.embed_init},
                                   {"init_bias_from_base_rate", c.model.init_bias_from_base_rate}});
  auto train_table = [](const TrainConfig& t) {
    return toml::table{{"lr", t.adam.lr},
                       {"l2", t.adam.l2},
                       {"beta1", t.adam.beta1},
                       {"beta2", t.adam.beta2},
                       {"eps", t.adam.eps},
                       {"batch_size", static_cast<std::int64_t>(t.batch_size)},
                       {"policy_batch_size", static_cast<std::int64_t>(t.policy_batch_size)},
                       {"policy_lr_scale", t.policy_lr_scale},
                       {"pu_non_negative", t.pu_non_negative}};
  };
  root.insert("train", train_table(c.train));
  toml::table sim{{"step", c.sim.step}, {"warmup_fraction", c.sim.warmup_fraction}, {"plot_data", c.plot_data}};
  if (c.sim.eval_begin) sim.insert("eval_begin", *c.sim.eval_begin);
  if (c.sim.eval_end) sim.insert("eval_end", *c.sim.eval_end);
  root.insert("sim", sim);

  toml::array learners;
  for (const auto& l : c.learners) {
    toml::table t = train_table(l.train);
    t.insert("kind", kind_name(l.kind));
    t.insert("name", l.name);
    if (l.waiting_delay) t.insert("delay", *l.waiting_delay);
    if (l.kind == LearnerKind::kFtp && l.schedule) {
      toml::array d;
      for (auto v : l.schedule->delays()) d.push_back(v);
      t.insert("schedule", d);
    }
    learners.push_back(t);
  }
  root.insert("learners", learners);
  return root;
}

inline GeneratorConfig generator_config(const RunConfig& c, std::uint64_t seed) {
  const auto& s = c.synthetic;
  GeneratorConfig g;
  g.seed = seed;
  g.n_records = s.n_records;
  g.start = s.start;
  g.horizon = s.horizon;
  g.cardinalities = s.cardinalities;
  g.true_weights = make_true_weights(s.cardinalities, s.field_scales,
                                     s.weight_seed.value_or(detail::splitmix64(seed ^ 0x77e16475ULL)));
  g.bias = s.bias;
  g.delay_mixture = s.delay_mixture;
  g.d_max = c.data.d_max;
  g.delay_field = s.delay_field;
  g.delay_strength = s.delay_strength;
  g.item_field = s.item_field;
  g.item_lifetime = s.item_lifetime;
  return g;
}

inline nn::NetConfig net_config(const RunConfig& c, std::uint64_t seed, std::optional<double> base_rate) {
  nn::NetConfig n;
  n.n_fields = static_cast<std::uint32_t>(c.n_fields());
  n.n_buckets = c.n_buckets;
  n.embed_dim = c.model.embed_dim;
  n.hidden = c.model.hidden;
  n.leaky_slope = c.model.leaky_slope;
  n.embed_init = c.model.embed_init;
  if (c.model.init_bias_from_base_rate) n.init_base_rate = base_rate;
  n.seed = seed;
  return n;
}

}  // namespace ftp
