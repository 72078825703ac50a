#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <zlib.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ftp/config.hpp"
#include "ftp/datagen.hpp"
#include "ftp/ingest.hpp"
#include "ftp/learners.hpp"
#include "ftp/nn/checkpoint.hpp"
#include "ftp/pipelines.hpp"
#include "ftp/sim.hpp"

namespace ftp::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumeric = 3;

inline std::string seed_dir_name(std::uint64_t seed) { return "seed-" + std::to_string(seed); }
inline std::string extlog_name(const std::string& learner) { return "extlog-" + learner + ".bin"; }
inline std::string checkpoint_name(const std::string& learner) { return learner + ".ckpt"; }

// Text output to a plain or gzip file, chosen by the ".gz" suffix.
class TextSink {
 public:
  explicit TextSink(const std::string& path) : path_(path) {
    if (path.size() > 3 && path.compare(path.size() - 3, 3, ".gz") == 0) {
      gz_ = gzopen(path.c_str(), "wb");
      if (!gz_) throw Error("cannot write " + path);
    } else {
      plain_.open(path, std::ios::binary);
      if (!plain_) throw Error("cannot write " + path);
    }
  }
  ~TextSink() {
    if (gz_) gzclose(gz_);
  }
  TextSink(const TextSink&) = delete;
  TextSink& operator=(const TextSink&) = delete;

  void write(const std::string& s) {
    if (gz_) {
      if (!s.empty() && gzwrite(gz_, s.data(), static_cast<unsigned>(s.size())) == 0) throw Error("write failed: " + path_);
    } else {
      plain_ << s;
      if (!plain_) throw Error("write failed: " + path_);
    }
  }

 private:
  std::string path_;
  std::ofstream plain_;
  gzFile gz_ = nullptr;
};

inline LogSpec log_spec(const RunConfig& c) {
  LogSpec spec;
  spec.path = c.data.path;
  spec.format = c.data.format;
  spec.n_fields = c.data.n_fields;
  spec.d_max = c.data.d_max;
  return spec;
}

// The record stream for one seed; synthetic streams are regenerated from it.
inline std::vector<ImpressionRecord> load_dataset(const RunConfig& c, std::uint64_t seed) {
  const FeatureHasher hasher(static_cast<std::uint32_t>(c.n_fields()), c.n_buckets);
  if (c.data.source == DataSource::kSynthetic) {
    return to_records(generate_stream(generator_config(c, seed)), hasher, c.data.holdout_fraction);
  }
  return load_records(log_spec(c), hasher, c.data.holdout_fraction);
}

inline std::optional<double> train_base_rate(std::span<const ImpressionRecord> records) {
  std::size_t n = 0, pos = 0;
  for (const auto& r : records) {
    if (r.split != Split::kTrain) continue;
    ++n;
    pos += r.converts() ? 1 : 0;
  }
  if (n == 0) return std::nullopt;
  return std::clamp(static_cast<double>(pos) / static_cast<double>(n), 1e-4, 1.0 - 1e-4);
}

inline std::vector<std::unique_ptr<Learner>> build_learners(const RunConfig& c, std::uint64_t seed,
                                                            std::optional<double> base_rate) {
  std::vector<std::unique_ptr<Learner>> out;
  const auto net = net_config(c, seed, base_rate);
  for (const auto& spec : c.learners) out.push_back(make_learner(spec, net, c.tasks()));
  return out;
}

inline std::string skyline_of(const RunConfig& c) {
  for (const auto& l : c.learners) {
    if (l.kind == LearnerKind::kProphetStar) return l.name;
  }
  return {};
}

inline void check_eval_window(const RunConfig& c, std::span<const ImpressionRecord> records) {
  if (records.empty()) throw ConfigError("data", "the record stream is empty");
  const Seconds stream_end = records.back().log_time + 1;
  if (c.sim.eval_end && *c.sim.eval_end > stream_end - c.data.d_max) {
    throw ConfigError("sim.eval_end", "must be at most stream end - d_max = " + std::to_string(stream_end - c.data.d_max));
  }
  if (c.sim.eval_begin && *c.sim.eval_begin < records.front().log_time) {
    throw ConfigError("sim.eval_begin", "precedes the first record (" + std::to_string(records.front().log_time) + ")");
  }
  if (!c.sim.eval_end && stream_end - c.data.d_max <= records.front().log_time) {
    throw ConfigError("data.d_max", "the stream is shorter than d_max, so no record has a final label");
  }
}

// Runs one seed and writes its artifacts under `dir`.
inline SimReport run_seed(const RunConfig& c, std::uint64_t seed, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto records = load_dataset(c, seed);
  check_eval_window(c, records);
  fs::create_directories(dir / "checkpoints");
  auto learners = build_learners(c, seed, train_base_rate(records));
  for (auto& l : learners) {
    if (auto* f = dynamic_cast<FtpLearner*>(l.get())) {
      const auto path = dir / extlog_name(f->name());
      fs::remove(path);
      f->extended_log().persist_to(path.string());
    }
  }
  std::vector<Learner*> ptrs;
  for (auto& l : learners) ptrs.push_back(l.get());
  SimReport report;
  try {
    report = run_simulation(records, ptrs, c.sim, skyline_of(c));
  } catch (const ConfigError&) {
    throw;
  } catch (const nn::NumericError&) {
    throw;
  } catch (const TimeRegressionError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("sim", e.what());
  }
  {
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    report.write_csv(csv);
  }
  if (c.plot_data) {
    std::ofstream plot(dir / "plot.csv", std::ios::binary);
    report.write_plot_data(plot);
  }
  {
    auto j = report.to_json();
    j["seed"] = seed;
    j["n_records"] = records.size();
    std::ofstream js(dir / "summary.json", std::ios::binary);
    js << j.dump(2) << '\n';
  }
  for (auto& l : learners) l->save((dir / "checkpoints" / checkpoint_name(l->name())).string());
  return report;
}

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FTP_WORKERS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) n = static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

inline nlohmann::json aggregate(const RunConfig& c, const std::vector<SimReport>& reports) {
  nlohmann::json j;
  j["seeds"] = c.seeds;
  j["learners"] = nlohmann::json::array();
  for (const auto& spec : c.learners) {
    nlohmann::json per_seed = nlohmann::json::array();
    double sum = 0.0;
    for (const auto& r : reports) {
      const double ll = r.summary(spec.name).log_loss;
      per_seed.push_back(ll);
      sum += ll;
    }
    j["learners"].push_back({{"name", spec.name},
                             {"kind", kind_name(spec.kind)},
                             {"mean_log_loss", sum / static_cast<double>(reports.size())},
                             {"log_loss_per_seed", per_seed}});
  }
  return j;
}

inline int cmd_run(RunConfig c, std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const fs::path root(c.output_dir);
  fs::create_directories(root);
  {
    std::ofstream snap(root / "config.toml", std::ios::binary);
    snap << to_toml(c) << '\n';
  }
  std::vector<SimReport> reports(c.seeds.size());
  std::vector<std::exception_ptr> errors(c.seeds.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < c.seeds.size(); i = next++) {
      try {
        reports[i] = run_seed(c, c.seeds[i], root / seed_dir_name(c.seeds[i]));
        std::lock_guard lock(log_mutex);
        err << "seed " << c.seeds[i] << ": done\n";
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = worker_count(c.seeds.size());
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  const auto agg = aggregate(c, reports);
  {
    std::ofstream js(root / "summary.json", std::ios::binary);
    js << agg.dump(2) << '\n';
  }
  out << std::left << std::setw(24) << "learner" << "mean_log_loss\n";
  for (const auto& l : agg["learners"]) {
    out << std::left << std::setw(24) << l["name"].get<std::string>() << detail::fmt_num(l["mean_log_loss"].get<double>())
        << '\n';
  }
  return kExitOk;
}

inline int cmd_gen(const RunConfig& c, std::uint64_t seed, const std::string& out_path, std::ostream& out) {
  TextSink sink(out_path);
  std::size_t n = 0;
  if (c.data.source == DataSource::kSynthetic) {
    const auto stream = generate_stream(generator_config(c, seed));
    std::ostringstream buf;
    for (const auto& r : stream.records) {
      write_canonical(buf, r);
      if (buf.tellp() > (1 << 20)) {
        sink.write(buf.str());
        buf.str({});
      }
    }
    sink.write(buf.str());
    n = stream.records.size();
  } else {
    std::ostringstream buf;
    n = for_each_raw_record(log_spec(c), [&](RawRecord&& r) {
      write_canonical(buf, r);
      if (buf.tellp() > (1 << 20)) {
        sink.write(buf.str());
        buf.str({});
      }
    });
    sink.write(buf.str());
  }
  out << "wrote " << n << " records (" << c.n_fields() << " fields) to " << out_path << '\n';
  return kExitOk;
}

struct LogStats {
  std::size_t records = 0;
  std::size_t conversions = 0;
  std::vector<double> quantile_levels{0.1, 0.25, 0.5, 0.75, 0.9, 0.99};
  std::vector<double> quantiles;  // delay seconds
  std::vector<Seconds> windows;
  std::vector<double> feedback_pct;
};

// Linear interpolation between order statistics (type 7).
inline double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) return 0.0;
  const double h = (static_cast<double>(sorted.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline LogStats log_stats(const LogSpec& spec, const std::vector<Seconds>& windows) {
  LogStats st;
  std::vector<double> delays;
  st.records = for_each_raw_record(spec, [&](RawRecord&& r) {
    if (r.conversion_time) delays.push_back(static_cast<double>(*r.conversion_time - r.log_time));
  });
  st.conversions = delays.size();
  std::sort(delays.begin(), delays.end());
  for (double q : st.quantile_levels) st.quantiles.push_back(quantile_sorted(delays, q));
  st.windows = windows;
  for (Seconds w : windows) {
    const auto within = std::upper_bound(delays.begin(), delays.end(), static_cast<double>(w)) - delays.begin();
    st.feedback_pct.push_back(delays.empty() ? 0.0 : 100.0 * static_cast<double>(within) / delays.size());
  }
  return st;
}

inline std::size_t sniff_canonical_fields(const std::string& path) {
  LogReader reader(path);
  std::string line;
  while (reader.next(line)) {
    if (line.empty()) continue;
    const auto cols = detail::split_tabs(line);
    if (cols.size() < 4) throw ParseError(reader.line_no(), "too few columns for a canonical log");
    return cols.size() - 3;
  }
  throw Error("empty log " + path);
}

struct TaskTable {
  std::uint64_t seed = 0;
  std::string learner;
  std::size_t matured = 0;
  std::vector<TaskStat> tasks;
};

// Feedback and best-task statistics from a run directory's extended logs. The stored
// prophecies are used unless `final_prophet` asks for the end-of-run prophet.
inline std::vector<TaskTable> best_task_tables(const std::filesystem::path& run_dir, bool final_prophet) {
  namespace fs = std::filesystem;
  const auto snap = run_dir / "config.toml";
  if (!fs::exists(snap)) throw ConfigError("run_dir", "no config.toml in " + run_dir.string());
  const RunConfig c = load_config(snap.string());
  std::vector<TaskTable> out;
  for (auto seed : c.seeds) {
    for (const auto& spec : c.learners) {
      if (spec.kind != LearnerKind::kFtp) continue;
      const auto dir = run_dir / seed_dir_name(seed);
      const auto log_path = dir / extlog_name(spec.name);
      if (!fs::exists(log_path)) throw Error("missing extended log " + log_path.string());
      const auto entries = read_extended_log(log_path.string());
      std::optional<nn::TowerNet<float>> prophet;
      if (final_prophet) {
        prophet.emplace(FtpLearner::prophet_config(net_config(c, seed, std::nullopt)));
        nn::CheckpointReader r((dir / "checkpoints" / checkpoint_name(spec.name)).string());
        nn::load_net(r, "prophet.", *prophet);
      }
      TaskTable t;
      t.seed = seed;
      t.learner = spec.name;
      for (const auto& e : entries) t.matured += e.label ? 1 : 0;
      t.tasks = best_task_stats(entries, *spec.schedule, [&](const ExtendedLogEntry& e) {
        if (prophet || !e.prophecy) {
          if (!prophet) throw Error("extended log entry " + std::to_string(e.id) + " has no stored prophecy");
          return static_cast<double>(prophet->predict(e.features));
        }
        return *e.prophecy;
      });
      out.push_back(std::move(t));
    }
  }
  return out;
}

inline void print_task_table(std::ostream& out, const TaskTable& t) {
  out << "seed " << t.seed << "  learner " << t.learner << "  matured entries " << t.matured << '\n';
  out << "d_k\tFeedback%\tBest%\n";
  for (const auto& k : t.tasks) {
    out << format_duration(k.delay) << '\t' << std::fixed << std::setprecision(1) << k.feedback_pct << '\t'
        << k.best_pct << '\n';
  }
  out.unsetf(std::ios::fixed);
  out << std::setprecision(6);
}

// Entry point shared by the ftp binary and the tests.
inline int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Follow the Prophet: online CVR prediction under delayed feedback"};
  app.require_subcommand(1);

  std::string config_path, output_dir, gen_out, run_dir, stats_path, stats_format = "canonical", d_max_text;
  std::vector<std::string> overrides, delays_text;
  std::vector<std::uint64_t> seeds;
  std::optional<std::uint64_t> gen_seed;
  bool plot_data = false, stats_json = false, final_prophet = false;
  std::size_t stats_fields = 0;

  auto* run = app.add_subcommand("run", "run the streaming simulation for every configured seed");
  run->add_option("config", config_path, "TOML config file")->required();
  run->add_option("-o,--output-dir", output_dir, "override run.output_dir");
  run->add_option("--seed", seeds, "override run.seeds (repeatable)");
  run->add_option("--set", overrides, "override a config field, e.g. --set train.lr=0.002");
  run->add_flag("--plot-data", plot_data, "write per-hour relative log loss to plot.csv");

  auto* gen = app.add_subcommand("gen", "write the configured data source as a canonical log");
  gen->add_option("config", config_path, "TOML config file")->required();
  gen->add_option("-o,--out", gen_out, "output path (.gz compresses)")->required();
  gen->add_option("--seed", gen_seed, "generator seed (default: first run seed)");
  gen->add_option("--set", overrides, "override a config field");

  auto* stats = app.add_subcommand("stats", "delay and feedback summary of a log file");
  stats->add_option("log", stats_path, "log file (plain or gzip)")->required();
  stats->add_option("--format", stats_format, "canonical or criteo");
  stats->add_option("--n-fields", stats_fields, "feature fields in a canonical log (default: inferred)");
  stats->add_option("--d-max", d_max_text, "maximum delay (default 48h canonical, 30d criteo)");
  stats->add_option("--delays", delays_text, "feedback windows (default: the standard schedule for d_max)");
  stats->add_flag("--json", stats_json, "emit JSON");

  auto* best = app.add_subcommand("besttask", "feedback and best-task report for a run");
  best->add_option("run_dir", run_dir, "run directory written by `ftp run`")->required();
  best->add_flag("--final-prophet", final_prophet, "score k* with the end-of-run prophet checkpoint");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (run->parsed()) {
      auto c = load_config(config_path, overrides);
      if (!output_dir.empty()) c.output_dir = output_dir;
      if (!seeds.empty()) c.seeds = seeds;
      if (plot_data) c.plot_data = true;
      return cmd_run(std::move(c), out, err);
    }
    if (gen->parsed()) {
      const auto c = load_config(config_path, overrides);
      return cmd_gen(c, gen_seed.value_or(c.seeds.front()), gen_out, out);
    }
    if (stats->parsed()) {
      LogSpec spec;
      spec.path = stats_path;
      if (!std::filesystem::exists(stats_path)) throw ConfigError("log", "no such file: " + stats_path);
      spec.format = detail::parse_format(stats_format, "--format");
      spec.d_max = spec.format == LogFormat::kCriteo ? kCriteoDMax : 48 * kHour;
      if (!d_max_text.empty()) {
        const auto d = detail::parse_duration_text(d_max_text);
        if (!d || *d <= 0) throw ConfigError("--d-max", "cannot parse duration '" + d_max_text + "'");
        spec.d_max = *d;
      }
      spec.n_fields = spec.format == LogFormat::kCanonical
                          ? (stats_fields ? stats_fields : sniff_canonical_fields(stats_path))
                          : 0;
      std::vector<Seconds> windows;
      for (const auto& t : delays_text) {
        const auto d = detail::parse_duration_text(t);
        if (!d || *d <= 0) throw ConfigError("--delays", "cannot parse duration '" + t + "'");
        windows.push_back(*d);
      }
      if (windows.empty()) {
        if (spec.d_max == 30 * kDay) {
          windows = {1 * kDay, 7 * kDay, 14 * kDay, 21 * kDay, 30 * kDay};
        } else if (spec.d_max == 48 * kHour) {
          windows = {1 * kHour, 6 * kHour, 24 * kHour, 48 * kHour};
        } else {
          windows = {spec.d_max};
        }
      }
      const auto st = log_stats(spec, windows);
      if (stats_json) {
        nlohmann::json j{{"records", st.records}, {"conversions", st.conversions}};
        for (std::size_t i = 0; i < st.quantile_levels.size(); ++i) {
          j["delay_quantiles"].push_back({{"q", st.quantile_levels[i]}, {"seconds", st.quantiles[i]}});
        }
        for (std::size_t i = 0; i < st.windows.size(); ++i) {
          j["feedback"].push_back({{"d", st.windows[i]}, {"feedback_pct", st.feedback_pct[i]}});
        }
        out << j.dump(2) << '\n';
      } else {
        out << "records\t" << st.records << '\n';
        out << "conversions\t" << st.conversions << '\n';
        out << "cvr\t" << (st.records ? static_cast<double>(st.conversions) / st.records : 0.0) << '\n';
        out << "delay quantiles (seconds)\n";
        for (std::size_t i = 0; i < st.quantile_levels.size(); ++i) {
          out << "p" << st.quantile_levels[i] * 100 << '\t' << detail::fmt_num(st.quantiles[i]) << '\n';
        }
        out << "d_k\tFeedback%\n";
        for (std::size_t i = 0; i < st.windows.size(); ++i) {
          out << format_duration(st.windows[i]) << '\t' << std::fixed << std::setprecision(1) << st.feedback_pct[i]
              << '\n';
          out.unsetf(std::ios::fixed);
        }
      }
      return kExitOk;
    }
    if (best->parsed()) {
      for (const auto& t : best_task_tables(run_dir, final_prophet)) print_task_table(out, t);
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const nn::NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitFailure;
}

}  // namespace ftp::cli
