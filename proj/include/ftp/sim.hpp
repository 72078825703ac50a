#pragma once

#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ftp/core.hpp"
#include "ftp/learners.hpp"
#include "ftp/metrics.hpp"
#include "ftp/nn/tensor.hpp"
#include "ftp/pipelines.hpp"

namespace ftp {

struct SimConfig {
  Seconds step = kHour;
  Seconds d_max = 0;
  double warmup_fraction = 0.3;
  std::optional<Seconds> eval_begin;
  std::optional<Seconds> eval_end;
  // Instrumentation: learners that must not peek see a copy of the stream in
  // which every conversion time later than tau is falsified at each step.
  bool poison_future = false;
};

struct HourRow {
  Seconds tau = 0;
  std::string learner;
  std::size_t n_eval = 0;
  std::optional<double> log_loss;
  std::optional<double> auc;
  std::optional<double> calibration;
  std::size_t train_samples = 0;
  double train_loss = 0.0;
};

struct LearnerSummary {
  std::string learner;
  bool skyline = false;
  std::size_t n_eval = 0;
  double log_loss = 0.0;
  std::optional<double> auc;
  std::optional<double> calibration;
  std::optional<double> relative_log_loss;  // log_loss / skyline - 1
  std::optional<double> relative_auc;       // auc / skyline - 1
  std::size_t calibration_clamps = 0;
};

struct TaskStat {
  Seconds delay = 0;
  double feedback_pct = 0.0;
  double best_pct = 0.0;
  std::size_t best_count = 0;
};

struct PolicyAccuracy {
  std::size_t n = 0;
  std::size_t policy_hits = 0;
  std::size_t best_constant_task = 0;
  std::size_t best_constant_hits = 0;

  double policy_rate() const { return n ? static_cast<double>(policy_hits) / n : 0.0; }
  double constant_rate() const { return n ? static_cast<double>(best_constant_hits) / n : 0.0; }
};

struct FtpDiagnostics {
  std::string learner;
  std::vector<TaskStat> tasks;
  PolicyAccuracy policy;
  std::size_t matured_entries = 0;
};

struct SimReport {
  Seconds eval_begin = 0;
  Seconds eval_end = 0;
  std::vector<HourRow> rows;
  std::vector<LearnerSummary> summaries;
  std::vector<FtpDiagnostics> ftp;

  const LearnerSummary& summary(const std::string& learner) const {
    for (const auto& s : summaries) {
      if (s.learner == learner) return s;
    }
    throw Error("no learner named '" + learner + "' in report");
  }

  void write_csv(std::ostream& out) const;
  void write_plot_data(std::ostream& out) const;
  nlohmann::json to_json() const;
};

namespace detail {

inline std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline std::string fmt_opt(const std::optional<double>& v) { return v ? fmt_num(*v) : std::string(); }

inline nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline void SimReport::write_csv(std::ostream& out) const {
  out << "tau,learner,n_eval,log_loss,auc,calibration,train_samples,train_loss\n";
  for (const auto& r : rows) {
    out << r.tau << ',' << r.learner << ',' << r.n_eval << ',' << detail::fmt_opt(r.log_loss) << ','
        << detail::fmt_opt(r.auc) << ',' << detail::fmt_opt(r.calibration) << ',' << r.train_samples << ','
        << detail::fmt_num(r.train_loss) << '\n';
  }
}

// Per-hour log loss relative to the skyline learner, one row per hour and learner.
inline void SimReport::write_plot_data(std::ostream& out) const {
  out << "tau,learner,relative_log_loss\n";
  std::string sky;
  for (const auto& s : summaries) {
    if (s.skyline) sky = s.learner;
  }
  if (sky.empty()) return;
  std::size_t i = 0;
  while (i < rows.size()) {
    std::size_t j = i;
    std::optional<double> base;
    while (j < rows.size() && rows[j].tau == rows[i].tau) {
      if (rows[j].learner == sky) base = rows[j].log_loss;
      ++j;
    }
    for (std::size_t k = i; k < j; ++k) {
      if (rows[k].learner == sky || !base || !rows[k].log_loss || *base == 0.0) continue;
      out << rows[k].tau << ',' << rows[k].learner << ',' << detail::fmt_num(*rows[k].log_loss / *base - 1.0) << '\n';
    }
    i = j;
  }
}

inline nlohmann::json SimReport::to_json() const {
  nlohmann::json j;
  j["eval_begin"] = eval_begin;
  j["eval_end"] = eval_end;
  j["learners"] = nlohmann::json::array();
  for (const auto& s : summaries) {
    j["learners"].push_back({{"name", s.learner},
                             {"skyline", s.skyline},
                             {"n_eval", s.n_eval},
                             {"log_loss", s.log_loss},
                             {"auc", detail::opt_json(s.auc)},
                             {"calibration", detail::opt_json(s.calibration)},
                             {"relative_log_loss", detail::opt_json(s.relative_log_loss)},
                             {"relative_auc", detail::opt_json(s.relative_auc)},
                             {"calibration_clamps", s.calibration_clamps}});
  }
  j["ftp"] = nlohmann::json::array();
  for (const auto& f : ftp) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const auto& t : f.tasks) {
      tasks.push_back({{"delay", t.delay}, {"feedback_pct", t.feedback_pct}, {"best_pct", t.best_pct},
                       {"best_count", t.best_count}});
    }
    j["ftp"].push_back({{"learner", f.learner},
                        {"matured_entries", f.matured_entries},
                        {"tasks", tasks},
                        {"policy",
                         {{"n", f.policy.n},
                          {"policy_hits", f.policy.policy_hits},
                          {"best_constant_task", f.policy.best_constant_task},
                          {"best_constant_hits", f.policy.best_constant_hits}}}});
  }
  return j;
}

// Statistics over matured extended-log entries: the share of
// conversions with delay <= d_k, and how often each task is k*. `prophecy`
// maps an entry to the prophet's prediction for it.
template <class Entries, class Prophet>
std::vector<TaskStat> best_task_stats(const Entries& entries, const TaskSchedule& schedule, Prophet&& prophecy) {
  std::vector<TaskStat> out(schedule.size());
  for (std::size_t k = 0; k < schedule.size(); ++k) out[k].delay = schedule[k];
  std::size_t conversions = 0;
  std::vector<std::size_t> within(schedule.size(), 0);
  std::size_t matured = 0;
  for (const auto& e : entries) {
    if (!e.label) continue;
    ++matured;
    if (*e.label == 1 && e.conversion_time) {
      ++conversions;
      const Seconds d = *e.conversion_time - e.log_time;
      for (std::size_t k = 0; k < schedule.size(); ++k) within[k] += d <= schedule[k] ? 1 : 0;
    }
    ++out[best_task(prophecy(e), e.task_preds)].best_count;
  }
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    out[k].feedback_pct = conversions ? 100.0 * static_cast<double>(within[k]) / conversions : 0.0;
    out[k].best_pct = matured ? 100.0 * static_cast<double>(out[k].best_count) / matured : 0.0;
  }
  return out;
}

// How often argmax_k g_k(x) hits k*, against the best single constant task.
template <class Entries, class Prophet, class Policy, class Filter>
PolicyAccuracy policy_accuracy(const Entries& entries, std::size_t n_tasks, Prophet&& prophecy, Policy&& policy,
                               Filter&& keep) {
  PolicyAccuracy acc;
  std::vector<std::size_t> counts(n_tasks, 0);
  for (const auto& e : entries) {
    if (!keep(e)) continue;
    const std::size_t kstar = best_task(prophecy(e), e.task_preds);
    const auto g = policy(e.features);
    const std::size_t pick = static_cast<std::size_t>(std::max_element(g.begin(), g.end()) - g.begin());
    ++acc.n;
    acc.policy_hits += pick == kstar ? 1 : 0;
    ++counts[kstar];
  }
  acc.best_constant_task = static_cast<std::size_t>(std::max_element(counts.begin(), counts.end()) - counts.begin());
  acc.best_constant_hits = counts.empty() ? 0 : counts[acc.best_constant_task];
  return acc;
}

namespace detail {

inline void poison_after(std::span<const ImpressionRecord> truth, std::span<ImpressionRecord> visible, Seconds tau) {
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto& t = truth[i].conversion_time;
    if (t && *t <= tau) {
      visible[i].conversion_time = t;
    } else if (t) {
      visible[i].conversion_time.reset();
    } else {
      visible[i].conversion_time = std::max(tau, truth[i].log_time) + 1;
    }
  }
}

}  // namespace detail

// Hour-by-hour replay: at each tau every learner updates on what its pipelines
// release, then predicts the eval records logged in [tau, tau + step), then
// the records of that interval enter the stream (extended-log capture).
// Metrics use final labels. `skyline` names the learner relative metrics use.
inline SimReport run_simulation(std::span<const ImpressionRecord> records, std::span<Learner* const> learners,
                                const SimConfig& cfg, const std::string& skyline = "prophet_star") {
  if (records.empty()) throw Error("simulation: empty record stream");
  if (!sorted_by_log_time(records)) throw Error("simulation: records are not sorted by log time");
  if (cfg.d_max <= 0) throw Error("simulation: d_max must be positive");
  if (cfg.step <= 0) throw Error("simulation: step must be positive");
  if (cfg.warmup_fraction < 0.0 || cfg.warmup_fraction >= 1.0) throw Error("simulation: warmup_fraction must be in [0, 1)");

  const Seconds stream_begin = records.front().log_time;
  const Seconds stream_end = records.back().log_time + 1;
  const Seconds warm =
      stream_begin + static_cast<Seconds>(std::floor(cfg.warmup_fraction * static_cast<double>(stream_end - stream_begin)));
  const Seconds eval_begin = cfg.eval_begin.value_or(warm);
  const Seconds eval_end = cfg.eval_end.value_or(stream_end - cfg.d_max);
  if (eval_begin < stream_begin) throw Error("simulation: eval window starts before the stream");
  if (eval_end > stream_end - cfg.d_max) {
    throw Error("simulation: eval window must end at least d_max before the stream end");
  }
  if (eval_end <= eval_begin) throw Error("simulation: empty eval window");

  std::vector<ImpressionRecord> visible;
  if (cfg.poison_future) visible.assign(records.begin(), records.end());
  for (auto* l : learners) {
    l->attach(cfg.poison_future && !l->peeks_future() ? std::span<const ImpressionRecord>(visible) : records);
  }

  const std::size_t n_learners = learners.size();
  std::vector<std::vector<double>> preds(n_learners);
  std::vector<int> labels;
  std::vector<std::size_t> eval_index;

  SimReport report;
  report.eval_begin = eval_begin;
  report.eval_end = eval_end;

  Seconds tau = stream_begin - ((stream_begin % cfg.step) + cfg.step) % cfg.step;
  const Seconds tau_last = std::max(stream_end, eval_end + cfg.d_max + cfg.step);
  std::size_t cursor = 0;
  std::vector<UpdateStats> stats(n_learners);
  for (; tau <= tau_last; tau += cfg.step) {
    if (cfg.poison_future) detail::poison_after(records, visible, tau);
    for (std::size_t l = 0; l < n_learners; ++l) stats[l] = learners[l]->update(tau);

    const std::size_t begin = cursor;
    while (cursor < records.size() && records[cursor].log_time < tau + cfg.step) ++cursor;
    const std::span<const ImpressionRecord> interval = records.subspan(begin, cursor - begin);

    const bool in_window = tau + cfg.step > eval_begin && tau < eval_end;
    const std::size_t first = labels.size();
    for (const auto& r : interval) {
      if (r.log_time < eval_begin || r.log_time >= eval_end) continue;
      labels.push_back(final_label(r, cfg.d_max));
      for (std::size_t l = 0; l < n_learners; ++l) {
        const double p = learners[l]->predict(r.features);
        if (!std::isfinite(p)) throw nn::NumericError(learners[l]->name(), "prediction");
        preds[l].push_back(p);
      }
    }
    if (in_window) {
      const std::span<const int> y(labels.data() + first, labels.size() - first);
      for (std::size_t l = 0; l < n_learners; ++l) {
        const std::span<const double> p(preds[l].data() + first, preds[l].size() - first);
        HourRow row;
        row.tau = tau;
        row.learner = learners[l]->name();
        row.n_eval = y.size();
        if (!y.empty()) {
          row.log_loss = log_loss(p, y);
          row.auc = auc(p, y);
          row.calibration = calibration(p, y);
        }
        row.train_samples = stats[l].samples;
        row.train_loss = stats[l].mean_loss();
        report.rows.push_back(std::move(row));
      }
    }
    if (!interval.empty()) {
      for (auto* l : learners) l->on_logged(interval);
    }
  }

  const LearnerSummary* sky = nullptr;
  for (std::size_t l = 0; l < n_learners; ++l) {
    LearnerSummary s;
    s.learner = learners[l]->name();
    s.skyline = s.learner == skyline;
    s.n_eval = labels.size();
    s.log_loss = log_loss(preds[l], labels);
    s.auc = auc(preds[l], labels);
    s.calibration = calibration(preds[l], labels);
    if (const auto* fnl = dynamic_cast<const FakeNegativeLearner*>(learners[l])) s.calibration_clamps = fnl->calibration_clamps();
    report.summaries.push_back(s);
  }
  for (const auto& s : report.summaries) {
    if (s.skyline) sky = &s;
  }
  if (sky) {
    for (auto& s : report.summaries) {
      if (sky->log_loss > 0.0) s.relative_log_loss = s.log_loss / sky->log_loss - 1.0;
      if (s.auc && sky->auc && *sky->auc > 0.0) s.relative_auc = *s.auc / *sky->auc - 1.0;
    }
  }

  for (auto* l : learners) {
    auto* f = dynamic_cast<FtpLearner*>(l);
    if (!f) continue;
    FtpDiagnostics d;
    d.learner = f->name();
    const auto& prophet = f->prophet();
    // k* as the policy pipeline saw it: the prophecy made when the entry matured.
    auto prophecy = [&](const ExtendedLogEntry& e) {
      return e.prophecy ? *e.prophecy : static_cast<double>(prophet.predict(e.features));
    };
    const auto& entries = f->extended_log().entries();
    d.tasks = best_task_stats(entries, f->schedule(), prophecy);
    for (const auto& e : entries) d.matured_entries += e.label ? 1 : 0;
    d.policy = policy_accuracy(
        entries, f->schedule().size(), prophecy, [&](const SparseVector& x) { return f->net().policy_weights(x); },
        [&](const ExtendedLogEntry& e) { return e.label && e.log_time >= eval_begin && e.log_time < eval_end; });
    f->extended_log().flush();
    report.ftp.push_back(std::move(d));
  }
  return report;
}

}  // namespace ftp
