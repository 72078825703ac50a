// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ftp/cli.hpp"
#include "ftp/datagen.hpp"
#include "ftp/nn/grad_check.hpp"
#include "ftp/sim.hpp"

using namespace ftp;

namespace {

struct Outcome {
  enum Kind { kPass, kFail, kSkipped } kind = kFail;
  std::string detail;
};

Outcome pass_if(bool ok, std::string detail) { return {ok ? Outcome::kPass : Outcome::kFail, std::move(detail)}; }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

int failures = 0;

void report(int id, const std::string& title, const std::function<Outcome()>& body, double budget_s = 0.0) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {Outcome::kFail, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (o.kind != Outcome::kSkipped && budget_s > 0.0 && secs >= budget_s) {
    o.kind = Outcome::kFail;
    o.detail += fmt("; over the %.0f s budget", budget_s);
  }
  const char* tag = o.kind == Outcome::kPass ? "PASS" : (o.kind == Outcome::kSkipped ? "SKIPPED" : "FAIL");
  if (o.kind == Outcome::kFail) ++failures;
  std::printf("%-7s [%d] %s: %s (%.1f s)\n", tag, id, title.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
}

// ---- 1: gradient suite ------------------------------------------------------

Outcome gradient_suite() {
  std::mt19937_64 rng(20240601);
  double worst = 0.0;
  std::string worst_at;
  std::size_t checks = 0;
  for (int inst = 0; inst < 50; ++inst) {
    nn::NetConfig cfg;
    cfg.n_fields = 1 + static_cast<std::uint32_t>(rng() % 3);
    cfg.n_buckets = 8;
    cfg.embed_dim = 2 + static_cast<std::uint32_t>(rng() % 3);
    cfg.hidden = 4 + static_cast<std::uint32_t>(rng() % 6);
    cfg.embed_init = 0.5;
    cfg.seed = rng();
    const std::size_t k = 2 + rng() % 3;
    std::vector<nn::CheckSample> samples(3 + rng() % 6);
    for (auto& s : samples) {
      for (std::uint32_t f = 0; f < cfg.n_fields; ++f) {
        s.x.push_back({f * cfg.n_buckets + static_cast<std::uint32_t>(rng() % cfg.n_buckets),
                       static_cast<float>(0.5 + (rng() % 100) / 100.0)});
      }
      s.label = static_cast<int>(rng() % 2);
      s.kstar = rng() % k;
    }
    auto note = [&](double err, const std::string& where) {
      ++checks;
      if (err > worst) {
        worst = err;
        worst_at = where;
      }
    };
    nn::SharedBottomNet<float> net(cfg, k);
    for (std::size_t head = 0; head < k; ++head) {
      for (auto kind : {nn::LossKind::kBce, nn::LossKind::kFnw, nn::LossKind::kPu}) {
        note(nn::grad_check(net, samples, head, kind),
             fmt("instance %d head %zu %s", inst, head, nn::loss_name(kind)));
      }
    }
    note(nn::grad_check(net, samples, k, nn::LossKind::kPolicy), fmt("instance %d policy", inst));
    nn::TowerNet<float> tower(cfg);
    for (auto kind : {nn::LossKind::kBce, nn::LossKind::kFnw, nn::LossKind::kPu}) {
      note(nn::grad_check(tower, samples, kind), fmt("instance %d tower %s", inst, nn::loss_name(kind)));
    }
  }
  return pass_if(worst < 1e-4, fmt("max relative error %.3g over %zu checks (worst: %s), tolerance 1e-4", worst,
                                   checks, worst_at.c_str()));
}

// ---- 2: matured labels at d_max are final labels ----------------------------

GeneratorConfig plain_stream(std::size_t n, std::uint64_t seed) {
  GeneratorConfig g;
  g.seed = seed;
  g.n_records = n;
  g.horizon = 14 * kDay;
  g.d_max = 48 * kHour;
  g.cardinalities = {50, 6, 20, 30};
  g.true_weights = make_true_weights(g.cardinalities, std::vector<double>{1.0, 0.5, 0.5, 0.5}, 99);
  g.bias = -1.5;
  g.delay_mixture = {{0.5, 1.0 / (0.25 * kHour)}, {0.5, 1.0 / (16 * kHour)}};
  g.delay_field = 1;
  g.delay_strength = 1.0;
  return g;
}

Outcome matured_identity() {
  const auto g = plain_stream(100000, 11);
  const auto records = to_records(generate_stream(g), FeatureHasher(4, 4096));
  const Seconds tau = records.back().log_time + g.d_max + 1;
  const auto matured = matured_subset(records, tau, g.d_max);
  std::size_t agree = 0;
  for (const auto& lr : matured) agree += lr.label == final_label(*lr.record, g.d_max) ? 1 : 0;
  return pass_if(matured.size() == records.size() && agree == records.size(),
                 fmt("%zu of %zu records matured, %zu labels equal final_label", matured.size(), records.size(),
                     agree));
}

// ---- 3 / 4: fake-negative identities ----------------------------------------

Outcome fnc_identity() {
  double worst = 0.0;
  for (int i = 1; i <= 99; ++i) {
    const double p = i / 100.0;
    worst = std::max(worst, std::abs(nn::fnc_calibrate(p / (1.0 + p)) - p));
  }
  return pass_if(worst <= 1e-9, fmt("max |fnc_calibrate(p/(1+p)) - p| = %.3g on 99 points, tolerance 1e-9", worst));
}

Outcome pu_identity() {
  std::mt19937_64 rng(7);
  const Seconds d_max = 48 * kHour;
  std::uniform_int_distribution<Seconds> when(0, 5 * kDay);
  std::exponential_distribution<double> delay(1.0 / (20 * kHour));
  std::bernoulli_distribution converts(0.4);
  std::uniform_real_distribution<double> pred(0.001, 0.999);
  std::vector<ImpressionRecord> pop(100);
  std::vector<double> p(pop.size());
  for (std::size_t i = 0; i < pop.size(); ++i) {
    pop[i].id = i;
    pop[i].log_time = when(rng);
    if (converts(rng)) pop[i].conversion_time = pop[i].log_time + static_cast<Seconds>(delay(rng));
    coerce_late_conversion(pop[i], d_max);
    p[i] = pred(rng);
  }
  double pu = 0.0;
  std::size_t events = 0;
  for (const auto& e : emit_fake_negative_stream(pop, 1'000'000'000)) {
    pu += nn::pu_loss(p[e.id], e.label).loss;
    ++events;
  }
  double bce = 0.0;
  for (std::size_t i = 0; i < pop.size(); ++i) {
    bce += final_label(pop[i], d_max) ? -std::log(p[i]) : -std::log(1.0 - p[i]);
  }
  return pass_if(std::abs(pu - bce) <= 1e-9,
                 fmt("PU sum %.12f over %zu events vs BCE sum %.12f, |diff| = %.3g, tolerance 1e-9", pu, events, bce,
                     std::abs(pu - bce)));
}

// ---- 5: prophet near Bayes --------------------------------------------------

Outcome prophet_near_bayes() {
  const auto g = plain_stream(200000, 1);
  auto test_cfg = g;
  test_cfg.seed = 1001;
  test_cfg.n_records = 50000;
  const auto train = generate_stream(g);
  const auto test = generate_stream(test_cfg);
  const FeatureHasher hasher(4, 4096);
  const auto records = to_records(train, hasher);
  const auto held = to_records(test, hasher);
  nn::NetConfig net;
  net.n_fields = 4;
  net.n_buckets = 4096;
  net.seed = 1;
  double rate = 0.0;
  for (const auto& r : records) rate += r.converts() ? 1.0 : 0.0;
  net.init_base_rate = rate / records.size();
  TrainConfig tc;
  WaitingLearner prophet("prophet", g.d_max, net, tc);
  prophet.attach(records);
  const auto st = prophet.update(records.back().log_time + g.d_max + 1);
  // Expected log loss under the true final CVR, for the model and for the oracle.
  double model = 0.0, bayes = 0.0;
  for (std::size_t i = 0; i < held.size(); ++i) {
    const double q = test.final_cvr[i];
    const double m = nn::clamp_prob(prophet.predict(held[i].features));
    model -= q * std::log(m) + (1 - q) * std::log(1 - m);
    bayes -= q * std::log(q) + (1 - q) * std::log(1 - q);
  }
  model /= held.size();
  bayes /= held.size();
  const double rel = model / bayes - 1.0;
  return pass_if(st.samples >= 200000 && rel <= 0.05,
                 fmt("one pass over %zu records: prophet %.5f vs Bayes %.5f, relative gap %.2f%%, tolerance 5%%",
                     st.samples, model, bayes, 100 * rel));
}

// ---- 6 / 7 / 8: the streaming comparison -------------------------------------

struct SeedRun {
  std::uint64_t seed = 0;
  double prophet_star = 0.0, ftp = 0.0, best_waiting = 0.0;
  std::string best_waiting_name;
  PolicyAccuracy policy;
  std::vector<TaskStat> tasks;
};

// Feature-dependent delays (the delay field pins the fast or the slow
// component) and an item field with one-day lifetimes.
GeneratorConfig ordering_stream(std::uint64_t seed) {
  GeneratorConfig g;
  g.seed = seed;
  g.n_records = 100000;
  g.horizon = 14 * kDay;
  g.d_max = 48 * kHour;
  g.cardinalities = {100, 6, 20, 30};
  g.true_weights = make_true_weights(g.cardinalities, std::vector<double>{2.0, 0.5, 0.5, 0.5}, seed * 7 + 1);
  g.bias = -2.0;
  g.delay_mixture = {{0.5, 1.0 / (0.25 * kHour)}, {0.5, 1.0 / (16 * kHour)}};
  g.delay_field = 1;
  g.delay_strength = 1.0;
  g.item_field = 0;
  g.item_lifetime = kDay;
  return g;
}

SeedRun run_seed(std::uint64_t seed) {
  const auto g = ordering_stream(seed);
  const auto records = to_records(generate_stream(g), FeatureHasher(4, 4096));
  nn::NetConfig net;
  net.n_fields = 4;
  net.n_buckets = 4096;
  net.hidden = 128;
  net.seed = seed;
  double rate = 0.0;
  for (const auto& r : records) rate += r.converts() ? 1.0 : 0.0;
  net.init_base_rate = rate / records.size();
  TrainConfig tc;
  const TaskSchedule sched({kHour, 6 * kHour, 24 * kHour, 48 * kHour});
  std::vector<std::unique_ptr<Learner>> owned;
  owned.push_back(std::make_unique<ProphetStarLearner>("prophet_star", g.d_max, net, tc));
  owned.push_back(std::make_unique<FtpLearner>("ftp", sched, net, tc));
  for (std::size_t k = 0; k < sched.size(); ++k) {
    owned.push_back(std::make_unique<WaitingLearner>("waiting-" + format_duration(sched[k]), sched[k], net, tc));
  }
  std::vector<Learner*> ls;
  for (auto& l : owned) ls.push_back(l.get());
  SimConfig sc;
  sc.d_max = g.d_max;
  const auto rep = run_simulation(records, ls, sc);
  SeedRun out;
  out.seed = seed;
  out.prophet_star = rep.summary("prophet_star").log_loss;
  out.ftp = rep.summary("ftp").log_loss;
  out.best_waiting = INFINITY;
  for (const auto& s : rep.summaries) {
    if (s.learner.rfind("waiting-", 0) == 0 && s.log_loss < out.best_waiting) {
      out.best_waiting = s.log_loss;
      out.best_waiting_name = s.learner;
    }
  }
  out.policy = rep.ftp.at(0).policy;
  out.tasks = rep.ftp.at(0).tasks;
  return out;
}

std::vector<SeedRun> g_runs;

Outcome ordering() {
  int ok = 0;
  std::ostringstream detail;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto r = run_seed(seed);
    g_runs.push_back(r);
    const bool good = r.prophet_star <= r.ftp && r.ftp <= r.best_waiting;
    ok += good ? 1 : 0;
    detail << fmt("%sseed %llu: prophet* %.4f, ftp %.4f, best waiting %.4f (%s)%s", seed > 1 ? "; " : "",
                  static_cast<unsigned long long>(seed), r.prophet_star, r.ftp, r.best_waiting,
                  r.best_waiting_name.c_str(), good ? "" : " X");
  }
  return pass_if(ok >= 4, fmt("%d of 5 seeds ordered, need 4. ", ok) + detail.str());
}

Outcome policy_imitation() {
  if (g_runs.size() != 5) return {Outcome::kFail, "needs the five streaming runs"};
  int ok = 0;
  std::ostringstream detail;
  for (const auto& r : g_runs) {
    const bool good = r.policy.policy_hits > r.policy.best_constant_hits;
    ok += good ? 1 : 0;
    detail << fmt("%sseed %llu: policy %.3f vs constant task %zu %.3f (n=%zu)%s", r.seed > 1 ? "; " : "",
                  static_cast<unsigned long long>(r.seed), r.policy.policy_rate(), r.policy.best_constant_task,
                  r.policy.constant_rate(), r.policy.n, good ? "" : " X");
  }
  return pass_if(ok >= 4, fmt("%d of 5 seeds beat the best constant task, need 4. ", ok) + detail.str());
}

Outcome best_task_spread() {
  if (g_runs.size() != 5) return {Outcome::kFail, "needs the five streaming runs"};
  int ok = 0;
  std::ostringstream detail;
  for (const auto& r : g_runs) {
    bool all_positive = true;
    std::size_t majority = 0;
    for (std::size_t k = 0; k < r.tasks.size(); ++k) {
      all_positive = all_positive && r.tasks[k].best_pct > 0.0;
      if (r.tasks[k].best_pct > r.tasks[majority].best_pct) majority = k;
    }
    const double long_mass = 100.0 - r.tasks[0].feedback_pct;
    const bool shortest_ok = long_mass <= 30.0 || majority != 0;
    const bool good = all_positive && shortest_ok;
    ok += good ? 1 : 0;
    detail << fmt("%sseed %llu: best%% [", r.seed > 1 ? "; " : "", static_cast<unsigned long long>(r.seed));
    for (std::size_t k = 0; k < r.tasks.size(); ++k) detail << fmt(k ? " %.1f" : "%.1f", r.tasks[k].best_pct);
    detail << fmt("], long-delay mass %.1f%%%s", long_mass, good ? "" : " X");
  }
  return pass_if(ok == 5, fmt("%d of 5 seeds. ", ok) + detail.str());
}

// ---- 9: pipeline properties ---------------------------------------------------

std::vector<std::unique_ptr<Learner>> honest_learners(const nn::NetConfig& net, const TaskSchedule& sched) {
  TrainConfig tc;
  std::vector<std::unique_ptr<Learner>> out;
  out.push_back(std::make_unique<FtpLearner>("ftp", sched, net, tc));
  for (std::size_t k = 0; k < sched.size(); ++k) {
    out.push_back(std::make_unique<WaitingLearner>("waiting-" + format_duration(sched[k]), sched[k], net, tc));
  }
  out.push_back(std::make_unique<FakeNegativeLearner>("fnw", FakeNegativeMode::kFnw, sched.d_max(), net, tc));
  out.push_back(std::make_unique<FakeNegativeLearner>("fnc", FakeNegativeMode::kFnc, sched.d_max(), net, tc));
  out.push_back(std::make_unique<FakeNegativeLearner>("pu", FakeNegativeMode::kPu, sched.d_max(), net, tc));
  return out;
}

std::string simulate_to_text(std::span<const ImpressionRecord> records, const nn::NetConfig& net,
                             const TaskSchedule& sched, bool poison) {
  auto owned = honest_learners(net, sched);
  std::vector<Learner*> ls;
  for (auto& l : owned) ls.push_back(l.get());
  SimConfig sc;
  sc.d_max = sched.d_max();
  sc.poison_future = poison;
  const auto rep = run_simulation(records, ls, sc, "waiting-2d");
  std::ostringstream out;
  rep.write_csv(out);
  out << rep.to_json().dump();
  return out.str();
}

Outcome pipeline_properties() {
  auto g = ordering_stream(9);
  g.n_records = 10000;
  g.horizon = 5 * kDay;
  const auto records = to_records(generate_stream(g), FeatureHasher(4, 4096), 0.1);
  const TaskSchedule sched({kHour, 6 * kHour, 24 * kHour, 48 * kHour});

  // Exactly once: every train record leaves each matured pipeline once, every
  // fake-negative event once, every extended-log entry matures once.
  bool once = true;
  std::size_t n_train = 0;
  for (const auto& r : records) n_train += r.split == Split::kTrain ? 1 : 0;
  const Seconds tau_end = records.back().log_time + g.d_max + 2 * kHour;
  for (std::size_t k = 0; k < sched.size(); ++k) {
    MaturedPipeline p(records, sched[k]);
    std::set<std::uint64_t> seen;
    std::size_t total = 0;
    for (Seconds tau = 0; tau <= tau_end; tau += kHour) {
      for (const auto& lr : p.release(tau)) {
        seen.insert(lr.record->id);
        ++total;
      }
    }
    once = once && total == n_train && seen.size() == n_train;
  }
  {
    FakeNegativePipeline p(records, g.d_max);
    std::map<std::pair<std::uint64_t, int>, int> seen;
    for (Seconds tau = 0; tau <= tau_end; tau += kHour) {
      for (const auto& e : p.release(tau)) ++seen[{e.id, e.label}];
    }
    std::size_t conv = 0;
    for (const auto& r : records) conv += r.split == Split::kTrain && r.converts() ? 1 : 0;
    std::size_t events = 0;
    for (const auto& [key, n] : seen) {
      once = once && n == 1;
      events += n;
    }
    once = once && events == n_train + conv;
  }
  {
    ExtendedLog log(g.d_max);
    for (const auto& r : records) log.capture(r, {0.1f, 0.2f, 0.3f, 0.4f});
    std::size_t matured = 0;
    for (Seconds tau = 0; tau <= tau_end; tau += kHour) {
      matured += log.policy_batch(tau, [](const SparseVector&) { return 0.25; }).size();
    }
    once = once && matured == n_train && log.consumed() == records.size();
  }

  nn::NetConfig net;
  net.n_fields = 4;
  net.n_buckets = 4096;
  net.hidden = 32;
  net.seed = 9;
  const auto clean = simulate_to_text(records, net, sched, false);
  const auto rerun = simulate_to_text(records, net, sched, false);
  const auto poisoned = simulate_to_text(records, net, sched, true);
  const bool deterministic = clean == rerun;
  const bool no_peek = clean == poisoned;
  return pass_if(once && deterministic && no_peek,
                 fmt("exactly-once %s, poisoned-future report %s, rerun report %s (%zu records)",
                     once ? "ok" : "VIOLATED", no_peek ? "identical" : "DIFFERS",
                     deterministic ? "bit-identical" : "DIFFERS", records.size()));
}

// ---- 10: Criteo feedback stretch ----------------------------------------------

Outcome criteo_feedback() {
  const char* path = std::getenv("FTP_CRITEO_PATH");
  if (path == nullptr || *path == '\0') return {Outcome::kSkipped, "set FTP_CRITEO_PATH to the Criteo conversion log"};
  LogSpec spec;
  spec.path = path;
  spec.format = LogFormat::kCriteo;
  spec.d_max = kCriteoDMax;
  const std::vector<Seconds> windows{kDay, 7 * kDay, 14 * kDay, 21 * kDay, 30 * kDay};
  const double target[] = {60, 80, 90, 95, 100};
  const auto st = cli::log_stats(spec, windows);
  bool ok = true;
  std::ostringstream detail;
  detail << fmt("%zu records, %zu conversions; feedback%%", st.records, st.conversions);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    ok = ok && std::abs(st.feedback_pct[i] - target[i]) <= 3.0;
    detail << fmt(" %s %.1f (target %.0f)", format_duration(windows[i]).c_str(), st.feedback_pct[i], target[i]);
  }
  return pass_if(ok, detail.str() + ", tolerance 3 points");
}

}  // namespace

int main() {
  report(1, "gradient suite", gradient_suite, 60.0);
  report(2, "matured labels at d_max equal final labels", matured_identity);
  report(3, "fake-negative calibration inverse", fnc_identity);
  report(4, "PU risk identity", pu_identity);
  report(5, "prophet near Bayes log loss", prophet_near_bayes, 300.0);
  report(6, "prophet* <= FTP <= best Waiting", ordering, 900.0);
  report(7, "policy beats best constant task", policy_imitation);
  report(8, "best-task spread", best_task_spread);
  report(9, "pipeline properties", pipeline_properties);
  report(10, "Criteo feedback% stretch", criteo_feedback);
  std::printf("%s\n", failures == 0 ? "acceptance: all criteria passed" : "acceptance: FAILED");
  return failures == 0 ? 0 : 1;
}
