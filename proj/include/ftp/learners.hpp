#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ftp/core.hpp"
#include "ftp/ingest.hpp"
#include "ftp/nn/checkpoint.hpp"
#include "ftp/nn/network.hpp"
#include "ftp/pipelines.hpp"

namespace ftp {

struct TrainConfig {
  nn::AdamConfig adam;
  std::size_t batch_size = 64;
  std::size_t policy_batch_size = 64;
  double policy_lr_scale = 1.0;
  bool pu_non_negative = false;
};

struct UpdateStats {
  std::size_t samples = 0;
  std::size_t steps = 0;
  double loss_sum = 0.0;
  std::size_t policy_samples = 0;
  double policy_loss_sum = 0.0;
  std::size_t calibration_clamps = 0;

  double mean_loss() const { return samples ? loss_sum / samples : 0.0; }

  UpdateStats& operator+=(const UpdateStats& o) {
    samples += o.samples;
    steps += o.steps;
    loss_sum += o.loss_sum;
    policy_samples += o.policy_samples;
    policy_loss_sum += o.policy_loss_sum;
    calibration_clamps += o.calibration_clamps;
    return *this;
  }
};

// Uniform interface the simulator drives: update(tau) with whatever the
// learner's pipelines have released by tau, then predict(x).
class Learner {
 public:
  virtual ~Learner() = default;

  virtual const std::string& name() const = 0;
  // Binds the record stream. The span must outlive the learner.
  virtual void attach(std::span<const ImpressionRecord> records) = 0;
  virtual UpdateStats update(Seconds tau) = 0;
  virtual double predict(const SparseVector& x) const = 0;
  // Called once per record when it enters the stream, after predictions for it
  // have been recorded.
  virtual void on_logged(std::span<const ImpressionRecord> /*batch*/) {}
  // True for evaluation-only skylines that read final labels early.
  virtual bool peeks_future() const { return false; }
  virtual void save(const std::string& /*path*/) const {}
};

enum class LearnerKind { kFtp, kProphet, kProphetStar, kWaiting, kPu, kFnw, kFnc };

inline const char* kind_name(LearnerKind k) {
  switch (k) {
    case LearnerKind::kFtp: return "ftp";
    case LearnerKind::kProphet: return "prophet";
    case LearnerKind::kProphetStar: return "prophet_star";
    case LearnerKind::kWaiting: return "waiting";
    case LearnerKind::kPu: return "pu";
    case LearnerKind::kFnw: return "fnw";
    case LearnerKind::kFnc: return "fnc";
  }
  return "?";
}

struct LearnerSpec {
  LearnerKind kind = LearnerKind::kFtp;
  std::string name;
  std::optional<Seconds> waiting_delay;  // Waiting only
  std::optional<TaskSchedule> schedule;  // FTP only
  TrainConfig train;
};

namespace detail {

// Runs `accumulate(item, scale)` over consecutive chunks and steps after each.
template <class Item, class Accumulate, class Step>
void minibatches(std::span<const Item> items, std::size_t batch_size, Accumulate&& accumulate, Step&& step) {
  const std::size_t bs = std::max<std::size_t>(1, batch_size);
  for (std::size_t start = 0; start < items.size(); start += bs) {
    const std::size_t end = std::min(items.size(), start + bs);
    const float scale = 1.0f / static_cast<float>(end - start);
    for (std::size_t i = start; i < end; ++i) accumulate(items[i], scale);
    step();
  }
}

inline std::string default_name(const LearnerSpec& spec) {
  if (!spec.name.empty()) return spec.name;
  if (spec.kind == LearnerKind::kWaiting) return "waiting-" + format_duration(spec.waiting_delay.value_or(0));
  return kind_name(spec.kind);
}

}  // namespace detail

// Single-tower model trained with BCE on a matured pipeline: Waiting(d), and
// the prophet when d = d_max.
class WaitingLearner : public Learner {
 public:
  WaitingLearner(std::string name, Seconds delay, const nn::NetConfig& net, TrainConfig train)
      : name_(std::move(name)), delay_(delay), net_(net), train_(train) {}

  const std::string& name() const override { return name_; }
  void attach(std::span<const ImpressionRecord> records) override { pipeline_.emplace(records, delay_); }

  UpdateStats update(Seconds tau) override {
    const auto batch = pipeline_->release(tau);
    UpdateStats st;
    detail::minibatches<LabeledRecord>(
        batch, train_.batch_size,
        [&](const LabeledRecord& lr, float scale) {
          st.loss_sum += net_.accumulate(lr.record->features,
                                         [&](float p) { return nn::bce_loss_and_grad(p, lr.label); }, scale);
          ++st.samples;
        },
        [&] {
          net_.step(train_.adam);
          ++st.steps;
        });
    consumed_ids_.reserve(consumed_ids_.size() + batch.size());
    for (const auto& lr : batch) consumed_ids_.push_back(lr.record->id);
    return st;
  }

  double predict(const SparseVector& x) const override { return net_.predict(x); }

  void save(const std::string& path) const override {
    nn::CheckpointWriter w;
    nn::save_net(w, "tower.", net_);
    w.save(path);
  }

  Seconds delay() const { return delay_; }
  const nn::TowerNet<float>& net() const { return net_; }
  // Ids in release order, for exactly-once and nesting checks.
  const std::vector<std::uint64_t>& consumed_ids() const { return consumed_ids_; }

 private:
  std::string name_;
  Seconds delay_;
  nn::TowerNet<float> net_;
  TrainConfig train_;
  std::optional<MaturedPipeline> pipeline_;
  std::vector<std::uint64_t> consumed_ids_;
};

// The evaluation skyline: trained on D*_tau, i.e. every record logged before
// tau with its final label, which a deployed system cannot know yet.
class ProphetStarLearner : public Learner {
 public:
  ProphetStarLearner(std::string name, Seconds d_max, const nn::NetConfig& net, TrainConfig train)
      : name_(std::move(name)), d_max_(d_max), net_(net), train_(train) {}

  const std::string& name() const override { return name_; }
  void attach(std::span<const ImpressionRecord> records) override { records_ = records; }
  bool peeks_future() const override { return true; }

  UpdateStats update(Seconds tau) override {
    std::vector<LabeledRecord> batch;
    while (cursor_ < records_.size() && records_[cursor_].log_time < tau) {
      const auto& r = records_[cursor_++];
      if (r.split == Split::kTrain) batch.push_back({&r, final_label(r, d_max_)});
    }
    UpdateStats st;
    detail::minibatches<LabeledRecord>(
        batch, train_.batch_size,
        [&](const LabeledRecord& lr, float scale) {
          st.loss_sum += net_.accumulate(lr.record->features,
                                         [&](float p) { return nn::bce_loss_and_grad(p, lr.label); }, scale);
          ++st.samples;
        },
        [&] {
          net_.step(train_.adam);
          ++st.steps;
        });
    return st;
  }

  double predict(const SparseVector& x) const override { return net_.predict(x); }

  void save(const std::string& path) const override {
    nn::CheckpointWriter w;
    nn::save_net(w, "tower.", net_);
    w.save(path);
  }

 private:
  std::string name_;
  Seconds d_max_;
  nn::TowerNet<float> net_;
  TrainConfig train_;
  std::span<const ImpressionRecord> records_;
  std::size_t cursor_ = 0;
};

enum class FakeNegativeMode { kPu, kFnw, kFnc };

// Baselines on the fake-negative stream.
class FakeNegativeLearner : public Learner {
 public:
  FakeNegativeLearner(std::string name, FakeNegativeMode mode, Seconds d_max, const nn::NetConfig& net,
                      TrainConfig train)
      : name_(std::move(name)), mode_(mode), d_max_(d_max), net_(net), train_(train) {}

  const std::string& name() const override { return name_; }
  void attach(std::span<const ImpressionRecord> records) override { pipeline_.emplace(records, d_max_); }

  UpdateStats update(Seconds tau) override {
    const auto events = pipeline_->release(tau);
    UpdateStats st;
    const std::size_t bs = std::max<std::size_t>(1, train_.batch_size);
    for (std::size_t start = 0; start < events.size(); start += bs) {
      const std::size_t end = std::min(events.size(), start + bs);
      const std::span<const FakeNegativeEvent> chunk(events.data() + start, end - start);
      const float scale = 1.0f / static_cast<float>(chunk.size());
      bool drop_negative_part = false;
      if (mode_ == FakeNegativeMode::kPu && train_.pu_non_negative) {
        // Negative-class risk estimate: unlabeled -log(1-p) minus its positive
        // correction. When it goes negative the batch keeps the positive term only.
        double neg_risk = 0.0;
        for (const auto& e : chunk) {
          const double p = nn::clamp_prob(static_cast<double>(net_.predict(e.record->features)));
          neg_risk += (e.label == 0 ? -1.0 : 1.0) * std::log(1.0 - p);
        }
        drop_negative_part = neg_risk < 0.0;
      }
      for (const auto& e : chunk) {
        st.loss_sum += net_.accumulate(e.record->features, [&](float p) {
          switch (mode_) {
            case FakeNegativeMode::kFnw: return nn::fnw_loss(p, e.label);
            case FakeNegativeMode::kFnc: return nn::bce_loss_and_grad(p, e.label);
            case FakeNegativeMode::kPu:
              if (drop_negative_part) {
                if (e.label == 0) return nn::LossGrad<float>{0.0f, 0.0f};
                const auto b = nn::bce_loss_and_grad(p, 1);
                return b;
              }
              return nn::pu_loss(p, e.label);
          }
          return nn::bce_loss_and_grad(p, e.label);
        }, scale);
        ++st.samples;
      }
      net_.step(train_.adam);
      ++st.steps;
    }
    return st;
  }

  double predict(const SparseVector& x) const override {
    const float raw = net_.predict(x);
    if (mode_ != FakeNegativeMode::kFnc) return raw;
    bool clamped = false;
    const double p = nn::fnc_calibrate(static_cast<double>(raw), &clamped);
    if (clamped) ++clamps_;
    return p;
  }

  std::size_t calibration_clamps() const { return clamps_; }

  void save(const std::string& path) const override {
    nn::CheckpointWriter w;
    nn::save_net(w, "tower.", net_);
    w.save(path);
  }

 private:
  std::string name_;
  FakeNegativeMode mode_;
  Seconds d_max_;
  nn::TowerNet<float> net_;
  TrainConfig train_;
  std::optional<FakeNegativePipeline> pipeline_;
  mutable std::size_t clamps_ = 0;
};

// Follow the Prophet: K task heads on matured pipelines d_1..d_K, a separate
// prophet trained on the d_max pipeline, and a policy head trained to pick the
// task whose logged online prediction was closest to the prophecy.
class FtpLearner : public Learner {
 public:
  FtpLearner(std::string name, TaskSchedule schedule, const nn::NetConfig& net, TrainConfig train)
      : name_(std::move(name)),
        schedule_(std::move(schedule)),
        net_(net, schedule_.size()),
        prophet_(prophet_config(net)),
        train_(train),
        extlog_(schedule_.d_max()) {}

  const std::string& name() const override { return name_; }

  void attach(std::span<const ImpressionRecord> records) override {
    tasks_.clear();
    for (std::size_t k = 0; k < schedule_.size(); ++k) tasks_.emplace_back(records, schedule_[k]);
    prophet_pipeline_.emplace(records, schedule_.d_max());
  }

  UpdateStats update(Seconds tau) override {
    UpdateStats st;
    const auto matured = prophet_pipeline_->release(tau);
    detail::minibatches<LabeledRecord>(
        matured, train_.batch_size,
        [&](const LabeledRecord& lr, float scale) {
          prophet_.accumulate(lr.record->features, [&](float p) { return nn::bce_loss_and_grad(p, lr.label); }, scale);
        },
        [&] { prophet_.step(train_.adam); });
    prophet_seen_ += matured.size();
    if (!matured.empty()) prophet_horizon_ = matured.back().record->log_time;

    for (std::size_t k = 0; k < tasks_.size(); ++k) {
      const auto batch = tasks_[k].release(tau);
      detail::minibatches<LabeledRecord>(
          batch, train_.batch_size,
          [&](const LabeledRecord& lr, float scale) {
            st.loss_sum += net_.accumulate_task(
                k, lr.record->features, [&](float p) { return nn::bce_loss_and_grad(p, lr.label); }, scale);
            ++st.samples;
          },
          [&] {
            net_.step(train_.adam);
            ++st.steps;
          });
    }

    const auto policy = extlog_.policy_batch(tau, [&](const SparseVector& x) { return prophet_.predict(x); });
    nn::AdamConfig policy_adam = train_.adam;
    policy_adam.lr *= train_.policy_lr_scale;
    detail::minibatches<PolicyExample>(
        policy, train_.policy_batch_size,
        [&](const PolicyExample& ex, float scale) {
          st.policy_loss_sum += net_.accumulate_policy(ex.entry->features, ex.kstar, scale);
          ++st.policy_samples;
        },
        [&] {
          net_.step(policy_adam);
          ++st.steps;
        });
    return st;
  }

  double predict(const SparseVector& x) const override { return net_.predict(x).ftp_pred; }

  void on_logged(std::span<const ImpressionRecord> batch) override {
    for (const auto& r : batch) extlog_.capture(r, net_.task_preds(r.features));
  }

  void save(const std::string& path) const override {
    nn::CheckpointWriter w;
    nn::save_net(w, "ftp.", net_);
    nn::save_net(w, "prophet.", prophet_);
    w.save(path);
  }

  const TaskSchedule& schedule() const { return schedule_; }
  const nn::SharedBottomNet<float>& net() const { return net_; }
  nn::SharedBottomNet<float>& net() { return net_; }
  const nn::TowerNet<float>& prophet() const { return prophet_; }
  ExtendedLog& extended_log() { return extlog_; }
  const ExtendedLog& extended_log() const { return extlog_; }
  std::size_t prophet_seen() const { return prophet_seen_; }
  // Log time of the newest record the prophet has trained on.
  std::optional<Seconds> prophet_horizon() const { return prophet_horizon_; }

  static nn::NetConfig prophet_config(nn::NetConfig net) {
    net.seed = detail::splitmix64(net.seed ^ 0x9be7c0de);
    return net;
  }

 private:
  std::string name_;
  TaskSchedule schedule_;
  nn::SharedBottomNet<float> net_;
  nn::TowerNet<float> prophet_;
  TrainConfig train_;
  ExtendedLog extlog_;
  std::vector<MaturedPipeline> tasks_;
  std::optional<MaturedPipeline> prophet_pipeline_;
  std::size_t prophet_seen_ = 0;
  std::optional<Seconds> prophet_horizon_;
};

inline std::unique_ptr<Learner> make_learner(const LearnerSpec& spec, const nn::NetConfig& net,
                                             const TaskSchedule& schedule) {
  const auto name = detail::default_name(spec);
  switch (spec.kind) {
    case LearnerKind::kFtp:
      return std::make_unique<FtpLearner>(name, spec.schedule.value_or(schedule), net, spec.train);
    case LearnerKind::kProphet:
      return std::make_unique<WaitingLearner>(name, schedule.d_max(), net, spec.train);
    case LearnerKind::kProphetStar:
      return std::make_unique<ProphetStarLearner>(name, schedule.d_max(), net, spec.train);
    case LearnerKind::kWaiting:
      if (!spec.waiting_delay) throw Error("waiting learner '" + name + "' needs a delay");
      return std::make_unique<WaitingLearner>(name, *spec.waiting_delay, net, spec.train);
    case LearnerKind::kPu:
      return std::make_unique<FakeNegativeLearner>(name, FakeNegativeMode::kPu, schedule.d_max(), net, spec.train);
    case LearnerKind::kFnw:
      return std::make_unique<FakeNegativeLearner>(name, FakeNegativeMode::kFnw, schedule.d_max(), net, spec.train);
    case LearnerKind::kFnc:
      return std::make_unique<FakeNegativeLearner>(name, FakeNegativeMode::kFnc, schedule.d_max(), net, spec.train);
  }
  throw Error("unknown learner kind");
}

// Offline policy retraining from a persisted extended log: replays matured,
// labeled entries for `epochs` passes with k* from the given prophet.
inline UpdateStats replay_policy(nn::SharedBottomNet<float>& net, const nn::TowerNet<float>& prophet,
                                 std::span<const ExtendedLogEntry> entries, std::size_t epochs,
                                 const TrainConfig& train) {
  std::vector<PolicyExample> examples;
  for (const auto& e : entries) {
    if (!e.label) continue;
    examples.push_back({&e, best_task(prophet.predict(e.features), e.task_preds), 0.0});
  }
  UpdateStats st;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    detail::minibatches<PolicyExample>(
        examples, train.policy_batch_size,
        [&](const PolicyExample& ex, float scale) {
          st.policy_loss_sum += net.accumulate_policy(ex.entry->features, ex.kstar, scale);
          ++st.policy_samples;
        },
        [&] {
          net.step(train.adam);
          ++st.steps;
        });
  }
  return st;
}

}  // namespace ftp
