#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ftp/nn/loss.hpp"
#include "ftp/nn/network.hpp"

namespace ftp::nn {

using Wide = long double;

template <class T>
struct ParamRef {
  std::string name;
  std::span<T> value;
  std::span<T> grad;
};

inline Wide relative_error(Wide analytic, Wide numeric, Wide floor = 1e-10L) {
  const Wide denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

// Compares every analytic partial of `obj` to a central finite difference
// (five-point stencil with step h) and returns the largest relative error.
// Objective needs: zero_grad(), accumulate() (analytic grads), loss() (forward
// only) and params() (value/grad views).
template <class Objective>
double max_relative_error(Objective& obj, Wide h = 1e-4L) {
  obj.zero_grad();
  obj.accumulate();
  auto params = obj.params();
  std::vector<std::vector<Wide>> analytic;
  for (const auto& p : params) analytic.emplace_back(p.grad.begin(), p.grad.end());
  Wide worst = 0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto value = params[t].value;
    for (std::size_t i = 0; i < value.size(); ++i) {
      const Wide orig = value[i];
      auto at = [&](Wide delta) {
        value[i] = orig + delta;
        const Wide l = obj.loss();
        value[i] = orig;
        return l;
      };
      const Wide numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
      worst = std::max(worst, relative_error(analytic[t][i], numeric));
    }
  }
  return static_cast<double>(worst);
}

enum class LossKind { kBce, kFnw, kPu, kPolicy };

inline const char* loss_name(LossKind k) {
  switch (k) {
    case LossKind::kBce: return "bce";
    case LossKind::kFnw: return "fnw";
    case LossKind::kPu: return "pu";
    case LossKind::kPolicy: return "policy";
  }
  return "?";
}

struct CheckSample {
  SparseVector x;
  int label = 0;
  std::size_t kstar = 0;
};

namespace detail {

template <class T>
LossGrad<T> scalar_loss(LossKind kind, T p, int y, T fixed_weight) {
  switch (kind) {
    case LossKind::kBce: return bce_loss_and_grad(p, y);
    case LossKind::kPu: return pu_loss(p, y);
    case LossKind::kFnw: {
      const auto base = bce_loss_and_grad(p, y);
      return {fixed_weight * base.loss, fixed_weight * base.dlogit};
    }
    case LossKind::kPolicy: break;
  }
  throw Error("scalar_loss: policy loss is not a scalar-head loss");
}

// Shifts hidden biases until no sample has a pre-activation within `margin` of
// the Leaky-ReLU kink, so finite differences never straddle it.
template <class T, class PreFn>
void nudge_bias(Tensor<T>& bias, PreFn&& pre_for_sample, std::size_t n_samples, T margin) {
  for (int round = 0; round < 50; ++round) {
    bool moved = false;
    for (std::size_t s = 0; s < n_samples; ++s) {
      const std::vector<T> pre = pre_for_sample(s);
      for (std::size_t j = 0; j < pre.size(); ++j) {
        if (std::abs(pre[j]) < margin) {
          bias.value[j] += 3 * margin;
          moved = true;
        }
      }
    }
    if (!moved) return;
  }
}

}  // namespace detail

// Gradient check for one head of a shared-bottom net. head == n_tasks selects
// the policy head (loss must be kPolicy).
template <class T>
class SharedBottomObjective {
 public:
  SharedBottomObjective(const SharedBottomNet<T>& net, std::span<const CheckSample> samples,
                        std::size_t head, LossKind kind)
      : net_(net.template cast<Wide>()), samples_(samples.begin(), samples.end()), head_(head), kind_(kind) {
    if ((head == net_.n_tasks()) != (kind == LossKind::kPolicy)) {
      throw Error("grad_check: the policy head pairs with the policy loss only");
    }
    nudge_kinks();
    for (const auto& s : samples_) {
      const Wide p = head_ < net_.n_tasks() ? net_.task_preds(s.x)[head_] : Wide(0);
      weights_.push_back(fnw_weight(p, s.label));
    }
  }

  void zero_grad() { net_.zero_grad(); }

  Wide accumulate() {
    Wide total = 0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      if (kind_ == LossKind::kPolicy) {
        total += net_.accumulate_policy(s.x, s.kstar);
      } else {
        const Wide w = weights_[i];
        total += net_.accumulate_task(head_, s.x, [&](Wide p) { return detail::scalar_loss(kind_, p, s.label, w); });
      }
    }
    return total;
  }

  Wide loss() const {
    Wide total = 0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      if (kind_ == LossKind::kPolicy) {
        total -= std::log(net_.policy_weights(s.x)[s.kstar]);
      } else {
        total += detail::scalar_loss(kind_, net_.task_preds(s.x)[head_], s.label, weights_[i]).loss;
      }
    }
    return total;
  }

  // The policy loss stops at the bottom output, so only the policy head is
  // compared for it; the bottom's total derivative is deliberately discarded.
  std::vector<ParamRef<Wide>> params() {
    std::vector<ParamRef<Wide>> out;
    if (kind_ == LossKind::kPolicy) {
      auto& p = net_.policy();
      out.push_back({p.w.name, p.w.value, p.w.grad});
      out.push_back({p.b.name, p.b.value, p.b.grad});
      return out;
    }
    net_.embedding().for_each_row([&](std::uint32_t idx, std::span<Wide> v, std::span<Wide> g) {
      out.push_back({"embedding[" + std::to_string(idx) + "]", v, g});
    });
    net_.for_each_tensor([&](Tensor<Wide>& t) { out.push_back({t.name, t.value, t.grad}); });
    return out;
  }

 private:
  void nudge_kinks() {
    const Wide margin = 5e-3L;
    auto& bottom = net_.bottom();
    detail::nudge_bias<Wide>(bottom.dense.b, [&](std::size_t s) {
      BottomCache<Wide> c;
      bottom.forward(samples_[s].x, c);
      return c.pre;
    }, samples_.size(), margin);
    for (auto& h : net_.heads()) {
      detail::nudge_bias<Wide>(h.dense.b, [&](std::size_t s) {
        BottomCache<Wide> c;
        bottom.forward(samples_[s].x, c);
        HeadCache<Wide> hc;
        h.forward(c.act, hc);
        return hc.pre;
      }, samples_.size(), margin);
    }
  }

  SharedBottomNet<Wide> net_;
  std::vector<CheckSample> samples_;
  std::size_t head_;
  LossKind kind_;
  std::vector<Wide> weights_;
};

template <class T>
class TowerObjective {
 public:
  TowerObjective(const TowerNet<T>& net, std::span<const CheckSample> samples, LossKind kind)
      : net_(net.template cast<Wide>()), samples_(samples.begin(), samples.end()), kind_(kind) {
    if (kind == LossKind::kPolicy) throw Error("grad_check: tower nets have no policy head");
    const Wide margin = 5e-3L;
    auto& bottom = net_.bottom();
    detail::nudge_bias<Wide>(bottom.dense.b, [&](std::size_t s) {
      BottomCache<Wide> c;
      bottom.forward(samples_[s].x, c);
      return c.pre;
    }, samples_.size(), margin);
    detail::nudge_bias<Wide>(net_.head().dense.b, [&](std::size_t s) {
      BottomCache<Wide> c;
      bottom.forward(samples_[s].x, c);
      HeadCache<Wide> hc;
      net_.head().forward(c.act, hc);
      return hc.pre;
    }, samples_.size(), margin);
    for (const auto& s : samples_) weights_.push_back(fnw_weight(net_.predict(s.x), s.label));
  }

  void zero_grad() { net_.zero_grad(); }

  Wide accumulate() {
    Wide total = 0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      const auto& s = samples_[i];
      const Wide w = weights_[i];
      total += net_.accumulate(s.x, [&](Wide p) { return detail::scalar_loss(kind_, p, s.label, w); });
    }
    return total;
  }

  Wide loss() const {
    Wide total = 0;
    for (std::size_t i = 0; i < samples_.size(); ++i) {
      total += detail::scalar_loss(kind_, net_.predict(samples_[i].x), samples_[i].label, weights_[i]).loss;
    }
    return total;
  }

  std::vector<ParamRef<Wide>> params() {
    std::vector<ParamRef<Wide>> out;
    net_.embedding().for_each_row([&](std::uint32_t idx, std::span<Wide> v, std::span<Wide> g) {
      out.push_back({"embedding[" + std::to_string(idx) + "]", v, g});
    });
    net_.for_each_tensor([&](Tensor<Wide>& t) { out.push_back({t.name, t.value, t.grad}); });
    return out;
  }

 private:
  TowerNet<Wide> net_;
  std::vector<CheckSample> samples_;
  LossKind kind_;
  std::vector<Wide> weights_;
};

// Max relative error between analytic and finite-difference gradients for one
// head and loss, evaluated on a wide-precision copy of the network.
template <class T>
double grad_check(const SharedBottomNet<T>& net, std::span<const CheckSample> samples, std::size_t head,
                  LossKind kind) {
  SharedBottomObjective<T> obj(net, samples, head, kind);
  return max_relative_error(obj);
}

template <class T>
double grad_check(const TowerNet<T>& net, std::span<const CheckSample> samples, LossKind kind) {
  TowerObjective<T> obj(net, samples, kind);
  return max_relative_error(obj);
}

}  // namespace ftp::nn
