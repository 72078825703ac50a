#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "ftp/nn/layers.hpp"

namespace ftp::nn {

inline constexpr double kProbEps = 1e-7;

template <class T>
T clamp_prob(T p) {
  return std::clamp(p, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
}

// Loss value and its derivative with respect to the head's logit.
template <class T>
struct LossGrad {
  T loss = 0;
  T dlogit = 0;
};

template <class T>
LossGrad<T> bce_loss_and_grad(T p, int y) {
  const T pc = clamp_prob(p);
  const T loss = y != 0 ? -std::log(pc) : -std::log(T(1) - pc);
  return {loss, p - static_cast<T>(y)};
}

// Importance weight of a fake-negative event, computed from the model's own
// prediction and treated as a constant. Positives: 1 + p. Negatives:
// (1 + p)(1 - p).
template <class T>
T fnw_weight(T p, int y) {
  const T pc = std::clamp(p, T(0), static_cast<T>(1.0 - kProbEps));
  return y != 0 ? T(1) + pc : (T(1) + pc) * (T(1) - pc);
}

template <class T>
LossGrad<T> fnw_loss(T p, int y) {
  const T w = fnw_weight(p, y);
  const auto base = bce_loss_and_grad(p, y);
  return {w * base.loss, w * base.dlogit};
}

// Unbiased positive-unlabeled risk on the fake-negative stream. Every record
// appears once as unlabeled (label 0); converters appear again as positives
// (label 1) which add -log p and cancel the negative-class term they already
// contributed. The positive-event loss is -logit(p), so its logit gradient is -1.
template <class T>
LossGrad<T> pu_loss(T p, int y) {
  const T pc = clamp_prob(p);
  if (y != 0) return {-std::log(pc) + std::log(T(1) - pc), T(-1)};
  return {-std::log(T(1) - pc), p};
}

// Inverts q = p / (1 + p) for a model trained with plain BCE on the
// fake-negative stream. The result is clamped to [eps, 1 - eps]; `clamped`
// reports hitting the upper bound (q >= ~1/2, where the inverse leaves (0, 1)).
template <class T>
T fnc_calibrate(T q, bool* clamped = nullptr) {
  bool c = false;
  T p;
  if (q >= T(1)) {
    p = static_cast<T>(1.0 - kProbEps);
    c = true;
  } else {
    p = q / (T(1) - q);
    if (p < static_cast<T>(kProbEps) || p > static_cast<T>(1.0 - kProbEps)) {
      c = p > static_cast<T>(1.0 - kProbEps);
      p = clamp_prob(p);
    }
  }
  if (clamped != nullptr) *clamped = c;
  return p;
}

// -log g_{k*} for softmax policy weights; dlogits = g - onehot(k*).
template <class T>
T policy_loss_and_grad(std::span<const T> logits, std::size_t kstar, std::span<T> dlogits) {
  softmax<T>(logits, dlogits);
  const T loss = -std::log(std::max(dlogits[kstar], static_cast<T>(1e-30)));
  dlogits[kstar] -= T(1);
  return loss;
}

}  // namespace ftp::nn
