#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

#include "ftp/core.hpp"
#include "ftp/nn/loss.hpp"

namespace ftp {

// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
inline double log_loss(std::span<const double> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw Error("log_loss: size mismatch");
  if (preds.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const double p = nn::clamp_prob(preds[i]);
    sum -= labels[i] ? std::log(p) : std::log(1.0 - p);
  }
  return sum / static_cast<double>(preds.size());
}

// Mann-Whitney AUC with midranks for ties. Undefined when only one class is
// present.
inline std::optional<double> auc(std::span<const double> preds, std::span<const int> labels) {
  if (preds.size() != labels.size()) throw Error("auc: size mismatch");
  const std::size_t n = preds.size();
  std::size_t n_pos = 0;
  for (int y : labels) n_pos += y ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) return std::nullopt;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return preds[a] < preds[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && preds[order[j + 1]] == preds[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (labels[order[k]]) rank_sum += mid;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * static_cast<double>(n_neg));
}

// Sum of predictions over number of positives; undefined without positives.
inline std::optional<double> calibration(std::span<const double> preds, std::span<const int> labels) {
  const auto pos = std::count_if(labels.begin(), labels.end(), [](int y) { return y != 0; });
  if (pos == 0) return std::nullopt;
  return std::accumulate(preds.begin(), preds.end(), 0.0) / static_cast<double>(pos);
}

}  // namespace ftp
