#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ftp/core.hpp"

namespace ftp::nn {

class NumericError : public Error {
 public:
  NumericError(const std::string& tensor, const std::string& what)
      : Error("non-finite " + what + " in tensor '" + tensor + "'"), tensor_(tensor) {}
  const std::string& tensor() const { return tensor_; }

 private:
  std::string tensor_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double l2 = 0.0;
};

// Dense parameter tensor with its gradient and Adam moments.
template <class T>
struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;
  bool touched = false;

  Tensor() = default;
  Tensor(std::string n, std::vector<std::size_t> s) : name(std::move(n)), shape(std::move(s)) {
    std::size_t size = 1;
    for (auto d : shape) size *= d;
    value.assign(size, T(0));
    grad.assign(size, T(0));
    m.assign(size, T(0));
    v.assign(size, T(0));
  }

  std::size_t size() const { return value.size(); }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(name, shape);
    for (std::size_t i = 0; i < size(); ++i) {
      out.value[i] = static_cast<U>(value[i]);
      out.m[i] = static_cast<U>(m[i]);
      out.v[i] = static_cast<U>(v[i]);
    }
    out.step = step;
    return out;
  }

  void zero_grad() {
    std::fill(grad.begin(), grad.end(), T(0));
    touched = false;
  }
};

// One Adam update on a contiguous block. L2 is folded into the gradient before
// the moment updates. Returns false if the gradient block holds a NaN or Inf.
template <class T>
bool adam_update(std::span<T> value, std::span<T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t step, const AdamConfig& h) {
  for (auto g : grad) {
    if (!std::isfinite(static_cast<double>(g))) return false;
  }
  const T b1 = static_cast<T>(h.beta1);
  const T b2 = static_cast<T>(h.beta2);
  const T l2 = static_cast<T>(h.l2);
  const T c1 = static_cast<T>(1.0 - std::pow(h.beta1, static_cast<double>(step)));
  const T c2 = static_cast<T>(1.0 - std::pow(h.beta2, static_cast<double>(step)));
  const T lr = static_cast<T>(h.lr);
  const T eps = static_cast<T>(h.eps);
  for (std::size_t i = 0; i < value.size(); ++i) {
    const T g = grad[i] + l2 * value[i];
    m[i] = b1 * m[i] + (T(1) - b1) * g;
    v[i] = b2 * v[i] + (T(1) - b2) * g * g;
    const T mhat = m[i] / c1;
    const T vhat = v[i] / c2;
    value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    grad[i] = T(0);
  }
  return true;
}

// Steps the tensor if it received gradient since the last step.
template <class T>
void adam_step(Tensor<T>& t, const AdamConfig& h) {
  if (!t.touched) return;
  ++t.step;
  if (!adam_update<T>(t.value, t.grad, t.m, t.v, t.step, h)) throw NumericError(t.name, "gradient");
  t.touched = false;
}

}  // namespace ftp::nn
