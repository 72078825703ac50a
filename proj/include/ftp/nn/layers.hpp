#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ftp/ingest.hpp"
#include "ftp/nn/tensor.hpp"

namespace ftp::nn {

template <class T>
T sigmoid(T z) {
  if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
  const T e = std::exp(z);
  return e / (T(1) + e);
}

template <class T>
T logit(T p) {
  return std::log(p / (T(1) - p));
}

template <class T>
void softmax(std::span<const T> z, std::span<T> out) {
  T mx = z[0];
  for (auto v : z) mx = std::max(mx, v);
  T total = 0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    out[i] = std::exp(z[i] - mx);
    total += out[i];
  }
  for (auto& v : out) v /= total;
}

// Deterministic uniform fill in [-scale, scale] keyed by (seed, tensor name).
template <class T>
void uniform_fill(std::span<T> values, double scale, std::uint64_t seed, const std::string& name) {
  std::uint64_t state = detail::splitmix64(seed ^ detail::fnv1a64(name));
  for (auto& v : values) {
    state = detail::splitmix64(state);
    const double u = static_cast<double>(state >> 11) * 0x1.0p-53;
    v = static_cast<T>((2.0 * u - 1.0) * scale);
  }
}

// y = W x + b, W stored row-major as [out, in].
template <class T>
struct Dense {
  std::size_t in = 0;
  std::size_t out = 0;
  Tensor<T> w;
  Tensor<T> b;

  Dense() = default;
  Dense(const std::string& name, std::size_t n_in, std::size_t n_out, std::uint64_t seed)
      : in(n_in), out(n_out), w(name + ".w", {n_out, n_in}), b(name + ".b", {n_out}) {
    uniform_fill<T>(w.value, 1.0 / std::sqrt(static_cast<double>(n_in)), seed, w.name);
  }

  void forward(std::span<const T> x, std::span<T> y) const {
    const T* wr = w.value.data();
    for (std::size_t o = 0; o < out; ++o, wr += in) {
      T acc = b.value[o];
      for (std::size_t i = 0; i < in; ++i) acc += wr[i] * x[i];
      y[o] = acc;
    }
  }

  // Accumulates parameter gradients; writes dL/dx into dx when non-empty.
  void backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
    T* gr = w.grad.data();
    for (std::size_t o = 0; o < out; ++o, gr += in) {
      const T d = dy[o];
      b.grad[o] += d;
      if (d == T(0)) continue;
      for (std::size_t i = 0; i < in; ++i) gr[i] += d * x[i];
    }
    w.touched = b.touched = true;
    if (dx.empty()) return;
    std::fill(dx.begin(), dx.end(), T(0));
    const T* wr = w.value.data();
    for (std::size_t o = 0; o < out; ++o, wr += in) {
      const T d = dy[o];
      if (d == T(0)) continue;
      for (std::size_t i = 0; i < in; ++i) dx[i] += d * wr[i];
    }
  }

  template <class U>
  Dense<U> cast() const {
    Dense<U> d;
    d.in = in;
    d.out = out;
    d.w = w.template cast<U>();
    d.b = b.template cast<U>();
    return d;
  }
};

template <class T>
void leaky_relu(std::span<const T> pre, std::span<T> act, T slope) {
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = pre[i] > T(0) ? pre[i] : slope * pre[i];
}

template <class T>
void leaky_relu_backward(std::span<const T> pre, std::span<T> grad, T slope) {
  for (std::size_t i = 0; i < pre.size(); ++i) {
    if (!(pre[i] > T(0))) grad[i] *= slope;
  }
}

}  // namespace ftp::nn
