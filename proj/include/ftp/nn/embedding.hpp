#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ftp/ingest.hpp"
#include "ftp/nn/tensor.hpp"

namespace ftp::nn {

// Hashed-index embedding table with lazily materialized rows. A row that has
// never been updated reads as its deterministic initial value, derived from
// (seed, index) only, so materialization order never affects results.
// Adam runs per row with its own step counter and only on touched rows.
template <class T>
class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(std::string name, std::uint32_t dim, double init_scale, std::uint64_t seed)
      : name_(std::move(name)), dim_(dim), init_scale_(init_scale), seed_(seed) {}

  const std::string& name() const { return name_; }
  std::uint32_t dim() const { return dim_; }
  std::size_t rows() const { return keys_.size(); }
  double init_scale() const { return init_scale_; }
  std::uint64_t seed() const { return seed_; }

  void initial_row(std::uint32_t index, std::span<T> out) const {
    std::uint64_t state = detail::splitmix64(seed_ ^ (0x9e3779b97f4a7c15ULL * (index + 1ULL)));
    for (std::uint32_t j = 0; j < dim_; ++j) {
      state = detail::splitmix64(state);
      const double u = static_cast<double>(state >> 11) * 0x1.0p-53;
      out[j] = static_cast<T>((2.0 * u - 1.0) * init_scale_);
    }
  }

  // Adds value * row(index) into out.
  void gather_add(std::uint32_t index, T value, std::span<T> out) const {
    auto it = slot_.find(index);
    if (it != slot_.end()) {
      const T* row = &value_[static_cast<std::size_t>(it->second) * dim_];
      for (std::uint32_t j = 0; j < dim_; ++j) out[j] += value * row[j];
      return;
    }
    T tmp[64];
    std::vector<T> big;
    std::span<T> buf = dim_ <= 64 ? std::span<T>(tmp, dim_) : (big.resize(dim_), std::span<T>(big));
    initial_row(index, buf);
    for (std::uint32_t j = 0; j < dim_; ++j) out[j] += value * buf[j];
  }

  void accumulate_grad(std::uint32_t index, std::span<const T> g, T scale) {
    const auto s = materialize(index);
    T* grow = &grad_[static_cast<std::size_t>(s) * dim_];
    for (std::uint32_t j = 0; j < dim_; ++j) grow[j] += scale * g[j];
    if (!touched_flag_[s]) {
      touched_flag_[s] = 1;
      touched_.push_back(s);
    }
  }

  void step(const AdamConfig& h) {
    for (auto s : touched_) {
      const std::size_t off = static_cast<std::size_t>(s) * dim_;
      ++steps_[s];
      auto sub = [&](std::vector<T>& v) { return std::span<T>(v).subspan(off, dim_); };
      if (!adam_update<T>(sub(value_), sub(grad_), sub(m_), sub(v_), steps_[s], h)) {
        throw NumericError(name_ + "[" + std::to_string(keys_[s]) + "]", "gradient");
      }
      touched_flag_[s] = 0;
    }
    touched_.clear();
  }

  void zero_grad() {
    for (auto s : touched_) {
      std::fill_n(grad_.begin() + static_cast<std::ptrdiff_t>(s) * dim_, dim_, T(0));
      touched_flag_[s] = 0;
    }
    touched_.clear();
  }

  // Visits every materialized row as (index, value span, grad span).
  template <class Fn>
  void for_each_row(Fn&& fn) {
    for (std::size_t s = 0; s < keys_.size(); ++s) {
      fn(keys_[s], std::span<T>(value_).subspan(s * dim_, dim_),
         std::span<T>(grad_).subspan(s * dim_, dim_));
    }
  }

  // Materialized rows sorted by index, for checkpoints.
  std::vector<std::uint32_t> sorted_keys() const {
    auto k = keys_;
    std::sort(k.begin(), k.end());
    return k;
  }
  std::span<const T> row(std::uint32_t index) const {
    return std::span<const T>(value_).subspan(static_cast<std::size_t>(slot_.at(index)) * dim_, dim_);
  }
  void set_row(std::uint32_t index, std::span<const T> values) {
    const auto s = materialize(index);
    std::copy(values.begin(), values.end(), value_.begin() + static_cast<std::ptrdiff_t>(s) * dim_);
  }

  template <class U>
  EmbeddingTable<U> cast() const {
    EmbeddingTable<U> out(name_, dim_, init_scale_, seed_);
    std::vector<U> buf(dim_);
    for (std::size_t s = 0; s < keys_.size(); ++s) {
      for (std::uint32_t j = 0; j < dim_; ++j) buf[j] = static_cast<U>(value_[s * dim_ + j]);
      out.set_row(keys_[s], buf);
    }
    return out;
  }

 private:
  std::uint32_t materialize(std::uint32_t index) {
    auto [it, inserted] = slot_.try_emplace(index, static_cast<std::uint32_t>(keys_.size()));
    if (inserted) {
      keys_.push_back(index);
      const std::size_t off = value_.size();
      value_.resize(off + dim_);
      grad_.resize(off + dim_, T(0));
      m_.resize(off + dim_, T(0));
      v_.resize(off + dim_, T(0));
      steps_.push_back(0);
      touched_flag_.push_back(0);
      initial_row(index, std::span<T>(value_).subspan(off, dim_));
    }
    return it->second;
  }

  std::string name_;
  std::uint32_t dim_ = 0;
  double init_scale_ = 0.0;
  std::uint64_t seed_ = 0;
  std::unordered_map<std::uint32_t, std::uint32_t> slot_;
  std::vector<std::uint32_t> keys_;
  std::vector<T> value_, grad_, m_, v_;
  std::vector<std::int64_t> steps_;
  std::vector<char> touched_flag_;
  std::vector<std::uint32_t> touched_;
};

}  // namespace ftp::nn
