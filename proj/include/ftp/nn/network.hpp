#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ftp/core.hpp"
#include "ftp/nn/embedding.hpp"
#include "ftp/nn/layers.hpp"
#include "ftp/nn/loss.hpp"

namespace ftp::nn {

struct NetConfig {
  std::uint32_t n_fields = 1;
  std::uint32_t n_buckets = 2;
  std::uint32_t embed_dim = 8;
  std::uint32_t hidden = 128;
  double leaky_slope = 0.01;
  double embed_init = 0.05;
  // Output biases start at logit(init_base_rate) when set, else at 0.
  std::optional<double> init_base_rate;
  std::uint64_t seed = 1;
};

template <class T>
struct BottomCache {
  std::vector<T> input, pre, act;
};

template <class T>
struct HeadCache {
  std::vector<T> pre, act;
  T logit = 0;
};

// Embeddings (one pooled slot per field) followed by the first dense layer.
template <class T>
struct Bottom {
  NetConfig cfg;
  EmbeddingTable<T> embedding;
  Dense<T> dense;

  Bottom() = default;
  Bottom(const NetConfig& c, const std::string& prefix)
      : cfg(c),
        embedding(prefix + "embedding", c.embed_dim, c.embed_init, c.seed ^ detail::fnv1a64(prefix)),
        dense(prefix + "dense1", std::size_t{c.n_fields} * c.embed_dim, c.hidden, c.seed) {}

  std::size_t input_width() const { return std::size_t{cfg.n_fields} * cfg.embed_dim; }

  void forward(const SparseVector& x, BottomCache<T>& c) const {
    c.input.assign(input_width(), T(0));
    c.pre.resize(cfg.hidden);
    c.act.resize(cfg.hidden);
    for (const auto& f : x) {
      const std::uint32_t field = f.index / cfg.n_buckets;
      if (field >= cfg.n_fields) throw Error("feature index " + std::to_string(f.index) + " out of range");
      embedding.gather_add(f.index, static_cast<T>(f.value),
                           std::span<T>(c.input).subspan(std::size_t{field} * cfg.embed_dim, cfg.embed_dim));
    }
    dense.forward(c.input, c.pre);
    leaky_relu<T>(c.pre, c.act, static_cast<T>(cfg.leaky_slope));
  }

  // d_act is consumed (scaled in place by the activation derivative).
  void backward(const SparseVector& x, const BottomCache<T>& c, std::span<T> d_act,
                std::vector<T>& d_input) {
    leaky_relu_backward<T>(c.pre, d_act, static_cast<T>(cfg.leaky_slope));
    d_input.resize(input_width());
    dense.backward(c.input, d_act, d_input);
    for (const auto& f : x) {
      const std::uint32_t field = f.index / cfg.n_buckets;
      embedding.accumulate_grad(
          f.index, std::span<const T>(d_input).subspan(std::size_t{field} * cfg.embed_dim, cfg.embed_dim),
          static_cast<T>(f.value));
    }
  }

  template <class U>
  Bottom<U> cast() const {
    Bottom<U> b;
    b.cfg = cfg;
    b.embedding = embedding.template cast<U>();
    b.dense = dense.template cast<U>();
    return b;
  }
};

// Second dense layer plus a scalar logit.
template <class T>
struct Head {
  Dense<T> dense;
  Dense<T> out;
  T slope = T(0.01);

  Head() = default;
  Head(const NetConfig& c, const std::string& prefix)
      : dense(prefix + "dense2", c.hidden, c.hidden, c.seed),
        out(prefix + "out", c.hidden, 1, c.seed),
        slope(static_cast<T>(c.leaky_slope)) {
    if (c.init_base_rate) out.b.value[0] = static_cast<T>(std::log(*c.init_base_rate / (1.0 - *c.init_base_rate)));
  }

  T forward(std::span<const T> h1, HeadCache<T>& c) const {
    c.pre.resize(dense.out);
    c.act.resize(dense.out);
    dense.forward(h1, c.pre);
    leaky_relu<T>(c.pre, c.act, slope);
    T z;
    out.forward(c.act, std::span<T>(&z, 1));
    c.logit = z;
    return z;
  }

  // Accumulates head gradients and adds dL/dh1 into d_h1.
  void backward(std::span<const T> h1, const HeadCache<T>& c, T dlogit, std::span<T> d_h1,
                std::vector<T>& scratch_act, std::vector<T>& scratch_in) {
    scratch_act.resize(dense.out);
    out.backward(c.act, std::span<const T>(&dlogit, 1), scratch_act);
    leaky_relu_backward<T>(c.pre, scratch_act, slope);
    scratch_in.resize(dense.in);
    dense.backward(h1, scratch_act, scratch_in);
    for (std::size_t i = 0; i < d_h1.size(); ++i) d_h1[i] += scratch_in[i];
  }

  void zero_output() {
    std::fill(out.w.value.begin(), out.w.value.end(), T(0));
    out.b.value[0] = T(0);
  }

  template <class U>
  Head<U> cast() const {
    Head<U> h;
    h.dense = dense.template cast<U>();
    h.out = out.template cast<U>();
    h.slope = static_cast<U>(slope);
    return h;
  }
};

template <class T>
struct PredictionBundle {
  std::vector<T> task_preds;
  std::vector<T> policy_weights;
  T ftp_pred = 0;
};

template <class T>
using LossFn = std::function<LossGrad<T>(T)>;

// Shared bottom with K task heads and a K-way softmax policy head. Task losses
// train their head, the bottom and the embeddings; the policy loss trains the
// policy head only.
template <class T>
class SharedBottomNet {
 public:
  SharedBottomNet() = default;
  SharedBottomNet(const NetConfig& cfg, std::size_t n_tasks) : bottom_(cfg, "") {
    if (n_tasks == 0) throw Error("need at least one task head");
    for (std::size_t k = 0; k < n_tasks; ++k) heads_.emplace_back(cfg, "task" + std::to_string(k) + ".");
    policy_ = Dense<T>("policy", cfg.hidden, n_tasks, cfg.seed);
  }

  std::size_t n_tasks() const { return heads_.size(); }
  const NetConfig& config() const { return bottom_.cfg; }

  PredictionBundle<T> predict(const SparseVector& x) const {
    BottomCache<T> bc;
    bottom_.forward(x, bc);
    PredictionBundle<T> out;
    HeadCache<T> hc;
    for (const auto& h : heads_) out.task_preds.push_back(sigmoid(h.forward(bc.act, hc)));
    out.policy_weights = policy_weights_from(bc.act);
    for (std::size_t k = 0; k < heads_.size(); ++k) out.ftp_pred += out.policy_weights[k] * out.task_preds[k];
    return out;
  }

  std::vector<T> task_preds(const SparseVector& x) const {
    BottomCache<T> bc;
    bottom_.forward(x, bc);
    HeadCache<T> hc;
    std::vector<T> p;
    for (const auto& h : heads_) p.push_back(sigmoid(h.forward(bc.act, hc)));
    return p;
  }

  std::vector<T> policy_weights(const SparseVector& x) const {
    BottomCache<T> bc;
    bottom_.forward(x, bc);
    return policy_weights_from(bc.act);
  }

  // Adds scale * dL_k/dtheta for one sample; returns the unscaled loss.
  T accumulate_task(std::size_t k, const SparseVector& x, const LossFn<T>& loss_fn, T scale = T(1)) {
    bottom_.forward(x, bc_);
    const T z = heads_[k].forward(bc_.act, hc_);
    const auto lg = loss_fn(sigmoid(z));
    d_h1_.assign(bottom_.cfg.hidden, T(0));
    heads_[k].backward(bc_.act, hc_, scale * lg.dlogit, d_h1_, scratch_a_, scratch_b_);
    bottom_.backward(x, bc_, d_h1_, d_input_);
    return lg.loss;
  }

  // Policy cross-entropy toward k*; the bottom output is treated as a constant.
  T accumulate_policy(const SparseVector& x, std::size_t kstar, T scale = T(1)) {
    bottom_.forward(x, bc_);
    logits_.resize(heads_.size());
    policy_.forward(bc_.act, logits_);
    dlogits_.resize(heads_.size());
    const T loss = policy_loss_and_grad<T>(logits_, kstar, dlogits_);
    for (auto& d : dlogits_) d *= scale;
    policy_.backward(bc_.act, dlogits_, std::span<T>());
    return loss;
  }

  void step(const AdamConfig& h) {
    bottom_.embedding.step(h);
    for_each_tensor([&](Tensor<T>& t) { adam_step(t, h); });
  }

  void zero_grad() {
    bottom_.embedding.zero_grad();
    for_each_tensor([](Tensor<T>& t) { t.zero_grad(); });
  }

  // Zeroes every output layer so task heads read 0.5 and the policy is uniform.
  void zero_output_layers() {
    for (auto& h : heads_) h.zero_output();
    std::fill(policy_.w.value.begin(), policy_.w.value.end(), T(0));
    std::fill(policy_.b.value.begin(), policy_.b.value.end(), T(0));
  }

  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    fn(bottom_.dense.w);
    fn(bottom_.dense.b);
    for (auto& h : heads_) {
      fn(h.dense.w);
      fn(h.dense.b);
      fn(h.out.w);
      fn(h.out.b);
    }
    fn(policy_.w);
    fn(policy_.b);
  }
  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<SharedBottomNet*>(this)->for_each_tensor([&](const Tensor<T>& t) { fn(t); });
  }

  EmbeddingTable<T>& embedding() { return bottom_.embedding; }
  const EmbeddingTable<T>& embedding() const { return bottom_.embedding; }
  Bottom<T>& bottom() { return bottom_; }
  const Bottom<T>& bottom() const { return bottom_; }
  std::vector<Head<T>>& heads() { return heads_; }
  Dense<T>& policy() { return policy_; }

  template <class U>
  SharedBottomNet<U> cast() const {
    SharedBottomNet<U> n;
    n.bottom() = bottom_.template cast<U>();
    for (const auto& h : heads_) n.heads().push_back(h.template cast<U>());
    n.policy() = policy_.template cast<U>();
    return n;
  }

 private:
  std::vector<T> policy_weights_from(std::span<const T> h1) const {
    std::vector<T> z(heads_.size()), g(heads_.size());
    policy_.forward(h1, z);
    softmax<T>(z, g);
    return g;
  }

  Bottom<T> bottom_;
  std::vector<Head<T>> heads_;
  Dense<T> policy_;

  BottomCache<T> bc_;
  HeadCache<T> hc_;
  std::vector<T> d_h1_, d_input_, scratch_a_, scratch_b_, logits_, dlogits_;
};

// Single-head network: embeddings, two dense layers, one sigmoid output. Used
// by the prophet and every baseline.
template <class T>
class TowerNet {
 public:
  TowerNet() = default;
  explicit TowerNet(const NetConfig& cfg) : bottom_(cfg, ""), head_(cfg, "head.") {}

  const NetConfig& config() const { return bottom_.cfg; }

  T predict_logit(const SparseVector& x) const {
    BottomCache<T> bc;
    bottom_.forward(x, bc);
    HeadCache<T> hc;
    return head_.forward(bc.act, hc);
  }
  T predict(const SparseVector& x) const { return sigmoid(predict_logit(x)); }

  T accumulate(const SparseVector& x, const LossFn<T>& loss_fn, T scale = T(1)) {
    bottom_.forward(x, bc_);
    const T z = head_.forward(bc_.act, hc_);
    const auto lg = loss_fn(sigmoid(z));
    d_h1_.assign(bottom_.cfg.hidden, T(0));
    head_.backward(bc_.act, hc_, scale * lg.dlogit, d_h1_, scratch_a_, scratch_b_);
    bottom_.backward(x, bc_, d_h1_, d_input_);
    return lg.loss;
  }

  void step(const AdamConfig& h) {
    bottom_.embedding.step(h);
    for_each_tensor([&](Tensor<T>& t) { adam_step(t, h); });
  }

  void zero_grad() {
    bottom_.embedding.zero_grad();
    for_each_tensor([](Tensor<T>& t) { t.zero_grad(); });
  }

  void zero_output_layers() { head_.zero_output(); }

  template <class Fn>
  void for_each_tensor(Fn&& fn) {
    fn(bottom_.dense.w);
    fn(bottom_.dense.b);
    fn(head_.dense.w);
    fn(head_.dense.b);
    fn(head_.out.w);
    fn(head_.out.b);
  }
  template <class Fn>
  void for_each_tensor(Fn&& fn) const {
    const_cast<TowerNet*>(this)->for_each_tensor([&](const Tensor<T>& t) { fn(t); });
  }

  EmbeddingTable<T>& embedding() { return bottom_.embedding; }
  const EmbeddingTable<T>& embedding() const { return bottom_.embedding; }
  Bottom<T>& bottom() { return bottom_; }
  const Bottom<T>& bottom() const { return bottom_; }
  Head<T>& head() { return head_; }

  template <class U>
  TowerNet<U> cast() const {
    TowerNet<U> n;
    n.bottom() = bottom_.template cast<U>();
    n.head() = head_.template cast<U>();
    return n;
  }

 private:
  Bottom<T> bottom_;
  Head<T> head_;

  BottomCache<T> bc_;
  HeadCache<T> hc_;
  std::vector<T> d_h1_, d_input_, scratch_a_, scratch_b_;
};

}  // namespace ftp::nn
