#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "ftp/nn/checkpoint.hpp"
#include "ftp/nn/grad_check.hpp"
#include "ftp/nn/network.hpp"

using namespace ftp;
using namespace ftp::nn;

namespace {

NetConfig small_config(std::uint64_t seed = 7) {
  NetConfig c;
  c.n_fields = 2;
  c.n_buckets = 4;
  c.embed_dim = 2;
  c.hidden = 6;
  c.embed_init = 0.5;
  c.seed = seed;
  return c;
}

std::vector<CheckSample> random_samples(std::mt19937_64& rng, std::size_t n, std::size_t k_tasks) {
  std::uniform_int_distribution<std::uint32_t> bucket(0, 3);
  std::uniform_int_distribution<int> label(0, 1);
  std::uniform_int_distribution<std::size_t> ks(0, k_tasks - 1);
  std::vector<CheckSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    CheckSample s;
    s.x = {{bucket(rng), 1.0f}, {4 + bucket(rng), 1.0f}};
    s.label = label(rng);
    s.kstar = ks(rng);
    out.push_back(s);
  }
  return out;
}

// Logistic regression over sparse features: the simplest objective the
// finite-difference harness should verify almost exactly.
struct LinearObjective {
  std::vector<Wide> w, g;
  std::vector<CheckSample> samples;

  Wide predict(const SparseVector& x) const {
    Wide z = w.back();
    for (const auto& f : x) z += w[f.index] * f.value;
    return sigmoid(z);
  }
  void zero_grad() { std::fill(g.begin(), g.end(), Wide(0)); }
  Wide accumulate() {
    Wide total = 0;
    for (const auto& s : samples) {
      const auto lg = bce_loss_and_grad(predict(s.x), s.label);
      for (const auto& f : s.x) g[f.index] += lg.dlogit * f.value;
      g.back() += lg.dlogit;
      total += lg.loss;
    }
    return total;
  }
  Wide loss() const {
    Wide total = 0;
    for (const auto& s : samples) total += bce_loss_and_grad(predict(s.x), s.label).loss;
    return total;
  }
  std::vector<ParamRef<Wide>> params() { return {{"w", w, g}}; }
};

}  // namespace

TEST(Loss, BceClosedForm) {
  const auto lg = bce_loss_and_grad(0.5, 1);
  EXPECT_NEAR(lg.loss, std::log(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(lg.dlogit, -0.5);
}

TEST(Loss, BceClampBound) {
  EXPECT_LE(bce_loss_and_grad(1.0, 1).loss, -std::log(1.0 - kProbEps) + 1e-15);
  EXPECT_LE(bce_loss_and_grad(0.0, 0).loss, -std::log(1.0 - kProbEps) + 1e-15);
  EXPECT_TRUE(std::isfinite(bce_loss_and_grad(0.0, 1).loss));
}

TEST(Loss, BceGradientMatchesFiniteDifference) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> z(-4, 4);
  for (int i = 0; i < 200; ++i) {
    const Wide zz = z(rng);
    const int y = i % 2;
    const Wide h = 1e-5L;
    const Wide num = (bce_loss_and_grad(sigmoid(zz + h), y).loss - bce_loss_and_grad(sigmoid(zz - h), y).loss) / (2 * h);
    EXPECT_LT(relative_error(bce_loss_and_grad(sigmoid(zz), y).dlogit, num), 1e-4);
  }
}

TEST(Adam, FirstStepMovesByLearningRate) {
  Tensor<double> t("w", {1});
  t.value[0] = 1.0;
  t.grad[0] = 1.0;
  t.touched = true;
  AdamConfig h;
  h.lr = 0.001;
  adam_step(t, h);
  EXPECT_NEAR(t.value[0], 1.0 - 0.001, 1e-9);
}

TEST(Adam, ZeroGradLeavesParamsUnchanged) {
  Tensor<double> t("w", {3});
  t.value = {1.0, -2.0, 0.5};
  t.touched = true;
  adam_step(t, AdamConfig{});
  EXPECT_EQ(t.value, (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(Adam, MinimizesQuadratic) {
  Tensor<double> t("w", {1});
  AdamConfig h;
  h.lr = 0.05;
  double prev = 9.0;
  int increases = 0;
  for (int i = 0; i < 100; ++i) {
    t.grad[0] = 2 * (t.value[0] - 3.0);
    t.touched = true;
    adam_step(t, h);
    const double loss = (t.value[0] - 3.0) * (t.value[0] - 3.0);
    if (loss > prev) ++increases;
    prev = loss;
  }
  EXPECT_LT(std::abs(t.value[0] - 3.0), 0.5);
  EXPECT_EQ(increases, 0);
}

TEST(Adam, NanGradientNamesTensor) {
  Tensor<float> t("task0.dense2.w", {2});
  t.grad[1] = std::nanf("");
  t.touched = true;
  try {
    adam_step(t, AdamConfig{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.tensor(), "task0.dense2.w");
  }
}

TEST(Network, ZeroInitializedHeadsGiveHalfAndUniformPolicy) {
  SharedBottomNet<float> net(small_config(), 3);
  net.zero_output_layers();
  const auto b = net.predict({{1, 1.0f}, {5, 1.0f}});
  for (auto p : b.task_preds) EXPECT_FLOAT_EQ(p, 0.5f);
  for (auto g : b.policy_weights) EXPECT_NEAR(g, 1.0f / 3, 1e-6);
  EXPECT_NEAR(b.ftp_pred, 0.5f, 1e-6);
}

TEST(Network, FtpPredictionIsConvexCombination) {
  SharedBottomNet<float> net(small_config(), 4);
  std::mt19937_64 rng(1);
  for (const auto& s : random_samples(rng, 100, 4)) {
    const auto b = net.predict(s.x);
    double total = 0, dot = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      total += b.policy_weights[k];
      dot += b.policy_weights[k] * b.task_preds[k];
      EXPECT_GT(b.task_preds[k], 0.0f);
      EXPECT_LT(b.task_preds[k], 1.0f);
    }
    EXPECT_NEAR(total, 1.0, 1e-6);
    EXPECT_NEAR(b.ftp_pred, dot, 1e-6);
    const auto [lo, hi] = std::minmax_element(b.task_preds.begin(), b.task_preds.end());
    EXPECT_GE(b.ftp_pred, *lo - 1e-6f);
    EXPECT_LE(b.ftp_pred, *hi + 1e-6f);
  }
}

TEST(Network, PredictIsDeterministicAndConstructionIsSeeded) {
  SharedBottomNet<float> a(small_config(11), 2), b(small_config(11), 2), c(small_config(12), 2);
  const SparseVector x{{2, 1.0f}, {7, 1.0f}};
  EXPECT_EQ(a.predict(x).task_preds, b.predict(x).task_preds);
  EXPECT_NE(a.predict(x).task_preds, c.predict(x).task_preds);
}

TEST(Network, InitBaseRateSetsOutputBias) {
  auto cfg = small_config();
  cfg.init_base_rate = 0.1;
  TowerNet<double> net(cfg);
  EXPECT_NEAR(net.head().out.b.value[0], std::log(0.1 / 0.9), 1e-12);
}

TEST(Network, PolicyLossLeavesTaskPredictionsUntouched) {
  SharedBottomNet<float> net(small_config(), 3);
  std::mt19937_64 rng(5);
  const auto samples = random_samples(rng, 16, 3);
  std::vector<std::vector<float>> before;
  for (const auto& s : samples) before.push_back(net.task_preds(s.x));
  for (int it = 0; it < 20; ++it) {
    for (const auto& s : samples) net.accumulate_policy(s.x, s.kstar, 1.0f / samples.size());
    net.step(AdamConfig{0.05});
  }
  for (std::size_t i = 0; i < samples.size(); ++i) EXPECT_EQ(net.task_preds(samples[i].x), before[i]);
}

TEST(Network, TaskLossLeavesPolicyHeadParametersUntouched) {
  SharedBottomNet<float> net(small_config(), 3);
  const auto policy_before = net.policy().w.value;
  std::mt19937_64 rng(6);
  const auto samples = random_samples(rng, 16, 3);
  for (const auto& s : samples) {
    net.accumulate_task(1, s.x, [&](float p) { return bce_loss_and_grad(p, s.label); });
  }
  net.step(AdamConfig{0.05});
  EXPECT_EQ(net.policy().w.value, policy_before);
}

TEST(GradCheck, LinearModelBce) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n01;
  LinearObjective obj;
  obj.w.resize(9);
  for (auto& v : obj.w) v = n01(rng);
  obj.g.resize(9);
  obj.samples = random_samples(rng, 20, 1);
  EXPECT_LT(max_relative_error(obj), 1e-6);
}

TEST(GradCheck, EveryHeadEveryLoss) {
  std::mt19937_64 rng(13);
  const std::size_t k = 3;
  SharedBottomNet<float> net(small_config(21), k);
  const auto samples = random_samples(rng, 6, k);
  for (std::size_t head = 0; head < k; ++head) {
    for (auto kind : {LossKind::kBce, LossKind::kFnw, LossKind::kPu}) {
      EXPECT_LT(grad_check(net, samples, head, kind), 1e-4) << "head " << head << " loss " << loss_name(kind);
    }
  }
  EXPECT_LT(grad_check(net, samples, k, LossKind::kPolicy), 1e-4);
  TowerNet<float> tower(small_config(22));
  for (auto kind : {LossKind::kBce, LossKind::kFnw, LossKind::kPu}) {
    EXPECT_LT(grad_check(tower, samples, kind), 1e-4) << loss_name(kind);
  }
}

TEST(GradCheck, SurvivesSamplesNearTheKink) {
  // Forcing a pre-activation to zero exercises the nudge path.
  auto cfg = small_config(31);
  TowerNet<float> tower(cfg);
  std::mt19937_64 rng(2);
  auto samples = random_samples(rng, 4, 1);
  BottomCache<float> c;
  tower.bottom().forward(samples[0].x, c);
  tower.bottom().dense.b.value[0] -= c.pre[0];
  EXPECT_LT(grad_check(tower, samples, LossKind::kBce), 1e-4);
}

TEST(Training, DeterministicUnderSeed) {
  auto run = [] {
    TowerNet<float> net(small_config(3));
    std::mt19937_64 rng(4);
    const auto samples = random_samples(rng, 64, 1);
    for (int epoch = 0; epoch < 5; ++epoch) {
      for (const auto& s : samples) net.accumulate(s.x, [&](float p) { return bce_loss_and_grad(p, s.label); });
      net.step(AdamConfig{0.01});
    }
    std::vector<float> flat;
    net.for_each_tensor([&](const Tensor<float>& t) { flat.insert(flat.end(), t.value.begin(), t.value.end()); });
    return flat;
  };
  EXPECT_EQ(run(), run());
}

TEST(Checkpoint, RoundTripAndShapeMismatch) {
  const auto dir = std::filesystem::temp_directory_path() / "ftp_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "net.bin").string();
  SharedBottomNet<float> net(small_config(8), 3);
  for (const auto& s : std::vector<SparseVector>{{{1, 1.0f}, {6, 1.0f}}}) {
    net.accumulate_task(0, s, [](float p) { return bce_loss_and_grad(p, 1); });
  }
  net.step(AdamConfig{0.1});
  CheckpointWriter w;
  save_net(w, "ftp.", net);
  w.save(path);

  SharedBottomNet<float> other(small_config(99), 3);
  load_net(CheckpointReader(path), "ftp.", other);
  const SparseVector x{{1, 1.0f}, {6, 1.0f}};
  EXPECT_EQ(other.predict(x).task_preds, net.predict(x).task_preds);

  auto wide = small_config(8);
  wide.hidden = 7;
  SharedBottomNet<float> mismatched(wide, 3);
  EXPECT_THROW(load_net(CheckpointReader(path), "ftp.", mismatched), CheckpointError);
  SharedBottomNet<float> fewer_heads(small_config(8), 2);
  EXPECT_THROW(load_net(CheckpointReader(path), "ftp.", fewer_heads), CheckpointError);
  EXPECT_THROW(CheckpointReader((dir / "missing.bin").string()), CheckpointError);
}
