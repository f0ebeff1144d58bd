#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "gloss/optimizer.hpp"
#include "support.hpp"

using namespace gloss;

namespace {

ParamSet<double> one_layer(double w, double b, double gain) {
  LayerParams<double> l;
  l.weights = Tensor<double>({1, 1, 1, 1}, w);
  l.biases = Tensor<double>({1}, b);
  if (gain != 0) {
    l.bn_gain = Tensor<double>({1}, gain);
    l.bn_bias = Tensor<double>({1}, 0.5);
    l.bn_running_mean = Tensor<double>({1});
    l.bn_running_var = Tensor<double>({1}, 1.0);
  }
  return {TowerParams<double>{{l}}};
}

struct ToyRun {
  ToySet set;
  Tensor<float> items;
  std::vector<Triplet> triplets;
  ArchSpec spec;
};

ToyRun toy_run(std::size_t triplets, std::uint64_t seed) {
  ToyRun r;
  r.set = make_toy_set(seed);
  r.items = toy_points_tensor<float>(r.set.points);
  std::vector<std::int64_t> ids(r.set.labels.begin(), r.set.labels.end());
  r.triplets = sample_triplets(ids, triplets, seed);
  r.spec = parse_arch("B(32,2,1)-B(32,1,1)-C(16,1,1)", {2, 1, 1});
  return r;
}

bool eq(const Tensor<float>& a, const Tensor<float>& b) {
  return a.shape() == b.shape() && std::ranges::equal(a.values(), b.values());
}

bool same_params(const Network<float>& a, const Network<float>& b) {
  const auto pa = a.params(), pb = b.params();
  for (std::size_t l = 0; l < pa[0].layers.size(); ++l) {
    const auto& x = pa[0].layers[l];
    const auto& y = pb[0].layers[l];
    if (!eq(x.weights, y.weights) || !eq(x.biases, y.biases) || !eq(x.bn_gain, y.bn_gain) ||
        !eq(x.bn_bias, y.bn_bias) || !eq(x.bn_running_mean, y.bn_running_mean)) {
      return false;
    }
  }
  return true;
}

}  // namespace

TEST(LrSchedule, EndpointsAndGeometricMidpoint) {
  TrainConfig c;
  c.epochs = 100;
  EXPECT_EQ(lr_schedule(0, c), 0.01);
  EXPECT_EQ(lr_schedule(99, c), 0.0001);
  c.epochs = 3;
  EXPECT_NEAR(lr_schedule(1, c), std::sqrt(0.01 * 0.0001), 1e-15);
  c.epochs = 1;
  EXPECT_EQ(lr_schedule(0, c), 0.01);
  c.epochs = 37;
  for (int e = 1; e < 37; ++e) EXPECT_LE(lr_schedule(e, c), lr_schedule(e - 1, c));
  EXPECT_THROW(lr_schedule(37, c), UsageError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lr_end = 0.1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.momentum = 1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.weight_decay = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = {};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Sgd, FixedPointAndPlainStep) {
  TrainConfig c;
  c.weight_decay = 0;
  auto p = one_layer(0.3, -0.2, 0);
  auto v = zeros_like(p);
  const auto zero = zeros_like(p);
  for (int i = 0; i < 5; ++i) sgd_step(p, zero, v, 0.1, c);
  EXPECT_EQ(p[0].layers[0].weights[0], 0.3);
  EXPECT_EQ(p[0].layers[0].biases[0], -0.2);

  c.momentum = 0;
  auto g = one_layer(2.0, -1.0, 0);
  sgd_step(p, g, v, 0.1, c);
  EXPECT_DOUBLE_EQ(p[0].layers[0].weights[0], 0.3 - 0.1 * 2.0);
  EXPECT_DOUBLE_EQ(p[0].layers[0].biases[0], -0.2 + 0.1);
}

TEST(Sgd, MomentumUnrollsOverTwoSteps) {
  TrainConfig c;
  c.weight_decay = 0;
  auto p = one_layer(0, 0, 0);
  auto v = zeros_like(p);
  const auto g = one_layer(0.5, 0, 0);
  sgd_step(p, g, v, 0.01, c);
  sgd_step(p, g, v, 0.01, c);
  EXPECT_NEAR(v[0].layers[0].weights[0], -0.01 * 0.5 * 1.9, 1e-15);
  EXPECT_NEAR(p[0].layers[0].weights[0], -0.01 * 0.5 * 2.9, 1e-15);
}

TEST(Sgd, WeightDecaySkipsBatchNorm) {
  TrainConfig c;
  c.momentum = 0;
  c.weight_decay = 0.5;
  auto p = one_layer(2.0, 0.0, 3.0);
  auto v = zeros_like(p);
  sgd_step(p, zeros_like(p), v, 0.1, c);
  EXPECT_DOUBLE_EQ(p[0].layers[0].weights[0], 2.0 - 0.1 * 0.5 * 2.0);
  EXPECT_EQ(p[0].layers[0].bn_gain[0], 3.0);
  EXPECT_EQ(p[0].layers[0].bn_bias[0], 0.5);
}

TEST(Sgd, NonFiniteGradientAbortsWithDiagnostics) {
  TrainConfig c;
  auto p = one_layer(1.0, 0.0, 2.0);
  auto v = zeros_like(p);
  auto g = zeros_like(p);
  g[0].layers[0].weights[0] = 0.5;
  g[0].layers[0].bn_gain[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_step(p, g, v, 0.1, c, 42, 3.5);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("step 42"), std::string::npos) << msg;
    EXPECT_NE(msg.find("3.5"), std::string::npos) << msg;
    EXPECT_NE(msg.find("gain"), std::string::npos) << msg;
  }
  EXPECT_EQ(p[0].layers[0].weights[0], 1.0);
}

TEST(Compatibility, LossNeedsMatchingNetworkKind) {
  EXPECT_THROW(check_compatible(LossKind::GlobalSim, NetworkKind::Triplet), ConfigError);
  EXPECT_THROW(check_compatible(LossKind::Triplet, NetworkKind::SiameseSimilarity), ConfigError);
  EXPECT_NO_THROW(check_compatible(LossKind::GlobalSim, NetworkKind::CentralSurroundSimilarity));
  EXPECT_NO_THROW(check_compatible(LossKind::PairwiseEmbed, NetworkKind::SiameseEmbedding));
}

TEST(Train, StepsPerEpoch) {
  EXPECT_EQ(steps_per_epoch(250000, 250), 1000u);
  EXPECT_EQ(steps_per_epoch(999, 250), 3u);
}

TEST(Train, ZeroEpochsLeavesNetworkUnchanged) {
  const auto r = toy_run(100, 1);
  auto net = Network<float>::embedding(NetworkKind::Triplet, r.spec, 9);
  const auto before = net;
  TrainConfig c;
  c.epochs = 0;
  c.batch_size = 20;
  const TripletDataset<float> data(r.items, r.triplets, false);
  EXPECT_TRUE(train(net, data, LossKind::Triplet, LossConfig{}, c).empty());
  EXPECT_TRUE(same_params(net, before));
}

TEST(Train, DatasetSmallerThanBatch) {
  const auto r = toy_run(10, 1);
  auto net = Network<float>::embedding(NetworkKind::Triplet, r.spec, 9);
  TrainConfig c;
  c.batch_size = 20;
  const TripletDataset<float> data(r.items, r.triplets, false);
  EXPECT_THROW(train(net, data, LossKind::Triplet, LossConfig{}, c), UsageError);
}

TEST(Train, BitwiseReproducible) {
  const auto r = toy_run(200, 2);
  const TripletDataset<float> data(r.items, r.triplets, false);
  TrainConfig c;
  c.epochs = 3;
  c.batch_size = 50;
  c.seed = 5;
  auto a = Network<float>::embedding(NetworkKind::Triplet, r.spec, 9);
  auto b = Network<float>::embedding(NetworkKind::Triplet, r.spec, 9);
  const auto ta = train(a, data, LossKind::TripletGlobal, LossConfig{}, c);
  const auto tb = train(b, data, LossKind::TripletGlobal, LossConfig{}, c);
  ASSERT_EQ(ta.size(), 3u);
  EXPECT_EQ(trace_csv(ta), trace_csv(tb));
  EXPECT_TRUE(same_params(a, b));
  EXPECT_EQ(checkpoint_to_json(a).dump(), checkpoint_to_json(b).dump());
}

TEST(Train, ToyTripletLossDecreasesOver200Epochs) {
  const auto r = toy_run(200, 3);
  const TripletDataset<float> data(r.items, r.triplets, false);
  TrainConfig c;
  c.epochs = 200;
  c.batch_size = 50;
  auto net = Network<float>::embedding(NetworkKind::Triplet, r.spec, 4);
  const auto trace = train(net, data, LossKind::Triplet, LossConfig{}, c);
  ASSERT_EQ(trace.size(), 200u);
  EXPECT_LT(trace.back().mean_loss, trace.front().mean_loss);
  EXPECT_EQ(trace.front().lr, 0.01);
  EXPECT_EQ(trace.back().lr, 0.0001);
}

TEST(Train, TwoPhaseScheduleNumbersEpochsAcrossPhases) {
  const auto r = toy_run(100, 4);
  const TripletDataset<float> data(r.items, r.triplets, false);
  TrainConfig c;
  c.epochs = 2;
  c.init_epochs = 2;
  c.batch_size = 50;
  auto net = Network<float>::embedding(NetworkKind::Triplet, r.spec, 4);
  std::vector<int> seen;
  const auto trace = train_with_init(net, data, LossKind::TripletGlobal, LossConfig{}, c,
                                     [&](const EpochRecord& e, const Network<float>&) { seen.push_back(e.epoch); });
  ASSERT_EQ(trace.size(), 4u);
  EXPECT_EQ(seen, (std::vector<int>{0, 1, 2, 3}));
  EXPECT_EQ(trace[2].lr, 0.01);  // schedule restarts in the second phase
}

TEST(Train, WarmStartLoadsCheckpointExactly) {
  const auto r = toy_run(100, 5);
  const auto dir = testing_support::scratch_dir("warm");
  auto src = Network<float>::embedding(NetworkKind::Triplet, r.spec, 77);
  const TripletDataset<float> data(r.items, r.triplets, false);
  TrainConfig c;
  c.batch_size = 50;
  train(src, data, LossKind::Triplet, LossConfig{}, c);
  save_checkpoint(src, (dir / "src.json").string());

  auto dst = Network<float>::embedding(NetworkKind::Triplet, r.spec, 1);
  c.epochs = 0;
  c.init_from = (dir / "src.json").string();
  train(dst, data, LossKind::Triplet, LossConfig{}, c);
  EXPECT_TRUE(same_params(dst, src));

  auto other = Network<float>::embedding(NetworkKind::Triplet, parse_arch("B(8,2,1)-C(16,1,1)", {2, 1, 1}), 1);
  EXPECT_THROW(train(other, data, LossKind::Triplet, LossConfig{}, c), ConfigError);
}

TEST(Train, SimilarityNetworkTrainsOnTripletBatches) {
  SyntheticOptions o;
  o.classes = 10;
  const auto set = make_synthetic_patches(1, o);
  const TripletDataset<float> data(patches_to_tensor<float>(set), sample_triplets(set.class_ids, 16, 1), true);
  auto net = Network<float>::similarity(parse_arch("B(4,7,3)-P(2,2)-B(8,5,2)-C(1,3,1)", {2, 64, 64}), 3);
  TrainConfig c;
  c.batch_size = 8;
  const auto trace = train(net, data, LossKind::GlobalSim, LossConfig::defaults_for(LossKind::GlobalSim), c);
  ASSERT_EQ(trace.size(), 1u);
  EXPECT_TRUE(std::isfinite(trace[0].mean_loss));
  EXPECT_TRUE(net.groups()[0].params.layers[0].running_ready);
}

TEST(Train, SimilarityPairsShareOneBatchNormPass) {
  SyntheticOptions o;
  o.classes = 6;
  const auto set = make_synthetic_patches(2, o);
  const TripletDataset<double> data(patches_to_tensor<double>(set), sample_triplets(set.class_ids, 4, 2), false);
  const std::vector<std::size_t> idx{0, 1, 2, 3};
  std::mt19937_64 rng(0);
  const auto batch = data.batch(idx, rng);
  auto net = Network<double>::similarity(parse_arch("B(4,7,3)-P(2,2)-B(8,5,2)-C(1,3,1)", {2, 64, 64}), 3);
  const auto r = loss_and_gradients(net, LossKind::GlobalSim, LossConfig::defaults_for(LossKind::GlobalSim), batch,
                                    {false, false, false});
  // matching and non-matching pairs normalised together, as at evaluation
  const auto s = net.similarity(concat_batch<double>({&batch.anchors, &batch.anchors}),
                                concat_batch<double>({&batch.positives, &batch.negatives}), Mode::Train);
  double mp = 0, mm = 0;
  for (std::size_t i = 0; i < 4; ++i) mp += s[i] / 4, mm += s[4 + i] / 4;
  EXPECT_NEAR(r.stats.mu_plus, mp, 1e-12);
  EXPECT_NEAR(r.stats.mu_minus, mm, 1e-12);
}
