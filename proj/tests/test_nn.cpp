#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "quantlens/error.hpp"
#include "quantlens/nn.hpp"

using namespace quantlens;

namespace {

LayerSpec spec(LayerKind k, const std::string& name, std::size_t out = 0, std::size_t kernel = 1) {
  LayerSpec s{k, name, kernel};
  s.channels_out = out;
  return s;
}

Dataset random_dataset(std::size_t n, const Shape& hwc, std::uint64_t seed) {
  SeededRng rng(seed);
  Shape shape{n};
  shape.insert(shape.end(), hwc.begin(), hwc.end());
  Dataset d;
  d.images = sample_uniform<float>(rng, shape, 0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) d.labels.push_back(static_cast<std::uint8_t>(i % 3));
  return d;
}

NetworkF small_dense_net(std::uint64_t seed) {
  std::vector<LayerSpec> specs{spec(LayerKind::Conv2D, "conv", 2, 3), spec(LayerKind::ReLU, "relu"),
                               spec(LayerKind::Flatten, "flat"), spec(LayerKind::Dense, "dense", 3),
                               spec(LayerKind::Softmax, "softmax")};
  SeededRng rng(seed);
  return build_network({4, 4, 1}, specs, rng);
}

}  // namespace

TEST(Forward, IdentityPointwiseThenRelu) {
  SeededRng rng(0);
  NetworkF net = build_network({1, 1, 1}, {spec(LayerKind::Conv2D, "c", 1, 1), spec(LayerKind::ReLU, "r")}, rng);
  net.layers[0].weight = TensorF({1, 1, 1, 1}, 1.0f);
  for (float x : {-2.0f, 0.0f, 3.5f}) {
    const auto out = forward(static_cast<const NetworkF&>(net), TensorF({1, 1, 1, 1}, x));
    EXPECT_EQ(out.activations.back()[0], std::max(x, 0.0f));
  }
}

TEST(Forward, TrainModeBatchNormNormalizes) {
  SeededRng rng(1);
  NetworkF net = build_network({5, 5, 3}, {spec(LayerKind::Conv2D, "c", 4, 3), spec(LayerKind::BatchNorm, "bn")}, rng);
  SeededRng data(2);
  const TensorF x = sample_normal<float>(data, {8, 5, 5, 3}, 2.0, 3.0);
  const auto out = forward(net, x, Mode::Train);
  const TensorF& pre = out.activations[0];
  const TensorF& y = out.activations[1];
  const std::size_t c = 4, n = y.size() / c;
  const auto moments = [&](const TensorF& t, std::size_t ch) {
    double s = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += t[i * c + ch];
    const double mean = s / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) s2 += std::pow(t[i * c + ch] - mean, 2);
    return std::make_pair(mean, s2 / static_cast<double>(n));
  };
  for (std::size_t ch = 0; ch < c; ++ch) {
    const auto [pm, pv] = moments(pre, ch);
    const auto [mean, var] = moments(y, ch);
    EXPECT_NEAR(mean, 0.0, 1e-5);
    // undo the epsilon in the denominator to get the pre-affine variance
    EXPECT_NEAR(var * (pv + 1e-3) / pv, 1.0, 1e-4);
  }
}

TEST(Forward, EvalIsDeterministic) {
  const NetworkF net = small_dense_net(3);
  SeededRng rng(4);
  const TensorF x = sample_uniform<float>(rng, {5, 4, 4, 1}, 0.0, 1.0);
  EXPECT_EQ(forward(net, x).logits, forward(net, x).logits);
}

TEST(Forward, SoftmaxRowsAreDistributions) {
  SeededRng rng(5);
  const TensorF logits = sample_normal<float>(rng, {50, 10}, 0.0, 20.0);
  const TensorF p = softmax_rows(logits);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 10; ++j) {
      EXPECT_GE(p[r * 10 + j], 0.0f);
      s += p[r * 10 + j];
    }
    EXPECT_NEAR(s, 1.0, 1e-6);
  }
}

TEST(Forward, ShapeMismatchAndNonFinite) {
  NetworkF net = small_dense_net(6);
  try {
    forward(static_cast<const NetworkF&>(net), TensorF({1, 5, 4, 1}));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Shape);
  }
  net.layers[3].weight = TensorF(net.layers[3].weight.shape(), 3e38f);
  SeededRng rng(7);
  const TensorF x = sample_uniform<float>(rng, {2, 4, 4, 1}, 1.0, 2.0);
  net.layers[0].weight = TensorF(net.layers[0].weight.shape(), 1.0f);
  try {
    forward(static_cast<const NetworkF&>(net), x);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer_index(), 3u);
  }
}

TEST(Forward, BatchNormEvalMatchesTrainWhenRunningStatsAreTheBatch) {
  SeededRng rng(8);
  NetworkF net = build_network({4, 4, 2}, {spec(LayerKind::Conv2D, "c", 3, 3), spec(LayerKind::BatchNorm, "bn")}, rng);
  net.layers[1].momentum = 0.0;  // running = batch statistics after one step
  SeededRng data(9);
  const TensorF x = sample_normal<float>(data, {6, 4, 4, 2}, 1.0, 2.0);
  const TensorF train_out = forward(net, x, Mode::Train).activations[1];
  const TensorF eval_out = forward(static_cast<const NetworkF&>(net), x).activations[1];
  for (std::size_t i = 0; i < train_out.size(); ++i) EXPECT_NEAR(train_out[i], eval_out[i], 1e-5);
}

TEST(Forward, DepthwiseDeltaThenPointwiseIdentityReproducesInput) {
  SeededRng rng(10);
  NetworkF net = build_network({5, 5, 3}, {spec(LayerKind::DepthwiseConv2D, "dw", 0, 3),
                                           spec(LayerKind::PointwiseConv2D, "pw", 3)}, rng);
  TensorF dw({3, 3, 3, 1});
  for (std::size_t c = 0; c < 3; ++c) dw[c * 9 + 4] = 1.0f;
  net.layers[0].weight = dw;
  TensorF pw({3, 1, 1, 3});
  for (std::size_t c = 0; c < 3; ++c) pw[c * 3 + c] = 1.0f;
  net.layers[1].weight = pw;
  SeededRng data(11);
  const TensorF x = sample_normal<float>(data, {2, 5, 5, 3}, 0.0, 1.0);
  EXPECT_EQ(forward(static_cast<const NetworkF&>(net), x).activations.back(), x);
}

TEST(Backward, MatchesFiniteDifferencesOnEveryLayerKind) {
  for (std::uint64_t seed : {1u, 2u}) {
    for (bool strided : {false, true}) {
      const NetworkD net = checks::toy_net_all_kinds(seed, strided);
      SeededRng rng(seed + 100);
      const TensorD x = sample_normal<double>(rng, {4, strided ? 7u : 6u, strided ? 7u : 6u, 2}, 0.0, 1.0);
      const checks::GradReport r = checks::gradient_check(net, x, {0, 1, 2, 1});
      EXPECT_LT(r.max_rel_error, 1e-4) << r.worst;
      EXPECT_GT(r.checked, 100u);
    }
  }
}

TEST(Backward, ZeroDenseBeforeSoftmaxBlocksUpstreamGradients) {
  NetworkF net = small_dense_net(12);
  net.layers[3].weight = TensorF(net.layers[3].weight.shape(), 0.0f);
  SeededRng rng(13);
  const TensorF x = sample_uniform<float>(rng, {6, 4, 4, 1}, 0.0, 1.0);
  const auto fwd = forward(net, x, Mode::Train);
  const auto g = backward(net, fwd, std::vector<std::uint8_t>{0, 1, 2, 0, 1, 2});
  EXPECT_EQ(g.layers[0].weight_norm, 0.0);
  EXPECT_GT(g.layers[3].weight_norm, 0.0);
}

TEST(Backward, DeadReluGivesExactlyZeroIncomingGradients) {
  NetworkF net = small_dense_net(14);
  net.layers[0].bias = TensorF(net.layers[0].bias.shape(), -100.0f);
  SeededRng rng(15);
  const TensorF x = sample_uniform<float>(rng, {3, 4, 4, 1}, 0.0, 1.0);
  const auto fwd = forward(net, x, Mode::Train);
  const auto g = backward(net, fwd, std::vector<std::uint8_t>{0, 1, 2});
  for (float v : g.layers[0].weight.values()) EXPECT_EQ(v, 0.0f);
  for (float v : g.layers[0].bias.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, RequiresTrainCache) {
  const NetworkF net = small_dense_net(16);
  const auto fwd = forward(net, TensorF({1, 4, 4, 1}));
  try {
    backward(net, fwd, std::vector<std::uint8_t>{0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::Usage);
  }
}

TEST(MacroArch, FirstConvAndDenseAreGlorotUni) {
  SeededRng rng(17);
  const ArchSpec arch;
  const std::size_t n = configurable_conv_count(Variant::DWSConvWithBN, arch);
  EXPECT_EQ(n, 6u);
  const NetworkF net = build_macro_arch(Variant::DWSConvWithBN,
                                        std::vector<InitSpec>(n, InitSpec{InitKind::HeNorm}), arch, rng);
  std::size_t dense = 0;
  for (const LayerF& l : net.layers) {
    if (!has_weights(l.spec.kind)) continue;
    ASSERT_TRUE(l.spec.init.has_value());
    if (l.spec.name == "conv0" || l.spec.kind == LayerKind::Dense) {
      EXPECT_EQ(l.spec.init->kind, InitKind::GlorotUni) << l.spec.name;
      dense += l.spec.kind == LayerKind::Dense;
    } else {
      EXPECT_EQ(l.spec.init->kind, InitKind::HeNorm) << l.spec.name;
    }
  }
  EXPECT_EQ(dense, 3u);
  EXPECT_EQ(net.layers[net.find("conv0") + 1].spec.kind, LayerKind::BatchNorm);
}

TEST(MacroArch, NoBnVariantHasNoBatchNorm) {
  SeededRng rng(18);
  const ArchSpec arch;
  const NetworkF net = build_macro_arch(
      Variant::RegularConvNoBN,
      std::vector<InitSpec>(configurable_conv_count(Variant::RegularConvNoBN, arch), glorot_uniform()),
      arch, rng);
  for (const LayerF& l : net.layers) EXPECT_NE(l.spec.kind, LayerKind::BatchNorm);
  EXPECT_EQ(output_shape(net.layers.back().spec, {10}), (Shape{10}));
}

TEST(MacroArch, SameSeedSameParameters) {
  const ArchSpec arch;
  const std::vector<InitSpec> grid(configurable_conv_count(Variant::RegularConvWithBN, arch),
                                   find_preset("RandNorm_Med"));
  SeededRng a(19), b(19);
  const NetworkF x = build_macro_arch(Variant::RegularConvWithBN, grid, arch, a);
  const NetworkF y = build_macro_arch(Variant::RegularConvWithBN, grid, arch, b);
  for (std::size_t i = 0; i < x.layers.size(); ++i) EXPECT_EQ(x.layers[i].weight, y.layers[i].weight);
  EXPECT_THROW(build_macro_arch(Variant::RegularConvWithBN, {glorot_uniform()}, arch, a), Error);
}

TEST(Schedule, StepDecayAtMilestones) {
  TrainConfig c;
  c.epochs = 200;
  c.milestones = {75, 120, 170};
  EXPECT_DOUBLE_EQ(c.learning_rate_at(1), 0.01);
  EXPECT_DOUBLE_EQ(c.learning_rate_at(75), 0.01);
  EXPECT_NEAR(c.learning_rate_at(76), 0.001, 1e-15);
  EXPECT_NEAR(c.learning_rate_at(121), 0.0001, 1e-15);
  EXPECT_NEAR(c.learning_rate_at(200), 1e-5, 1e-16);
  c.milestones = {20, 10};
  EXPECT_THROW(c.validate(), Error);
}

TEST(Train, OneEpochOnTenSamplesIsOneMomentumStep) {
  NetworkF net = small_dense_net(20);
  const NetworkF before = net;
  const Dataset d = random_dataset(10, {4, 4, 1}, 21);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.milestones = {};
  const TrainLog log = train(net, d, cfg);
  ASSERT_EQ(log.epochs.size(), 1u);
  NetworkF ref = before;
  const auto fwd = forward(ref, d.images, Mode::Train);
  const auto g = backward(ref, fwd, d.labels);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    for (std::size_t j = 0; j < net.layers[i].weight.size(); ++j) {
      const float expected = before.layers[i].weight[j] - 0.01f * g.layers[i].weight[j];
      EXPECT_NEAR(net.layers[i].weight[j], expected, 1e-6);
    }
  }
}

TEST(Train, DeterministicForFixedSeed) {
  const Dataset d = random_dataset(40, {4, 4, 1}, 22);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.milestones = {2};
  cfg.seed = 5;
  NetworkF a = small_dense_net(23), b = small_dense_net(23);
  train(a, d, cfg);
  train(b, d, cfg);
  for (std::size_t i = 0; i < a.layers.size(); ++i) EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
}

TEST(Train, FlagsExploded) {
  NetworkF net = small_dense_net(24);
  net.layers[0].weight = TensorF(net.layers[0].weight.shape(), 1e30f);
  net.layers[3].weight = TensorF(net.layers[3].weight.shape(), 1e30f);
  const Dataset d = random_dataset(8, {4, 4, 1}, 25);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.milestones = {};
  const TrainLog log = train(net, d, cfg);
  EXPECT_EQ(log.status, TrainStatus::Exploded);
  EXPECT_NE(log.diagnostic.find("dense"), std::string::npos) << log.diagnostic;
}

TEST(Train, FlagsVanishedWhenEveryConvGradientIsZero) {
  NetworkF net = small_dense_net(26);
  net.layers[0].bias = TensorF(net.layers[0].bias.shape(), -100.0f);
  const Dataset d = random_dataset(8, {4, 4, 1}, 27);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.milestones = {};
  const TrainLog log = train(net, d, cfg);
  EXPECT_EQ(log.status, TrainStatus::Vanished);
  EXPECT_EQ(log.epochs.size(), 1u);
}

TEST(Accuracy, TieBreakAndBounds) {
  EXPECT_EQ(argmax_row(std::vector<float>{1.0f, 1.0f, 1.0f}), 0u);
  EXPECT_EQ(argmax_row(std::vector<float>{0.0f, 2.0f, 2.0f}), 1u);
  const NetworkF net = small_dense_net(28);
  Dataset empty;
  EXPECT_THROW(evaluate_accuracy(net, empty), Error);
}

TEST(Accuracy, UntrainedNetIsNearChance) {
  SeededRng rng(29);
  ArchSpec arch;
  arch.input_shape = {8, 8, 3};
  arch.block_widths = {8, 8};
  arch.first_conv_width = 8;
  arch.dense_widths = {16, 10};
  const NetworkF net = build_macro_arch(
      Variant::RegularConvNoBN,
      std::vector<InitSpec>(configurable_conv_count(Variant::RegularConvNoBN, arch), glorot_uniform()),
      arch, rng);
  Dataset d;
  SeededRng data(30);
  d.images = sample_uniform<float>(data, {2000, 8, 8, 3}, 0.0, 1.0);
  for (std::size_t i = 0; i < 2000; ++i) d.labels.push_back(static_cast<std::uint8_t>(i % 10));
  EXPECT_NEAR(evaluate_accuracy(net, d), 0.1, 0.03);
}

TEST(Accuracy, AllCorrectIsOne) {
  NetworkF net = small_dense_net(31);
  Dataset d = random_dataset(12, {4, 4, 1}, 32);
  const TensorF logits = predict_logits(net, d.images);
  for (std::size_t i = 0; i < d.size(); ++i) {
    d.labels[i] = static_cast<std::uint8_t>(argmax_row(std::span<const float>(logits.data() + i * 3, 3)));
  }
  EXPECT_EQ(evaluate_accuracy(net, d), 1.0);
}
