#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "quantlens/error.hpp"
#include "quantlens/metrics.hpp"
#include "quantlens/nn.hpp"

using namespace quantlens;

namespace {

template <typename F>
std::optional<ErrorCode> code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

TensorF rows(std::vector<std::vector<float>> r) {
  TensorF t({r.size(), r.front().size()});
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < r[i].size(); ++j) t[i * r[i].size() + j] = r[i][j];
  return t;
}

TensorF random_probs(std::size_t n, std::size_t k, SeededRng& rng) {
  TensorF logits({n, k});
  for (float& v : logits.values()) v = static_cast<float>(3.0 * rng.normal());
  return softmax_rows(logits);
}

}  // namespace

TEST(AveragePrecision, HandExample) {
  const std::vector<double> r{2.0, 1.0, 1.0, 0.0};
  const PrecisionResult p = average_precision(r, 2.0);
  EXPECT_EQ(p.value, 0.5);
  EXPECT_FALSE(p.degenerate);
}

TEST(AveragePrecision, PerfectAndSingleChannel) {
  const std::vector<double> same{1.5, 1.5, 1.5};
  EXPECT_EQ(average_precision(same, 1.5).value, 1.0);
  const std::vector<double> one{0.7};
  EXPECT_EQ(average_precision(one, 0.7).value, 1.0);
}

TEST(AveragePrecision, DegenerateAndEmpty) {
  const std::vector<double> zeros{0.0, 0.0};
  const PrecisionResult p = average_precision(zeros, 0.0);
  EXPECT_EQ(p.value, 1.0);
  EXPECT_TRUE(p.degenerate);
  EXPECT_EQ(code_of([] { average_precision({}, 1.0); }), ErrorCode::EmptyInput);
}

TEST(AveragePrecision, WeightStatsStayInUnitInterval) {
  SeededRng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t c = 1 + rng.index(16);
    TensorF w = sample_normal<float>(rng, {c, 3, 3, 4}, 0.0, 0.1 + rng.uniform01());
    const LayerStats s = weight_stats("w", w, StatsKind::Weights, trial);
    EXPECT_GE(s.average_precision, 0.0);
    EXPECT_LE(s.average_precision, 1.0 + 1e-12);
    for (double r : s.channel_ranges) EXPECT_LE(r, s.range() + 1e-12);
    if (c == 1) {
      EXPECT_EQ(s.average_precision, 1.0);
    }
  }
}

TEST(AveragePrecision, WeightStatsUseOutputChannels) {
  TensorF w({2, 1, 1, 2});
  // channel 0 spans [-1, 1], channel 1 spans [0, 0.5]
  w[0] = -1.0f;
  w[1] = 1.0f;
  w[2] = 0.0f;
  w[3] = 0.5f;
  const LayerStats s = weight_stats("conv", w, StatsKind::BnFoldWeights, std::nullopt);
  EXPECT_EQ(s.tensor_min, -1.0);
  EXPECT_EQ(s.tensor_max, 1.0);
  ASSERT_EQ(s.channel_ranges.size(), 2u);
  EXPECT_DOUBLE_EQ(s.average_precision, (1.0 + 0.25) / 2.0);
}

TEST(AveragePrecision, ActivationChannelsClampedIntoClippedRange) {
  ActivationRange r;
  r.name = "relu";
  r.clipped_min = 0.0f;
  r.clipped_max = 2.0f;
  r.channel_min = {0.0f, 0.5f};
  r.channel_max = {4.0f, 1.5f};
  const LayerStats s = activation_stats(r, 3);
  EXPECT_EQ(s.channel_ranges[0], 2.0);
  EXPECT_EQ(s.channel_ranges[1], 1.0);
  EXPECT_DOUBLE_EQ(s.average_precision, 0.75);
  EXPECT_EQ(s.kind, StatsKind::Activations);
}

TEST(Qmse, Examples) {
  const TensorF a = rows({{1.0f, 0.0f}});
  const TensorF b = rows({{0.9f, 0.1f}});
  EXPECT_NEAR(qmse(a, b), 0.01, 1e-7);  // 0.9f and 0.1f are not exact
  EXPECT_EQ(qmse(a, a), 0.0);
  EXPECT_EQ(qmse(a, b), qmse(b, a));
  EXPECT_EQ(code_of([&] { qmse(a, rows({{1.0f, 0.0f, 0.0f}})); }), ErrorCode::Shape);
}

TEST(Qmse, PositiveForDistinctInputs) {
  SeededRng rng(1);
  const TensorF a = sample_normal<float>(rng, {5, 10}, 0.0, 1.0);
  TensorF b = a;
  b[7] += 1e-3f;
  EXPECT_GT(qmse(a, b), 0.0);
}

TEST(Qce, Examples) {
  const TensorF half = rows({{0.5f, 0.5f}});
  EXPECT_NEAR(qce(half, half), std::log(2.0), 1e-9);
  EXPECT_NEAR(qce(rows({{1.0f, 0.0f}}), half), std::log(2.0), 1e-9);
  // q = 0 floored at 1e-12
  EXPECT_NEAR(qce(half, rows({{1.0f, 0.0f}})), -0.5 * std::log(1e-12), 1e-9);
  EXPECT_EQ(code_of([&] { qce(rows({{0.5f, 0.6f}}), half); }), ErrorCode::Normalization);
  EXPECT_EQ(code_of([&] { qce(half, rows({{0.2f, 0.2f}})); }), ErrorCode::Normalization);
}

TEST(Qce, IdentityEqualsEntropyAndGibbsBound) {
  SeededRng rng(2);
  const TensorF p = random_probs(40, 10, rng);
  double h = 0.0;
  for (std::size_t r = 0; r < 40; ++r) {
    std::vector<double> row(p.data() + r * 10, p.data() + r * 10 + 10);
    h += oracle::entropy(row);
  }
  EXPECT_NEAR(qce(p, p), h / 40.0, 1e-9);
  for (int t = 0; t < 20; ++t) {
    const TensorF q = random_probs(1, 10, rng);
    const TensorF p1 = random_probs(1, 10, rng);
    std::vector<double> row(p1.data(), p1.data() + 10);
    EXPECT_GE(qce(p1, q), oracle::entropy(row) - 1e-9);
  }
}

TEST(PercentDegradation, Examples) {
  EXPECT_NEAR(percent_degradation(0.84, 0.82), 2.380952, 1e-6);
  EXPECT_EQ(percent_degradation(0.5, 0.5), 0.0);
  EXPECT_NEAR(percent_degradation(0.80, 0.82), -2.5, 1e-9);
  EXPECT_EQ(code_of([] { percent_degradation(0.0, 0.1); }), ErrorCode::UndefinedMetric);
}

TEST(Kl, HistogramIdentities) {
  const std::vector<std::size_t> uniform(256, 7);
  EXPECT_LT(std::abs(kl_from_histogram(uniform)), 1e-9);
  const std::vector<std::size_t> one{5, 0};
  EXPECT_NEAR(kl_from_histogram(one), std::log(2.0), 1e-12);
  EXPECT_EQ(code_of([] { kl_from_histogram(std::vector<std::size_t>{3}); }),
            ErrorCode::InvalidParameter);
}

TEST(Kl, EvenlySpacedTensorIsUniform) {
  TensorF t({512});
  for (std::size_t i = 0; i < 512; ++i) t[i] = static_cast<float>(i) / 512.0f;
  EXPECT_LT(kl_vs_uniform(t, 256), 1e-9);
  const std::vector<std::size_t> h = histogram(t, 256);
  for (std::size_t c : h) EXPECT_EQ(c, 2u);
}

TEST(Kl, NonNegativeAndAffineInvariant) {
  SeededRng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    TensorF t({2000});
    // dyadic values so 4t - 3 is exact in float
    for (float& v : t.values()) v = static_cast<float>(std::floor(1024.0 * rng.normal())) / 1024.0f;
    TensorF u = t;
    for (float& v : u.values()) v = 4.0f * v - 3.0f;
    const double a = kl_vs_uniform(t), b = kl_vs_uniform(u);
    EXPECT_GE(a, 0.0);
    EXPECT_EQ(a, b);
  }
}

TEST(Kl, ConstantTensorAndBins) {
  TensorF t({10}, 2.0f);
  EXPECT_EQ(code_of([&] { kl_vs_uniform(t); }), ErrorCode::Degenerate);
  TensorF u({2});
  u[1] = 1.0f;
  EXPECT_EQ(code_of([&] { histogram(u, 1); }), ErrorCode::InvalidParameter);
}

TEST(Vanishing, Examples) {
  const std::vector<double> r{1.0, 0.1, 1e-9, 1e-12};
  const VanishingReport a = detect_vanishing_activations(r);
  EXPECT_EQ(a.flagged, (std::vector<std::size_t>{2, 3}));
  EXPECT_EQ(a.deepest_healthy, 1u);
  const VanishingReport b = detect_vanishing_activations(r, 1e-10);
  EXPECT_EQ(b.flagged, (std::vector<std::size_t>{3}));
  const std::vector<double> fine{1.0, 1e-3, 0.5};
  const VanishingReport c = detect_vanishing_activations(fine);
  EXPECT_TRUE(c.flagged.empty());
  EXPECT_EQ(c.deepest_healthy, 2u);
  const std::vector<double> dead{1e-9, 1.0};
  EXPECT_FALSE(detect_vanishing_activations(dead).deepest_healthy.has_value());
}

TEST(Vanishing, FromLayerStats) {
  std::vector<LayerStats> s(3);
  s[0].tensor_max = 1.0;
  s[1].tensor_max = 1e-8;
  s[2].tensor_min = -1.0;
  const VanishingReport r = detect_vanishing_activations(s);
  EXPECT_EQ(r.flagged, (std::vector<std::size_t>{1}));
}

TEST(QuantReport, Consistency) {
  const TensorF f = rows({{2.0f, 0.0f, -1.0f}, {0.0f, 1.0f, 0.5f}, {0.1f, 0.0f, 0.3f}});
  TensorF q = f;
  q[0] = -2.0f;
  const std::vector<std::uint8_t> labels{0, 1, 2};
  const QuantReport r = quant_report(f, q, labels);
  EXPECT_EQ(r.fp32_accuracy, 1.0);
  EXPECT_NEAR(r.quint8_accuracy, 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(r.percent_accuracy_decrease,
              100.0 * (r.fp32_accuracy - r.quint8_accuracy) / r.fp32_accuracy, 1e-12);
  EXPECT_NEAR(r.qmse, 16.0 / 9.0, 1e-9);
  const QuantReport same = quant_report(f, f, labels);
  EXPECT_EQ(same.qmse, 0.0);
  EXPECT_EQ(same.percent_accuracy_decrease, 0.0);
  EXPECT_NEAR(same.qce, qce(softmax_rows(f), softmax_rows(f)), 1e-12);
}

TEST(LayerStatsCsv, HeaderAndRows) {
  std::vector<LayerStats> s(2);
  s[0].layer = "conv1";
  s[0].epoch = 4;
  s[0].tensor_min = -0.5;
  s[0].tensor_max = 0.25;
  s[0].average_precision = 0.75;
  s[1].layer = "relu1";
  s[1].kind = StatsKind::Activations;
  s[1].tensor_max = 3.0;
  std::ostringstream out;
  write_layer_stats_csv(out, s);
  EXPECT_EQ(out.str(),
            "epoch,layer,kind,min,max,avg_precision\n"
            "4,conv1,weights,-0.5,0.25,0.75\n"
            "final,relu1,activations,0,3,1\n");
}

TEST(LayerStatsJson, FinalEpochIsString) {
  LayerStats s;
  s.layer = "conv";
  const nlohmann::json j = to_json(s);
  EXPECT_EQ(j.at("epoch"), "final");
  EXPECT_EQ(j.at("kind"), "weights");
  EXPECT_EQ(parse_stats_kind("bn_fold_weights"), StatsKind::BnFoldWeights);
}
