// Property suites shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

#include "oracles.hpp"
#include "quantlens/nn.hpp"
#include "quantlens/quant.hpp"

namespace checks {

struct SuiteResult {
  bool ok = true;
  std::size_t cases = 0;
  std::string first_failure;

  void expect(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      first_failure = what;
    }
  }
};

// Random (tensor, range) pairs: parameters against the affine oracle,
// round-trip error, monotonicity and zero exactness.
inline SuiteResult quantizer_suite(std::size_t pairs, std::uint64_t seed) {
  using namespace quantlens;
  SuiteResult res;
  SeededRng rng(seed);
  for (std::size_t p = 0; p < pairs; ++p) {
    ++res.cases;
    const int bits = p % 4 == 0 ? 2 + static_cast<int>(rng.index(15)) : 8;
    double lo = rng.uniform(-10.0, 10.0), hi = rng.uniform(-10.0, 10.0);
    if (p % 10 == 0) {  // all-positive ranges exercise widening
      lo = std::abs(lo);
      hi = std::abs(hi);
    }
    if (lo > hi) std::swap(lo, hi);
    const std::string tag = "pair " + std::to_string(p) + " [" + std::to_string(lo) + ", " +
                            std::to_string(hi) + "] bits " + std::to_string(bits);
    const QuantParams qp = make_quant_params(lo, hi, bits);
    const oracle::Affine a = oracle::affine(lo, hi, bits);
    res.expect(std::abs(qp.scale - a.scale) <= 1e-15 * a.scale, tag + ": scale");
    res.expect(qp.zero_point == a.zero_point, tag + ": zero point");
    res.expect(qp.clip_min <= 0.0 && qp.clip_max >= 0.0, tag + ": range excludes zero");
    res.expect(std::abs((qp.clip_max - qp.clip_min) / qp.qmax() - qp.scale) <= 1e-12 * qp.scale,
               tag + ": scale/range relation");
    res.expect(quantize_value(0.0, qp) == qp.zero_point, tag + ": quantize(0)");
    res.expect(dequantize_value(qp.zero_point, qp) == 0.0, tag + ": dequantize(zp)");

    std::vector<double> values(64);
    for (double& v : values) v = rng.uniform(qp.clip_min, qp.clip_max);
    values.push_back(qp.clip_min);
    values.push_back(qp.clip_max);
    values.push_back(0.0);
    for (double v : values) {
      const std::int32_t q = quantize_value(v, qp);
      res.expect(q == oracle::quantize(v, a), tag + ": code differs from oracle");
      // double rounding of t/scale and (q-zp)*scale adds a few ulps
      const double err = std::abs(dequantize_value(q, qp) - v);
      res.expect(err <= qp.scale / 2 + 1e-12 * std::max(1.0, std::abs(v)),
                 tag + ": round-trip error " + std::to_string(err));
    }
    // outliers saturate
    res.expect(quantize_value(qp.clip_max + 100.0, qp) == qp.qmax(), tag + ": high saturation");
    res.expect(quantize_value(qp.clip_min - 100.0, qp) == 0, tag + ": low saturation");
    std::vector<double> sorted = values;
    for (int i = 0; i < 16; ++i) sorted.push_back(rng.uniform(qp.clip_min - 5.0, qp.clip_max + 5.0));
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 1; i < sorted.size(); ++i) {
      res.expect(quantize_value(sorted[i - 1], qp) <= quantize_value(sorted[i], qp),
                 tag + ": monotonicity");
    }
  }
  return res;
}

// Streaming two-pass percentile vs a full sort, fed in random chunks.
inline SuiteResult percentile_suite(std::size_t trials, std::uint64_t seed) {
  using namespace quantlens;
  SuiteResult res;
  SeededRng rng(seed);
  for (std::size_t t = 0; t < trials; ++t) {
    ++res.cases;
    const std::size_t n = 1 + rng.index(t % 50 == 0 ? 60000 : 3000);
    const double clip = t % 3 == 0 ? 0.01 : rng.uniform(0.0, 0.499);
    std::vector<float> v(n);
    const int style = static_cast<int>(t % 4);
    for (float& x : v) {
      switch (style) {
        case 0: x = static_cast<float>(3.0 * rng.normal()); break;
        case 1: x = static_cast<float>(std::floor(rng.uniform(-5.0, 5.0)));  break;  // heavy ties
        case 2: x = rng.bernoulli(0.7) ? 0.0f : static_cast<float>(rng.uniform(0.0, 1e-3)); break;
        default: x = static_cast<float>(std::exp(4.0 * rng.normal())) * (rng.bernoulli(0.5) ? 1 : -1);
      }
    }
    PooledRange pr(clip);
    const auto feed = [&](auto add) {
      std::size_t i = 0;
      while (i < n) {
        const std::size_t len = std::min(n - i, 1 + static_cast<std::size_t>(rng.index(500)));
        add(std::span<const float>(v.data() + i, len));
        i += len;
      }
    };
    feed([&](std::span<const float> s) { pr.add_first_pass(s); });
    pr.finish_first_pass();
    if (pr.needs_second_pass()) feed([&](std::span<const float> s) { pr.add_second_pass(s); });
    const oracle::Range want = oracle::sorted_clip(v, clip);
    std::ostringstream tag;
    tag << "trial " << t << " n=" << n << " clip=" << clip;
    res.expect(pr.clipped_min() == static_cast<float>(want.lo), tag.str() + ": low rank");
    res.expect(pr.clipped_max() == static_cast<float>(want.hi), tag.str() + ": high rank");
  }
  return res;
}

// Random macro-architecture With_BN net. Running statistics come from a
// train-mode pass over random images (as after training) and are then
// jittered, so the eval path differs from batch normalisation.
inline quantlens::NetworkF random_bn_net(std::uint64_t seed) {
  using namespace quantlens;
  SeededRng rng(seed);
  const Variant v = rng.bernoulli(0.5) ? Variant::RegularConvWithBN : Variant::DWSConvWithBN;
  ArchSpec arch;
  arch.input_shape = {12, 12, 3};
  arch.first_conv_width = 4 + rng.index(8);
  arch.block_widths = {4 + rng.index(12), 4 + rng.index(12)};
  arch.dense_widths = {8 + rng.index(16), 10};
  const auto& presets = init_presets();
  const InitSpec init = presets[rng.index(presets.size())];
  SeededRng build = rng.substream("build");
  NetworkF net = build_macro_arch(v, std::vector<InitSpec>(configurable_conv_count(v, arch), init),
                                  arch, build);
  SeededRng stats = rng.substream("stats");
  for (LayerF& l : net.layers) {
    if (l.spec.kind != LayerKind::BatchNorm) continue;
    l.gamma = sample_uniform<float>(stats, l.gamma.shape(), 0.5, 1.5);
    l.beta = sample_uniform<float>(stats, l.beta.shape(), -0.3, 0.3);
    l.momentum = 0.0;
  }
  Shape shape{64};
  shape.insert(shape.end(), arch.input_shape.begin(), arch.input_shape.end());
  forward(net, sample_uniform<float>(stats, shape, 0.0, 1.0), Mode::Train);
  for (LayerF& l : net.layers) {
    if (l.spec.kind != LayerKind::BatchNorm) continue;
    l.momentum = 0.99;
    for (std::size_t c = 0; c < l.gamma.size(); ++c) {
      const double sd = std::sqrt(static_cast<double>(l.running_var[c]) + l.epsilon);
      l.running_mean[c] += static_cast<float>(stats.uniform(-0.2, 0.2) * sd);
      l.running_var[c] *= static_cast<float>(stats.uniform(0.8, 1.25));
    }
  }
  return net;
}

// max |logits(fold(net)) - logits(net)| over `inputs` random images.
inline double fold_deviation(const quantlens::NetworkF& net, std::size_t inputs, std::uint64_t seed) {
  using namespace quantlens;
  SeededRng rng(seed);
  Shape shape{inputs};
  shape.insert(shape.end(), net.input_shape.begin(), net.input_shape.end());
  const TensorF x = sample_uniform<float>(rng, shape, 0.0, 1.0);
  const NetworkF folded = fold_batchnorm(net);
  const TensorF a = forward(net, x).logits;
  const TensorF b = forward(folded, x).logits;
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return worst;
}

}  // namespace checks
