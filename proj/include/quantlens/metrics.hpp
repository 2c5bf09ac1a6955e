#pragma once

#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantlens/quant.hpp"
#include "quantlens/tensor.hpp"

namespace quantlens {

enum class StatsKind { Weights, BnFoldWeights, Activations };
std::string_view stats_kind_name(StatsKind k);
StatsKind parse_stats_kind(std::string_view name);

struct PrecisionResult {
  double value = 1.0;
  bool degenerate = false;  // tensor range was zero
};

// mean_i(range_i / range_tensor) over the K channels. A zero tensor range
// yields 1.0 with the degenerate flag set.
PrecisionResult average_precision(std::span<const double> channel_ranges, double tensor_range);

struct LayerStats {
  std::string layer;
  StatsKind kind = StatsKind::Weights;
  std::optional<std::size_t> epoch;  // nullopt = final
  double tensor_min = 0.0;
  double tensor_max = 0.0;
  std::vector<double> channel_ranges;
  double average_precision = 1.0;
  bool degenerate = false;

  double range() const noexcept { return tensor_max - tensor_min; }
};

// Channels along axis 0 (output channels).
LayerStats weight_stats(const std::string& layer, const TensorF& weight, StatsKind kind,
                        std::optional<std::size_t> epoch);

// Tensor range is the pooled clipped range; channel ranges are the channel
// extrema saturated into that range.
LayerStats activation_stats(const ActivationRange& range, std::optional<std::size_t> epoch);

// Mean squared difference over all samples and classes.
double qmse(const TensorF& reference, const TensorF& other);

// mean_rows(-sum_c p(c) log max(q(c), 1e-12)); rows must sum to 1 +- 1e-5.
double qce(const TensorF& reference_probs, const TensorF& other_probs);

// 100 * (fp32 - q8) / fp32
double percent_degradation(double fp32_accuracy, double q8_accuracy);

// Equal-width histogram over [min(t), max(t)].
std::vector<std::size_t> histogram(const TensorF& t, std::size_t bins);
// KL(histogram || uniform over the same bins), 0 log 0 = 0.
double kl_from_histogram(std::span<const std::size_t> counts);
double kl_vs_uniform(const TensorF& t, std::size_t bins = 256);

inline constexpr double kVanishingRange = 1e-6;

struct VanishingReport {
  std::vector<std::size_t> flagged;  // 0-based positions with range < threshold
  // Deepest position whose range and all shallower ranges clear the threshold.
  std::optional<std::size_t> deepest_healthy;
};

VanishingReport detect_vanishing_activations(std::span<const double> ranges,
                                             double threshold = kVanishingRange);
VanishingReport detect_vanishing_activations(std::span<const LayerStats> stats,
                                             double threshold = kVanishingRange);

struct QuantReport {
  double fp32_accuracy = 0.0;
  double quint8_accuracy = 0.0;
  double qmse = 0.0;
  double qce = 0.0;
  double percent_accuracy_decrease = 0.0;
};

double accuracy_from_logits(const TensorF& logits, std::span<const std::uint8_t> labels);

QuantReport quant_report(const TensorF& fp32_logits, const TensorF& quant_logits,
                         std::span<const std::uint8_t> labels);

nlohmann::json to_json(const QuantReport& r);
nlohmann::json to_json(const LayerStats& s);

// "epoch,layer,kind,min,max,avg_precision", one row per (epoch, layer, kind).
void write_layer_stats_csv(std::ostream& out, std::span<const LayerStats> stats);

std::string format_number(double v);

}  // namespace quantlens
