#include "quantlens/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "quantlens/nn.hpp"

namespace quantlens {

std::string_view stats_kind_name(StatsKind k) {
  switch (k) {
    case StatsKind::Weights: return "weights";
    case StatsKind::BnFoldWeights: return "bn_fold_weights";
    case StatsKind::Activations: return "activations";
  }
  return "unknown";
}

StatsKind parse_stats_kind(std::string_view name) {
  if (name == "weights") return StatsKind::Weights;
  if (name == "bn_fold_weights") return StatsKind::BnFoldWeights;
  if (name == "activations") return StatsKind::Activations;
  fail(ErrorCode::Config, "unknown stats kind '" + std::string(name) + "'");
}

PrecisionResult average_precision(std::span<const double> channel_ranges, double tensor_range) {
  if (channel_ranges.empty()) fail(ErrorCode::EmptyInput, "average_precision needs channels");
  if (!(tensor_range > 0.0)) return {1.0, true};
  double sum = 0.0;
  for (double r : channel_ranges) sum += r / tensor_range;
  return {sum / static_cast<double>(channel_ranges.size()), false};
}

LayerStats weight_stats(const std::string& layer, const TensorF& weight, StatsKind kind,
                        std::optional<std::size_t> epoch) {
  LayerStats s;
  s.layer = layer;
  s.kind = kind;
  s.epoch = epoch;
  const MinMax<float> per = reduce_minmax(weight, 0);
  s.tensor_min = *std::min_element(per.mins.begin(), per.mins.end());
  s.tensor_max = *std::max_element(per.maxs.begin(), per.maxs.end());
  s.channel_ranges.resize(per.mins.size());
  for (std::size_t c = 0; c < per.mins.size(); ++c) {
    s.channel_ranges[c] = static_cast<double>(per.maxs[c]) - static_cast<double>(per.mins[c]);
  }
  const PrecisionResult p = average_precision(s.channel_ranges, s.range());
  s.average_precision = p.value;
  s.degenerate = p.degenerate;
  return s;
}

LayerStats activation_stats(const ActivationRange& range, std::optional<std::size_t> epoch) {
  LayerStats s;
  s.layer = range.name;
  s.kind = StatsKind::Activations;
  s.epoch = epoch;
  s.tensor_min = range.clipped_min;
  s.tensor_max = range.clipped_max;
  s.channel_ranges.resize(range.channel_min.size());
  for (std::size_t c = 0; c < range.channel_min.size(); ++c) {
    const double lo = std::clamp<double>(range.channel_min[c], s.tensor_min, s.tensor_max);
    const double hi = std::clamp<double>(range.channel_max[c], s.tensor_min, s.tensor_max);
    s.channel_ranges[c] = hi - lo;
  }
  const PrecisionResult p = average_precision(s.channel_ranges, s.range());
  s.average_precision = p.value;
  s.degenerate = p.degenerate;
  return s;
}

double qmse(const TensorF& reference, const TensorF& other) {
  if (reference.shape() != other.shape()) {
    fail(ErrorCode::Shape, "qmse shape mismatch " + shape_string(reference.shape()) + " vs " +
                               shape_string(other.shape()));
  }
  if (reference.empty()) fail(ErrorCode::EmptyInput, "qmse of empty tensors");
  double acc = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = static_cast<double>(reference[i]) - static_cast<double>(other[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(reference.size());
}

namespace {

void check_rows_normalized(const TensorF& probs, const char* which) {
  const std::size_t n = probs.dim(0), k = probs.size() / n;
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const float p = probs[r * k + j];
      if (p < 0.0f) fail(ErrorCode::Normalization, std::string(which) + " has a negative probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-5) {
      fail(ErrorCode::Normalization, std::string(which) + " row " + std::to_string(r) +
                                         " sums to " + std::to_string(sum));
    }
  }
}

}  // namespace

double qce(const TensorF& reference_probs, const TensorF& other_probs) {
  if (reference_probs.shape() != other_probs.shape()) {
    fail(ErrorCode::Shape, "qce shape mismatch");
  }
  if (reference_probs.empty()) fail(ErrorCode::EmptyInput, "qce of empty tensors");
  check_rows_normalized(reference_probs, "reference distribution");
  check_rows_normalized(other_probs, "compared distribution");
  const std::size_t n = reference_probs.dim(0), k = reference_probs.size() / n;
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    double row = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = reference_probs[r * k + j];
      if (p == 0.0) continue;
      row -= p * std::log(std::max<double>(other_probs[r * k + j], 1e-12));
    }
    total += row;
  }
  return total / static_cast<double>(n);
}

double percent_degradation(double fp32_accuracy, double q8_accuracy) {
  if (!(fp32_accuracy > 0.0)) {
    fail(ErrorCode::UndefinedMetric, "percent degradation undefined for zero fp32 accuracy");
  }
  return 100.0 * (fp32_accuracy - q8_accuracy) / fp32_accuracy;
}

std::vector<std::size_t> histogram(const TensorF& t, std::size_t bins) {
  if (bins < 2) fail(ErrorCode::InvalidParameter, "histogram needs at least 2 bins");
  if (t.empty()) fail(ErrorCode::EmptyInput, "histogram of empty tensor");
  const MinMax<float> mm = reduce_minmax(t);
  const double lo = mm.mins[0], hi = mm.maxs[0];
  if (!(hi > lo)) fail(ErrorCode::Degenerate, "histogram of a constant tensor");
  std::vector<std::size_t> counts(bins, 0);
  const double width = hi - lo;
  for (float v : t.values()) {
    auto b = static_cast<std::size_t>((static_cast<double>(v) - lo) / width * static_cast<double>(bins));
    ++counts[std::min(b, bins - 1)];
  }
  return counts;
}

double kl_from_histogram(std::span<const std::size_t> counts) {
  if (counts.size() < 2) fail(ErrorCode::InvalidParameter, "KL needs at least 2 bins");
  std::size_t total = 0;
  for (std::size_t c : counts) total += c;
  if (total == 0) fail(ErrorCode::EmptyInput, "empty histogram");
  const double bins = static_cast<double>(counts.size());
  double kl = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    kl += p * std::log(p * bins);
  }
  return std::max(kl, 0.0);
}

double kl_vs_uniform(const TensorF& t, std::size_t bins) {
  const std::vector<std::size_t> h = histogram(t, bins);
  return kl_from_histogram(h);
}

VanishingReport detect_vanishing_activations(std::span<const double> ranges, double threshold) {
  VanishingReport rep;
  bool healthy_prefix = true;
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    if (ranges[i] < threshold) {
      rep.flagged.push_back(i);
      healthy_prefix = false;
    } else if (healthy_prefix) {
      rep.deepest_healthy = i;
    }
  }
  return rep;
}

VanishingReport detect_vanishing_activations(std::span<const LayerStats> stats, double threshold) {
  std::vector<double> ranges;
  ranges.reserve(stats.size());
  for (const LayerStats& s : stats) ranges.push_back(s.range());
  return detect_vanishing_activations(ranges, threshold);
}

double accuracy_from_logits(const TensorF& logits, std::span<const std::uint8_t> labels) {
  const std::size_t n = logits.dim(0), k = logits.size() / n;
  if (labels.size() != n) fail(ErrorCode::Shape, "label count does not match logits");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < n; ++r) {
    if (argmax_row(std::span<const float>(logits.data() + r * k, k)) == labels[r]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

QuantReport quant_report(const TensorF& fp32_logits, const TensorF& quant_logits,
                         std::span<const std::uint8_t> labels) {
  QuantReport r;
  r.fp32_accuracy = accuracy_from_logits(fp32_logits, labels);
  r.quint8_accuracy = accuracy_from_logits(quant_logits, labels);
  r.qmse = qmse(fp32_logits, quant_logits);
  r.qce = qce(softmax_rows(fp32_logits), softmax_rows(quant_logits));
  r.percent_accuracy_decrease = percent_degradation(r.fp32_accuracy, r.quint8_accuracy);
  return r;
}

nlohmann::json to_json(const QuantReport& r) {
  return {{"fp32_accuracy", r.fp32_accuracy},
          {"quint8_accuracy", r.quint8_accuracy},
          {"qmse", r.qmse},
          {"qce", r.qce},
          {"percent_accuracy_decrease", r.percent_accuracy_decrease}};
}

nlohmann::json to_json(const LayerStats& s) {
  return {{"layer", s.layer},
          {"kind", stats_kind_name(s.kind)},
          {"epoch", s.epoch ? nlohmann::json(*s.epoch) : nlohmann::json("final")},
          {"min", s.tensor_min},
          {"max", s.tensor_max},
          {"range", s.range()},
          {"channel_ranges", s.channel_ranges},
          {"avg_precision", s.average_precision},
          {"degenerate", s.degenerate}};
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void write_layer_stats_csv(std::ostream& out, std::span<const LayerStats> stats) {
  out << "epoch,layer,kind,min,max,avg_precision\n";
  for (const LayerStats& s : stats) {
    out << (s.epoch ? std::to_string(*s.epoch) : std::string("final")) << ',' << s.layer << ','
        << stats_kind_name(s.kind) << ',' << format_number(s.tensor_min) << ','
        << format_number(s.tensor_max) << ',' << format_number(s.average_precision) << '\n';
  }
}

}  // namespace quantlens
