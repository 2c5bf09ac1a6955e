#include "quantlens/quant.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <limits>

namespace quantlens {

QuantParams make_quant_params(double lo, double hi, int bits) {
  if (bits < 2 || bits > 16) fail(ErrorCode::InvalidParameter, "bit width must be in [2, 16]");
  if (!std::isfinite(lo) || !std::isfinite(hi) || lo > hi) {
    fail(ErrorCode::InvalidRange, "invalid quantization range [" + std::to_string(lo) + ", " +
                                      std::to_string(hi) + "]");
  }
  lo = std::min(lo, 0.0);
  hi = std::max(hi, 0.0);
  if (hi - lo <= 0.0) hi = lo + 1e-8;
  QuantParams qp;
  qp.bits = bits;
  const double qmax = static_cast<double>(qp.qmax());
  qp.scale = (hi - lo) / qmax;
  const double zp_real = std::clamp(-lo / qp.scale, 0.0, qmax);
  qp.zero_point = static_cast<std::int32_t>(std::round(zp_real));
  qp.clip_min = -static_cast<double>(qp.zero_point) * qp.scale;
  qp.clip_max = (qmax - static_cast<double>(qp.zero_point)) * qp.scale;
  return qp;
}

std::int32_t quantize_value(double t, const QuantParams& qp) {
  const double q = std::round(t / qp.scale) + static_cast<double>(qp.zero_point);
  return static_cast<std::int32_t>(std::clamp(q, 0.0, static_cast<double>(qp.qmax())));
}

double dequantize_value(std::int32_t q, const QuantParams& qp) {
  return static_cast<double>(q - qp.zero_point) * qp.scale;
}

Tensor<std::int32_t> quantize(const TensorF& t, const QuantParams& qp) {
  Tensor<std::int32_t> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = quantize_value(t[i], qp);
  return out;
}

TensorF dequantize(const Tensor<std::int32_t>& q, const QuantParams& qp) {
  TensorF out(q.shape());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = static_cast<float>(dequantize_value(q[i], qp));
  return out;
}

TensorF fake_quantize(const TensorF& t, const QuantParams& qp) {
  TensorF out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    out[i] = static_cast<float>(dequantize_value(quantize_value(t[i], qp), qp));
  }
  return out;
}

bool contains_batchnorm(const NetworkF& net) {
  return std::any_of(net.layers.begin(), net.layers.end(),
                     [](const LayerF& l) { return l.spec.kind == LayerKind::BatchNorm; });
}

NetworkF fold_batchnorm(const NetworkF& net) {
  NetworkF out;
  out.variant = net.variant;
  out.input_shape = net.input_shape;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const LayerF& layer = net.layers[i];
    if (layer.spec.kind != LayerKind::BatchNorm) {
      out.layers.push_back(layer);
      continue;
    }
    if (out.layers.empty() || !is_conv(out.layers.back().spec.kind) ||
        net.layers[i - 1].spec.kind == LayerKind::BatchNorm) {
      fail(ErrorCode::Structure, "BatchNorm layer " + layer.spec.name +
                                     " is not directly preceded by a convolution");
    }
    LayerF& conv = out.layers.back();
    const std::size_t channels = conv.weight.dim(0);
    if (layer.gamma.size() != channels) {
      fail(ErrorCode::Structure, "BatchNorm " + layer.spec.name + " channel count mismatch");
    }
    const std::size_t per_channel = conv.weight.size() / channels;
    for (std::size_t c = 0; c < channels; ++c) {
      const double s = static_cast<double>(layer.gamma[c]) /
                       std::sqrt(static_cast<double>(layer.running_var[c]) + layer.epsilon);
      float* w = conv.weight.data() + c * per_channel;
      for (std::size_t j = 0; j < per_channel; ++j) w[j] = static_cast<float>(s * w[j]);
      conv.bias[c] = static_cast<float>(layer.beta[c] +
                                        s * (static_cast<double>(conv.bias[c]) - layer.running_mean[c]));
    }
  }
  return out;
}

std::size_t clip_rank(std::size_t n, double clip_fraction) {
  if (!(clip_fraction >= 0.0 && clip_fraction < 0.5)) {
    fail(ErrorCode::InvalidParameter, "clip fraction must be in [0, 0.5) (got " +
                                          std::to_string(clip_fraction) + ")");
  }
  if (n == 0) return 0;
  const auto k = static_cast<std::size_t>(std::floor(clip_fraction * static_cast<double>(n) + 1e-9));
  return std::min(k, (n - 1) / 2);
}

// ---------------------------------------------------------------------------

namespace {

inline std::uint32_t order_key(float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  return (bits & 0x80000000u) ? ~bits : bits ^ 0x80000000u;
}

inline float from_order_key(std::uint32_t key) {
  const std::uint32_t bits = (key & 0x80000000u) ? key ^ 0x80000000u : ~key;
  return std::bit_cast<float>(bits);
}

// Bin index holding the element of the given rank; rank becomes rank-in-bin.
std::uint32_t locate(const std::vector<std::uint64_t>& hist, std::size_t& rank) {
  std::uint64_t seen = 0;
  for (std::uint32_t b = 0; b < hist.size(); ++b) {
    if (seen + hist[b] > rank) {
      rank -= static_cast<std::size_t>(seen);
      return b;
    }
    seen += hist[b];
  }
  fail(ErrorCode::Calibration, "percentile rank beyond histogram");
}

}  // namespace

PooledRange::PooledRange(double clip_fraction)
    : clip_fraction_(clip_fraction),
      min_(std::numeric_limits<float>::infinity()),
      max_(-std::numeric_limits<float>::infinity()),
      high_(1u << 16, 0) {
  clip_rank(1, clip_fraction);  // validates the fraction
}

void PooledRange::add_first_pass(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::Numeric, "non-finite value in percentile pool");
    ++high_[order_key(v) >> 16];
    min_ = std::min(min_, v);
    max_ = std::max(max_, v);
  }
  count_ += values.size();
}

void PooledRange::finish_first_pass() {
  if (count_ == 0) fail(ErrorCode::EmptyInput, "no values observed");
  first_done_ = true;
  const std::size_t k = clip_rank(count_, clip_fraction_);
  if (k == 0) return;
  second_pass_needed_ = true;
  lo_rank_in_bin_ = k;
  hi_rank_in_bin_ = count_ - 1 - k;
  lo_bin_ = locate(high_, lo_rank_in_bin_);
  hi_bin_ = locate(high_, hi_rank_in_bin_);
  low_lo_.assign(1u << 16, 0);
  low_hi_.assign(1u << 16, 0);
}

void PooledRange::add_second_pass(std::span<const float> values) {
  for (float v : values) {
    const std::uint32_t key = order_key(v);
    const std::uint32_t bin = key >> 16;
    if (bin == lo_bin_) ++low_lo_[key & 0xffffu];
    if (bin == hi_bin_) ++low_hi_[key & 0xffffu];
  }
  second_done_ = true;
}

float PooledRange::clipped_min() const {
  if (!first_done_) fail(ErrorCode::Usage, "first pass not finished");
  if (!second_pass_needed_) return min_;
  if (!second_done_) fail(ErrorCode::Usage, "second pass not run");
  std::size_t r = lo_rank_in_bin_;
  return from_order_key((lo_bin_ << 16) | locate(low_lo_, r));
}

float PooledRange::clipped_max() const {
  if (!first_done_) fail(ErrorCode::Usage, "first pass not finished");
  if (!second_pass_needed_) return max_;
  if (!second_done_) fail(ErrorCode::Usage, "second pass not run");
  std::size_t r = hi_rank_in_bin_;
  return from_order_key((hi_bin_ << 16) | locate(low_hi_, r));
}

// ---------------------------------------------------------------------------

std::size_t logits_layer_index(const NetworkF& net) {
  if (net.layers.empty()) fail(ErrorCode::Structure, "empty network");
  std::size_t i = net.layers.size() - 1;
  if (net.layers[i].spec.kind == LayerKind::Softmax) {
    if (i == 0) fail(ErrorCode::Structure, "network has only a softmax");
    --i;
  }
  return i;
}

std::vector<std::size_t> activation_observation_points(const NetworkF& net) {
  std::vector<std::size_t> points{kInputObservation};
  const std::size_t logits = logits_layer_index(net);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (net.layers[i].spec.kind == LayerKind::ReLU || i == logits) points.push_back(i);
  }
  return points;
}

namespace {

struct Observation {
  PooledRange range;
  std::vector<float> cmin, cmax;

  void track_channels(const TensorF& t) {
    const std::size_t c = t.shape().back();
    if (cmin.empty()) {
      cmin.assign(c, std::numeric_limits<float>::infinity());
      cmax.assign(c, -std::numeric_limits<float>::infinity());
    }
    const std::size_t rows = t.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
      const float* p = t.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        cmin[j] = std::min(cmin[j], p[j]);
        cmax[j] = std::max(cmax[j], p[j]);
      }
    }
  }
};

std::string observation_name(const NetworkF& net, std::size_t index) {
  return index == kInputObservation ? "input" : net.layers[index].spec.name;
}

}  // namespace

std::vector<ActivationRange> observe_activations(const NetworkF& net, const TensorF& images,
                                                 double clip_fraction, std::size_t batch_size) {
  if (images.empty()) fail(ErrorCode::EmptyInput, "no calibration samples");
  const std::vector<std::size_t> points = activation_observation_points(net);
  std::vector<Observation> obs(points.size(), Observation{PooledRange(clip_fraction), {}, {}});
  std::vector<std::ptrdiff_t> slot(net.layers.size(), -1);
  for (std::size_t p = 1; p < points.size(); ++p) slot[points[p]] = static_cast<std::ptrdiff_t>(p);

  auto sweep = [&](bool first) {
    ForwardOptions<float> opts;
    opts.keep_activations = false;
    opts.observer = [&](std::size_t layer, TensorF& out) {
      if (slot[layer] < 0) return;
      Observation& o = obs[static_cast<std::size_t>(slot[layer])];
      if (first) {
        o.range.add_first_pass(out.values());
        o.track_channels(out);
      } else if (o.range.needs_second_pass()) {
        o.range.add_second_pass(out.values());
      }
    };
    const std::size_t n = images.dim(0), per = images.size() / n;
    for (std::size_t start = 0; start < n; start += batch_size) {
      const std::size_t end = std::min(n, start + batch_size);
      Shape shape = images.shape();
      shape[0] = end - start;
      TensorF batch(shape, std::vector<float>(images.data() + start * per, images.data() + end * per));
      if (first) {
        obs[0].range.add_first_pass(batch.values());
        obs[0].track_channels(batch);
      } else if (obs[0].range.needs_second_pass()) {
        obs[0].range.add_second_pass(batch.values());
      }
      forward(net, batch, opts);
    }
  };

  sweep(true);
  bool again = false;
  for (Observation& o : obs) {
    o.range.finish_first_pass();
    again = again || o.range.needs_second_pass();
  }
  if (again) sweep(false);

  std::vector<ActivationRange> out;
  out.reserve(points.size());
  for (std::size_t p = 0; p < points.size(); ++p) {
    ActivationRange r;
    r.layer_index = points[p];
    r.name = observation_name(net, points[p]);
    r.count = obs[p].range.count();
    r.clipped_min = obs[p].range.clipped_min();
    r.clipped_max = obs[p].range.clipped_max();
    r.channel_min = std::move(obs[p].cmin);
    r.channel_max = std::move(obs[p].cmax);
    out.push_back(std::move(r));
  }
  return out;
}

const LayerQuantRecord* CalibrationRecord::find_layer(std::size_t layer_index) const {
  for (const LayerQuantRecord& r : layers) {
    if (r.layer_index == layer_index) return &r;
  }
  return nullptr;
}

CalibrationRecord calibrate(const NetworkF& folded, const TensorF& samples, double clip_fraction,
                            int bits) {
  if (contains_batchnorm(folded)) {
    fail(ErrorCode::Structure, "calibrate expects a BatchNorm-folded network");
  }
  clip_rank(1, clip_fraction);
  if (samples.empty()) fail(ErrorCode::EmptyInput, "calibration needs at least one sample");
  CalibrationRecord rec;
  rec.samples = samples.dim(0);
  rec.clip_fraction = clip_fraction;
  rec.bits = bits;

  const std::vector<ActivationRange> ranges = observe_activations(folded, samples, clip_fraction);
  auto entry = [&](std::size_t index) -> LayerQuantRecord& {
    for (LayerQuantRecord& r : rec.layers) {
      if (r.layer_index == index) return r;
    }
    rec.layers.push_back({observation_name(folded, index), index, {}, {}});
    return rec.layers.back();
  };
  entry(kInputObservation);
  for (std::size_t i = 0; i < folded.layers.size(); ++i) {
    const LayerF& l = folded.layers[i];
    if (has_weights(l.spec.kind)) {
      const MinMax<float> mm = reduce_minmax(l.weight);
      entry(i).weight = make_quant_params(mm.mins[0], mm.maxs[0], bits);
    }
    for (const ActivationRange& r : ranges) {
      if (r.layer_index == i) entry(i).activation = make_quant_params(r.clipped_min, r.clipped_max, bits);
    }
  }
  entry(kInputObservation).activation =
      make_quant_params(ranges.front().clipped_min, ranges.front().clipped_max, bits);
  return rec;
}

TensorF quantized_forward(const NetworkF& folded, const CalibrationRecord& record,
                          const TensorF& batch, std::size_t batch_size) {
  if (contains_batchnorm(folded)) {
    fail(ErrorCode::Structure, "quantized_forward expects a BatchNorm-folded network");
  }
  NetworkF qnet = folded;
  for (std::size_t i = 0; i < qnet.layers.size(); ++i) {
    LayerF& l = qnet.layers[i];
    if (!has_weights(l.spec.kind)) continue;
    const LayerQuantRecord* r = record.find_layer(i);
    if (!r || !r->weight) {
      fail(ErrorCode::Calibration, "no weight quantization record for layer " + l.spec.name);
    }
    l.weight = fake_quantize(l.weight, *r->weight);
  }
  std::vector<const QuantParams*> act(qnet.layers.size(), nullptr);
  for (std::size_t p : activation_observation_points(qnet)) {
    const LayerQuantRecord* r = record.find_layer(p);
    if (!r || !r->activation) {
      fail(ErrorCode::Calibration,
           "no activation quantization record for " + observation_name(qnet, p));
    }
    if (p != kInputObservation) act[p] = &*r->activation;
  }
  const QuantParams& input_qp = *record.find_layer(kInputObservation)->activation;
  const TensorF qinput = fake_quantize(batch, input_qp);
  return predict_logits(qnet, qinput, batch_size, [&](std::size_t layer, TensorF& out) {
    if (act[layer]) out = fake_quantize(out, *act[layer]);
  });
}

nlohmann::json to_json(const QuantParams& qp) {
  return {{"scale", qp.scale},       {"zero_point", qp.zero_point}, {"bits", qp.bits},
          {"min", qp.clip_min},      {"max", qp.clip_max}};
}

QuantParams quant_params_from_json(const nlohmann::json& j) {
  QuantParams qp;
  qp.scale = j.at("scale").get<double>();
  qp.zero_point = j.at("zero_point").get<std::int32_t>();
  qp.bits = j.value("bits", 8);
  qp.clip_min = j.at("min").get<double>();
  qp.clip_max = j.at("max").get<double>();
  if (!(qp.scale > 0.0) || qp.zero_point < 0 || qp.zero_point > qp.qmax()) {
    fail(ErrorCode::Config, "invalid quantization parameters in record");
  }
  return qp;
}

nlohmann::json to_json(const CalibrationRecord& record) {
  nlohmann::json layers = nlohmann::json::array();
  for (const LayerQuantRecord& r : record.layers) {
    nlohmann::json e{{"name", r.name},
                     {"layer_index", r.layer_index == kInputObservation
                                         ? nlohmann::json(-1)
                                         : nlohmann::json(r.layer_index)},
                     {"N", record.samples},
                     {"clip_fraction", record.clip_fraction}};
    e["weight"] = r.weight ? to_json(*r.weight) : nlohmann::json(nullptr);
    e["activation"] = r.activation ? to_json(*r.activation) : nlohmann::json(nullptr);
    layers.push_back(std::move(e));
  }
  return {{"N", record.samples},
          {"clip_fraction", record.clip_fraction},
          {"bits", record.bits},
          {"layers", std::move(layers)}};
}

CalibrationRecord calibration_record_from_json(const nlohmann::json& j) {
  CalibrationRecord rec;
  rec.samples = j.at("N").get<std::size_t>();
  rec.clip_fraction = j.at("clip_fraction").get<double>();
  rec.bits = j.value("bits", 8);
  for (const nlohmann::json& e : j.at("layers")) {
    LayerQuantRecord r;
    r.name = e.at("name").get<std::string>();
    const long long idx = e.at("layer_index").get<long long>();
    r.layer_index = idx < 0 ? kInputObservation : static_cast<std::size_t>(idx);
    if (!e.at("weight").is_null()) r.weight = quant_params_from_json(e.at("weight"));
    if (!e.at("activation").is_null()) r.activation = quant_params_from_json(e.at("activation"));
    rec.layers.push_back(std::move(r));
  }
  return rec;
}

}  // namespace quantlens
