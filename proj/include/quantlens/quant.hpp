#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantlens/nn.hpp"
#include "quantlens/tensor.hpp"

namespace quantlens {

// Asymmetric affine per-tensor quantization onto [0, 2^bits - 1].
struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;
  int bits = 8;
  double clip_min = 0.0;
  double clip_max = 0.0;

  std::int32_t qmax() const noexcept { return (std::int32_t{1} << bits) - 1; }
};

// Widens [lo, hi] to contain 0, then nudges it so the zero point is an
// integer: scale = (hi - lo) / qmax, zp = round(-lo / scale) clamped to
// [0, qmax], clip range = [-zp * scale, (qmax - zp) * scale].
// A zero-width range becomes [0, 1e-8].
QuantParams make_quant_params(double lo, double hi, int bits = 8);

// q = clamp(round_half_away(t / scale) + zero_point, 0, qmax)
std::int32_t quantize_value(double t, const QuantParams& qp);
double dequantize_value(std::int32_t q, const QuantParams& qp);

Tensor<std::int32_t> quantize(const TensorF& t, const QuantParams& qp);
TensorF dequantize(const Tensor<std::int32_t>& q, const QuantParams& qp);
// dequantize(quantize(t))
TensorF fake_quantize(const TensorF& t, const QuantParams& qp);

// Folds every BatchNorm into the conv before it:
//   w_fold = gamma * w / sqrt(running_var + eps)            (per output channel)
//   b_fold = beta + gamma * (b - running_mean) / sqrt(running_var + eps)
// Networks without BatchNorm come back unchanged.
NetworkF fold_batchnorm(const NetworkF& net);

bool contains_batchnorm(const NetworkF& net);

// Symmetric nearest-rank clip: with n pooled values sorted ascending and
// k = floor(clip_fraction * n), the range is [v[k], v[n - 1 - k]].
std::size_t clip_rank(std::size_t n, double clip_fraction);

// Exact pooled percentile range computed in two streaming passes: a 65536-bin
// histogram over the high 16 bits of an order-preserving key, then a second
// histogram over the low 16 bits inside the bins holding the target ranks.
class PooledRange {
 public:
  explicit PooledRange(double clip_fraction = 0.0);

  void add_first_pass(std::span<const float> values);
  void finish_first_pass();
  bool needs_second_pass() const noexcept { return second_pass_needed_; }
  void add_second_pass(std::span<const float> values);

  std::size_t count() const noexcept { return count_; }
  float exact_min() const noexcept { return min_; }
  float exact_max() const noexcept { return max_; }
  // valid after the final pass
  float clipped_min() const;
  float clipped_max() const;

 private:
  double clip_fraction_;
  std::size_t count_ = 0;
  float min_;
  float max_;
  std::vector<std::uint64_t> high_;
  bool first_done_ = false;
  bool second_pass_needed_ = false;
  bool second_done_ = false;
  std::uint32_t lo_bin_ = 0, hi_bin_ = 0;
  std::size_t lo_rank_in_bin_ = 0, hi_rank_in_bin_ = 0;
  std::vector<std::uint64_t> low_lo_, low_hi_;
};

struct ActivationRange {
  std::size_t layer_index = 0;  // kInputObservation for the network input
  std::string name;
  std::size_t count = 0;
  float clipped_min = 0.0f;
  float clipped_max = 0.0f;
  std::vector<float> channel_min;  // exact, per last-axis channel
  std::vector<float> channel_max;
};

inline constexpr std::size_t kInputObservation = static_cast<std::size_t>(-1);

// Observation points: the network input, every ReLU output and the logits.
std::vector<std::size_t> activation_observation_points(const NetworkF& net);
std::size_t logits_layer_index(const NetworkF& net);

// Eval-mode forward over images (in batches), returning the pooled clipped
// range and per-channel extrema of every observation point.
std::vector<ActivationRange> observe_activations(const NetworkF& net, const TensorF& images,
                                                 double clip_fraction,
                                                 std::size_t batch_size = 128);

struct LayerQuantRecord {
  std::string name;
  std::size_t layer_index = kInputObservation;
  std::optional<QuantParams> weight;
  std::optional<QuantParams> activation;
};

struct CalibrationRecord {
  std::vector<LayerQuantRecord> layers;  // input first, then depth order
  std::size_t samples = 0;
  double clip_fraction = 0.0;
  int bits = 8;

  const LayerQuantRecord* find_layer(std::size_t layer_index) const;
};

// Weights use their exact min/max; activations the pooled clipped range.
CalibrationRecord calibrate(const NetworkF& folded, const TensorF& samples, double clip_fraction,
                            int bits = 8);

// Fake-quantized inference: weights quantize-dequantized once, the input and
// each observed activation quantize-dequantized before the next layer. Returns
// dequantized logits.
TensorF quantized_forward(const NetworkF& folded, const CalibrationRecord& record,
                          const TensorF& batch, std::size_t batch_size = 256);

nlohmann::json to_json(const QuantParams& qp);
QuantParams quant_params_from_json(const nlohmann::json& j);
nlohmann::json to_json(const CalibrationRecord& record);
CalibrationRecord calibration_record_from_json(const nlohmann::json& j);

}  // namespace quantlens
