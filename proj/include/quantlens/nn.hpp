#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quantlens/init.hpp"
#include "quantlens/rng.hpp"
#include "quantlens/tensor.hpp"

namespace quantlens {

enum class LayerKind {
  Conv2D,
  DepthwiseConv2D,
  PointwiseConv2D,
  BatchNorm,
  ReLU,
  MaxPool,
  Flatten,
  Dense,
  Softmax,
};

std::string_view layer_kind_name(LayerKind kind);
LayerKind parse_layer_kind(std::string_view name);

enum class Padding { Same, Valid };

struct LayerSpec {
  LayerKind kind = LayerKind::ReLU;
  std::string name;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  Padding padding = Padding::Same;
  std::size_t channels_in = 0;
  std::size_t channels_out = 0;
  std::optional<InitSpec> init;
};

inline bool has_weights(LayerKind k) {
  return k == LayerKind::Conv2D || k == LayerKind::DepthwiseConv2D ||
         k == LayerKind::PointwiseConv2D || k == LayerKind::Dense;
}

inline bool is_conv(LayerKind k) {
  return k == LayerKind::Conv2D || k == LayerKind::DepthwiseConv2D ||
         k == LayerKind::PointwiseConv2D;
}

// Parameter layouts (output channel first so axis 0 is the per-channel axis):
//   Conv2D          [Cout, K, K, Cin]
//   DepthwiseConv2D [C, K, K, 1]
//   PointwiseConv2D [Cout, 1, 1, Cin]
//   Dense           [out, in]
// Activations are NHWC, dense activations [N, units].
template <typename T>
struct Layer {
  LayerSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;
  // BatchNorm only
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-3;
  double momentum = 0.99;

  template <typename U>
  Layer<U> cast() const;
};

using LayerF = Layer<float>;

template <typename T>
struct Network {
  std::string variant;
  Shape input_shape;  // [H, W, C]
  std::vector<Layer<T>> layers;

  std::size_t find(std::string_view name) const;

  template <typename U>
  Network<U> cast() const;
};

using NetworkF = Network<float>;
using NetworkD = Network<double>;

// Builds a network from layer specs, inferring shapes and drawing weights
// from each layer's InitSpec (GlorotUni when unset). Each layer draws from
// the substream "init/<layer name>". Biases start at 0, BN gamma=1, beta=0.
struct BuildOptions {
  double bn_epsilon = 1e-3;
  double bn_momentum = 0.99;
  // false: depthwise fan uses one input channel per filter (K*K each way).
  // true: fan_in counts every input channel, as Keras does for (K,K,C,1) kernels.
  bool depthwise_fan_counts_channels = false;
};

NetworkF build_network(const Shape& input_shape, const std::vector<LayerSpec>& specs,
                       SeededRng& rng, const BuildOptions& opts = {});

Shape output_shape(const LayerSpec& spec, const Shape& in);  // shapes exclude batch

FanInfo layer_fan(const LayerSpec& spec, const BuildOptions& opts = {});

// ---------------------------------------------------------------------------
// Macro-architecture

enum class Variant { RegularConvWithBN, RegularConvNoBN, DWSConvWithBN, DWSConvNoBN };

std::string_view variant_name(Variant v);
Variant parse_variant(std::string_view name);
bool variant_has_bn(Variant v);
bool variant_is_dws(Variant v);
const std::vector<Variant>& all_variants();

struct ArchSpec {
  Shape input_shape{32, 32, 3};
  std::size_t kernel = 3;
  std::size_t first_conv_width = 32;
  std::vector<std::size_t> block_widths{64, 128, 256};
  std::vector<std::size_t> dense_widths{256, 128, 10};
  BuildOptions build;
};

// Number of conv layers whose init comes from the grid (all but the first).
std::size_t configurable_conv_count(Variant v, const ArchSpec& arch);

// First conv and every dense layer are always GlorotUni; the remaining conv
// layers take init_grid entries in depth order.
NetworkF build_macro_arch(Variant v, const std::vector<InitSpec>& init_grid,
                          const ArchSpec& arch, SeededRng& rng);

// ---------------------------------------------------------------------------
// Forward / backward

enum class Mode { Train, Eval };

template <typename T>
struct BatchNormCache {
  std::vector<T> mean;
  std::vector<T> inv_std;
};

// Called with each layer's output; may rewrite it (fake quantization).
template <typename T>
using LayerObserver = std::function<void(std::size_t layer_index, Tensor<T>& output)>;

template <typename T>
struct ForwardOptions {
  bool keep_activations = true;
  LayerObserver<T> observer;
  bool check_finite = true;
};

template <typename T>
struct ForwardResult {
  Mode mode = Mode::Eval;
  Tensor<T> input;
  std::vector<Tensor<T>> activations;  // activations[i] = output of layer i
  std::vector<BatchNormCache<T>> bn_cache;  // indexed by layer
  Tensor<T> logits;         // [N, classes], input of the trailing Softmax
  Tensor<T> probabilities;  // [N, classes]
};

// Train mode normalizes BN with batch statistics and updates the running EMAs
// (running = momentum * running + (1 - momentum) * batch, biased variance).
template <typename T>
ForwardResult<T> forward(Network<T>& net, const Tensor<T>& batch, Mode mode,
                         const ForwardOptions<T>& opts = {});

// Eval-mode forward on a const network.
template <typename T>
ForwardResult<T> forward(const Network<T>& net, const Tensor<T>& batch,
                         const ForwardOptions<T>& opts = {});

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits);

// Mean softmax cross-entropy with max-subtracted logits.
template <typename T>
double cross_entropy_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels);

template <typename T>
struct LayerGradients {
  Tensor<T> weight;
  Tensor<T> bias;
  Tensor<T> gamma;
  Tensor<T> beta;
  double weight_norm = 0.0;  // L2 norm of the weight gradient
};

template <typename T>
struct Gradients {
  std::vector<LayerGradients<T>> layers;
  Tensor<T> input;  // dL/d(batch)
  double loss = 0.0;
};

// Gradients of the mean softmax cross-entropy. Requires a train-mode result
// with kept activations.
template <typename T>
Gradients<T> backward(const Network<T>& net, const ForwardResult<T>& cache,
                      std::span<const std::uint8_t> labels);

// ---------------------------------------------------------------------------
// Training

struct Dataset {
  TensorF images;  // [N, H, W, C]
  std::vector<std::uint8_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  Dataset subset(std::span<const std::size_t> indices) const;
  TensorF batch_images(std::span<const std::size_t> indices) const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double learning_rate = 0.01;
  std::vector<std::size_t> milestones{12, 20, 26};
  double decay = 0.1;
  std::uint64_t seed = 0;

  void validate() const;
  // Learning rate during 1-based epoch e: lr * decay^(#milestones m with m < e).
  double learning_rate_at(std::size_t epoch) const;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

enum class TrainStatus { Trained, Exploded, Vanished };
std::string_view train_status_name(TrainStatus s);
TrainStatus parse_train_status(std::string_view name);

struct EpochLog {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double loss = 0.0;
  double accuracy = 0.0;
  double max_conv_grad_norm = 0.0;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  TrainStatus status = TrainStatus::Trained;
  std::string diagnostic;
};

// Gradients below this norm on every conv layer for a whole epoch mark a run vanished.
inline constexpr double kVanishingGradNorm = 1e-12;

struct TrainHooks {
  std::function<void(TensorF& batch, SeededRng& rng)> augment;
  std::function<void(std::size_t epoch, const NetworkF& net, const EpochLog& log)> on_epoch_end;
};

// SGD with momentum (v = mu*v - lr*g; w += v). Shuffles with substream
// "shuffle/<epoch>" of cfg.seed, augments with "augment/<epoch>".
TrainLog train(NetworkF& net, const Dataset& data, const TrainConfig& cfg,
               const TrainHooks& hooks = {});

// Argmax accuracy; ties resolve to the lowest class index.
double evaluate_accuracy(const NetworkF& net, const Dataset& data, std::size_t batch_size = 256);

std::size_t argmax_row(std::span<const float> row);

// Eval-mode logits for a whole dataset, batched.
TensorF predict_logits(const NetworkF& net, const TensorF& images, std::size_t batch_size = 256,
                       const LayerObserver<float>& observer = nullptr);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const LayerSpec& spec);
LayerSpec layer_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ArchSpec& arch);
ArchSpec arch_spec_from_json(const nlohmann::json& j);

}  // namespace quantlens
