#include <array>
#include <cstring>

#include "quantlens/nn.hpp"

namespace quantlens {

namespace {

constexpr std::array<std::pair<LayerKind, std::string_view>, 9> kLayerNames{{
    {LayerKind::Conv2D, "Conv2D"},
    {LayerKind::DepthwiseConv2D, "DepthwiseConv2D"},
    {LayerKind::PointwiseConv2D, "PointwiseConv2D"},
    {LayerKind::BatchNorm, "BatchNorm"},
    {LayerKind::ReLU, "ReLU"},
    {LayerKind::MaxPool, "MaxPool"},
    {LayerKind::Flatten, "Flatten"},
    {LayerKind::Dense, "Dense"},
    {LayerKind::Softmax, "Softmax"},
}};

constexpr std::array<std::pair<Variant, std::string_view>, 4> kVariantNames{{
    {Variant::RegularConvWithBN, "Regular_Conv_With_BN"},
    {Variant::RegularConvNoBN, "Regular_Conv_No_BN"},
    {Variant::DWSConvWithBN, "DWS_Conv_With_BN"},
    {Variant::DWSConvNoBN, "DWS_Conv_No_BN"},
}};

std::size_t spatial_out(std::size_t in, const LayerSpec& spec) {
  if (spec.padding == Padding::Same) return (in + spec.stride - 1) / spec.stride;
  if (in < spec.kernel) fail(ErrorCode::Shape, "layer " + spec.name + ": input smaller than kernel");
  return (in - spec.kernel) / spec.stride + 1;
}

template <typename U, typename T>
Tensor<U> cast_or_empty(const Tensor<T>& t) {
  return t.empty() ? Tensor<U>() : t.template cast<U>();
}

}  // namespace

std::string_view layer_kind_name(LayerKind kind) {
  for (auto& [k, n] : kLayerNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

LayerKind parse_layer_kind(std::string_view name) {
  for (auto& [k, n] : kLayerNames) {
    if (n == name) return k;
  }
  fail(ErrorCode::Config, "unknown layer kind '" + std::string(name) + "'");
}

template <typename T>
template <typename U>
Layer<U> Layer<T>::cast() const {
  Layer<U> out;
  out.spec = spec;
  out.weight = cast_or_empty<U>(weight);
  out.bias = cast_or_empty<U>(bias);
  out.gamma = cast_or_empty<U>(gamma);
  out.beta = cast_or_empty<U>(beta);
  out.running_mean = cast_or_empty<U>(running_mean);
  out.running_var = cast_or_empty<U>(running_var);
  out.epsilon = epsilon;
  out.momentum = momentum;
  return out;
}

template <typename T>
std::size_t Network<T>::find(std::string_view name) const {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].spec.name == name) return i;
  }
  fail(ErrorCode::Config, "no layer named '" + std::string(name) + "'");
}

template <typename T>
template <typename U>
Network<U> Network<T>::cast() const {
  Network<U> out;
  out.variant = variant;
  out.input_shape = input_shape;
  out.layers.reserve(layers.size());
  for (const Layer<T>& l : layers) out.layers.push_back(l.template cast<U>());
  return out;
}

template Layer<double> Layer<float>::cast() const;
template Layer<float> Layer<double>::cast() const;
template Layer<float> Layer<float>::cast() const;
template Network<double> Network<float>::cast() const;
template Network<float> Network<double>::cast() const;
template Network<float> Network<float>::cast() const;
template std::size_t Network<float>::find(std::string_view) const;
template std::size_t Network<double>::find(std::string_view) const;

Shape output_shape(const LayerSpec& spec, const Shape& in) {
  auto need_image = [&] {
    if (in.size() != 3) {
      fail(ErrorCode::Shape, "layer " + spec.name + " expects an HWC input, got " + shape_string(in));
    }
  };
  switch (spec.kind) {
    case LayerKind::Conv2D:
    case LayerKind::PointwiseConv2D:
      need_image();
      if (in[2] != spec.channels_in) {
        fail(ErrorCode::Shape, "layer " + spec.name + " expects " +
                                   std::to_string(spec.channels_in) + " channels, got " +
                                   std::to_string(in[2]));
      }
      return {spatial_out(in[0], spec), spatial_out(in[1], spec), spec.channels_out};
    case LayerKind::DepthwiseConv2D:
      need_image();
      if (in[2] != spec.channels_in || spec.channels_out != spec.channels_in) {
        fail(ErrorCode::Shape, "depthwise layer " + spec.name + " channel mismatch");
      }
      return {spatial_out(in[0], spec), spatial_out(in[1], spec), in[2]};
    case LayerKind::MaxPool:
      need_image();
      return {spatial_out(in[0], spec), spatial_out(in[1], spec), in[2]};
    case LayerKind::BatchNorm:
    case LayerKind::ReLU:
    case LayerKind::Softmax:
      return in;
    case LayerKind::Flatten:
      return {shape_size(in)};
    case LayerKind::Dense:
      if (in.size() != 1 || in[0] != spec.channels_in) {
        fail(ErrorCode::Shape, "dense layer " + spec.name + " expects " +
                                   std::to_string(spec.channels_in) + " inputs, got " +
                                   shape_string(in));
      }
      return {spec.channels_out};
  }
  fail(ErrorCode::Config, "unhandled layer kind");
}

FanInfo layer_fan(const LayerSpec& spec, const BuildOptions& opts) {
  const auto k = static_cast<std::int64_t>(spec.kernel);
  const auto ci = static_cast<std::int64_t>(spec.channels_in);
  const auto co = static_cast<std::int64_t>(spec.channels_out);
  switch (spec.kind) {
    case LayerKind::Conv2D: return conv_fan(k, ci, co);
    case LayerKind::PointwiseConv2D: return conv_fan(1, ci, co);
    case LayerKind::DepthwiseConv2D:
      if (opts.depthwise_fan_counts_channels) {
        FanInfo f = conv_fan(k, ci, 1);
        f.channels_out = static_cast<std::size_t>(co);
        return f;
      }
      return conv_fan(k, 1, 1);
    case LayerKind::Dense: return dense_fan(ci, co);
    default: fail(ErrorCode::Config, "layer " + spec.name + " has no weights");
  }
}

NetworkF build_network(const Shape& input_shape, const std::vector<LayerSpec>& specs,
                       SeededRng& rng, const BuildOptions& opts) {
  NetworkF net;
  net.input_shape = input_shape;
  Shape current = input_shape;
  for (const LayerSpec& spec : specs) {
    LayerSpec s = spec;
    // channel counts flow from the previous layer where the kind implies them
    if (s.kind == LayerKind::Conv2D || s.kind == LayerKind::PointwiseConv2D ||
        s.kind == LayerKind::DepthwiseConv2D) {
      if (current.size() == 3 && s.channels_in == 0) s.channels_in = current[2];
      if (s.kind == LayerKind::DepthwiseConv2D) s.channels_out = s.channels_in;
      if (s.kind == LayerKind::PointwiseConv2D) s.kernel = 1;
    } else if (s.kind == LayerKind::Dense && current.size() == 1 && s.channels_in == 0) {
      s.channels_in = current[0];
    } else if (s.kind == LayerKind::BatchNorm) {
      s.channels_in = s.channels_out = current.back();
    }
    const Shape next = output_shape(s, current);

    LayerF layer;
    layer.spec = s;
    if (has_weights(s.kind)) {
      const FanInfo fan = layer_fan(s, opts);
      Shape wshape;
      switch (s.kind) {
        case LayerKind::Conv2D: wshape = {s.channels_out, s.kernel, s.kernel, s.channels_in}; break;
        case LayerKind::PointwiseConv2D: wshape = {s.channels_out, 1, 1, s.channels_in}; break;
        case LayerKind::DepthwiseConv2D: wshape = {s.channels_in, s.kernel, s.kernel, 1}; break;
        default: wshape = {s.channels_out, s.channels_in}; break;
      }
      SeededRng layer_rng = rng.substream("init/" + s.name);
      layer.weight = sample_weights(s.init.value_or(glorot_uniform()), fan, wshape, layer_rng);
      layer.bias = TensorF({s.channels_out});
    } else if (s.kind == LayerKind::BatchNorm) {
      const std::size_t c = current.back();
      layer.gamma = TensorF({c}, 1.0f);
      layer.beta = TensorF({c}, 0.0f);
      layer.running_mean = TensorF({c}, 0.0f);
      layer.running_var = TensorF({c}, 1.0f);
      layer.epsilon = opts.bn_epsilon;
      layer.momentum = opts.bn_momentum;
    }
    net.layers.push_back(std::move(layer));
    current = next;
  }
  return net;
}

std::string_view variant_name(Variant v) {
  for (auto& [k, n] : kVariantNames) {
    if (k == v) return n;
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  for (auto& [k, n] : kVariantNames) {
    if (n == name) return k;
  }
  fail(ErrorCode::Config, "unknown architecture variant '" + std::string(name) + "'");
}

bool variant_has_bn(Variant v) {
  return v == Variant::RegularConvWithBN || v == Variant::DWSConvWithBN;
}

bool variant_is_dws(Variant v) {
  return v == Variant::DWSConvWithBN || v == Variant::DWSConvNoBN;
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> v{Variant::RegularConvWithBN, Variant::RegularConvNoBN,
                                      Variant::DWSConvWithBN, Variant::DWSConvNoBN};
  return v;
}

std::size_t configurable_conv_count(Variant v, const ArchSpec& arch) {
  return arch.block_widths.size() * (variant_is_dws(v) ? 2 : 1);
}

NetworkF build_macro_arch(Variant v, const std::vector<InitSpec>& init_grid,
                          const ArchSpec& arch, SeededRng& rng) {
  const std::size_t expected = configurable_conv_count(v, arch);
  if (init_grid.size() != expected) {
    fail(ErrorCode::Config, "init grid has " + std::to_string(init_grid.size()) +
                                " entries, " + std::string(variant_name(v)) + " needs " +
                                std::to_string(expected));
  }
  if (arch.input_shape.size() != 3) fail(ErrorCode::Config, "input shape must be [H, W, C]");
  if (arch.dense_widths.empty()) fail(ErrorCode::Config, "at least one dense layer is required");
  const bool bn = variant_has_bn(v);
  std::vector<LayerSpec> specs;
  auto conv = [&](LayerKind kind, const std::string& name, std::size_t width,
                  const InitSpec& init) {
    LayerSpec s;
    s.kind = kind;
    s.name = name;
    s.kernel = kind == LayerKind::PointwiseConv2D ? 1 : arch.kernel;
    s.channels_out = width;
    s.init = init;
    specs.push_back(s);
    if (bn) specs.push_back({LayerKind::BatchNorm, name + "_bn"});
    specs.push_back({LayerKind::ReLU, name + "_relu"});
  };

  conv(LayerKind::Conv2D, "conv0", arch.first_conv_width, glorot_uniform());
  std::size_t grid_index = 0;
  for (std::size_t b = 0; b < arch.block_widths.size(); ++b) {
    const std::string block = "block" + std::to_string(b + 1);
    if (variant_is_dws(v)) {
      conv(LayerKind::DepthwiseConv2D, block + "_dw", 0, init_grid[grid_index++]);
      conv(LayerKind::PointwiseConv2D, block + "_pw", arch.block_widths[b], init_grid[grid_index++]);
    } else {
      conv(LayerKind::Conv2D, block + "_conv", arch.block_widths[b], init_grid[grid_index++]);
    }
    LayerSpec pool{LayerKind::MaxPool, block + "_pool", 2, 2, Padding::Valid};
    specs.push_back(pool);
  }
  specs.push_back({LayerKind::Flatten, "flatten"});
  for (std::size_t d = 0; d < arch.dense_widths.size(); ++d) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.name = "dense" + std::to_string(d + 1);
    s.channels_out = arch.dense_widths[d];
    s.init = glorot_uniform();
    specs.push_back(s);
    if (d + 1 < arch.dense_widths.size()) specs.push_back({LayerKind::ReLU, s.name + "_relu"});
  }
  specs.push_back({LayerKind::Softmax, "softmax"});

  NetworkF net = build_network(arch.input_shape, specs, rng, arch.build);
  net.variant = std::string(variant_name(v));
  return net;
}

// ---------------------------------------------------------------------------

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.images = batch_images(indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  return out;
}

TensorF Dataset::batch_images(std::span<const std::size_t> indices) const {
  if (indices.empty()) fail(ErrorCode::EmptyInput, "empty batch");
  Shape shape = images.shape();
  const std::size_t per = images.size() / shape[0];
  shape[0] = indices.size();
  TensorF out(shape);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) fail(ErrorCode::Shape, "sample index out of range");
    const float* src = images.data() + indices[i] * per;
    std::memcpy(out.data() + i * per, src, per * sizeof(float));
  }
  return out;
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const LayerSpec& spec) {
  nlohmann::json j{{"kind", layer_kind_name(spec.kind)},
                   {"name", spec.name},
                   {"kernel", spec.kernel},
                   {"stride", spec.stride},
                   {"padding", spec.padding == Padding::Same ? "same" : "valid"},
                   {"channels_in", spec.channels_in},
                   {"channels_out", spec.channels_out}};
  if (spec.init) j["init"] = to_json(*spec.init);
  return j;
}

LayerSpec layer_spec_from_json(const nlohmann::json& j) {
  LayerSpec s;
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  s.name = j.at("name").get<std::string>();
  s.kernel = j.value("kernel", std::size_t{1});
  s.stride = j.value("stride", std::size_t{1});
  const std::string pad = j.value("padding", std::string("same"));
  if (pad != "same" && pad != "valid") fail(ErrorCode::Config, "padding must be same or valid");
  s.padding = pad == "same" ? Padding::Same : Padding::Valid;
  s.channels_in = j.value("channels_in", std::size_t{0});
  s.channels_out = j.value("channels_out", std::size_t{0});
  if (j.contains("init")) s.init = init_spec_from_json(j.at("init"));
  return s;
}

nlohmann::json to_json(const ArchSpec& arch) {
  return {{"input_shape", arch.input_shape},
          {"kernel", arch.kernel},
          {"first_conv_width", arch.first_conv_width},
          {"block_widths", arch.block_widths},
          {"dense_widths", arch.dense_widths},
          {"bn_epsilon", arch.build.bn_epsilon},
          {"bn_momentum", arch.build.bn_momentum},
          {"depthwise_fan_counts_channels", arch.build.depthwise_fan_counts_channels}};
}

ArchSpec arch_spec_from_json(const nlohmann::json& j) {
  ArchSpec a;
  if (!j.is_object()) fail(ErrorCode::Config, "arch must be an object");
  a.input_shape = j.value("input_shape", a.input_shape);
  a.kernel = j.value("kernel", a.kernel);
  a.first_conv_width = j.value("first_conv_width", a.first_conv_width);
  a.block_widths = j.value("block_widths", a.block_widths);
  a.dense_widths = j.value("dense_widths", a.dense_widths);
  a.build.bn_epsilon = j.value("bn_epsilon", a.build.bn_epsilon);
  a.build.bn_momentum = j.value("bn_momentum", a.build.bn_momentum);
  a.build.depthwise_fan_counts_channels =
      j.value("depthwise_fan_counts_channels", a.build.depthwise_fan_counts_channels);
  if (!(a.build.bn_epsilon > 0.0)) fail(ErrorCode::Config, "bn_epsilon must be > 0");
  if (!(a.build.bn_momentum >= 0.0 && a.build.bn_momentum <= 1.0)) {
    fail(ErrorCode::Config, "bn_momentum must be in [0, 1]");
  }
  return a;
}

}  // namespace quantlens
