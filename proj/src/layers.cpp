#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "quantlens/nn.hpp"

namespace quantlens {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

struct Window {
  std::size_t in_h, in_w, out_h, out_w, pad_top, pad_left, kernel, stride;
};

Window window_for(const LayerSpec& spec, std::size_t h, std::size_t w) {
  Window g{h, w, 0, 0, 0, 0, spec.kernel, spec.stride};
  if (spec.stride == 0 || spec.kernel == 0) {
    fail(ErrorCode::InvalidGeometry, "layer " + spec.name + " has zero kernel or stride");
  }
  if (spec.padding == Padding::Same) {
    g.out_h = (h + spec.stride - 1) / spec.stride;
    g.out_w = (w + spec.stride - 1) / spec.stride;
    const std::size_t need_h = (g.out_h - 1) * spec.stride + spec.kernel;
    const std::size_t need_w = (g.out_w - 1) * spec.stride + spec.kernel;
    g.pad_top = need_h > h ? (need_h - h) / 2 : 0;
    g.pad_left = need_w > w ? (need_w - w) / 2 : 0;
  } else {
    if (h < spec.kernel || w < spec.kernel) {
      fail(ErrorCode::Shape, "layer " + spec.name + ": input smaller than kernel");
    }
    g.out_h = (h - spec.kernel) / spec.stride + 1;
    g.out_w = (w - spec.kernel) / spec.stride + 1;
  }
  return g;
}

// Input pixel for output (oy, ox) and tap (ky, kx); false when it falls in padding.
inline bool source_pixel(const Window& g, std::size_t oy, std::size_t ox, std::size_t ky,
                         std::size_t kx, std::size_t& iy, std::size_t& ix) {
  const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                           static_cast<std::ptrdiff_t>(g.pad_top);
  const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                           static_cast<std::ptrdiff_t>(g.pad_left);
  if (y < 0 || x < 0 || y >= static_cast<std::ptrdiff_t>(g.in_h) ||
      x >= static_cast<std::ptrdiff_t>(g.in_w)) {
    return false;
  }
  iy = static_cast<std::size_t>(y);
  ix = static_cast<std::size_t>(x);
  return true;
}

template <typename T>
void im2col(const T* image, const Window& g, std::size_t channels, T* col) {
  const std::size_t row_len = g.kernel * g.kernel * channels;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* row = col + (oy * g.out_w + ox) * row_len;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          T* dst = row + (ky * g.kernel + kx) * channels;
          std::size_t iy, ix;
          if (source_pixel(g, oy, ox, ky, kx, iy, ix)) {
            const T* src = image + (iy * g.in_w + ix) * channels;
            std::copy(src, src + channels, dst);
          } else {
            std::fill(dst, dst + channels, T{0});
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, const Window& g, std::size_t channels, T* image) {
  const std::size_t row_len = g.kernel * g.kernel * channels;
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* row = col + (oy * g.out_w + ox) * row_len;
      for (std::size_t ky = 0; ky < g.kernel; ++ky) {
        for (std::size_t kx = 0; kx < g.kernel; ++kx) {
          std::size_t iy, ix;
          if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
          const T* src = row + (ky * g.kernel + kx) * channels;
          T* dst = image + (iy * g.in_w + ix) * channels;
          for (std::size_t c = 0; c < channels; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

template <typename T>
void add_bias_rows(T* out, std::size_t rows, const Tensor<T>& bias) {
  const std::size_t c = bias.size();
  const T* b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T* o = out + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] += b[j];
  }
}

template <typename T>
void column_sums_add(const T* m, std::size_t rows, std::size_t cols, T* acc) {
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = m + r * cols;
    for (std::size_t j = 0; j < cols; ++j) acc[j] += row[j];
  }
}

// --- Conv2D -----------------------------------------------------------------

template <typename T>
Tensor<T> conv2d_forward(const Layer<T>& layer, const Tensor<T>& x) {
  const std::size_t n = x.dim(0), cin = x.dim(3), cout = layer.spec.channels_out;
  const Window g = window_for(layer.spec, x.dim(1), x.dim(2));
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t row_len = g.kernel * g.kernel * cin;
  Tensor<T> out({n, g.out_h, g.out_w, cout});
  ConstMapMat<T> w(layer.weight.data(), cout, row_len);
  const bool direct = g.kernel == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
  std::vector<T> col(direct ? 0 : pixels * row_len);
  for (std::size_t s = 0; s < n; ++s) {
    const T* img = x.data() + s * g.in_h * g.in_w * cin;
    const T* src = img;
    if (!direct) {
      im2col(img, g, cin, col.data());
      src = col.data();
    }
    MapMat<T> o(out.data() + s * pixels * cout, pixels, cout);
    o.noalias() = ConstMapMat<T>(src, pixels, row_len) * w.transpose();
  }
  add_bias_rows(out.data(), n * pixels, layer.bias);
  return out;
}

template <typename T>
Tensor<T> conv2d_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                          LayerGradients<T>& grads) {
  const std::size_t n = x.dim(0), cin = x.dim(3), cout = layer.spec.channels_out;
  const Window g = window_for(layer.spec, x.dim(1), x.dim(2));
  const std::size_t pixels = g.out_h * g.out_w;
  const std::size_t row_len = g.kernel * g.kernel * cin;
  grads.weight = Tensor<T>(layer.weight.shape());
  grads.bias = Tensor<T>(layer.bias.shape());
  Tensor<T> dx(x.shape());
  ConstMapMat<T> w(layer.weight.data(), cout, row_len);
  MapMat<T> dw(grads.weight.data(), cout, row_len);
  const bool direct = g.kernel == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
  std::vector<T> col(direct ? 0 : pixels * row_len);
  std::vector<T> dcol(direct ? 0 : pixels * row_len);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t img_len = g.in_h * g.in_w * cin;
    const T* img = x.data() + s * img_len;
    ConstMapMat<T> d(dy.data() + s * pixels * cout, pixels, cout);
    if (direct) {
      dw.noalias() += d.transpose() * ConstMapMat<T>(img, pixels, row_len);
      MapMat<T>(dx.data() + s * img_len, pixels, row_len).noalias() = d * w;
    } else {
      im2col(img, g, cin, col.data());
      dw.noalias() += d.transpose() * ConstMapMat<T>(col.data(), pixels, row_len);
      MapMat<T>(dcol.data(), pixels, row_len).noalias() = d * w;
      col2im_add(dcol.data(), g, cin, dx.data() + s * img_len);
    }
  }
  column_sums_add(dy.data(), n * pixels, cout, grads.bias.data());
  return dx;
}

// --- Depthwise --------------------------------------------------------------

template <typename T>
std::vector<T> taps_by_channel(const Tensor<T>& weight, std::size_t channels, std::size_t k) {
  // [C, K, K, 1] -> [K, K, C]
  std::vector<T> taps(k * k * channels);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t t = 0; t < k * k; ++t) taps[t * channels + c] = weight[c * k * k + t];
  }
  return taps;
}

template <typename T>
Tensor<T> depthwise_forward(const Layer<T>& layer, const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(3), k = layer.spec.kernel;
  const Window g = window_for(layer.spec, x.dim(1), x.dim(2));
  Tensor<T> out({n, g.out_h, g.out_w, c});
  const std::vector<T> taps = taps_by_channel(layer.weight, c, k);
  const T* b = layer.bias.data();
  for (std::size_t s = 0; s < n; ++s) {
    const T* img = x.data() + s * g.in_h * g.in_w * c;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* o = out.data() + ((s * g.out_h + oy) * g.out_w + ox) * c;
        std::copy(b, b + c, o);
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t iy, ix;
            if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
            const T* src = img + (iy * g.in_w + ix) * c;
            const T* wt = taps.data() + (ky * k + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) o[ch] += src[ch] * wt[ch];
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> depthwise_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                             LayerGradients<T>& grads) {
  const std::size_t n = x.dim(0), c = x.dim(3), k = layer.spec.kernel;
  const Window g = window_for(layer.spec, x.dim(1), x.dim(2));
  const std::vector<T> taps = taps_by_channel(layer.weight, c, k);
  std::vector<T> dtaps(taps.size(), T{0});
  Tensor<T> dx(x.shape());
  grads.bias = Tensor<T>(layer.bias.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t img_off = s * g.in_h * g.in_w * c;
    const T* img = x.data() + img_off;
    T* dimg = dx.data() + img_off;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* d = dy.data() + ((s * g.out_h + oy) * g.out_w + ox) * c;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            std::size_t iy, ix;
            if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
            const std::size_t p = (iy * g.in_w + ix) * c;
            const T* wt = taps.data() + (ky * k + kx) * c;
            T* dwt = dtaps.data() + (ky * k + kx) * c;
            for (std::size_t ch = 0; ch < c; ++ch) {
              dwt[ch] += img[p + ch] * d[ch];
              dimg[p + ch] += wt[ch] * d[ch];
            }
          }
        }
      }
    }
  }
  column_sums_add(dy.data(), n * g.out_h * g.out_w, c, grads.bias.data());
  grads.weight = Tensor<T>(layer.weight.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t t = 0; t < k * k; ++t) grads.weight[ch * k * k + t] = dtaps[t * c + ch];
  }
  return dx;
}

// --- Dense ------------------------------------------------------------------

template <typename T>
Tensor<T> dense_forward(const Layer<T>& layer, const Tensor<T>& x) {
  const std::size_t n = x.dim(0), in = x.size() / n, out_units = layer.spec.channels_out;
  Tensor<T> out({n, out_units});
  MapMat<T>(out.data(), n, out_units).noalias() =
      ConstMapMat<T>(x.data(), n, in) *
      ConstMapMat<T>(layer.weight.data(), out_units, in).transpose();
  add_bias_rows(out.data(), n, layer.bias);
  return out;
}

template <typename T>
Tensor<T> dense_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                         LayerGradients<T>& grads) {
  const std::size_t n = x.dim(0), in = x.size() / n, out_units = layer.spec.channels_out;
  grads.weight = Tensor<T>(layer.weight.shape());
  grads.bias = Tensor<T>(layer.bias.shape());
  ConstMapMat<T> d(dy.data(), n, out_units);
  MapMat<T>(grads.weight.data(), out_units, in).noalias() =
      d.transpose() * ConstMapMat<T>(x.data(), n, in);
  column_sums_add(dy.data(), n, out_units, grads.bias.data());
  Tensor<T> dx(x.shape());
  MapMat<T>(dx.data(), n, in).noalias() =
      d * ConstMapMat<T>(layer.weight.data(), out_units, in);
  return dx;
}

// --- BatchNorm --------------------------------------------------------------

template <typename T>
Tensor<T> batchnorm_forward(const Layer<T>& layer, Layer<T>* mutable_layer, const Tensor<T>& x,
                            Mode mode, BatchNormCache<T>& cache) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  cache.mean.assign(c, T{0});
  cache.inv_std.assign(c, T{0});
  if (mode == Mode::Train) {
    std::vector<double> sum(c, 0.0), sq(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = x.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) sum[j] += row[j];
    }
    for (std::size_t j = 0; j < c; ++j) sum[j] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* row = x.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double dv = row[j] - sum[j];
        sq[j] += dv * dv;
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      const double var = sq[j] / static_cast<double>(rows);
      cache.mean[j] = static_cast<T>(sum[j]);
      cache.inv_std[j] = static_cast<T>(1.0 / std::sqrt(var + layer.epsilon));
      if (mutable_layer) {
        const double m = mutable_layer->momentum;
        T& rm = mutable_layer->running_mean[j];
        T& rv = mutable_layer->running_var[j];
        rm = static_cast<T>(m * rm + (1.0 - m) * sum[j]);
        rv = static_cast<T>(m * rv + (1.0 - m) * var);
      }
    }
  } else {
    for (std::size_t j = 0; j < c; ++j) {
      cache.mean[j] = layer.running_mean[j];
      cache.inv_std[j] = static_cast<T>(
          1.0 / std::sqrt(static_cast<double>(layer.running_var[j]) + layer.epsilon));
    }
  }
  std::vector<T> scale(c), shift(c);
  for (std::size_t j = 0; j < c; ++j) {
    scale[j] = layer.gamma[j] * cache.inv_std[j];
    shift[j] = layer.beta[j] - cache.mean[j] * scale[j];
  }
  Tensor<T> out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * c;
    T* o = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = in[j] * scale[j] + shift[j];
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm_backward(const Layer<T>& layer, const Tensor<T>& x, const Tensor<T>& dy,
                             const BatchNormCache<T>& cache, LayerGradients<T>& grads) {
  const std::size_t c = x.shape().back();
  const std::size_t rows = x.size() / c;
  std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * c;
    const T* d = dy.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      const double xhat = (in[j] - cache.mean[j]) * cache.inv_std[j];
      sum_dy[j] += d[j];
      sum_dy_xhat[j] += d[j] * xhat;
    }
  }
  grads.gamma = Tensor<T>(layer.gamma.shape());
  grads.beta = Tensor<T>(layer.beta.shape());
  for (std::size_t j = 0; j < c; ++j) {
    grads.gamma[j] = static_cast<T>(sum_dy_xhat[j]);
    grads.beta[j] = static_cast<T>(sum_dy[j]);
  }
  Tensor<T> dx(x.shape());
  const double m = static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * c;
    const T* d = dy.data() + r * c;
    T* o = dx.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) {
      const double xhat = (in[j] - cache.mean[j]) * cache.inv_std[j];
      const double k = static_cast<double>(layer.gamma[j]) * cache.inv_std[j];
      o[j] = static_cast<T>(k * (d[j] - sum_dy[j] / m - xhat * sum_dy_xhat[j] / m));
    }
  }
  return dx;
}

// --- Pointwise nonlinearity / pooling ----------------------------------------

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return out;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

// Index (within the input image) of the first maximum in the pooling window.
template <typename T>
std::size_t pool_argmax(const T* img, const Window& g, std::size_t c, std::size_t oy,
                        std::size_t ox, std::size_t ch) {
  std::size_t best = std::numeric_limits<std::size_t>::max();
  T best_val = -std::numeric_limits<T>::infinity();
  for (std::size_t ky = 0; ky < g.kernel; ++ky) {
    for (std::size_t kx = 0; kx < g.kernel; ++kx) {
      std::size_t iy, ix;
      if (!source_pixel(g, oy, ox, ky, kx, iy, ix)) continue;
      const std::size_t p = (iy * g.in_w + ix) * c + ch;
      if (best == std::numeric_limits<std::size_t>::max() || img[p] > best_val) {
        best = p;
        best_val = img[p];
      }
    }
  }
  return best;
}

template <typename T>
Tensor<T> maxpool_forward(const LayerSpec& spec, const Tensor<T>& x) {
  const std::size_t n = x.dim(0), c = x.dim(3);
  const Window g = window_for(spec, x.dim(1), x.dim(2));
  Tensor<T> out({n, g.out_h, g.out_w, c});
  for (std::size_t s = 0; s < n; ++s) {
    const T* img = x.data() + s * g.in_h * g.in_w * c;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        T* o = out.data() + ((s * g.out_h + oy) * g.out_w + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) o[ch] = img[pool_argmax(img, g, c, oy, ox, ch)];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> maxpool_backward(const LayerSpec& spec, const Tensor<T>& x, const Tensor<T>& dy) {
  const std::size_t n = x.dim(0), c = x.dim(3);
  const Window g = window_for(spec, x.dim(1), x.dim(2));
  Tensor<T> dx(x.shape());
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t off = s * g.in_h * g.in_w * c;
    const T* img = x.data() + off;
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        const T* d = dy.data() + ((s * g.out_h + oy) * g.out_w + ox) * c;
        for (std::size_t ch = 0; ch < c; ++ch) {
          dx[off + pool_argmax(img, g, c, oy, ox, ch)] += d[ch];
        }
      }
    }
  }
  return dx;
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  double acc = 0.0;
  for (T v : t.values()) acc += static_cast<double>(v) * v;
  return std::sqrt(acc);
}

template <typename T>
void check_input(const Network<T>& net, const Tensor<T>& batch) {
  if (batch.rank() != net.input_shape.size() + 1 ||
      !std::equal(net.input_shape.begin(), net.input_shape.end(), batch.shape().begin() + 1)) {
    fail(ErrorCode::Shape, "batch shape " + shape_string(batch.shape()) +
                               " does not match network input " + shape_string(net.input_shape));
  }
}

template <typename T>
ForwardResult<T> forward_impl(const Network<T>& net, Network<T>* mutable_net,
                              const Tensor<T>& batch, Mode mode, const ForwardOptions<T>& opts) {
  check_input(net, batch);
  ForwardResult<T> result;
  result.mode = mode;
  result.bn_cache.resize(net.layers.size());
  if (opts.keep_activations) {
    result.input = batch;
    result.activations.reserve(net.layers.size());
  }
  Tensor<T> current = batch;
  const std::size_t n = batch.dim(0);
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    const Layer<T>& layer = net.layers[i];
    Tensor<T> out;
    switch (layer.spec.kind) {
      case LayerKind::Conv2D:
      case LayerKind::PointwiseConv2D: out = conv2d_forward(layer, current); break;
      case LayerKind::DepthwiseConv2D: out = depthwise_forward(layer, current); break;
      case LayerKind::BatchNorm:
        out = batchnorm_forward(layer, mutable_net ? &mutable_net->layers[i] : nullptr, current,
                                mode, result.bn_cache[i]);
        break;
      case LayerKind::ReLU: out = relu_forward(current); break;
      case LayerKind::MaxPool: out = maxpool_forward(layer.spec, current); break;
      case LayerKind::Flatten: out = current.reshaped({n, current.size() / n}); break;
      case LayerKind::Dense: out = dense_forward(layer, current); break;
      case LayerKind::Softmax:
        result.logits = current;
        out = softmax_rows(current);
        break;
    }
    if (opts.observer) opts.observer(i, out);
    if (opts.check_finite && !out.all_finite()) {
      throw NumericError(i, "non-finite activation at layer " + std::to_string(i) + " (" +
                                layer.spec.name + ")");
    }
    if (opts.keep_activations) result.activations.push_back(out);
    current = std::move(out);
  }
  if (net.layers.empty() || net.layers.back().spec.kind != LayerKind::Softmax) {
    result.logits = current.rank() == 2 ? current : current.reshaped({n, current.size() / n});
    result.probabilities = softmax_rows(result.logits);
  } else {
    result.probabilities = std::move(current);
  }
  return result;
}

}  // namespace

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), k = logits.size() / n;
  Tensor<T> out(logits.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = logits.data() + r * k;
    T* o = out.data() + r * k;
    const T mx = *std::max_element(in, in + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(static_cast<double>(in[j] - mx));
    for (std::size_t j = 0; j < k; ++j) {
      o[j] = static_cast<T>(std::exp(static_cast<double>(in[j] - mx)) / sum);
    }
  }
  return out;
}

template <typename T>
double cross_entropy_loss(const Tensor<T>& logits, std::span<const std::uint8_t> labels) {
  const std::size_t n = logits.dim(0), k = logits.size() / n;
  if (labels.size() != n) fail(ErrorCode::Shape, "label count does not match batch size");
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = logits.data() + r * k;
    const double mx = *std::max_element(in, in + k);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) sum += std::exp(in[j] - mx);
    total += std::log(sum) + mx - in[labels[r]];
  }
  return total / static_cast<double>(n);
}

template <typename T>
ForwardResult<T> forward(Network<T>& net, const Tensor<T>& batch, Mode mode,
                         const ForwardOptions<T>& opts) {
  return forward_impl<T>(net, mode == Mode::Train ? &net : nullptr, batch, mode, opts);
}

template <typename T>
ForwardResult<T> forward(const Network<T>& net, const Tensor<T>& batch,
                         const ForwardOptions<T>& opts) {
  return forward_impl<T>(net, nullptr, batch, Mode::Eval, opts);
}

template <typename T>
Gradients<T> backward(const Network<T>& net, const ForwardResult<T>& cache,
                      std::span<const std::uint8_t> labels) {
  if (cache.mode != Mode::Train || cache.activations.size() != net.layers.size() ||
      cache.input.empty()) {
    fail(ErrorCode::Usage, "backward requires a train-mode forward result with activations");
  }
  const std::size_t n = cache.logits.dim(0), k = cache.logits.size() / n;
  if (labels.size() != n) fail(ErrorCode::Shape, "label count does not match batch size");
  for (std::uint8_t l : labels) {
    if (l >= k) fail(ErrorCode::Shape, "label " + std::to_string(l) + " out of range");
  }

  Gradients<T> grads;
  grads.layers.resize(net.layers.size());
  grads.loss = cross_entropy_loss(cache.logits, labels);

  Tensor<T> d(cache.logits.shape());
  const T inv_n = T{1} / static_cast<T>(n);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < k; ++j) {
      const T target = labels[r] == j ? T{1} : T{0};
      d[r * k + j] = (cache.probabilities[r * k + j] - target) * inv_n;
    }
  }

  std::size_t top = net.layers.size();
  if (top > 0 && net.layers.back().spec.kind == LayerKind::Softmax) --top;
  if (top > 0) d = d.reshaped(cache.activations[top - 1].shape());

  for (std::size_t i = top; i-- > 0;) {
    const Layer<T>& layer = net.layers[i];
    const Tensor<T>& x = i == 0 ? cache.input : cache.activations[i - 1];
    LayerGradients<T>& g = grads.layers[i];
    switch (layer.spec.kind) {
      case LayerKind::Conv2D:
      case LayerKind::PointwiseConv2D: d = conv2d_backward(layer, x, d, g); break;
      case LayerKind::DepthwiseConv2D: d = depthwise_backward(layer, x, d, g); break;
      case LayerKind::BatchNorm: d = batchnorm_backward(layer, x, d, cache.bn_cache[i], g); break;
      case LayerKind::ReLU: d = relu_backward(x, d); break;
      case LayerKind::MaxPool: d = maxpool_backward(layer.spec, x, d); break;
      case LayerKind::Flatten: d = d.reshaped(x.shape()); break;
      case LayerKind::Dense: d = dense_backward(layer, x, d, g); break;
      case LayerKind::Softmax:
        fail(ErrorCode::Structure, "Softmax is only supported as the final layer");
    }
    if (!g.weight.empty()) g.weight_norm = l2_norm(g.weight);
  }
  grads.input = std::move(d);
  return grads;
}

#define QUANTLENS_INSTANTIATE(T)                                                                \
  template Tensor<T> softmax_rows(const Tensor<T>&);                                            \
  template double cross_entropy_loss(const Tensor<T>&, std::span<const std::uint8_t>);          \
  template ForwardResult<T> forward(Network<T>&, const Tensor<T>&, Mode,                        \
                                    const ForwardOptions<T>&);                                  \
  template ForwardResult<T> forward(const Network<T>&, const Tensor<T>&,                        \
                                    const ForwardOptions<T>&);                                  \
  template Gradients<T> backward(const Network<T>&, const ForwardResult<T>&,                    \
                                 std::span<const std::uint8_t>);

QUANTLENS_INSTANTIATE(float)
QUANTLENS_INSTANTIATE(double)

#undef QUANTLENS_INSTANTIATE

}  // namespace quantlens
