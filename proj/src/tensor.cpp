#include "quantlens/tensor.hpp"

#include <algorithm>
#include <limits>

namespace quantlens {

std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

template <typename T>
MinMax<T> reduce_minmax(const Tensor<T>& t, std::optional<std::size_t> axis) {
  if (t.empty()) fail(ErrorCode::EmptyInput, "reduce_minmax on empty tensor");
  MinMax<T> out;
  if (!axis) {
    auto [lo, hi] = std::minmax_element(t.values().begin(), t.values().end());
    out.mins = {*lo};
    out.maxs = {*hi};
    return out;
  }
  if (*axis >= t.rank()) {
    fail(ErrorCode::Shape, "axis " + std::to_string(*axis) + " out of range for shape " +
                               shape_string(t.shape()));
  }
  const Shape& s = t.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < *axis; ++i) outer *= s[i];
  for (std::size_t i = *axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t channels = s[*axis];
  out.mins.assign(channels, std::numeric_limits<T>::infinity());
  out.maxs.assign(channels, -std::numeric_limits<T>::infinity());
  const T* p = t.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < channels; ++c) {
      T& lo = out.mins[c];
      T& hi = out.maxs[c];
      for (std::size_t i = 0; i < inner; ++i, ++p) {
        lo = std::min(lo, *p);
        hi = std::max(hi, *p);
      }
    }
  }
  return out;
}

template MinMax<float> reduce_minmax(const Tensor<float>&, std::optional<std::size_t>);
template MinMax<double> reduce_minmax(const Tensor<double>&, std::optional<std::size_t>);

}  // namespace quantlens
