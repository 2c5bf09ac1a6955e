#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "quantlens/rng.hpp"
#include "quantlens/tensor.hpp"

namespace quantlens {

struct FanInfo {
  std::size_t fan_in = 0;
  std::size_t fan_out = 0;
  std::size_t kernel = 1;
  std::size_t channels_in = 0;
  std::size_t channels_out = 0;
};

// fan_{in,out} = K * K * channels_{in,out}
FanInfo conv_fan(std::int64_t kernel, std::int64_t channels_in, std::int64_t channels_out);
// Dense layers count units directly.
FanInfo dense_fan(std::int64_t units_in, std::int64_t units_out);

// sqrt(C / (fan_in + fan_out)); C = 6 is the classic Glorot uniform bound.
double glorot_bound(const FanInfo& fan, double c);

enum class InitKind { RandNorm, RandUni, GlorotUni, GlorotNorm, HeUni, HeNorm, ModGlorotUni };
enum class ScaleLabel { Small, Med, Large, NotApplicable };

std::string_view init_kind_name(InitKind kind);
InitKind parse_init_kind(std::string_view name);
std::string_view scale_label_name(ScaleLabel label);
ScaleLabel parse_scale_label(std::string_view name);

struct InitSpec {
  InitKind kind = InitKind::GlorotUni;
  ScaleLabel scale = ScaleLabel::NotApplicable;
  std::optional<double> stddev;
  std::optional<double> bound;
  std::optional<double> c;

  // Stable report name, e.g. "RandUni_Large", "GlorotUni", "ModGlorotUni_Med".
  std::string name() const;

  // Throws IncompleteSpec when a required hyperparameter is missing or invalid.
  void validate() const;

  bool operator==(const InitSpec&) const = default;
};

struct DistributionParams {
  bool uniform = true;
  double bound = 0.0;   // uniform: [-bound, bound)
  double stddev = 0.0;  // normal: N(0, stddev^2)
};

// Resolves the fan-aware formulas:
//   GlorotUni bound sqrt(6/(fi+fo)), GlorotNorm std sqrt(2/(fi+fo)),
//   HeUni bound sqrt(6/fi), HeNorm std sqrt(2/fi), ModGlorotUni bound sqrt(C/(fi+fo)).
DistributionParams resolve_distribution(const InitSpec& spec, const FanInfo& fan);

TensorF sample_weights(const InitSpec& spec, const FanInfo& fan, const Shape& shape, SeededRng& rng);

// The twelve presets, in report order.
const std::vector<InitSpec>& init_presets();
InitSpec find_preset(std::string_view name);

inline InitSpec glorot_uniform() { return InitSpec{InitKind::GlorotUni}; }

nlohmann::json to_json(const InitSpec& spec);
InitSpec init_spec_from_json(const nlohmann::json& j);

}  // namespace quantlens
