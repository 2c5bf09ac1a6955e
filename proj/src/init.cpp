#include "quantlens/init.hpp"

#include <array>
#include <cmath>

namespace quantlens {

namespace {

std::size_t positive(std::int64_t v, const char* what) {
  if (v < 1) {
    fail(ErrorCode::InvalidGeometry,
         std::string(what) + " must be >= 1 (got " + std::to_string(v) + ")");
  }
  return static_cast<std::size_t>(v);
}

constexpr std::array<std::pair<InitKind, std::string_view>, 7> kKindNames{{
    {InitKind::RandNorm, "RandNorm"},
    {InitKind::RandUni, "RandUni"},
    {InitKind::GlorotUni, "GlorotUni"},
    {InitKind::GlorotNorm, "GlorotNorm"},
    {InitKind::HeUni, "HeUni"},
    {InitKind::HeNorm, "HeNorm"},
    {InitKind::ModGlorotUni, "ModGlorotUni"},
}};

constexpr std::array<std::pair<ScaleLabel, std::string_view>, 4> kScaleNames{{
    {ScaleLabel::Small, "Small"},
    {ScaleLabel::Med, "Med"},
    {ScaleLabel::Large, "Large"},
    {ScaleLabel::NotApplicable, "n/a"},
}};

}  // namespace

FanInfo conv_fan(std::int64_t kernel, std::int64_t channels_in, std::int64_t channels_out) {
  FanInfo f;
  f.kernel = positive(kernel, "kernel size");
  f.channels_in = positive(channels_in, "channels_in");
  f.channels_out = positive(channels_out, "channels_out");
  f.fan_in = f.kernel * f.kernel * f.channels_in;
  f.fan_out = f.kernel * f.kernel * f.channels_out;
  return f;
}

FanInfo dense_fan(std::int64_t units_in, std::int64_t units_out) {
  FanInfo f;
  f.kernel = 1;
  f.channels_in = positive(units_in, "input units");
  f.channels_out = positive(units_out, "output units");
  f.fan_in = f.channels_in;
  f.fan_out = f.channels_out;
  return f;
}

double glorot_bound(const FanInfo& fan, double c) {
  if (!(c > 0.0)) {
    fail(ErrorCode::InvalidParameter, "glorot_bound requires C > 0 (got " + std::to_string(c) + ")");
  }
  if (fan.fan_in + fan.fan_out == 0) fail(ErrorCode::InvalidGeometry, "fan_in + fan_out is zero");
  return std::sqrt(c / static_cast<double>(fan.fan_in + fan.fan_out));
}

std::string_view init_kind_name(InitKind kind) {
  for (auto& [k, n] : kKindNames) {
    if (k == kind) return n;
  }
  return "unknown";
}

InitKind parse_init_kind(std::string_view name) {
  for (auto& [k, n] : kKindNames) {
    if (n == name) return k;
  }
  fail(ErrorCode::Config, "unknown init kind '" + std::string(name) + "'");
}

std::string_view scale_label_name(ScaleLabel label) {
  for (auto& [l, n] : kScaleNames) {
    if (l == label) return n;
  }
  return "n/a";
}

ScaleLabel parse_scale_label(std::string_view name) {
  for (auto& [l, n] : kScaleNames) {
    if (n == name) return l;
  }
  fail(ErrorCode::Config, "unknown scale label '" + std::string(name) + "'");
}

std::string InitSpec::name() const {
  std::string out(init_kind_name(kind));
  if (scale != ScaleLabel::NotApplicable) {
    out += "_";
    out += scale_label_name(scale);
  }
  return out;
}

void InitSpec::validate() const {
  auto require = [this](const std::optional<double>& v, const char* field) {
    if (!v) {
      fail(ErrorCode::IncompleteSpec,
           "init spec " + name() + " requires '" + field + "'");
    }
    if (!(*v > 0.0) || !std::isfinite(*v)) {
      fail(ErrorCode::IncompleteSpec,
           "init spec " + name() + " has non-positive '" + field + "'");
    }
  };
  switch (kind) {
    case InitKind::RandNorm: require(stddev, "std"); break;
    case InitKind::RandUni: require(bound, "bound"); break;
    case InitKind::ModGlorotUni: require(c, "C"); break;
    default: break;
  }
}

DistributionParams resolve_distribution(const InitSpec& spec, const FanInfo& fan) {
  spec.validate();
  const double fi = static_cast<double>(fan.fan_in);
  const double fsum = static_cast<double>(fan.fan_in + fan.fan_out);
  if (fan.fan_in == 0) fail(ErrorCode::InvalidGeometry, "fan_in is zero");
  switch (spec.kind) {
    case InitKind::RandNorm: return {false, 0.0, *spec.stddev};
    case InitKind::RandUni: return {true, *spec.bound, 0.0};
    case InitKind::GlorotUni: return {true, glorot_bound(fan, 6.0), 0.0};
    case InitKind::GlorotNorm: return {false, 0.0, std::sqrt(2.0 / fsum)};
    case InitKind::HeUni: return {true, std::sqrt(6.0 / fi), 0.0};
    case InitKind::HeNorm: return {false, 0.0, std::sqrt(2.0 / fi)};
    case InitKind::ModGlorotUni: return {true, glorot_bound(fan, *spec.c), 0.0};
  }
  fail(ErrorCode::Config, "unhandled init kind");
}

TensorF sample_weights(const InitSpec& spec, const FanInfo& fan, const Shape& shape, SeededRng& rng) {
  const DistributionParams d = resolve_distribution(spec, fan);
  const std::size_t n = shape_size(shape);
  if (n == 0 || n % fan.fan_in != 0) {
    fail(ErrorCode::Shape, "weight shape " + shape_string(shape) +
                               " inconsistent with fan_in " + std::to_string(fan.fan_in));
  }
  return d.uniform ? sample_uniform<float>(rng, shape, -d.bound, d.bound)
                   : sample_normal<float>(rng, shape, 0.0, d.stddev);
}

const std::vector<InitSpec>& init_presets() {
  // Small/Med/Large values are this toolkit's choices; override via config.
  static const std::vector<InitSpec> presets = [] {
    auto rn = [](ScaleLabel l, double s) { return InitSpec{InitKind::RandNorm, l, s, {}, {}}; };
    auto ru = [](ScaleLabel l, double b) { return InitSpec{InitKind::RandUni, l, {}, b, {}}; };
    auto mg = [](ScaleLabel l, double c) { return InitSpec{InitKind::ModGlorotUni, l, {}, {}, c}; };
    return std::vector<InitSpec>{
        rn(ScaleLabel::Small, 0.01), rn(ScaleLabel::Med, 0.1), rn(ScaleLabel::Large, 0.5),
        ru(ScaleLabel::Small, 0.01), ru(ScaleLabel::Med, 0.1), ru(ScaleLabel::Large, 0.5),
        InitSpec{InitKind::GlorotUni},
        InitSpec{InitKind::GlorotNorm},
        InitSpec{InitKind::HeUni},
        InitSpec{InitKind::HeNorm},
        mg(ScaleLabel::Med, 24.0), mg(ScaleLabel::Large, 96.0),
    };
  }();
  return presets;
}

InitSpec find_preset(std::string_view name) {
  for (const InitSpec& s : init_presets()) {
    if (s.name() == name) return s;
  }
  fail(ErrorCode::Config, "unknown init preset '" + std::string(name) + "'");
}

nlohmann::json to_json(const InitSpec& spec) {
  nlohmann::json j{{"kind", init_kind_name(spec.kind)},
                   {"scale_label", scale_label_name(spec.scale)}};
  if (spec.stddev) j["std"] = *spec.stddev;
  if (spec.bound) j["bound"] = *spec.bound;
  if (spec.c) j["C"] = *spec.c;
  return j;
}

InitSpec init_spec_from_json(const nlohmann::json& j) {
  if (j.is_string()) return find_preset(j.get<std::string>());
  if (!j.is_object() || !j.contains("kind")) {
    fail(ErrorCode::Config, "init spec must be a preset name or an object with 'kind'");
  }
  InitSpec s;
  s.kind = parse_init_kind(j.at("kind").get<std::string>());
  s.scale = parse_scale_label(j.value("scale_label", std::string("n/a")));
  if (j.contains("std")) s.stddev = j.at("std").get<double>();
  if (j.contains("bound")) s.bound = j.at("bound").get<double>();
  if (j.contains("C")) s.c = j.at("C").get<double>();
  s.validate();
  return s;
}

}  // namespace quantlens
