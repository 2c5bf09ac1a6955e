// Acceptance checks, one PASS/FAIL line each. Pass criterion numbers on the
// command line to run a subset (e.g. `acceptance 1 5`).
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "preset_checks.hpp"
#include "quant_checks.hpp"
#include "quantlens/harness.hpp"
#include "quantlens/metrics.hpp"
#include "tiny_config.hpp"

using namespace quantlens;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome quantizer_oracles() {
  const auto t0 = Clock::now();
  const checks::SuiteResult q = checks::quantizer_suite(1000, 2024);
  const checks::SuiteResult p = checks::percentile_suite(1000, 2025);
  const double t = seconds_since(t0);
  const bool ok = q.ok && p.ok && t < 60.0;
  std::string d = std::to_string(q.cases) + " quantizer pairs, " + std::to_string(p.cases) +
                  " percentile trials, " + fmt("%.1f s", t);
  if (!q.ok) d += "; " + q.first_failure;
  if (!p.ok) d += "; " + p.first_failure;
  return {ok, d};
}

Outcome bn_fold() {
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    worst = std::max(worst, checks::fold_deviation(checks::random_bn_net(1000 + s), 100, 5000 + s));
  }
  return {worst < 1e-5, "20 nets x 100 inputs, max |diff| = " + fmt("%.3g", worst)};
}

Outcome gradients() {
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (bool strided : {false, true}) {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
      const NetworkD net = checks::toy_net_all_kinds(seed, strided);
      SeededRng rng(seed + 77);
      Shape shape{3};
      shape.insert(shape.end(), net.input_shape.begin(), net.input_shape.end());
      const TensorD x = sample_uniform<double>(rng, shape, -1.0, 1.0);
      const checks::GradReport r = checks::gradient_check(net, x, {0, 1, 2});
      checked += r.checked;
      if (r.max_rel_error >= worst) {
        worst = r.max_rel_error;
        where = r.worst;
      }
    }
  }
  return {worst < 1e-4, std::to_string(checked) + " coordinates, max rel error " +
                            fmt("%.3g", worst) + " at " + where};
}

Outcome presets() {
  std::string failed;
  std::uint64_t seed = 900;
  for (const InitSpec& s : init_presets()) {
    const checks::PresetCheck c = checks::check_preset(s, seed++);
    if (!c.ok) failed += " " + s.name() + " (" + c.detail + ")";
  }
  const double g = glorot_bound(conv_fan(3, 16, 32), 6.0);
  const bool bound_ok = std::abs(g - 0.117851) <= 1e-6;
  return {failed.empty() && bound_ok && init_presets().size() == 12,
          "12 presets at 100080 draws, glorot_bound(144, 288) = " + fmt("%.6f", g) +
              (failed.empty() ? "" : "; failed:" + failed)};
}

Outcome metric_identities() {
  SeededRng rng(31);
  TensorF logits({64, 10});
  for (float& v : logits.values()) v = static_cast<float>(2.0 * rng.normal());
  const TensorF p = softmax_rows(logits);
  double h = 0.0;
  for (std::size_t r = 0; r < 64; ++r) h += oracle::entropy(std::vector<double>(p.data() + r * 10, p.data() + r * 10 + 10));
  h /= 64.0;
  const double m = qmse(logits, logits);
  const double c = qce(p, p);
  const double ap = average_precision(std::vector<double>{2.0, 1.0, 1.0, 0.0}, 2.0).value;
  const double kl = kl_from_histogram(std::vector<std::size_t>(256, 40));
  TensorF even({1024});
  for (std::size_t i = 0; i < 1024; ++i) even[i] = static_cast<float>(i) / 1024.0f;
  const double kl_t = kl_vs_uniform(even, 256);
  const bool ok = m == 0.0 && std::abs(c - h) <= 1e-9 && ap == 0.5 && kl < 1e-9 && kl_t < 1e-9;
  return {ok, "qmse " + fmt("%.3g", m) + ", |qce - H| " + fmt("%.3g", std::abs(c - h)) +
                  ", avg precision " + fmt("%.6g", ap) + ", kl " + fmt("%.3g", kl) +
                  " / " + fmt("%.3g", kl_t)};
}

ExperimentConfig desk(Variant v) {
  ExperimentConfig cfg;
  cfg.variant = v;
  cfg.init = glorot_uniform();
  cfg.seed = 0;
  return cfg;
}

Outcome vanishing() {
  const ExperimentConfig cfg = desk(Variant::DWSConvNoBN);
  const auto t0 = Clock::now();
  const ExperimentResult r = run_experiment(cfg);
  const double t = seconds_since(t0);
  const std::string last_block =
      "block" + std::to_string(cfg.arch.block_widths.size()) + "_pw_relu";
  std::optional<double> range;
  for (const LayerStats& s : r.timeline) {
    if (!s.epoch && s.kind == StatsKind::Activations && s.layer == last_block) range = s.range();
  }
  const double acc = r.row.fp32_accuracy.value_or(NAN);
  const bool ok = r.row.status == TrainStatus::Vanished && range && *range < 1e-6 &&
                  std::abs(acc - 0.10) <= 0.03 && t < 30 * 60;
  return {ok, "status " + std::string(train_status_name(r.row.status)) + ", " + last_block +
                  " clipped range " + (range ? fmt("%.3g", *range) : std::string("n/a")) +
                  ", test accuracy " + fmt("%.3f", acc) + ", " + fmt("%.0f s", t)};
}

Outcome viability() {
  const ExperimentConfig cfg = desk(Variant::RegularConvWithBN);
  const SplitDataset data = load_data(cfg.data, cfg.seed);
  const auto t0 = Clock::now();
  const ExperimentResult r = run_experiment(cfg, data);
  const double t = seconds_since(t0);
  if (r.row.status != TrainStatus::Trained || !r.row.metrics) {
    return {false, "status " + std::string(train_status_name(r.row.status))};
  }
  const QuantReport& q = *r.row.metrics;
  CalibrationSpec wide = cfg.calibration;
  wide.bits = 16;
  const QuantEvaluation e16 =
      evaluate_quantized(r.network, data, wide, derive_seed(cell_seed(cfg), "calibration"));
  const double gap = 100.0 * std::abs(e16.report.quint8_accuracy - e16.report.fp32_accuracy);
  const bool ok = q.fp32_accuracy >= 0.45 && std::isfinite(q.percent_accuracy_decrease) &&
                  gap <= 1.0 && t < 60 * 60;
  return {ok, "fp32 " + fmt("%.4f", q.fp32_accuracy) + ", quint8 " + fmt("%.4f", q.quint8_accuracy) +
                  ", decrease " + fmt("%.3f%%", q.percent_accuracy_decrease) + ", 16-bit gap " +
                  fmt("%.2f pp", gap) + ", " + fmt("%.0f s", t)};
}

Outcome reproducibility() {
  const auto t0 = Clock::now();
  const fs::path root = fs::temp_directory_path() / "quantlens_acceptance";
  fs::remove_all(root);
  ExperimentConfig cfg = checks::tiny_config(Variant::DWSConvWithBN, "HeNorm", 11);
  cfg.train.epochs = 3;
  cfg.data.synthetic_train = 1000;
  cfg.data.train_subset = 1000;
  cfg.data.synthetic_test = 300;
  cfg.data.test_subset = 300;
  const std::vector<ExperimentResult> a{run_experiment(cfg)};
  const std::vector<ExperimentResult> b{run_experiment(cfg)};
  emit_report(root / "a", a);
  emit_report(root / "b", b);
  const std::string name = a[0].row.network;
  bool same = true;
  for (const fs::path& rel : {fs::path("results.csv"), fs::path(name) / "layerwise.csv",
                             fs::path(name) / "timeline.csv", fs::path(name) / "model.qlck"}) {
    same = same && slurp(root / "a" / rel) == slurp(root / "b" / rel) &&
           !slurp(root / "a" / rel).empty();
  }

  SuiteConfig suite;
  suite.base = cfg;
  suite.variants = {Variant::RegularConvWithBN, Variant::DWSConvNoBN};
  suite.inits = {find_preset("GlorotUni"), find_preset("HeUni")};
  emit_report(root / "suite", run_suite(suite), false);
  std::istringstream csv(slurp(root / "suite" / "results.csv"));
  std::string header, line;
  std::getline(csv, header);
  std::size_t rows = 0;
  std::set<std::string> names;
  while (std::getline(csv, line)) {
    ++rows;
    names.insert(line.substr(0, line.find(',')));
  }
  const double t = seconds_since(t0);
  fs::remove_all(root);
  const bool ok = same && rows == 4 && names.size() == 4 && header == kResultsHeader && t < 90 * 60;
  return {ok, std::string("rerun ") + (same ? "byte-identical" : "DIFFERS") + ", suite rows " +
                  std::to_string(rows) + ", header " + (header == kResultsHeader ? "ok" : "'" + header + "'") +
                  ", " + fmt("%.0f s", t)};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"quantization oracle suite", quantizer_oracles},
      {"BatchNorm fold equivalence", bn_fold},
      {"gradient check vs 64-bit central differences", gradients},
      {"init presets and glorot bound", presets},
      {"metric identities", metric_identities},
      {"vanishing activations, DWS_Conv_No_BN + GlorotUni", vanishing},
      {"training viability, Regular_Conv_With_BN + GlorotUni", viability},
      {"reproducibility and 2x2 suite", reproducibility},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(static_cast<std::size_t>(std::stoul(argv[i])));
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("%s %zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
