#include "quantlens/harness.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace quantlens {

namespace {

using nlohmann::json;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::Config, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      fail(ErrorCode::Config, "unknown key '" + key + "' in " + where);
    }
  }
}

template <typename F>
auto config_guard(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, std::string("malformed config: ") + e.what());
  }
}

json optional_size(const std::optional<std::size_t>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<std::size_t> read_optional_size(const json& j, const char* key,
                                              std::optional<std::size_t> fallback) {
  if (!j.contains(key)) return fallback;
  if (j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::size_t>();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

std::string ExperimentConfig::name() const {
  return std::string(variant_name(variant)) + "_" + init.name();
}

void ExperimentConfig::validate() const {
  if (schema_version != kConfigSchemaVersion) {
    fail(ErrorCode::Config, "unsupported schema_version " + std::to_string(schema_version));
  }
  init.validate();
  train.validate();
  if (data.source != "synthetic" && data.source != "cifar10") {
    fail(ErrorCode::Config, "data.source must be cifar10 or synthetic");
  }
  if (calibration.samples == 0) fail(ErrorCode::Config, "calibration.samples must be >= 1");
  if (!(calibration.clip_fraction >= 0.0 && calibration.clip_fraction < 0.5)) {
    fail(ErrorCode::Config, "calibration.clip_fraction must be in [0, 0.5)");
  }
  if (calibration.bits < 2 || calibration.bits > 16) {
    fail(ErrorCode::Config, "calibration.bits must be in [2, 16]");
  }
  if (tracking.activation_samples == 0) {
    fail(ErrorCode::Config, "tracking.activation_samples must be >= 1");
  }
}

json to_json(const DataSpec& d) {
  return {{"source", d.source},
          {"path", d.path},
          {"train_subset", optional_size(d.train_subset)},
          {"test_subset", optional_size(d.test_subset)},
          {"synthetic_train", d.synthetic_train},
          {"synthetic_test", d.synthetic_test}};
}

DataSpec data_spec_from_json(const json& j) {
  check_keys(j, {"source", "path", "train_subset", "test_subset", "synthetic_train", "synthetic_test"},
             "data");
  DataSpec d;
  d.source = j.value("source", d.source);
  d.path = j.value("path", d.path);
  d.train_subset = read_optional_size(j, "train_subset", d.train_subset);
  d.test_subset = read_optional_size(j, "test_subset", d.test_subset);
  d.synthetic_train = j.value("synthetic_train", d.synthetic_train);
  d.synthetic_test = j.value("synthetic_test", d.synthetic_test);
  return d;
}

json to_json(const ExperimentConfig& cfg) {
  return {{"schema_version", cfg.schema_version},
          {"variant", variant_name(cfg.variant)},
          {"init", to_json(cfg.init)},
          {"arch", to_json(cfg.arch)},
          {"train", to_json(cfg.train)},
          {"data", to_json(cfg.data)},
          {"augment", to_json(cfg.augment)},
          {"calibration",
           {{"samples", cfg.calibration.samples},
            {"clip_fraction", cfg.calibration.clip_fraction},
            {"bits", cfg.calibration.bits}}},
          {"tracking",
           {{"activation_interval", cfg.tracking.activation_interval},
            {"activation_samples", cfg.tracking.activation_samples}}},
          {"seed", cfg.seed},
          {"out", cfg.out}};
}

ExperimentConfig experiment_config_from_json(const json& j) {
  return config_guard([&] {
    check_keys(j, {"schema_version", "variant", "init", "arch", "train", "data", "augment",
                   "calibration", "tracking", "seed", "out"},
               "experiment config");
    ExperimentConfig c;
    c.schema_version = j.value("schema_version", c.schema_version);
    if (j.contains("variant")) c.variant = parse_variant(j.at("variant").get<std::string>());
    if (j.contains("init")) c.init = init_spec_from_json(j.at("init"));
    if (j.contains("arch")) c.arch = arch_spec_from_json(j.at("arch"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("data")) c.data = data_spec_from_json(j.at("data"));
    if (j.contains("augment")) c.augment = augment_config_from_json(j.at("augment"));
    if (j.contains("calibration")) {
      const json& k = j.at("calibration");
      check_keys(k, {"samples", "clip_fraction", "bits"}, "calibration");
      c.calibration.samples = k.value("samples", c.calibration.samples);
      c.calibration.clip_fraction = k.value("clip_fraction", c.calibration.clip_fraction);
      c.calibration.bits = k.value("bits", c.calibration.bits);
    }
    if (j.contains("tracking")) {
      const json& k = j.at("tracking");
      check_keys(k, {"activation_interval", "activation_samples"}, "tracking");
      c.tracking.activation_interval = k.value("activation_interval", c.tracking.activation_interval);
      c.tracking.activation_samples = k.value("activation_samples", c.tracking.activation_samples);
    }
    c.seed = j.value("seed", c.seed);
    c.out = j.value("out", c.out);
    c.validate();
    return c;
  });
}

json to_json(const SuiteConfig& cfg) {
  json variants = json::array(), inits = json::array();
  for (Variant v : cfg.variants) variants.push_back(variant_name(v));
  for (const InitSpec& s : cfg.inits) inits.push_back(to_json(s));
  return {{"schema_version", kConfigSchemaVersion},
          {"base", to_json(cfg.base)},
          {"variants", variants},
          {"inits", inits},
          {"threads", cfg.threads}};
}

SuiteConfig suite_config_from_json(const json& j) {
  return config_guard([&] {
    check_keys(j, {"schema_version", "base", "variants", "inits", "threads"}, "suite config");
    if (j.value("schema_version", kConfigSchemaVersion) != kConfigSchemaVersion) {
      fail(ErrorCode::Config, "unsupported suite schema_version");
    }
    SuiteConfig s;
    if (j.contains("base")) s.base = experiment_config_from_json(j.at("base"));
    if (j.contains("variants")) {
      for (const json& v : j.at("variants")) s.variants.push_back(parse_variant(v.get<std::string>()));
    } else {
      s.variants = all_variants();
    }
    if (j.contains("inits")) {
      for (const json& i : j.at("inits")) s.inits.push_back(init_spec_from_json(i));
    } else {
      s.inits = init_presets();
    }
    s.threads = j.value("threads", s.threads);
    if (s.variants.empty() || s.inits.empty()) fail(ErrorCode::Config, "suite grid is empty");
    if (s.threads == 0) fail(ErrorCode::Config, "threads must be >= 1");
    return s;
  });
}

// ---------------------------------------------------------------------------
// Data

SplitDataset load_data(const DataSpec& spec, std::uint64_t seed) {
  if (spec.source == "cifar10") {
    std::string path = spec.path;
    if (path.empty()) {
      if (const char* env = std::getenv("QUANTLENS_CIFAR10_DIR")) path = env;
    }
    if (path.empty()) {
      fail(ErrorCode::Config, "cifar10 source needs data.path or QUANTLENS_CIFAR10_DIR");
    }
    return load_cifar10(path, spec.train_subset, spec.test_subset, seed);
  }
  if (spec.source != "synthetic") fail(ErrorCode::Config, "unknown data source " + spec.source);
  const std::uint64_t data_seed = derive_seed(seed, "data");
  Dataset train = to_dataset(make_synthetic_images(spec.synthetic_train, data_seed));
  Dataset test = to_dataset(make_synthetic_images(spec.synthetic_test, derive_seed(data_seed, "test")));
  if (spec.train_subset) train = train.subset(subset_indices(train.size(), *spec.train_subset, seed, "subset/train"));
  if (spec.test_subset) test = test.subset(subset_indices(test.size(), *spec.test_subset, seed, "subset/test"));
  return {std::move(train), std::move(test)};
}

// ---------------------------------------------------------------------------
// Results

json to_json(const ResultRow& row) {
  json j{{"network", row.network},
         {"status", train_status_name(row.status)},
         {"fp32_accuracy", row.fp32_accuracy ? json(*row.fp32_accuracy) : json(nullptr)},
         {"metrics", row.metrics ? to_json(*row.metrics) : json(nullptr)}};
  if (row.error) j["error"] = *row.error;
  return j;
}

ResultRow result_row_from_json(const json& j) {
  ResultRow r;
  r.network = j.at("network").get<std::string>();
  r.status = parse_train_status(j.at("status").get<std::string>());
  if (!j.at("fp32_accuracy").is_null()) r.fp32_accuracy = j.at("fp32_accuracy").get<double>();
  if (!j.at("metrics").is_null()) {
    const json& m = j.at("metrics");
    r.metrics = QuantReport{m.at("fp32_accuracy").get<double>(), m.at("quint8_accuracy").get<double>(),
                            m.at("qmse").get<double>(), m.at("qce").get<double>(),
                            m.at("percent_accuracy_decrease").get<double>()};
  }
  if (j.contains("error")) r.error = j.at("error").get<std::string>();
  return r;
}

QuantEvaluation evaluate_quantized(const NetworkF& net, const SplitDataset& data,
                                   const CalibrationSpec& spec, std::uint64_t seed) {
  const NetworkF folded = fold_batchnorm(net);
  const std::size_t n = std::min(spec.samples, data.train.size());
  const std::vector<std::size_t> idx = subset_indices(data.train.size(), n, seed, "calibration");
  QuantEvaluation ev;
  ev.record = calibrate(folded, data.train.batch_images(idx), spec.clip_fraction, spec.bits);
  const TensorF fp32 = predict_logits(net, data.test.images);
  const TensorF quant = quantized_forward(folded, ev.record, data.test.images);
  ev.report = quant_report(fp32, quant, data.test.labels);
  return ev;
}

std::vector<LayerStats> snapshot_stats(const NetworkF& net, const TensorF& samples,
                                       double clip_fraction, std::optional<std::size_t> epoch,
                                       bool include_weights) {
  std::vector<LayerStats> out;
  if (include_weights) {
    for (const LayerF& l : net.layers) {
      if (has_weights(l.spec.kind)) out.push_back(weight_stats(l.spec.name, l.weight, StatsKind::Weights, epoch));
    }
  }
  const NetworkF folded = fold_batchnorm(net);
  for (const LayerF& l : folded.layers) {
    if (has_weights(l.spec.kind)) {
      out.push_back(weight_stats(l.spec.name, l.weight, StatsKind::BnFoldWeights, epoch));
    }
  }
  try {
    for (const ActivationRange& r : observe_activations(net, samples, clip_fraction)) {
      out.push_back(activation_stats(r, epoch));
    }
  } catch (const NumericError&) {
  }
  return out;
}

std::uint64_t cell_seed(const ExperimentConfig& cfg) {
  return derive_seed(derive_seed(cfg.seed, variant_name(cfg.variant)), cfg.init.name());
}

ExperimentResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  return run_experiment(cfg, load_data(cfg.data, cfg.seed));
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const SplitDataset& data) {
  cfg.validate();
  const std::uint64_t seed = cell_seed(cfg);
  const SeededRng root(seed);

  ExperimentResult res;
  res.config = cfg;
  res.row.network = cfg.name();

  SeededRng build_rng = root.substream("build");
  const std::vector<InitSpec> grid(configurable_conv_count(cfg.variant, cfg.arch), cfg.init);
  res.network = build_macro_arch(cfg.variant, grid, cfg.arch, build_rng);

  const std::size_t tracked = std::min(cfg.tracking.activation_samples, data.train.size());
  const TensorF track =
      data.train.batch_images(subset_indices(data.train.size(), tracked, seed, "tracking"));

  TrainConfig tc = cfg.train;
  tc.seed = derive_seed(seed, "train");
  TrainHooks hooks;
  hooks.augment = [&](TensorF& batch, SeededRng& rng) { augment(batch, rng, cfg.augment); };
  hooks.on_epoch_end = [&](std::size_t epoch, const NetworkF& net, const EpochLog&) {
    const bool full = cfg.tracking.activation_interval > 0 &&
                      epoch % cfg.tracking.activation_interval == 0;
    if (full) {
      for (LayerStats& s : snapshot_stats(net, track, cfg.calibration.clip_fraction, epoch)) {
        res.timeline.push_back(std::move(s));
      }
      return;
    }
    for (const LayerF& l : net.layers) {
      if (has_weights(l.spec.kind)) {
        res.timeline.push_back(weight_stats(l.spec.name, l.weight, StatsKind::Weights, epoch));
      }
    }
  };
  res.log = train(res.network, data.train, tc, hooks);
  res.row.status = res.log.status;

  if (res.log.status != TrainStatus::Exploded) {
    for (LayerStats& s : snapshot_stats(res.network, track, cfg.calibration.clip_fraction,
                                        std::nullopt)) {
      res.timeline.push_back(std::move(s));
    }
  }
  try {
    res.row.fp32_accuracy = evaluate_accuracy(res.network, data.test);
  } catch (const NumericError&) {
  }
  if (res.log.status == TrainStatus::Trained) {
    QuantEvaluation ev =
        evaluate_quantized(res.network, data, cfg.calibration, derive_seed(seed, "calibration"));
    res.row.metrics = ev.report;
    res.calibration = std::move(ev.record);
  }
  return res;
}

std::vector<ExperimentResult> run_suite(const SuiteConfig& cfg) {
  std::vector<ExperimentConfig> cells;
  for (Variant v : cfg.variants) {
    for (const InitSpec& init : cfg.inits) {
      ExperimentConfig c = cfg.base;
      c.variant = v;
      c.init = init;
      c.validate();
      cells.push_back(std::move(c));
    }
  }
  std::sort(cells.begin(), cells.end(), [](const ExperimentConfig& a, const ExperimentConfig& b) {
    const auto ka = std::make_pair(std::string(variant_name(a.variant)), a.init.name());
    const auto kb = std::make_pair(std::string(variant_name(b.variant)), b.init.name());
    return ka < kb;
  });
  std::set<std::string> names;
  for (const ExperimentConfig& c : cells) {
    if (!names.insert(c.name()).second) fail(ErrorCode::Config, "duplicate suite cell " + c.name());
  }

  const SplitDataset data = load_data(cfg.base.data, cfg.base.seed);
  std::vector<ExperimentResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = run_experiment(cells[i], data);
      } catch (const std::exception& e) {
        results[i] = ExperimentResult{};
        results[i].config = cells[i];
        results[i].row.network = cells[i].name();
        results[i].row.error = e.what();
      }
    }
  };
  const std::size_t threads = std::min(cfg.threads, cells.size());
  if (threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();
  }
  return results;
}

// ---------------------------------------------------------------------------
// Reports

void write_results_csv(std::ostream& out, std::span<const ResultRow> rows) {
  out << kResultsHeader << '\n';
  for (const ResultRow& r : rows) {
    out << r.network << ',';
    if (r.metrics && !r.error) {
      const QuantReport& m = *r.metrics;
      out << format_number(m.fp32_accuracy) << ',' << format_number(m.quint8_accuracy) << ','
          << format_number(m.qmse) << ',' << format_number(m.qce) << ','
          << format_number(m.percent_accuracy_decrease) << ',';
    } else {
      out << ",,,,,";
    }
    out << (r.error ? std::string("error") : std::string(train_status_name(r.status))) << '\n';
  }
}

namespace {

const LayerStats* find_stats(std::span<const LayerStats> timeline, const std::string& layer,
                             StatsKind kind) {
  const LayerStats* found = nullptr;
  for (const LayerStats& s : timeline) {
    if (!s.epoch && s.layer == layer && s.kind == kind) found = &s;
  }
  return found;
}

// Name of the activation fed by weighted layer i: the next ReLU before
// another weighted layer, or the layer itself when it produces the logits.
std::string fed_activation(const NetworkF& net, std::size_t i) {
  for (std::size_t j = i + 1; j < net.layers.size(); ++j) {
    const LayerKind k = net.layers[j].spec.kind;
    if (k == LayerKind::ReLU) return net.layers[j].spec.name;
    if (has_weights(k)) break;
  }
  return net.layers[i].spec.name;
}

}  // namespace

void write_layerwise_csv(std::ostream& out, const ExperimentResult& result) {
  out << "layer,weight_range,bn_fold_weight_range,bn_fold_weight_precision,activation,"
         "activation_range,activation_precision\n";
  const auto cell = [](const LayerStats* s, bool precision) {
    if (!s) return std::string();
    return format_number(precision ? s->average_precision : s->range());
  };
  const NetworkF& net = result.network;
  for (std::size_t i = 0; i < net.layers.size(); ++i) {
    if (!has_weights(net.layers[i].spec.kind)) continue;
    const std::string& name = net.layers[i].spec.name;
    const std::string act = fed_activation(net, i);
    const LayerStats* w = find_stats(result.timeline, name, StatsKind::Weights);
    const LayerStats* f = find_stats(result.timeline, name, StatsKind::BnFoldWeights);
    const LayerStats* a = find_stats(result.timeline, act, StatsKind::Activations);
    out << name << ',' << cell(w, false) << ',' << cell(f, false) << ',' << cell(f, true) << ','
        << act << ',' << cell(a, false) << ',' << cell(a, true) << '\n';
  }
}

namespace {

json to_json(const TrainLog& log) {
  json epochs = json::array();
  for (const EpochLog& e : log.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"learning_rate", e.learning_rate},
                      {"loss", e.loss},
                      {"accuracy", e.accuracy},
                      {"max_conv_grad_norm", e.max_conv_grad_norm}});
  }
  return {{"status", train_status_name(log.status)},
          {"diagnostic", log.diagnostic},
          {"epochs", epochs}};
}

LayerStats layer_stats_from_json(const json& j) {
  LayerStats s;
  s.layer = j.at("layer").get<std::string>();
  s.kind = parse_stats_kind(j.at("kind").get<std::string>());
  if (!j.at("epoch").is_string()) s.epoch = j.at("epoch").get<std::size_t>();
  s.tensor_min = j.at("min").get<double>();
  s.tensor_max = j.at("max").get<double>();
  s.channel_ranges = j.at("channel_ranges").get<std::vector<double>>();
  s.average_precision = j.at("avg_precision").get<double>();
  s.degenerate = j.at("degenerate").get<bool>();
  return s;
}

void write_text(const std::filesystem::path& file, const std::string& text) {
  std::ofstream f(file, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot write " + file.string());
  f << text;
  if (!f) fail(ErrorCode::Io, "write failed for " + file.string());
}

void make_dirs(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) {
    fail(ErrorCode::Io, "cannot create output directory " + dir.string());
  }
}

void write_experiment_tables(const std::filesystem::path& dir, const ExperimentResult& r) {
  make_dirs(dir);
  std::ostringstream lw, tl;
  write_layerwise_csv(lw, r);
  write_layer_stats_csv(tl, r.timeline);
  write_text(dir / "layerwise.csv", lw.str());
  write_text(dir / "timeline.csv", tl.str());
}

}  // namespace

json to_json(const ExperimentResult& result) {
  json layers = json::array();
  for (const LayerF& l : result.network.layers) layers.push_back(to_json(l.spec));
  json timeline = json::array();
  for (const LayerStats& s : result.timeline) timeline.push_back(to_json(s));
  return {{"name", result.row.network},
          {"config", to_json(result.config)},
          {"row", to_json(result.row)},
          {"train_log", to_json(result.log)},
          {"layers", layers},
          {"timeline", timeline},
          {"calibration", result.calibration ? to_json(*result.calibration) : json(nullptr)}};
}

void emit_report(const std::filesystem::path& out_dir, std::span<const ExperimentResult> results,
                 bool write_checkpoints) {
  make_dirs(out_dir);
  std::vector<ResultRow> rows;
  json experiments = json::array();
  for (const ExperimentResult& r : results) {
    rows.push_back(r.row);
    experiments.push_back(to_json(r));
    const std::filesystem::path dir = out_dir / r.row.network;
    write_experiment_tables(dir, r);
    write_text(dir / "experiment.json", experiments.back().dump(2) + "\n");
    if (write_checkpoints && !r.network.layers.empty()) {
      save_checkpoint(dir / "model.qlck", r.network,
                      {{"experiment", to_json(r.config)},
                       {"status", train_status_name(r.row.status)}});
    }
  }
  std::ostringstream csv;
  write_results_csv(csv, rows);
  write_text(out_dir / "results.csv", csv.str());
  const json bundle{{"schema_version", kConfigSchemaVersion}, {"experiments", experiments}};
  write_text(out_dir / "bundle.json", bundle.dump(2) + "\n");
}

void emit_report_from_bundle(const std::filesystem::path& bundle_file,
                             const std::filesystem::path& out_dir) {
  std::ifstream f(bundle_file, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot read " + bundle_file.string());
  json bundle;
  try {
    bundle = json::parse(f);
  } catch (const json::exception& e) {
    fail(ErrorCode::Ingestion, std::string("bundle is not valid JSON: ") + e.what());
  }
  make_dirs(out_dir);
  std::vector<ResultRow> rows;
  config_guard([&] {
    for (const json& e : bundle.at("experiments")) {
      ExperimentResult r;
      r.row = result_row_from_json(e.at("row"));
      for (const json& l : e.at("layers")) {
        LayerF layer;
        layer.spec = layer_spec_from_json(l);
        r.network.layers.push_back(std::move(layer));
      }
      for (const json& s : e.at("timeline")) r.timeline.push_back(layer_stats_from_json(s));
      rows.push_back(r.row);
      write_experiment_tables(out_dir / r.row.network, r);
    }
    return 0;
  });
  std::ostringstream csv;
  write_results_csv(csv, rows);
  write_text(out_dir / "results.csv", csv.str());
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'Q', 'L', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) fail(ErrorCode::Ingestion, "truncated " + what);
  return v;
}

std::vector<std::pair<const char*, TensorF LayerF::*>> tensor_fields() {
  return {{"weight", &LayerF::weight},
          {"bias", &LayerF::bias},
          {"gamma", &LayerF::gamma},
          {"beta", &LayerF::beta},
          {"running_mean", &LayerF::running_mean},
          {"running_var", &LayerF::running_var}};
}

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const NetworkF& net, const json& metadata) {
  json layers = json::array();
  for (const LayerF& l : net.layers) {
    json tensors = json::object();
    for (const auto& [key, member] : tensor_fields()) {
      if (!(l.*member).empty()) tensors[key] = (l.*member).shape();
    }
    layers.push_back({{"spec", to_json(l.spec)},
                      {"epsilon", l.epsilon},
                      {"momentum", l.momentum},
                      {"tensors", tensors}});
  }
  const json header{{"variant", net.variant},
                    {"input_shape", net.input_shape},
                    {"layers", layers},
                    {"metadata", metadata}};
  const std::string text = header.dump();

  std::ofstream out(file, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write checkpoint " + file.string());
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const LayerF& l : net.layers) {
    for (const auto& [key, member] : tensor_fields()) {
      const TensorF& t = l.*member;
      out.write(reinterpret_cast<const char*>(t.data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
  }
  if (!out) fail(ErrorCode::Io, "write failed for checkpoint " + file.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot read checkpoint " + file.string());
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    fail(ErrorCode::Ingestion, file.string() + " is not a checkpoint");
  }
  const auto version = get<std::uint32_t>(in, "checkpoint version");
  if (version != kCheckpointVersion) {
    fail(ErrorCode::Ingestion, "unsupported checkpoint version " + std::to_string(version));
  }
  const auto length = get<std::uint64_t>(in, "checkpoint header length");
  if (length > (std::uint64_t{1} << 30)) fail(ErrorCode::Ingestion, "checkpoint header too large");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    fail(ErrorCode::Ingestion, "truncated checkpoint header");
  }
  Checkpoint ck;
  try {
    const json header = json::parse(text);
    ck.network.variant = header.at("variant").get<std::string>();
    ck.network.input_shape = header.at("input_shape").get<Shape>();
    ck.metadata = header.at("metadata");
    for (const json& l : header.at("layers")) {
      LayerF layer;
      layer.spec = layer_spec_from_json(l.at("spec"));
      layer.epsilon = l.at("epsilon").get<double>();
      layer.momentum = l.at("momentum").get<double>();
      const json& tensors = l.at("tensors");
      for (const auto& [key, member] : tensor_fields()) {
        if (tensors.contains(key)) layer.*member = TensorF(tensors.at(key).get<Shape>());
      }
      ck.network.layers.push_back(std::move(layer));
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::Ingestion, std::string("bad checkpoint header: ") + e.what());
  }
  for (LayerF& l : ck.network.layers) {
    for (const auto& [key, member] : tensor_fields()) {
      TensorF& t = l.*member;
      if (t.empty()) continue;
      if (!in.read(reinterpret_cast<char*>(t.data()),
                   static_cast<std::streamsize>(t.size() * sizeof(float)))) {
        fail(ErrorCode::Ingestion, "truncated checkpoint payload at layer " + l.spec.name);
      }
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    fail(ErrorCode::Ingestion, "trailing bytes after checkpoint payload");
  }
  return ck;
}

}  // namespace quantlens
