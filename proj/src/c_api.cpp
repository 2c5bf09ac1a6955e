#include "quantlens/c_api.h"

#include <cstring>
#include <fstream>
#include <new>
#include <sstream>
#include <stdexcept>
#include <string>

#include "quantlens/harness.hpp"

using nlohmann::json;
using namespace quantlens;

struct ql_experiment {
  ExperimentResult result;
};

struct ql_suite {
  std::vector<ExperimentResult> results;
};

struct ql_model {
  Checkpoint checkpoint;
};

namespace {

thread_local std::string g_last_error = "null";

void set_error(std::string_view name, int code, const std::string& message) {
  g_last_error = json{{"error", name}, {"code", code}, {"message", message}}.dump();
}

struct NullArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <typename F>
ql_status guarded(F&& f) {
  try {
    f();
    g_last_error = "null";
    return QL_OK;
  } catch (const NullArgument& e) {
    set_error("null_argument", QL_ERR_NULL_ARGUMENT, e.what());
    return QL_ERR_NULL_ARGUMENT;
  } catch (const Error& e) {
    set_error(error_code_name(e.code()), static_cast<int>(e.code()), e.what());
    return static_cast<ql_status>(static_cast<int>(e.code()));
  } catch (const json::exception& e) {
    set_error("config", QL_ERR_CONFIG, e.what());
    return QL_ERR_CONFIG;
  } catch (const std::bad_alloc&) {
    set_error("internal", QL_ERR_INTERNAL, "out of memory");
    return QL_ERR_INTERNAL;
  } catch (const std::exception& e) {
    set_error("internal", QL_ERR_INTERNAL, e.what());
    return QL_ERR_INTERNAL;
  }
}

void require(const void* p, const char* what) {
  if (!p) throw NullArgument(std::string(what) + " must not be null");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

json parse_json(const char* text, const char* what) {
  if (!text || !*text) return json::object();
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::Config, std::string(what) + " is not valid JSON: " + e.what());
  }
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path().empty() ? "." : p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) fail(ErrorCode::Io, "cannot write " + p.string());
  f << text;
}

// Experiment config of a model's metadata with option overrides applied.
ExperimentConfig model_config(const ql_model* m, const json& opts) {
  ExperimentConfig cfg;
  const json& meta = m->checkpoint.metadata;
  if (meta.is_object() && meta.contains("experiment")) {
    cfg = experiment_config_from_json(meta.at("experiment"));
  }
  if (opts.contains("data")) cfg.data = data_spec_from_json(opts.at("data"));
  if (opts.contains("seed")) cfg.seed = opts.at("seed").get<std::uint64_t>();
  if (opts.contains("samples")) cfg.calibration.samples = opts.at("samples").get<std::size_t>();
  if (opts.contains("clip_fraction")) {
    cfg.calibration.clip_fraction = opts.at("clip_fraction").get<double>();
  }
  if (opts.contains("bits")) cfg.calibration.bits = opts.at("bits").get<int>();
  cfg.validate();
  return cfg;
}

}  // namespace

extern "C" {

const char* ql_version(void) { return "0.1.0"; }

const char* ql_last_error(void) { return g_last_error.c_str(); }

void ql_string_free(char* s) { std::free(s); }

ql_status ql_experiment_run(const char* config_json, ql_experiment** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    const ExperimentConfig cfg = experiment_config_from_json(parse_json(config_json, "config"));
    auto e = std::make_unique<ql_experiment>();
    e->result = run_experiment(cfg);
    *out = e.release();
  });
}

ql_status ql_experiment_row_json(const ql_experiment* e, char** out_json) {
  return guarded([&] {
    require(e, "experiment");
    require(out_json, "out_json");
    *out_json = dup_string(to_json(e->result.row).dump());
  });
}

ql_status ql_experiment_result_json(const ql_experiment* e, char** out_json) {
  return guarded([&] {
    require(e, "experiment");
    require(out_json, "out_json");
    *out_json = dup_string(to_json(e->result).dump());
  });
}

ql_status ql_experiment_emit(const ql_experiment* e, const char* out_dir) {
  return guarded([&] {
    require(e, "experiment");
    require(out_dir, "out_dir");
    emit_report(out_dir, std::span<const ExperimentResult>(&e->result, 1));
  });
}

ql_status ql_experiment_model(const ql_experiment* e, ql_model** out) {
  return guarded([&] {
    require(e, "experiment");
    require(out, "out");
    auto m = std::make_unique<ql_model>();
    m->checkpoint.network = e->result.network;
    m->checkpoint.metadata = {{"experiment", to_json(e->result.config)},
                              {"status", train_status_name(e->result.row.status)}};
    *out = m.release();
  });
}

void ql_experiment_free(ql_experiment* e) { delete e; }

ql_status ql_suite_run(const char* suite_json, ql_suite** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    const SuiteConfig cfg = suite_config_from_json(parse_json(suite_json, "suite config"));
    auto s = std::make_unique<ql_suite>();
    s->results = run_suite(cfg);
    *out = s.release();
  });
}

size_t ql_suite_size(const ql_suite* s) { return s ? s->results.size() : 0; }

ql_status ql_suite_rows_json(const ql_suite* s, char** out_json) {
  return guarded([&] {
    require(s, "suite");
    require(out_json, "out_json");
    json rows = json::array();
    for (const ExperimentResult& r : s->results) rows.push_back(to_json(r.row));
    *out_json = dup_string(rows.dump());
  });
}

ql_status ql_suite_emit(const ql_suite* s, const char* out_dir) {
  return guarded([&] {
    require(s, "suite");
    require(out_dir, "out_dir");
    emit_report(out_dir, s->results);
  });
}

void ql_suite_free(ql_suite* s) { delete s; }

ql_status ql_model_load(const char* path, ql_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    auto m = std::make_unique<ql_model>();
    m->checkpoint = load_checkpoint(path);
    *out = m.release();
  });
}

ql_status ql_model_save(const ql_model* m, const char* path) {
  return guarded([&] {
    require(m, "model");
    require(path, "path");
    save_checkpoint(path, m->checkpoint.network, m->checkpoint.metadata);
  });
}

ql_status ql_model_metadata_json(const ql_model* m, char** out_json) {
  return guarded([&] {
    require(m, "model");
    require(out_json, "out_json");
    *out_json = dup_string(m->checkpoint.metadata.dump());
  });
}

ql_status ql_model_analyze(const ql_model* m, const char* options_json, char** out_json) {
  return guarded([&] {
    require(m, "model");
    const json opts = parse_json(options_json, "options");
    const ExperimentConfig cfg = model_config(m, opts);
    const NetworkF& net = m->checkpoint.network;
    const SplitDataset data = load_data(cfg.data, cfg.seed);
    const std::size_t n = std::min(cfg.calibration.samples, data.train.size());
    const TensorF samples =
        data.train.batch_images(subset_indices(data.train.size(), n, cfg.seed, "analysis"));
    const std::vector<LayerStats> stats =
        snapshot_stats(net, samples, cfg.calibration.clip_fraction, std::nullopt);

    std::vector<LayerStats> acts;
    for (const LayerStats& s : stats) {
      if (s.kind == StatsKind::Activations && s.layer != "input") acts.push_back(s);
    }
    const VanishingReport vr = detect_vanishing_activations(acts);
    json flagged = json::array();
    for (std::size_t i : vr.flagged) flagged.push_back(acts[i].layer);

    json kl = json::object();
    for (const LayerF& l : net.layers) {
      if (!has_weights(l.spec.kind)) continue;
      try {
        kl[l.spec.name] = kl_vs_uniform(l.weight);
      } catch (const Error&) {
        kl[l.spec.name] = nullptr;
      }
    }
    json stats_json = json::array();
    for (const LayerStats& s : stats) stats_json.push_back(to_json(s));
    json result{{"network", cfg.name()},
                {"samples", n},
                {"clip_fraction", cfg.calibration.clip_fraction},
                {"stats", stats_json},
                {"vanishing",
                 {{"threshold", kVanishingRange},
                  {"flagged", flagged},
                  {"deepest_healthy",
                   vr.deepest_healthy ? json(acts[*vr.deepest_healthy].layer) : json(nullptr)}}},
                {"weight_kl_vs_uniform", kl}};
    try {
      result["fp32_accuracy"] = evaluate_accuracy(net, data.test);
    } catch (const NumericError&) {
      result["fp32_accuracy"] = nullptr;
    }
    if (opts.contains("out")) {
      const std::filesystem::path dir = opts.at("out").get<std::string>();
      std::ostringstream csv;
      write_layer_stats_csv(csv, stats);
      write_file(dir / "analysis.csv", csv.str());
      write_file(dir / "analysis.json", result.dump(2) + "\n");
    }
    if (out_json) *out_json = dup_string(result.dump());
  });
}

ql_status ql_model_quantize(const ql_model* m, const char* options_json, char** out_json) {
  return guarded([&] {
    require(m, "model");
    const json opts = parse_json(options_json, "options");
    const ExperimentConfig cfg = model_config(m, opts);
    const SplitDataset data = load_data(cfg.data, cfg.seed);
    const QuantEvaluation ev = evaluate_quantized(m->checkpoint.network, data, cfg.calibration,
                                                  derive_seed(cell_seed(cfg), "calibration"));
    const json result{{"network", cfg.name()},
                      {"bits", cfg.calibration.bits},
                      {"report", to_json(ev.report)},
                      {"calibration", to_json(ev.record)}};
    if (opts.contains("out")) {
      const std::filesystem::path dir = opts.at("out").get<std::string>();
      write_file(dir / "quantize.json", result.dump(2) + "\n");
    }
    if (out_json) *out_json = dup_string(result.dump());
  });
}

void ql_model_free(ql_model* m) { delete m; }

ql_status ql_report_from_bundle(const char* bundle_path, const char* out_dir) {
  return guarded([&] {
    require(bundle_path, "bundle_path");
    require(out_dir, "out_dir");
    emit_report_from_bundle(bundle_path, out_dir);
  });
}

ql_status ql_write_synthetic_cifar10(const char* dir, size_t train_count, size_t test_count,
                                     uint64_t seed) {
  return guarded([&] {
    require(dir, "dir");
    write_synthetic_cifar10(dir, train_count, test_count, seed);
  });
}

ql_status ql_quant_params(double lo, double hi, int bits, double* scale, int32_t* zero_point) {
  return guarded([&] {
    require(scale, "scale");
    require(zero_point, "zero_point");
    const QuantParams qp = make_quant_params(lo, hi, bits);
    *scale = qp.scale;
    *zero_point = qp.zero_point;
  });
}

ql_status ql_percentile_range(const float* values, size_t n, double clip_fraction, float* lo,
                              float* hi) {
  return guarded([&] {
    require(lo, "lo");
    require(hi, "hi");
    if (n == 0) fail(ErrorCode::EmptyInput, "no values");
    require(values, "values");
    PooledRange r(clip_fraction);
    const std::span<const float> v(values, n);
    r.add_first_pass(v);
    r.finish_first_pass();
    if (r.needs_second_pass()) r.add_second_pass(v);
    *lo = r.clipped_min();
    *hi = r.clipped_max();
  });
}

}  // extern "C"
