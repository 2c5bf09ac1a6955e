// quantlens command-line driver. Talks to the library only through the C API.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "quantlens/c_api.h"

using nlohmann::json;

namespace {

struct CliFailure {
  int exit_code;
  std::string json_text;
};

[[noreturn]] void usage_error(const std::string& message) {
  throw CliFailure{2, json{{"error", "usage"}, {"code", QL_ERR_USAGE}, {"message", message}}.dump()};
}

void check(ql_status s) {
  if (s != QL_OK) throw CliFailure{static_cast<int>(s) < 100 ? 1 : 3, ql_last_error()};
}

std::string take(char* s) {
  std::string out = s ? s : "";
  ql_string_free(s);
  return out;
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) {
    throw CliFailure{1, json{{"error", "io"}, {"code", QL_ERR_IO}, {"message", "cannot read " + path}}.dump()};
  }
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw CliFailure{1, json{{"error", "config"},
                             {"code", QL_ERR_CONFIG},
                             {"message", path + ": " + e.what()}}.dump()};
  }
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> subset;
  std::optional<double> clip_fraction;
  std::optional<std::size_t> calib_samples;
  std::optional<std::string> out;
  std::optional<int> bits;

  void attach(CLI::App* cmd) {
    cmd->add_option("--seed", seed, "root RNG seed");
    cmd->add_option("--subset", subset, "training subset size");
    cmd->add_option("--clip-fraction", clip_fraction,
                    "symmetric activation clip fraction (default 0.01)");
    cmd->add_option("--calib-samples", calib_samples,
                    "calibration sample count (default 1024)");
    cmd->add_option("--out", out, "output directory");
  }

  // Applies the flags to an experiment config document.
  void apply(json& cfg) const {
    if (seed) cfg["seed"] = *seed;
    if (subset) cfg["data"]["train_subset"] = *subset;
    if (clip_fraction) cfg["calibration"]["clip_fraction"] = *clip_fraction;
    if (calib_samples) cfg["calibration"]["samples"] = *calib_samples;
    if (bits) cfg["calibration"]["bits"] = *bits;
    if (out) cfg["out"] = *out;
  }
};

std::string output_dir(const json& cfg) {
  return cfg.contains("out") ? cfg.at("out").get<std::string>() : std::string("out");
}

int cmd_train(const std::string& config_path, const Overrides& o) {
  json cfg = read_json_file(config_path);
  o.apply(cfg);
  ql_experiment* e = nullptr;
  check(ql_experiment_run(cfg.dump().c_str(), &e));
  const std::string dir = output_dir(cfg);
  const ql_status emitted = ql_experiment_emit(e, dir.c_str());
  char* row = nullptr;
  const ql_status got = emitted == QL_OK ? ql_experiment_row_json(e, &row) : emitted;
  ql_experiment_free(e);
  check(got);
  std::cout << json{{"out", dir}, {"result", json::parse(take(row))}}.dump(2) << "\n";
  return 0;
}

int cmd_suite(const std::string& grid_path, const Overrides& o, std::optional<std::size_t> threads) {
  json grid = read_json_file(grid_path);
  if (!grid.contains("base")) grid["base"] = json::object();
  o.apply(grid["base"]);
  if (threads) grid["threads"] = *threads;
  ql_suite* s = nullptr;
  check(ql_suite_run(grid.dump().c_str(), &s));
  const std::string dir = output_dir(grid["base"]);
  const ql_status emitted = ql_suite_emit(s, dir.c_str());
  char* rows = nullptr;
  const ql_status got = emitted == QL_OK ? ql_suite_rows_json(s, &rows) : emitted;
  ql_suite_free(s);
  check(got);
  std::cout << json{{"out", dir}, {"results", json::parse(take(rows))}}.dump(2) << "\n";
  return 0;
}

// analyze / quantize options from flags plus the model's stored config.
json model_options(ql_model* m, const Overrides& o) {
  json opts = json::object();
  if (o.seed) opts["seed"] = *o.seed;
  if (o.clip_fraction) opts["clip_fraction"] = *o.clip_fraction;
  if (o.calib_samples) opts["samples"] = *o.calib_samples;
  if (o.bits) opts["bits"] = *o.bits;
  if (o.out) opts["out"] = *o.out;
  if (o.subset) {
    char* meta = nullptr;
    check(ql_model_metadata_json(m, &meta));
    const json md = json::parse(take(meta));
    json data = md.contains("experiment") && md["experiment"].contains("data")
                    ? md["experiment"]["data"]
                    : json::object();
    data["train_subset"] = *o.subset;
    opts["data"] = data;
  }
  return opts;
}

int cmd_model(const std::string& path, const Overrides& o, bool quantize) {
  ql_model* m = nullptr;
  check(ql_model_load(path.c_str(), &m));
  char* out = nullptr;
  ql_status s;
  try {
    const std::string opts = model_options(m, o).dump();
    s = quantize ? ql_model_quantize(m, opts.c_str(), &out) : ql_model_analyze(m, opts.c_str(), &out);
  } catch (...) {
    ql_model_free(m);
    throw;
  }
  ql_model_free(m);
  check(s);
  json result = json::parse(take(out));
  if (!quantize) result.erase("stats");  // full table goes to analysis.csv / analysis.json
  if (quantize) result.erase("calibration");
  std::cout << result.dump(2) << "\n";
  return 0;
}

int cmd_report(const std::string& bundle, const Overrides& o) {
  if (!o.out) usage_error("report needs --out");
  check(ql_report_from_bundle(bundle.c_str(), o.out->c_str()));
  std::cout << json{{"out", *o.out}}.dump() << "\n";
  return 0;
}

int cmd_synth(const Overrides& o, std::size_t train, std::size_t test) {
  if (!o.out) usage_error("synth-data needs --out");
  check(ql_write_synthetic_cifar10(o.out->c_str(), train, test, o.seed.value_or(0)));
  std::cout << json{{"out", *o.out}, {"train", train}, {"test", test}}.dump() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Weight-initialization ablations and quantized-inference analysis"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(ql_version()));

  std::string config_path, grid_path, model_path, bundle_path;
  std::optional<std::size_t> threads;
  std::size_t synth_train = 5000, synth_test = 1000;
  Overrides train_o, suite_o, analyze_o, quant_o, report_o, synth_o;

  CLI::App* train = app.add_subcommand("train", "train and evaluate one experiment config");
  train->add_option("config", config_path, "experiment config JSON")->required();
  train_o.attach(train);

  CLI::App* suite = app.add_subcommand("suite", "run a variant x init grid");
  suite->add_option("grid", grid_path, "suite config JSON")->required();
  suite->add_option("--threads", threads, "parallel grid cells");
  suite_o.attach(suite);

  CLI::App* analyze = app.add_subcommand("analyze", "recompute layer statistics of a checkpoint");
  analyze->add_option("model", model_path, "checkpoint (.qlck)")->required();
  analyze_o.attach(analyze);

  CLI::App* quantize = app.add_subcommand("quantize", "fold, calibrate and evaluate a checkpoint");
  quantize->add_option("model", model_path, "checkpoint (.qlck)")->required();
  quantize->add_option("--bits", quant_o.bits, "quantization bit width (default 8)");
  quant_o.attach(quantize);

  CLI::App* report = app.add_subcommand("report", "render CSVs from a bundle.json");
  report->add_option("bundle", bundle_path, "bundle.json from train or suite")->required();
  report_o.attach(report);

  CLI::App* synth = app.add_subcommand("synth-data", "write a synthetic CIFAR-10-format dataset");
  synth->add_option("--train", synth_train, "training images");
  synth->add_option("--test", synth_test, "test images");
  synth_o.attach(synth);

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForVersion& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      usage_error(e.what());
    }
    if (*train) return cmd_train(config_path, train_o);
    if (*suite) return cmd_suite(grid_path, suite_o, threads);
    if (*analyze) return cmd_model(model_path, analyze_o, false);
    if (*quantize) return cmd_model(model_path, quant_o, true);
    if (*report) return cmd_report(bundle_path, report_o);
    if (*synth) return cmd_synth(synth_o, synth_train, synth_test);
    usage_error("no subcommand");
  } catch (const CliFailure& f) {
    std::cerr << f.json_text << "\n";
    return f.exit_code;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"code", QL_ERR_INTERNAL}, {"message", e.what()}}.dump()
              << "\n";
    return 3;
  }
}
