#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "quantlens/data.hpp"
#include "quantlens/init.hpp"
#include "quantlens/metrics.hpp"
#include "quantlens/nn.hpp"
#include "quantlens/quant.hpp"

namespace quantlens {

inline constexpr int kConfigSchemaVersion = 1;

struct DataSpec {
  std::string source = "synthetic";  // "cifar10" or "synthetic"
  std::string path;                  // cifar10 only; empty = $QUANTLENS_CIFAR10_DIR
  std::optional<std::size_t> train_subset = 5000;
  std::optional<std::size_t> test_subset = 1000;
  // synthetic only: images generated before subsetting
  std::size_t synthetic_train = 5000;
  std::size_t synthetic_test = 1000;
};

struct CalibrationSpec {
  std::size_t samples = 1024;
  double clip_fraction = 0.01;
  int bits = 8;
};

struct TrackingSpec {
  std::size_t activation_interval = 5;  // epochs between activation / BN-fold snapshots
  std::size_t activation_samples = 256;  // training images used for the snapshots
};

struct ExperimentConfig {
  int schema_version = kConfigSchemaVersion;
  Variant variant = Variant::RegularConvWithBN;
  InitSpec init = glorot_uniform();
  ArchSpec arch;
  TrainConfig train;
  DataSpec data;
  AugmentConfig augment;
  CalibrationSpec calibration;
  TrackingSpec tracking;
  std::uint64_t seed = 0;
  std::string out = "out";

  // "<variant>_<init>", e.g. DWS_Conv_No_BN_GlorotUni
  std::string name() const;
  void validate() const;
};

nlohmann::json to_json(const DataSpec& d);
DataSpec data_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentConfig& cfg);
// Missing keys keep their defaults; unknown keys are a Config error.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);

SplitDataset load_data(const DataSpec& spec, std::uint64_t seed);

struct ResultRow {
  std::string network;
  TrainStatus status = TrainStatus::Trained;
  std::optional<QuantReport> metrics;  // trained rows only
  std::optional<double> fp32_accuracy;  // measured whenever the network evaluates
  std::optional<std::string> error;    // cell failed before producing a status
};

nlohmann::json to_json(const ResultRow& row);
ResultRow result_row_from_json(const nlohmann::json& j);

struct QuantEvaluation {
  QuantReport report;
  CalibrationRecord record;
};

// Fold, calibrate on `spec.samples` training images chosen by a seeded
// shuffle, then compare fp32 and fake-quantized logits on the test set.
QuantEvaluation evaluate_quantized(const NetworkF& net, const SplitDataset& data,
                                   const CalibrationSpec& spec, std::uint64_t seed);

struct ExperimentResult {
  ExperimentConfig config;
  ResultRow row;
  TrainLog log;
  std::vector<LayerStats> timeline;
  std::optional<CalibrationRecord> calibration;
  NetworkF network;
};

// Weight stats of every weighted layer, BN-folded weight stats, and the
// activation stats of every observation point over `samples`. Activations
// are skipped when the forward pass is non-finite.
std::vector<LayerStats> snapshot_stats(const NetworkF& net, const TensorF& samples,
                                       double clip_fraction, std::optional<std::size_t> epoch,
                                       bool include_weights = true);

// Seed of one grid cell, keyed by (seed, variant, init name).
std::uint64_t cell_seed(const ExperimentConfig& cfg);

ExperimentResult run_experiment(const ExperimentConfig& cfg);
ExperimentResult run_experiment(const ExperimentConfig& cfg, const SplitDataset& data);

struct SuiteConfig {
  ExperimentConfig base;
  std::vector<Variant> variants;
  std::vector<InitSpec> inits;
  std::size_t threads = 1;
};

nlohmann::json to_json(const SuiteConfig& cfg);
SuiteConfig suite_config_from_json(const nlohmann::json& j);

// One result per (variant, init) cell, sorted by variant name then init name.
// A failing cell is reported via ResultRow::error and the suite continues.
std::vector<ExperimentResult> run_suite(const SuiteConfig& cfg);

inline constexpr const char* kResultsHeader =
    "network,fp32_accuracy,quint8_accuracy,qmse,qce,percent_accuracy_decrease,status";

void write_results_csv(std::ostream& out, std::span<const ResultRow> rows);

// One row per weighted layer with the final weight range, BN-folded weight
// range and precision, and the range and precision of the activation that
// the layer feeds (its ReLU, or the logits).
void write_layerwise_csv(std::ostream& out, const ExperimentResult& result);

nlohmann::json to_json(const ExperimentResult& result);

// Writes results.csv, bundle.json and per experiment <name>/layerwise.csv,
// <name>/timeline.csv, <name>/experiment.json and <name>/model.qlck.
void emit_report(const std::filesystem::path& out_dir,
                 std::span<const ExperimentResult> results, bool write_checkpoints = true);

// Rebuilds results.csv and the layerwise CSVs from a bundle.json.
void emit_report_from_bundle(const std::filesystem::path& bundle_file,
                             const std::filesystem::path& out_dir);

// Binary checkpoint: "QLCK", u32 version, u64 header length, JSON header
// (layer specs, tensor shapes, metadata), then little-endian float32 payload.
void save_checkpoint(const std::filesystem::path& file, const NetworkF& net,
                     const nlohmann::json& metadata = nlohmann::json::object());
struct Checkpoint {
  NetworkF network;
  nlohmann::json metadata;
};
Checkpoint load_checkpoint(const std::filesystem::path& file);

}  // namespace quantlens
