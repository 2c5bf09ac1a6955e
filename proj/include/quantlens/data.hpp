#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "quantlens/nn.hpp"
#include "quantlens/rng.hpp"

namespace quantlens {

// CIFAR-10 binary layout: each record is one label byte followed by the
// 32x32 red, green and blue planes (1024 bytes each, row-major).
inline constexpr std::size_t kCifarSide = 32;
inline constexpr std::size_t kCifarPlane = kCifarSide * kCifarSide;
inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * kCifarPlane;
inline constexpr std::size_t kCifarClasses = 10;

struct RawImages {
  std::vector<std::uint8_t> pixels;  // NHWC bytes
  std::vector<std::uint8_t> labels;
  std::size_t size() const noexcept { return labels.size(); }
};

struct SplitDataset {
  Dataset train;
  Dataset test;
};

// Parses one batch file worth of bytes.
RawImages parse_cifar10_records(std::span<const std::uint8_t> bytes);
RawImages read_cifar10_file(const std::filesystem::path& file);
void write_cifar10_file(const std::filesystem::path& file, const RawImages& images);

// Bytes -> [0, 1] floats, channels-last [N, 32, 32, 3].
Dataset to_dataset(const RawImages& raw);

// Seeded shuffle of [0, n); the first k indices form the subset.
std::vector<std::size_t> subset_indices(std::size_t n, std::size_t k, std::uint64_t seed,
                                        std::string_view label);

// Reads data_batch_{1..5}.bin and test_batch.bin from dir.
SplitDataset load_cifar10(const std::filesystem::path& dir,
                          std::optional<std::size_t> train_subset = std::nullopt,
                          std::optional<std::size_t> test_subset = std::nullopt,
                          std::uint64_t seed = 0);

// Class-conditional procedural images in CIFAR geometry: ten shape/texture
// classes over random colours, position, scale and pixel noise. Classes are
// balanced (label = index mod 10 before shuffling).
RawImages make_synthetic_images(std::size_t count, std::uint64_t seed);

// Writes data_batch_1.bin and test_batch.bin of synthetic images into dir.
void write_synthetic_cifar10(const std::filesystem::path& dir, std::size_t train_count,
                             std::size_t test_count, std::uint64_t seed);

struct AugmentConfig {
  double shift = 0.1;          // fraction of width/height
  double zoom = 0.1;           // scale drawn from [1 - zoom, 1 + zoom]
  double rotation_deg = 15.0;  // angle drawn from [-r, r]
  double hflip = 0.5;          // probability
  double vflip = 0.5;

  static AugmentConfig none() { return {0.0, 0.0, 0.0, 0.0, 0.0}; }
};

nlohmann::json to_json(const AugmentConfig& cfg);
AugmentConfig augment_config_from_json(const nlohmann::json& j);

void flip_horizontal(TensorF& batch, std::size_t index);

// Per-image random shift/zoom/rotation (bilinear, zero fill) and flips.
// Every image consumes the same number of draws regardless of outcome.
void augment(TensorF& batch, SeededRng& rng, const AugmentConfig& cfg);

}  // namespace quantlens
