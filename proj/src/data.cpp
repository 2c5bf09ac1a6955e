#include "quantlens/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>

namespace quantlens {

RawImages parse_cifar10_records(std::span<const std::uint8_t> bytes) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const std::size_t offset = bytes.size() / kCifarRecordBytes * kCifarRecordBytes;
    fail(ErrorCode::Ingestion, "truncated CIFAR-10 record at byte offset " +
                                   std::to_string(offset) + " (" +
                                   std::to_string(bytes.size() - offset) + " trailing bytes)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  RawImages out;
  out.labels.resize(n);
  out.pixels.resize(n * 3 * kCifarPlane);
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= kCifarClasses) {
      fail(ErrorCode::Ingestion, "label " + std::to_string(rec[0]) + " at byte offset " +
                                     std::to_string(r * kCifarRecordBytes) +
                                     " outside 0-9");
    }
    out.labels[r] = rec[0];
    std::uint8_t* dst = out.pixels.data() + r * 3 * kCifarPlane;
    for (std::size_t p = 0; p < kCifarPlane; ++p) {
      for (std::size_t c = 0; c < 3; ++c) dst[p * 3 + c] = rec[1 + c * kCifarPlane + p];
    }
  }
  return out;
}

RawImages read_cifar10_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_cifar10_records(bytes);
  } catch (const Error& e) {
    fail(e.code(), file.string() + ": " + e.what());
  }
}

void write_cifar10_file(const std::filesystem::path& file, const RawImages& images) {
  std::ofstream out(file, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot write " + file.string());
  std::vector<char> rec(kCifarRecordBytes);
  for (std::size_t r = 0; r < images.size(); ++r) {
    rec[0] = static_cast<char>(images.labels[r]);
    const std::uint8_t* src = images.pixels.data() + r * 3 * kCifarPlane;
    for (std::size_t p = 0; p < kCifarPlane; ++p) {
      for (std::size_t c = 0; c < 3; ++c) rec[1 + c * kCifarPlane + p] = static_cast<char>(src[p * 3 + c]);
    }
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) fail(ErrorCode::Io, "short write to " + file.string());
}

Dataset to_dataset(const RawImages& raw) {
  if (raw.size() == 0) fail(ErrorCode::EmptyInput, "no images");
  Dataset d;
  d.labels = raw.labels;
  std::vector<float> px(raw.pixels.size());
  std::transform(raw.pixels.begin(), raw.pixels.end(), px.begin(),
                 [](std::uint8_t v) { return static_cast<float>(v) / 255.0f; });
  d.images = TensorF({raw.size(), kCifarSide, kCifarSide, 3}, std::move(px));
  return d;
}

std::vector<std::size_t> subset_indices(std::size_t n, std::size_t k, std::uint64_t seed,
                                        std::string_view label) {
  if (k > n) {
    fail(ErrorCode::Config, "subset of " + std::to_string(k) + " requested from " +
                                std::to_string(n) + " samples");
  }
  SeededRng rng = SeededRng(seed).substream(label);
  std::vector<std::size_t> idx = permutation(rng, n);
  idx.resize(k);
  return idx;
}

namespace {

Dataset maybe_subset(const RawImages& raw, std::optional<std::size_t> k, std::uint64_t seed,
                     std::string_view label) {
  Dataset all = to_dataset(raw);
  if (!k) return all;
  const std::vector<std::size_t> idx = subset_indices(all.size(), *k, seed, label);
  return all.subset(idx);
}

void append(RawImages& into, const RawImages& from) {
  into.pixels.insert(into.pixels.end(), from.pixels.begin(), from.pixels.end());
  into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}

}  // namespace

SplitDataset load_cifar10(const std::filesystem::path& dir, std::optional<std::size_t> train_subset,
                          std::optional<std::size_t> test_subset, std::uint64_t seed) {
  RawImages train;
  for (int b = 1; b <= 5; ++b) {
    const auto file = dir / ("data_batch_" + std::to_string(b) + ".bin");
    if (std::filesystem::exists(file)) append(train, read_cifar10_file(file));
  }
  if (train.size() == 0) fail(ErrorCode::Io, "no data_batch_*.bin files in " + dir.string());
  const RawImages test = read_cifar10_file(dir / "test_batch.bin");
  return {maybe_subset(train, train_subset, seed, "subset/train"),
          maybe_subset(test, test_subset, seed, "subset/test")};
}

// ---------------------------------------------------------------------------

namespace {

struct Rgb {
  double r, g, b;
  double luma() const { return 0.299 * r + 0.587 * g + 0.114 * b; }
};

Rgb random_colour(SeededRng& rng) {
  return {rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255)};
}

bool inside(std::size_t cls, double x, double y, double dx, double dy, double period,
            double phase) {
  const double ax = std::abs(dx), ay = std::abs(dy);
  const auto band = [&](double t) {
    return static_cast<long>(std::floor((t + phase) / period)) % 2 == 0;
  };
  switch (cls) {
    case 0: return dx * dx + dy * dy < 1.0;
    case 1: return std::max(ax, ay) < 0.85;
    case 2: return dy > -0.8 && dy < 0.8 && ax < (dy + 0.8) * 0.55;
    case 3: return band(y);
    case 4: return band(x);
    case 5: return band((x + y) * std::numbers::sqrt2 / 2.0);
    case 6: {
      const double r2 = dx * dx + dy * dy;
      return r2 < 1.0 && r2 > 0.36;
    }
    case 7: return (ax < 0.3 && ay < 1.0) || (ay < 0.3 && ax < 1.0);
    case 8: return (static_cast<long>(std::floor((x + phase) / period)) +
                    static_cast<long>(std::floor((y + phase) / period))) % 2 == 0;
    case 9: return (std::abs(dx - dy) < 0.35 || std::abs(dx + dy) < 0.35) && std::max(ax, ay) < 1.0;
    default: return false;
  }
}

}  // namespace

RawImages make_synthetic_images(std::size_t count, std::uint64_t seed) {
  RawImages out;
  out.labels.resize(count);
  out.pixels.resize(count * 3 * kCifarPlane);
  const SeededRng root(seed);
  for (std::size_t i = 0; i < count; ++i) {
    SeededRng rng = root.substream("image/" + std::to_string(i));
    const std::size_t cls = i % kCifarClasses;
    out.labels[i] = static_cast<std::uint8_t>(cls);
    Rgb fg = random_colour(rng), bg = random_colour(rng);
    for (int tries = 0; tries < 16 && std::abs(fg.luma() - bg.luma()) < 60.0; ++tries) {
      bg = random_colour(rng);
    }
    const double cx = 15.5 + rng.uniform(-6.0, 6.0);
    const double cy = 15.5 + rng.uniform(-6.0, 6.0);
    const double radius = rng.uniform(7.0, 12.0);
    const double period = rng.uniform(3.0, 6.0);
    const double phase = rng.uniform(0.0, 2.0 * period);
    const double gx = rng.uniform(-1.5, 1.5), gy = rng.uniform(-1.5, 1.5);
    std::uint8_t* dst = out.pixels.data() + i * 3 * kCifarPlane;
    for (std::size_t y = 0; y < kCifarSide; ++y) {
      for (std::size_t x = 0; x < kCifarSide; ++x) {
        const double dx = (static_cast<double>(x) - cx) / radius;
        const double dy = (static_cast<double>(y) - cy) / radius;
        const Rgb& c = inside(cls, static_cast<double>(x), static_cast<double>(y), dx, dy,
                              period, phase) ? fg : bg;
        const double shade = gx * (static_cast<double>(x) - 15.5) + gy * (static_cast<double>(y) - 15.5);
        const double rgb[3] = {c.r, c.g, c.b};
        for (std::size_t ch = 0; ch < 3; ++ch) {
          const double v = rgb[ch] + shade + 18.0 * rng.normal();
          dst[(y * kCifarSide + x) * 3 + ch] =
              static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
        }
      }
    }
  }
  return out;
}

void write_synthetic_cifar10(const std::filesystem::path& dir, std::size_t train_count,
                             std::size_t test_count, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  write_cifar10_file(dir / "data_batch_1.bin", make_synthetic_images(train_count, seed));
  write_cifar10_file(dir / "test_batch.bin",
                     make_synthetic_images(test_count, derive_seed(seed, "test")));
}

// ---------------------------------------------------------------------------

nlohmann::json to_json(const AugmentConfig& cfg) {
  return {{"shift", cfg.shift}, {"zoom", cfg.zoom}, {"rotation_deg", cfg.rotation_deg},
          {"hflip", cfg.hflip}, {"vflip", cfg.vflip}};
}

AugmentConfig augment_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) fail(ErrorCode::Config, "augment config must be an object");
  AugmentConfig c;
  c.shift = j.value("shift", c.shift);
  c.zoom = j.value("zoom", c.zoom);
  c.rotation_deg = j.value("rotation_deg", c.rotation_deg);
  c.hflip = j.value("hflip", c.hflip);
  c.vflip = j.value("vflip", c.vflip);
  if (c.shift < 0 || c.zoom < 0 || c.zoom >= 1 || c.rotation_deg < 0 || c.hflip < 0 ||
      c.hflip > 1 || c.vflip < 0 || c.vflip > 1) {
    fail(ErrorCode::Config, "augment magnitudes out of range");
  }
  return c;
}

void flip_horizontal(TensorF& batch, std::size_t index) {
  const std::size_t h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  float* img = batch.data() + index * h * w * c;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w / 2; ++x) {
      float* a = img + (y * w + x) * c;
      float* b = img + (y * w + (w - 1 - x)) * c;
      std::swap_ranges(a, a + c, b);
    }
  }
}

namespace {

void flip_vertical(TensorF& batch, std::size_t index) {
  const std::size_t h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  float* img = batch.data() + index * h * w * c;
  for (std::size_t y = 0; y < h / 2; ++y) {
    std::swap_ranges(img + y * w * c, img + (y + 1) * w * c, img + (h - 1 - y) * w * c);
  }
}

}  // namespace

void augment(TensorF& batch, SeededRng& rng, const AugmentConfig& cfg) {
  const std::size_t n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  std::vector<float> scratch(h * w * c);
  const double cx = (static_cast<double>(w) - 1.0) / 2.0;
  const double cy = (static_cast<double>(h) - 1.0) / 2.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double tx = rng.uniform(-1.0, 1.0) * cfg.shift * static_cast<double>(w);
    const double ty = rng.uniform(-1.0, 1.0) * cfg.shift * static_cast<double>(h);
    const double scale = 1.0 + rng.uniform(-1.0, 1.0) * cfg.zoom;
    const double angle = rng.uniform(-1.0, 1.0) * cfg.rotation_deg * std::numbers::pi / 180.0;
    const bool hflip = rng.bernoulli(cfg.hflip);
    const bool vflip = rng.bernoulli(cfg.vflip);
    if (hflip) flip_horizontal(batch, i);
    if (vflip) flip_vertical(batch, i);
    if (tx == 0.0 && ty == 0.0 && scale == 1.0 && angle == 0.0) continue;

    // output pixel p samples source R^-1 (p - centre - t) / scale + centre
    float* img = batch.data() + i * h * w * c;
    std::copy(img, img + h * w * c, scratch.begin());
    const double cs = std::cos(angle), sn = std::sin(angle);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const double ox = static_cast<double>(x) - cx - tx;
        const double oy = static_cast<double>(y) - cy - ty;
        const double sx = (cs * ox + sn * oy) / scale + cx;
        const double sy = (-sn * ox + cs * oy) / scale + cy;
        const double fx = std::floor(sx), fy = std::floor(sy);
        const double ax = sx - fx, ay = sy - fy;
        float* out = img + (y * w + x) * c;
        for (std::size_t ch = 0; ch < c; ++ch) out[ch] = 0.0f;
        for (int dy = 0; dy <= 1; ++dy) {
          for (int dx = 0; dx <= 1; ++dx) {
            const long px = static_cast<long>(fx) + dx, py = static_cast<long>(fy) + dy;
            if (px < 0 || py < 0 || px >= static_cast<long>(w) || py >= static_cast<long>(h)) continue;
            const double wgt = (dx ? ax : 1.0 - ax) * (dy ? ay : 1.0 - ay);
            if (wgt == 0.0) continue;
            const float* src = scratch.data() + (static_cast<std::size_t>(py) * w + static_cast<std::size_t>(px)) * c;
            for (std::size_t ch = 0; ch < c; ++ch) out[ch] += static_cast<float>(wgt * src[ch]);
          }
        }
      }
    }
  }
}

}  // namespace quantlens
