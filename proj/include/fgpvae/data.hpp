#pragma once

// MNIST ingestion, rotated-dataset synthesis, digit partitioning and the
// FGPDATA1 container.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "fgpvae/errors.hpp"
#include "fgpvae/gp.hpp"
#include "fgpvae/io.hpp"
#include "fgpvae/nets.hpp"

namespace fgpvae {

struct RawDigit {
  Image pixels;
  int label = 0;
};

namespace detail {

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& buf, std::size_t pos) {
  return (std::uint32_t{buf[pos]} << 24) | (std::uint32_t{buf[pos + 1]} << 16) |
         (std::uint32_t{buf[pos + 2]} << 8) | std::uint32_t{buf[pos + 3]};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Reads an IDX image file and its label file; bytes are scaled to [0, 1].
inline std::vector<RawDigit> load_idx(const std::filesystem::path& images_path,
                                      const std::filesystem::path& labels_path) {
  const auto images = detail::read_file(images_path);
  const auto labels = detail::read_file(labels_path);
  if (images.size() < 4) throw TruncatedFileError(images_path.string() + ": missing header");
  if (labels.size() < 4) throw TruncatedFileError(labels_path.string() + ": missing header");
  if (detail::read_be32(images, 0) != kIdxImageMagic) {
    throw BadMagicError(images_path.string() + ": not an IDX image file");
  }
  if (detail::read_be32(labels, 0) != kIdxLabelMagic) {
    throw BadMagicError(labels_path.string() + ": not an IDX label file");
  }
  if (images.size() < 16) throw TruncatedFileError(images_path.string() + ": truncated header");
  if (labels.size() < 8) throw TruncatedFileError(labels_path.string() + ": truncated header");

  const std::size_t count = detail::read_be32(images, 4);
  const auto rows = static_cast<int>(detail::read_be32(images, 8));
  const auto cols = static_cast<int>(detail::read_be32(images, 12));
  const std::size_t label_count = detail::read_be32(labels, 4);
  if (count != label_count) {
    throw CountMismatchError("IDX counts differ: " + std::to_string(count) + " images vs " +
                             std::to_string(label_count) + " labels");
  }
  const std::size_t plane = static_cast<std::size_t>(rows) * cols;
  if (images.size() < 16 + count * plane) {
    throw TruncatedFileError(images_path.string() + ": expected " + std::to_string(count) +
                             " images of " + std::to_string(plane) + " bytes");
  }
  if (labels.size() < 8 + count) throw TruncatedFileError(labels_path.string() + ": too few labels");

  std::vector<RawDigit> out(count);
  for (std::size_t n = 0; n < count; ++n) {
    out[n].label = labels[8 + n];
    out[n].pixels = Image(rows, cols);
    const unsigned char* src = images.data() + 16 + n * plane;
    for (std::size_t i = 0; i < plane; ++i) out[n].pixels.pixels[i] = src[i] / 255.0;
  }
  return out;
}

/// Rotation about the image centre with bilinear interpolation; samples that
/// fall outside the source read as 0.
inline Image rotate_image(const Image& img, double angle) {
  if (!std::isfinite(angle)) throw std::invalid_argument("rotation angle must be finite");
  Image out(img.height, img.width);
  const double cy = (img.height - 1) / 2.0;
  const double cx = (img.width - 1) / 2.0;
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  auto sample = [&](int y, int x) {
    return (y < 0 || y >= img.height || x < 0 || x >= img.width) ? 0.0 : img.at(y, x);
  };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      // Inverse map: output (x, y) reads the source rotated by -angle.
      const double dx = x - cx;
      const double dy = y - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const double fx = std::floor(sx);
      const double fy = std::floor(sy);
      const double ax = sx - fx;
      const double ay = sy - fy;
      const int x0 = static_cast<int>(fx);
      const int y0 = static_cast<int>(fy);
      double v = (1.0 - ay) * ((1.0 - ax) * sample(y0, x0) + ax * sample(y0, x0 + 1)) +
                 ay * ((1.0 - ax) * sample(y0 + 1, x0) + ax * sample(y0 + 1, x0 + 1));
      out.at(y, x) = std::clamp(v, 0.0, 1.0);
    }
  }
  return out;
}

enum class Split : std::uint8_t { Train = 0, Test = 1, Extrapolation = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Test:
      return "test";
    case Split::Extrapolation:
      return "extrapolation";
  }
  return "?";
}

/// Rotated copies of P digit instances on a shared Q-angle grid. Image n has
/// auxiliary point aux[n] and split tag split[n].
struct RotatedDataset {
  std::uint64_t seed = 0;
  int digit_label = 3;
  int num_digits = 0;  // P
  int num_angles = 0;  // Q
  int height = 28;
  int width = 28;
  std::vector<double> angle_grid;
  std::vector<int> source_index;  // raw-corpus index of each digit instance
  std::vector<Image> images;
  std::vector<AuxPoint> aux;
  std::vector<Split> split;

  [[nodiscard]] std::size_t size() const { return images.size(); }
  [[nodiscard]] std::size_t count(Split s) const {
    return static_cast<std::size_t>(std::count(split.begin(), split.end(), s));
  }
  friend bool operator==(const RotatedDataset&, const RotatedDataset&) = default;
};

struct BuildOptions {
  int digit_label = 3;
  int num_digits = 400;
  int num_angles = 16;
  /// Digits with a train/test angle split; the rest are reserved for
  /// extrapolation. Negative selects round(P * 270 / 400).
  int train_digits = -1;
  std::uint64_t seed = 0;

  [[nodiscard]] int resolved_train_digits() const {
    if (train_digits >= 0) return std::min(train_digits, num_digits);
    return static_cast<int>(std::lround(num_digits * 270.0 / 400.0));
  }
};

inline std::vector<double> uniform_angle_grid(int q) {
  std::vector<double> grid(static_cast<std::size_t>(q));
  for (int i = 0; i < q; ++i) grid[static_cast<std::size_t>(i)] = 2.0 * std::numbers::pi * i / q;
  return grid;
}

inline RotatedDataset build_rotated_dataset(const std::vector<RawDigit>& raws,
                                            const BuildOptions& opt) {
  if (opt.num_digits < 1 || opt.num_angles < 1) {
    throw ConfigError("dataset needs at least one digit and one angle");
  }
  std::vector<int> candidates;
  for (std::size_t i = 0; i < raws.size(); ++i) {
    if (raws[i].label == opt.digit_label) candidates.push_back(static_cast<int>(i));
  }
  if (static_cast<int>(candidates.size()) < opt.num_digits) {
    throw InsufficientDigitsError("requested " + std::to_string(opt.num_digits) +
                                  " instances of digit " + std::to_string(opt.digit_label) +
                                  ", corpus has " + std::to_string(candidates.size()));
  }
  std::mt19937_64 rng(opt.seed);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  candidates.resize(static_cast<std::size_t>(opt.num_digits));

  RotatedDataset ds;
  ds.seed = opt.seed;
  ds.digit_label = opt.digit_label;
  ds.num_digits = opt.num_digits;
  ds.num_angles = opt.num_angles;
  ds.height = raws[static_cast<std::size_t>(candidates.front())].pixels.height;
  ds.width = raws[static_cast<std::size_t>(candidates.front())].pixels.width;
  ds.angle_grid = uniform_angle_grid(opt.num_angles);
  ds.source_index = candidates;

  const int train_digits = opt.resolved_train_digits();
  std::uniform_int_distribution<int> pick_angle(0, opt.num_angles - 1);
  for (int p = 0; p < opt.num_digits; ++p) {
    const Image& base = raws[static_cast<std::size_t>(candidates[static_cast<std::size_t>(p)])].pixels;
    const bool in_train = p < train_digits;
    const int held_out = in_train ? pick_angle(rng) : -1;
    for (int q = 0; q < opt.num_angles; ++q) {
      const double w = ds.angle_grid[static_cast<std::size_t>(q)];
      ds.images.push_back(rotate_image(base, w));
      ds.aux.push_back({p, w});
      ds.split.push_back(!in_train ? Split::Extrapolation : (q == held_out ? Split::Test : Split::Train));
    }
  }
  return ds;
}

/// All images of one digit instance, ordered by angle.
struct DigitSubset {
  int digit = 0;
  std::vector<Image> images;
  std::vector<AuxPoint> aux;
  std::vector<std::size_t> indices;  // positions in the source dataset
  std::vector<Split> split;

  [[nodiscard]] std::size_t size() const { return images.size(); }
};

namespace detail {

template <typename Keep>
std::vector<DigitSubset> group_by_digit(const RotatedDataset& ds, Keep keep) {
  std::vector<std::vector<std::size_t>> members(static_cast<std::size_t>(ds.num_digits));
  for (std::size_t n = 0; n < ds.size(); ++n) {
    const int d = ds.aux[n].digit;
    if (d < 0 || d >= ds.num_digits) throw DataError("digit id out of range in dataset");
    if (keep(n)) members[static_cast<std::size_t>(d)].push_back(n);
  }
  std::vector<DigitSubset> out;
  for (int d = 0; d < ds.num_digits; ++d) {
    auto& idx = members[static_cast<std::size_t>(d)];
    if (idx.empty()) continue;
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return ds.aux[a].angle < ds.aux[b].angle; });
    DigitSubset s;
    s.digit = d;
    for (std::size_t n : idx) {
      s.images.push_back(ds.images[n]);
      s.aux.push_back(ds.aux[n]);
      s.indices.push_back(n);
      s.split.push_back(ds.split[n]);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline std::vector<DigitSubset> partition_by_digit(const RotatedDataset& ds) {
  return detail::group_by_digit(ds, [](std::size_t) { return true; });
}

/// Per-digit subsets restricted to images carrying `tag`.
inline std::vector<DigitSubset> subsets_with_split(const RotatedDataset& ds, Split tag) {
  return detail::group_by_digit(ds, [&](std::size_t n) { return ds.split[n] == tag; });
}

// --- FGPDATA1 container ---------------------------------------------------

inline constexpr std::array<char, 8> kDatasetMagic = {'F', 'G', 'P', 'D', 'A', 'T', 'A', '1'};
inline constexpr std::uint32_t kDatasetVersion = 1;

inline void save_dataset(const RotatedDataset& ds, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kDatasetMagic.data(), kDatasetMagic.size());
  w.u32(kDatasetVersion);
  w.u64(ds.seed);
  w.i32(ds.digit_label);
  w.i32(ds.num_digits);
  w.i32(ds.num_angles);
  w.i32(ds.height);
  w.i32(ds.width);
  w.u64(ds.size());
  for (double a : ds.angle_grid) w.f64(a);
  for (int s : ds.source_index) w.i32(s);
  for (std::size_t n = 0; n < ds.size(); ++n) {
    w.i32(ds.aux[n].digit);
    w.f64(ds.aux[n].angle);
    w.u8(static_cast<std::uint8_t>(ds.split[n]));
    for (double v : ds.images[n].pixels) w.f64(v);
  }
  write_file_atomic(path, w.buffer());
}

inline RotatedDataset load_dataset(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  ByteReader r(bytes, path.string());
  std::array<char, 8> magic{};
  r.bytes(magic.data(), magic.size());
  if (magic != kDatasetMagic) throw BadMagicError(path.string() + ": not an FGPDATA1 dataset");
  const std::uint32_t version = r.u32();
  if (version != kDatasetVersion) {
    throw VersionError(path.string() + ": unsupported dataset version " + std::to_string(version));
  }
  RotatedDataset ds;
  ds.seed = r.u64();
  ds.digit_label = r.i32();
  ds.num_digits = r.i32();
  ds.num_angles = r.i32();
  ds.height = r.i32();
  ds.width = r.i32();
  const std::uint64_t n_images = r.u64();
  if (ds.num_digits < 0 || ds.num_angles < 0 || ds.height <= 0 || ds.width <= 0) {
    throw DataError(path.string() + ": corrupt dataset header");
  }
  const std::size_t plane = static_cast<std::size_t>(ds.height) * ds.width;
  if (n_images > bytes.size() / (plane * 8 + 13)) {
    throw TruncatedFileError(path.string() + ": image count exceeds file size");
  }
  ds.angle_grid.resize(static_cast<std::size_t>(ds.num_angles));
  for (double& a : ds.angle_grid) a = r.f64();
  ds.source_index.resize(static_cast<std::size_t>(ds.num_digits));
  for (int& s : ds.source_index) s = r.i32();
  ds.images.reserve(n_images);
  for (std::uint64_t n = 0; n < n_images; ++n) {
    AuxPoint x;
    x.digit = r.i32();
    x.angle = r.f64();
    const std::uint8_t tag = r.u8();
    if (tag > 2) throw DataError(path.string() + ": invalid split tag");
    Image img(ds.height, ds.width);
    for (double& v : img.pixels) v = r.f64();
    ds.aux.push_back(x);
    ds.split.push_back(static_cast<Split>(tag));
    ds.images.push_back(std::move(img));
  }
  if (!r.at_end()) throw DataError(path.string() + ": trailing bytes after dataset");
  return ds;
}

}  // namespace fgpvae
