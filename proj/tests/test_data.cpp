#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "fgpvae/data.hpp"
#include "support/oracles.hpp"

using namespace fgpvae;
namespace fs = std::filesystem;
using std::numbers::pi;

namespace {

const fs::path kMnist = FGPVAE_MNIST_DIR;

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("fgpvae_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void put_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& b) {
  std::ofstream(p, std::ios::binary).write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

// Two 2x2 images with labels {3, 3}.
struct TinyIdx {
  std::vector<unsigned char> images, labels;
  TinyIdx() {
    put_be32(images, 0x803);
    put_be32(images, 2);
    put_be32(images, 2);
    put_be32(images, 2);
    for (unsigned char v : {0, 255, 128, 1, 7, 8, 9, 10}) images.push_back(v);
    put_be32(labels, 0x801);
    put_be32(labels, 2);
    labels.push_back(3);
    labels.push_back(3);
  }
};

std::vector<RawDigit> synthetic_corpus(int n, int label = 3) {
  std::vector<RawDigit> raws;
  for (int i = 0; i < n; ++i) {
    Image img(28, 28);
    for (int y = 8; y < 20; ++y) {
      for (int x = 10 + i % 3; x < 16 + i % 5; ++x) img.at(y, x) = 0.5 + 0.5 * ((x + y + i) % 2);
    }
    raws.push_back({img, label});
  }
  return raws;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

}  // namespace

TEST(LoadIdx, ScalesEndpoints) {
  const auto dir = temp_dir("idx_ok");
  TinyIdx t;
  write_bytes(dir / "img", t.images);
  write_bytes(dir / "lbl", t.labels);
  const auto raws = load_idx(dir / "img", dir / "lbl");
  ASSERT_EQ(raws.size(), 2u);
  EXPECT_EQ(raws[0].pixels.pixels[0], 0.0);
  EXPECT_EQ(raws[0].pixels.pixels[1], 1.0);
  EXPECT_EQ(raws[0].pixels.pixels[2], 128.0 / 255.0);
  EXPECT_EQ(raws[1].label, 3);
}

TEST(LoadIdx, Errors) {
  const auto dir = temp_dir("idx_err");
  TinyIdx t;
  auto truncated = t.images;
  truncated.resize(truncated.size() - 3);
  write_bytes(dir / "trunc", truncated);
  write_bytes(dir / "lbl", t.labels);
  EXPECT_THROW(load_idx(dir / "trunc", dir / "lbl"), TruncatedFileError);

  auto bad = t.images;
  bad[3] = 0x04;
  write_bytes(dir / "bad", bad);
  EXPECT_THROW(load_idx(dir / "bad", dir / "lbl"), BadMagicError);

  auto labels3 = t.labels;
  labels3[7] = 3;
  labels3.push_back(3);
  write_bytes(dir / "lbl3", labels3);
  write_bytes(dir / "img", t.images);
  EXPECT_THROW(load_idx(dir / "img", dir / "lbl3"), CountMismatchError);
  EXPECT_THROW(load_idx(dir / "missing", dir / "lbl"), DataError);
}

TEST(LoadIdx, RealFileMatchesItsHeader) {
  const auto img_path = kMnist / "train-images-idx3-ubyte";
  if (!fs::exists(img_path)) GTEST_SKIP() << "MNIST not present at " << kMnist;
  std::ifstream in(img_path, std::ios::binary);
  unsigned char h[16];
  in.read(reinterpret_cast<char*>(h), 16);
  auto be = [&](int o) { return (std::uint32_t{h[o]} << 24) | (h[o + 1] << 16) | (h[o + 2] << 8) | h[o + 3]; };
  const auto raws = load_idx(img_path, kMnist / "train-labels-idx1-ubyte");
  EXPECT_EQ(be(0), 0x803u);
  EXPECT_EQ(raws.size(), be(4));
  for (const auto& r : raws) {
    ASSERT_EQ(r.pixels.height, static_cast<int>(be(8)));
    ASSERT_EQ(r.pixels.width, static_cast<int>(be(12)));
    ASSERT_GE(r.label, 0);
    ASSERT_LE(r.label, 9);
  }
}

TEST(RotateImage, ZeroIsIdentity) {
  const auto img = synthetic_corpus(1)[0].pixels;
  EXPECT_EQ(rotate_image(img, 0.0), img);
}

TEST(RotateImage, FullTurn) {
  const auto img = oracle::blob_image(28, 28, 0.3);
  EXPECT_LE(max_abs_diff(rotate_image(img, 2 * pi), img), 1e-6);
}

TEST(RotateImage, TwoHalfTurns) {
  const auto img = synthetic_corpus(2)[1].pixels;
  EXPECT_LE(max_abs_diff(rotate_image(rotate_image(img, pi), pi), img), 1e-6);
}

TEST(RotateImage, QuarterTurnMovesPixels) {
  Image img(28, 28);
  img.at(5, 13) = 1.0;
  const Image r = rotate_image(img, pi / 2);
  double total = 0.0;
  for (double v : r.pixels) total += v;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_EQ(r.at(5, 13), 0.0);
}

TEST(RotateImage, RangeAndEnergyOnCorpus) {
  const auto img_path = kMnist / "train-images-idx3-ubyte";
  if (!fs::exists(img_path)) GTEST_SKIP() << "MNIST not present at " << kMnist;
  const auto raws = load_idx(img_path, kMnist / "train-labels-idx1-ubyte");
  double ratio_sum = 0.0;
  int n = 0;
  for (std::size_t i = 0; i < 200; ++i) {
    const Image& img = raws[i].pixels;
    double e0 = 0.0;
    for (double v : img.pixels) e0 += v * v;
    for (double w : uniform_angle_grid(16)) {
      const Image r = rotate_image(img, w);
      double e = 0.0;
      for (double v : r.pixels) {
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, 1.0);
        e += v * v;
      }
      ratio_sum += e / e0;
      ++n;
    }
  }
  EXPECT_NEAR(ratio_sum / n, 1.0, 0.2);
}

TEST(BuildRotatedDataset, PaperCounts) {
  const auto ds = build_rotated_dataset(synthetic_corpus(400), {3, 400, 16, -1, 5});
  EXPECT_EQ(ds.size(), 6400u);
  EXPECT_EQ(ds.count(Split::Train), 4050u);
  EXPECT_EQ(ds.count(Split::Test), 270u);
  EXPECT_EQ(ds.count(Split::Extrapolation), 2080u);
  for (std::size_t i = 1; i < ds.angle_grid.size(); ++i) EXPECT_GT(ds.angle_grid[i], ds.angle_grid[i - 1]);
  EXPECT_EQ(ds.angle_grid.front(), 0.0);
  EXPECT_LT(ds.angle_grid.back(), 2 * pi);
}

TEST(BuildRotatedDataset, OneTestAnglePerTrainingDigit) {
  const auto ds = build_rotated_dataset(synthetic_corpus(40), {3, 40, 16, -1, 9});
  for (const auto& s : partition_by_digit(ds)) {
    const auto tests = std::count(s.split.begin(), s.split.end(), Split::Test);
    const auto extra = std::count(s.split.begin(), s.split.end(), Split::Extrapolation);
    EXPECT_TRUE((tests == 1 && extra == 0) || (tests == 0 && extra == 16));
  }
}

TEST(BuildRotatedDataset, DeterministicUnderSeed) {
  const auto raws = synthetic_corpus(60);
  const auto a = build_rotated_dataset(raws, {3, 50, 16, -1, 7});
  const auto b = build_rotated_dataset(raws, {3, 50, 16, -1, 7});
  EXPECT_EQ(a, b);
  const auto c = build_rotated_dataset(raws, {3, 50, 16, -1, 8});
  EXPECT_NE(a.split, c.split);
}

TEST(BuildRotatedDataset, ToyBuild) {
  const auto ds = build_rotated_dataset(synthetic_corpus(2), {3, 2, 2, -1, 0});
  EXPECT_EQ(ds.size(), 4u);
  const auto parts = partition_by_digit(ds);
  ASSERT_EQ(parts.size(), 2u);
  EXPECT_EQ(parts[0].size(), 2u);
  EXPECT_EQ(parts[1].size(), 2u);
}

TEST(BuildRotatedDataset, InsufficientDigits) {
  auto raws = synthetic_corpus(10);
  raws.push_back({Image(28, 28), 5});
  EXPECT_THROW(build_rotated_dataset(raws, {3, 11, 4, -1, 0}), InsufficientDigitsError);
  EXPECT_NO_THROW(build_rotated_dataset(raws, {5, 1, 4, -1, 0}));
}

TEST(PartitionByDigit, ExhaustiveDisjointSorted) {
  auto ds = build_rotated_dataset(synthetic_corpus(3), {3, 3, 5, -1, 1});
  // Shuffle storage order to exercise the sort.
  std::mt19937_64 rng(2);
  std::vector<std::size_t> perm(ds.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  RotatedDataset shuffled = ds;
  for (std::size_t i = 0; i < perm.size(); ++i) {
    shuffled.images[i] = ds.images[perm[i]];
    shuffled.aux[i] = ds.aux[perm[i]];
    shuffled.split[i] = ds.split[perm[i]];
  }
  const auto parts = partition_by_digit(shuffled);
  ASSERT_EQ(parts.size(), 3u);
  std::vector<int> seen(shuffled.size(), 0);
  for (const auto& s : parts) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      ++seen[s.indices[i]];
      EXPECT_EQ(shuffled.aux[s.indices[i]].digit, s.digit);
      if (i > 0) EXPECT_LT(s.aux[i - 1].angle, s.aux[i].angle);
    }
  }
  for (int c : seen) EXPECT_EQ(c, 1);
}

TEST(DatasetFile, RoundTripIsBitExact) {
  const auto dir = temp_dir("ds_rt");
  const auto ds = build_rotated_dataset(synthetic_corpus(6), {3, 6, 5, -1, 123});
  save_dataset(ds, dir / "d.bin");
  const auto back = load_dataset(dir / "d.bin");
  EXPECT_EQ(back, ds);
  EXPECT_EQ(back.seed, 123u);
  EXPECT_EQ(back.num_angles, 5);
  EXPECT_EQ(back.angle_grid.size(), 5u);
  EXPECT_FALSE(fs::exists(dir / "d.bin.tmp"));
}

TEST(DatasetFile, Errors) {
  const auto dir = temp_dir("ds_err");
  const auto ds = build_rotated_dataset(synthetic_corpus(2), {3, 2, 3, -1, 0});
  save_dataset(ds, dir / "d.bin");
  std::ifstream in(dir / "d.bin", std::ios::binary);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), {}};

  auto bad = bytes;
  bad[0] = 'X';
  write_bytes(dir / "magic.bin", bad);
  EXPECT_THROW(load_dataset(dir / "magic.bin"), BadMagicError);

  auto ver = bytes;
  ver[8] = 9;
  write_bytes(dir / "ver.bin", ver);
  EXPECT_THROW(load_dataset(dir / "ver.bin"), VersionError);

  auto cut = bytes;
  cut.resize(cut.size() - 100);
  write_bytes(dir / "cut.bin", cut);
  EXPECT_THROW(load_dataset(dir / "cut.bin"), TruncatedFileError);
}
