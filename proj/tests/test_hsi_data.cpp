#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "convsst/error.hpp"
#include "convsst/hsi_data.hpp"
#include "json.hpp"

using namespace convsst;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("convsst_test_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Dataset, SaveLoadRoundTripIsBitExact) {
  Rng rng(1);
  const Dataset ds = make_synthetic({16, 16, 8, 3, 0.05}, rng);
  const fs::path dir = temp_dir("roundtrip");
  save_dataset(ds, dir);
  const Dataset back = load_dataset(dir);
  EXPECT_EQ(back.cube.values, ds.cube.values);
  EXPECT_EQ(back.labels.labels, ds.labels.labels);
  EXPECT_EQ(back.meta.num_classes, 3u);
  EXPECT_EQ(back.meta.class_names, ds.meta.class_names);
}

TEST(Dataset, SizeMismatchIsReported) {
  Rng rng(2);
  const fs::path dir = temp_dir("mismatch");
  save_dataset(make_synthetic({4, 4, 3, 2, 0.0}, rng), dir);
  fs::resize_file(dir / "cube.f32", 4 * 4 * 3 * 4 - 4);
  EXPECT_THROW(load_dataset(dir), DataError);
}

TEST(Dataset, MissingFilesAndBadLabels) {
  EXPECT_THROW(load_dataset(temp_dir("absent")), DataError);
  Rng rng(3);
  const fs::path dir = temp_dir("badlabel");
  Dataset ds = make_synthetic({4, 4, 3, 2, 0.0}, rng);
  ds.labels.labels[5] = 3;
  save_dataset(ds, dir);
  EXPECT_THROW(load_dataset(dir), DataError);
}

TEST(Dataset, HoustonShapedHeaderIsAccepted) {
  const fs::path dir = temp_dir("houston");
  fs::create_directories(dir);
  const std::size_t h = 340, w = 1905, b = 144;
  nlohmann::json header{{"height", h}, {"width", w}, {"bands", b}, {"num_classes", 15}, {"name", "houston"},
                        {"class_names", std::vector<std::string>(15, "c")}};
  std::ofstream(dir / "header.json") << header.dump();
  {
    std::ofstream cube(dir / "cube.f32", std::ios::binary);
    const std::vector<char> zeros(h * w * b * 4, 0);
    cube.write(zeros.data(), static_cast<std::streamsize>(zeros.size()));
    std::ofstream labels(dir / "labels.u16", std::ios::binary);
    const std::vector<char> lz(h * w * 2, 0);
    labels.write(lz.data(), static_cast<std::streamsize>(lz.size()));
  }
  const Dataset ds = load_dataset(dir);
  EXPECT_EQ(ds.cube.height, h);
  EXPECT_EQ(ds.cube.width, w);
  EXPECT_EQ(ds.cube.bands, b);
  EXPECT_EQ(ds.meta.num_classes, 15u);
  fs::remove_all(dir);
}

TEST(Normalize, PerBandMinMax) {
  HsiCube cube(1, 3, 3);
  const float band0[] = {2, 4, 6}, band2[] = {0, 1, 0.25f};
  for (std::size_t c = 0; c < 3; ++c) {
    cube.at(0, c, 0) = band0[c];
    cube.at(0, c, 1) = 7.0f;
    cube.at(0, c, 2) = band2[c];
  }
  const HsiCube n = normalize(cube);
  EXPECT_FLOAT_EQ(n.at(0, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(n.at(0, 1, 0), 0.5f);
  EXPECT_FLOAT_EQ(n.at(0, 2, 0), 1.0f);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(n.at(0, c, 1), 0.0f);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(n.at(0, c, 2), band2[c]);
}

TEST(Patch, CenterEqualsCubePixel) {
  Rng rng(4);
  const Dataset ds = make_synthetic({9, 7, 5, 2, 0.1}, rng);
  for (auto [r, c] : {std::pair<std::size_t, std::size_t>{0, 0}, {4, 3}, {8, 6}}) {
    const Tensor<float> p = extract_patch(ds.cube, r, c, 5);
    for (std::size_t b = 0; b < 5; ++b) EXPECT_EQ(p.at(2, 2, b), ds.cube.at(r, c, b));
  }
}

TEST(Patch, CornerUsesMirrorReflection) {
  Rng rng(5);
  const Dataset ds = make_synthetic({6, 6, 4, 2, 0.1}, rng);
  const Tensor<float> p = extract_patch(ds.cube, 0, 0, 3);
  for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(p.at(0, 0, b), ds.cube.at(1, 1, b));
  EXPECT_EQ(reflect_index(-1, 6), 1u);
  EXPECT_EQ(reflect_index(6, 6), 4u);
  EXPECT_EQ(reflect_index(-2, 6), 2u);
}

TEST(Patch, InteriorIsPlainWindowAndPure) {
  Rng rng(6);
  const Dataset ds = make_synthetic({12, 12, 3, 2, 0.1}, rng);
  const Tensor<float> p = extract_patch(ds.cube, 6, 5, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t b = 0; b < 3; ++b) EXPECT_EQ(p.at(i, j, b), ds.cube.at(4 + i, 3 + j, b));
  EXPECT_EQ(extract_patch(ds.cube, 6, 5, 5), p);
}

TEST(Patch, RejectsEvenWindowAndOutsideCenter) {
  HsiCube cube(4, 4, 2);
  EXPECT_THROW(extract_patch(cube, 1, 1, 4), Error);
  EXPECT_THROW(extract_patch(cube, 4, 0, 3), Error);
}

TEST(Patch, WindowLargerThanImageStaysInside) {
  Rng rng(7);
  const Dataset ds = make_synthetic({3, 3, 2, 1, 0.1}, rng);
  const Tensor<float> p = extract_patch(ds.cube, 0, 2, 11);
  EXPECT_TRUE(p.all_finite());
  EXPECT_EQ(p.shape(), (Shape{11, 11, 2}));
}

TEST(Split, ComplementAndPartition) {
  LabelMap labels(4, 5);
  for (std::size_t p = 0; p < 10; ++p) labels.labels[p] = 1;
  for (std::size_t p = 10; p < 17; ++p) labels.labels[p] = 2;
  Rng rng(8);
  const std::size_t counts[] = {4, 2};
  const DatasetSplit s = make_split(labels, 2, counts, rng);
  EXPECT_EQ(s.train_counts, (std::vector<std::size_t>{4, 2}));
  EXPECT_EQ(s.test_counts, (std::vector<std::size_t>{6, 5}));

  std::set<std::pair<std::size_t, std::size_t>> seen;
  for (const auto* side : {&s.train, &s.test})
    for (const auto& px : *side) {
      EXPECT_TRUE(seen.insert({px.row, px.col}).second);
      EXPECT_EQ(labels.at(px.row, px.col), px.label + 1);
    }
  EXPECT_EQ(seen.size(), 17u);
}

TEST(Split, SameSeedSameSplitAndOverdraw) {
  Rng rng(9);
  const Dataset ds = make_synthetic({10, 10, 3, 4, 0.0}, rng);
  Rng a(5), b(5);
  EXPECT_EQ(make_split(ds.labels, 4, 0.3, a).train, make_split(ds.labels, 4, 0.3, b).train);
  const std::size_t too_many[] = {26, 1, 1, 1};
  Rng c(5);
  EXPECT_THROW(make_split(ds.labels, 4, too_many, c), DataError);
}

TEST(Split, PublishedCounts) {
  auto sum = [](const std::vector<std::size_t>& v) { return std::accumulate(v.begin(), v.end(), std::size_t{0}); };
  EXPECT_EQ(reference_train_counts("houston").size(), 15u);
  EXPECT_EQ(sum(reference_train_counts("houston")), 2832u);
  EXPECT_EQ(sum(reference_test_counts("houston")), 12197u);
  EXPECT_EQ(reference_train_counts("muufl").size(), 11u);
  EXPECT_EQ(reference_train_counts("botswana").size(), 14u);
  EXPECT_THROW(reference_train_counts("pavia"), Error);
}

TEST(Synthetic, NoiselessClassesShareSpectrum) {
  Rng rng(10);
  const Dataset ds = make_synthetic({8, 8, 12, 3, 0.0}, rng);
  std::vector<std::vector<float>> first(3);
  for (std::size_t p = 0; p < 64; ++p) {
    const std::size_t c = ds.labels.labels[p] - 1u;
    const auto px = ds.cube.pixel(p / 8, p % 8);
    if (first[c].empty()) {
      first[c].assign(px.begin(), px.end());
    } else {
      EXPECT_TRUE(std::equal(px.begin(), px.end(), first[c].begin()));
    }
    EXPECT_NE(ds.labels.labels[p], 0);
  }
}

TEST(Synthetic, TwoClassBumpsPeakAtQuarterPoints) {
  Rng rng(11);
  const std::size_t bands = 16;
  const Dataset ds = make_synthetic({4, 4, bands, 2, 0.0}, rng);
  const auto a = ds.cube.pixel(0, 0);   // class 1
  const auto b = ds.cube.pixel(3, 3);   // class 2
  // centers at (c + 0.5) * B / C, i.e. bands 4 and 12
  EXPECT_EQ(std::max_element(a.begin(), a.end()) - a.begin(), 4);
  EXPECT_EQ(std::max_element(b.begin(), b.end()) - b.begin(), 12);
  // bump width B / (2C) = 4 puts the other class two widths away
  EXPECT_NEAR(a[4] - b[4], 1.0 - std::exp(-2.0), 1e-5);
  EXPECT_NEAR(b[12] - a[12], 1.0 - std::exp(-2.0), 1e-5);
}

TEST(Synthetic, NearestClassMeanIsPerfectWithoutNoise) {
  Rng rng(12);
  const Dataset ds = make_synthetic({16, 16, 12, 5, 0.0}, rng);
  const HsiCube cube = normalize(ds.cube);
  std::vector<std::vector<double>> mean(5, std::vector<double>(12, 0.0));
  std::vector<double> count(5, 0.0);
  for (std::size_t p = 0; p < 256; ++p) {
    const std::size_t c = ds.labels.labels[p] - 1u;
    for (std::size_t b = 0; b < 12; ++b) mean[c][b] += cube.values[p * 12 + b];
    count[c] += 1;
  }
  for (std::size_t c = 0; c < 5; ++c)
    for (auto& v : mean[c]) v /= count[c];
  for (std::size_t p = 0; p < 256; ++p) {
    std::size_t best = 0;
    double best_d = 1e300;
    for (std::size_t c = 0; c < 5; ++c) {
      double d = 0;
      for (std::size_t b = 0; b < 12; ++b) d += std::pow(cube.values[p * 12 + b] - mean[c][b], 2);
      if (d < best_d) best_d = d, best = c;
    }
    EXPECT_EQ(best + 1, ds.labels.labels[p]);
  }
  for (float v : cube.values.values()) {
    EXPECT_GE(v, 0.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(BatchIterator, FinalPartialBatchAndCoverage) {
  Rng rng(13);
  const Dataset ds = make_synthetic({10, 13, 3, 2, 0.0}, rng);
  const auto samples = labeled_pixels(ds.labels);
  ASSERT_EQ(samples.size(), 130u);
  BatchIterator<float> it(ds.cube, samples, 64, 3, true, 99);
  EXPECT_EQ(it.batches_per_epoch(), 3u);
  it.start_epoch();
  std::vector<std::size_t> sizes;
  std::set<std::pair<std::size_t, std::size_t>> seen;
  while (auto b = it.next()) {
    sizes.push_back(b->labels.size());
    EXPECT_EQ(b->patches.shape(), (Shape{b->labels.size(), 3, 3, 3}));
  }
  for (const auto& s : it.order()) seen.insert({s.row, s.col});
  EXPECT_EQ(sizes, (std::vector<std::size_t>{64, 64, 2}));
  EXPECT_EQ(seen.size(), 130u);
}

TEST(BatchIterator, ShuffleOffIsStableAndSeedsRepeat) {
  Rng rng(14);
  const Dataset ds = make_synthetic({6, 6, 2, 2, 0.0}, rng);
  const auto samples = labeled_pixels(ds.labels);
  BatchIterator<float> fixed(ds.cube, samples, 8, 1, false, 1);
  fixed.start_epoch();
  const std::vector<PixelSample> first(fixed.order().begin(), fixed.order().end());
  fixed.start_epoch();
  EXPECT_TRUE(std::equal(first.begin(), first.end(), fixed.order().begin()));
  EXPECT_EQ(first, samples);

  BatchIterator<float> a(ds.cube, samples, 8, 1, true, 5), b(ds.cube, samples, 8, 1, true, 5);
  for (int epoch = 0; epoch < 3; ++epoch) {
    a.start_epoch();
    b.start_epoch();
    EXPECT_TRUE(std::equal(a.order().begin(), a.order().end(), b.order().begin()));
  }
}
