#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "convsst/tensor.hpp"

namespace convsst {

/// H x W x B radiance cube stored band-interleaved-by-pixel.
struct HsiCube {
  std::size_t height = 0, width = 0, bands = 0;
  Tensor<float> values;  // [H x W x B]

  HsiCube() = default;
  HsiCube(std::size_t h, std::size_t w, std::size_t b) : height(h), width(w), bands(b), values({h, w, b}) {}

  float at(std::size_t row, std::size_t col, std::size_t band) const {
    return values[(row * width + col) * bands + band];
  }
  float& at(std::size_t row, std::size_t col, std::size_t band) { return values[(row * width + col) * bands + band]; }
  std::span<const float> pixel(std::size_t row, std::size_t col) const {
    return values.values().subspan((row * width + col) * bands, bands);
  }
};

/// Per-pixel class ids: 0 = unlabeled, 1..C = classes.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w) : height(h), width(w), labels(h * w, 0) {}

  std::uint16_t at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
  std::uint16_t& at(std::size_t row, std::size_t col) { return labels[row * width + col]; }
};

struct DatasetMeta {
  std::string name;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;
};

struct Dataset {
  HsiCube cube;
  LabelMap labels;
  DatasetMeta meta;
};

// Directory layout: header.json, cube.f32 (LE float32, BIP), labels.u16
// (LE uint16, row-major).
Dataset load_dataset(const std::filesystem::path& dir);
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Per-band min-max scaling to [0, 1]; constant bands become 0.
HsiCube normalize(const HsiCube& cube);

/// Mirror reflection of index i into [0, n) without repeating the edge
/// sample (-1 -> 1, n -> n - 2).
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n);

/// window x window x B patch centered on (row, col), mirror-padded at borders.
Tensor<float> extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t window);

/// A labeled pixel; `label` is the 0-based class index.
struct PixelSample {
  std::size_t row = 0, col = 0;
  std::int32_t label = 0;

  friend bool operator==(const PixelSample&, const PixelSample&) = default;
};

struct DatasetSplit {
  std::vector<PixelSample> train;
  std::vector<PixelSample> test;
  std::vector<std::size_t> train_counts;  // per class
  std::vector<std::size_t> test_counts;
};

/// Every labeled pixel in row-major order.
std::vector<PixelSample> labeled_pixels(const LabelMap& labels);

/// Stratified random split with an exact train count per class; the rest of
/// each class goes to test.
DatasetSplit make_split(const LabelMap& labels, std::size_t classes, std::span<const std::size_t> train_counts,
                        Rng& rng);
/// Same, with round(fraction * class size) train pixels per class (at least one).
DatasetSplit make_split(const LabelMap& labels, std::size_t classes, double train_fraction, Rng& rng);

/// Published per-class train counts for "houston", "muufl" or "botswana".
std::vector<std::size_t> reference_train_counts(std::string_view dataset);
/// Matching per-class test counts.
std::vector<std::size_t> reference_test_counts(std::string_view dataset);

struct SyntheticSpec {
  std::size_t height = 16, width = 16, bands = 12, classes = 3;
  double noise = 0.05;
};

/// Each class gets a Gaussian spectral bump centered at band (c + 0.5) * B / C
/// over a contiguous raster-order region of the image; i.i.d. normal noise of
/// standard deviation `noise` is added. Every pixel is labeled.
Dataset make_synthetic(const SyntheticSpec& spec, Rng& rng);

template <typename Scalar>
struct Batch {
  Tensor<Scalar> patches;  // [N x S x S x B]
  std::vector<std::int32_t> labels;
};

template <typename Scalar>
Batch<Scalar> assemble_batch(const HsiCube& cube, std::span<const PixelSample> samples, std::size_t window);

/// Epoch-wise mini-batch stream over a sample list. The final partial batch
/// is emitted.
template <typename Scalar>
class BatchIterator {
 public:
  BatchIterator(const HsiCube& cube, std::vector<PixelSample> samples, std::size_t batch_size, std::size_t window,
                bool shuffle, std::uint64_t seed);

  /// Rewinds, reshuffling when shuffling is on.
  void start_epoch();
  std::optional<Batch<Scalar>> next();
  std::size_t batches_per_epoch() const;
  std::span<const PixelSample> order() const { return samples_; }

 private:
  const HsiCube* cube_;
  std::vector<PixelSample> samples_;
  std::size_t batch_size_, window_;
  bool shuffle_;
  Rng rng_;
  std::size_t cursor_ = 0;
};

}  // namespace convsst
