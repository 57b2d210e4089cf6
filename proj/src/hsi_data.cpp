#include "convsst/hsi_data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <tuple>

#include "binary_io.hpp"
#include "convsst/error.hpp"
#include "json.hpp"

namespace convsst {
namespace fs = std::filesystem;

namespace {

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("missing dataset file: " + path.string());
  return in;
}

std::uintmax_t file_size_or_throw(const fs::path& path) {
  std::error_code ec;
  const auto size = fs::file_size(path, ec);
  if (ec) throw DataError("missing dataset file: " + path.string());
  return size;
}

std::size_t positive_field(const nlohmann::json& header, const char* key) {
  if (!header.contains(key) || !header[key].is_number_integer() || header[key].get<long long>() <= 0) {
    throw DataError(std::string("header.json: \"") + key + "\" must be a positive integer");
  }
  return header[key].get<std::size_t>();
}

}  // namespace

Dataset load_dataset(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());

  nlohmann::json header;
  {
    std::ifstream in = open_input(dir / "header.json");
    try {
      in >> header;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("header.json: " + std::string(e.what()));
    }
  }

  Dataset ds;
  const std::size_t h = positive_field(header, "height");
  const std::size_t w = positive_field(header, "width");
  const std::size_t b = positive_field(header, "bands");
  ds.meta.num_classes = positive_field(header, "num_classes");
  ds.meta.name = header.value("name", std::string{});
  if (header.contains("class_names")) ds.meta.class_names = header["class_names"].get<std::vector<std::string>>();

  const fs::path cube_path = dir / "cube.f32";
  const std::uintmax_t expected_cube = static_cast<std::uintmax_t>(h) * w * b * sizeof(float);
  if (file_size_or_throw(cube_path) != expected_cube) {
    throw DataError("size mismatch: cube.f32 has " + std::to_string(file_size_or_throw(cube_path)) +
                    " bytes, header implies " + std::to_string(expected_cube));
  }
  const fs::path label_path = dir / "labels.u16";
  const std::uintmax_t expected_labels = static_cast<std::uintmax_t>(h) * w * sizeof(std::uint16_t);
  if (file_size_or_throw(label_path) != expected_labels) {
    throw DataError("size mismatch: labels.u16 has " + std::to_string(file_size_or_throw(label_path)) +
                    " bytes, header implies " + std::to_string(expected_labels));
  }

  ds.cube = HsiCube(h, w, b);
  {
    std::ifstream in = open_input(cube_path);
    for (float& v : ds.cube.values.values()) {
      if (!detail::read_le(in, v)) throw DataError("truncated cube.f32");
      if (!std::isfinite(v)) throw DataError("cube.f32 contains non-finite values");
    }
  }
  ds.labels = LabelMap(h, w);
  {
    std::ifstream in = open_input(label_path);
    for (std::uint16_t& v : ds.labels.labels) {
      if (!detail::read_le(in, v)) throw DataError("truncated labels.u16");
      if (v > ds.meta.num_classes) {
        throw DataError("label " + std::to_string(v) + " exceeds num_classes " + std::to_string(ds.meta.num_classes));
      }
    }
  }
  return ds;
}

void save_dataset(const Dataset& ds, const fs::path& dir) {
  if (ds.cube.values.size() != ds.cube.height * ds.cube.width * ds.cube.bands ||
      ds.labels.labels.size() != ds.cube.height * ds.cube.width || ds.labels.height != ds.cube.height ||
      ds.labels.width != ds.cube.width) {
    throw DataError("dataset cube and label map dimensions disagree");
  }
  fs::create_directories(dir);
  nlohmann::ordered_json header;
  header["height"] = ds.cube.height;
  header["width"] = ds.cube.width;
  header["bands"] = ds.cube.bands;
  header["num_classes"] = ds.meta.num_classes;
  header["class_names"] = ds.meta.class_names;
  header["name"] = ds.meta.name;
  {
    std::ofstream out(dir / "header.json", std::ios::binary);
    out << header.dump(2) << "\n";
    if (!out) throw DataError("cannot write " + (dir / "header.json").string());
  }
  {
    std::ofstream out(dir / "cube.f32", std::ios::binary);
    for (float v : ds.cube.values.values()) detail::write_le(out, v);
    if (!out) throw DataError("cannot write " + (dir / "cube.f32").string());
  }
  {
    std::ofstream out(dir / "labels.u16", std::ios::binary);
    for (std::uint16_t v : ds.labels.labels) detail::write_le(out, v);
    if (!out) throw DataError("cannot write " + (dir / "labels.u16").string());
  }
}

HsiCube normalize(const HsiCube& cube) {
  HsiCube out = cube;
  const std::size_t pixels = cube.height * cube.width;
  for (std::size_t b = 0; b < cube.bands; ++b) {
    float lo = std::numeric_limits<float>::infinity();
    float hi = -std::numeric_limits<float>::infinity();
    for (std::size_t p = 0; p < pixels; ++p) {
      lo = std::min(lo, cube.values[p * cube.bands + b]);
      hi = std::max(hi, cube.values[p * cube.bands + b]);
    }
    const double range = static_cast<double>(hi) - lo;
    for (std::size_t p = 0; p < pixels; ++p) {
      float& v = out.values[p * cube.bands + b];
      v = range > 0 ? static_cast<float>((static_cast<double>(v) - lo) / range) : 0.0f;
    }
  }
  return out;
}

std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  if (i >= static_cast<std::ptrdiff_t>(n)) i = period - i;
  return static_cast<std::size_t>(i);
}

Tensor<float> extract_patch(const HsiCube& cube, std::size_t row, std::size_t col, std::size_t window) {
  if (window % 2 == 0) throw DataError("patch window must be odd, got " + std::to_string(window));
  if (row >= cube.height || col >= cube.width) {
    throw DataError("patch center (" + std::to_string(row) + ", " + std::to_string(col) + ") outside cube");
  }
  const auto half = static_cast<std::ptrdiff_t>(window / 2);
  Tensor<float> patch({window, window, cube.bands});
  float* out = patch.data();
  for (std::size_t i = 0; i < window; ++i) {
    const std::size_t r = reflect_index(static_cast<std::ptrdiff_t>(row) - half + static_cast<std::ptrdiff_t>(i), cube.height);
    for (std::size_t j = 0; j < window; ++j) {
      const std::size_t c = reflect_index(static_cast<std::ptrdiff_t>(col) - half + static_cast<std::ptrdiff_t>(j), cube.width);
      const auto px = cube.pixel(r, c);
      out = std::copy(px.begin(), px.end(), out);
    }
  }
  return patch;
}

std::vector<PixelSample> labeled_pixels(const LabelMap& labels) {
  std::vector<PixelSample> out;
  for (std::size_t r = 0; r < labels.height; ++r)
    for (std::size_t c = 0; c < labels.width; ++c)
      if (const auto l = labels.at(r, c); l != 0) out.push_back({r, c, static_cast<std::int32_t>(l) - 1});
  return out;
}

namespace {

std::vector<std::vector<PixelSample>> by_class(const LabelMap& labels, std::size_t classes) {
  std::vector<std::vector<PixelSample>> out(classes);
  for (const auto& p : labeled_pixels(labels)) {
    if (static_cast<std::size_t>(p.label) >= classes) {
      throw DataError("label " + std::to_string(p.label + 1) + " exceeds " + std::to_string(classes) + " classes");
    }
    out[static_cast<std::size_t>(p.label)].push_back(p);
  }
  return out;
}

DatasetSplit split_with_counts(std::vector<std::vector<PixelSample>> pools, std::span<const std::size_t> counts, Rng& rng) {
  DatasetSplit split;
  for (std::size_t c = 0; c < pools.size(); ++c) {
    auto& pool = pools[c];
    if (counts[c] > pool.size()) {
      throw DataError("class " + std::to_string(c + 1) + " has " + std::to_string(pool.size()) +
                      " labeled pixels, " + std::to_string(counts[c]) + " requested for training");
    }
    std::shuffle(pool.begin(), pool.end(), rng);
    split.train.insert(split.train.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(counts[c]));
    split.test.insert(split.test.end(), pool.begin() + static_cast<std::ptrdiff_t>(counts[c]), pool.end());
    split.train_counts.push_back(counts[c]);
    split.test_counts.push_back(pool.size() - counts[c]);
  }
  auto raster = [](const PixelSample& a, const PixelSample& b) { return std::tie(a.row, a.col) < std::tie(b.row, b.col); };
  std::sort(split.train.begin(), split.train.end(), raster);
  std::sort(split.test.begin(), split.test.end(), raster);
  return split;
}

}  // namespace

DatasetSplit make_split(const LabelMap& labels, std::size_t classes, std::span<const std::size_t> train_counts, Rng& rng) {
  if (train_counts.size() != classes) {
    throw DataError("expected " + std::to_string(classes) + " per-class train counts, got " +
                    std::to_string(train_counts.size()));
  }
  return split_with_counts(by_class(labels, classes), train_counts, rng);
}

DatasetSplit make_split(const LabelMap& labels, std::size_t classes, double train_fraction, Rng& rng) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw DataError("train fraction must lie in (0, 1], got " + std::to_string(train_fraction));
  }
  auto pools = by_class(labels, classes);
  std::vector<std::size_t> counts;
  for (const auto& pool : pools) {
    const auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(pool.size())));
    counts.push_back(pool.empty() ? 0 : std::clamp<std::size_t>(k, 1, pool.size()));
  }
  return split_with_counts(std::move(pools), counts, rng);
}

std::vector<std::size_t> reference_train_counts(std::string_view dataset) {
  if (dataset == "houston") return {198, 190, 192, 188, 186, 182, 196, 191, 193, 191, 181, 192, 184, 181, 187};
  if (dataset == "muufl") return {1162, 214, 344, 91, 334, 23, 112, 312, 69, 9, 14};
  if (dataset == "botswana") return {14, 5, 13, 11, 13, 13, 13, 10, 16, 12, 15, 9, 13, 5};
  throw DataError("no reference split for dataset \"" + std::string(dataset) + "\"");
}

std::vector<std::size_t> reference_test_counts(std::string_view dataset) {
  if (dataset == "houston") return {1053, 1064, 505, 1056, 1056, 143, 1072, 1053, 1059, 1036, 1054, 1041, 285, 247, 473};
  if (dataset == "muufl") return {22084, 4056, 6538, 1735, 6353, 443, 2121, 5928, 1316, 174, 255};
  if (dataset == "botswana") return {256, 96, 238, 204, 256, 256, 246, 193, 298, 236, 290, 172, 255, 90};
  throw DataError("no reference split for dataset \"" + std::string(dataset) + "\"");
}

Dataset make_synthetic(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t pixels = spec.height * spec.width;
  if (spec.height == 0 || spec.width == 0 || spec.bands == 0 || spec.classes == 0 || spec.classes > pixels) {
    throw DataError("synthetic dataset needs positive dims and 1 <= classes <= H*W");
  }
  if (spec.classes > std::numeric_limits<std::uint16_t>::max()) throw DataError("too many classes");

  Dataset ds;
  ds.meta.name = "synthetic";
  ds.meta.num_classes = spec.classes;
  for (std::size_t c = 0; c < spec.classes; ++c) ds.meta.class_names.push_back("class_" + std::to_string(c + 1));

  const double bands = static_cast<double>(spec.bands);
  const double classes = static_cast<double>(spec.classes);
  const double width = std::max(1.0, bands / (2.0 * classes));
  std::vector<std::vector<double>> signature(spec.classes, std::vector<double>(spec.bands));
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double center = (static_cast<double>(c) + 0.5) * bands / classes;
    for (std::size_t b = 0; b < spec.bands; ++b) {
      const double z = (static_cast<double>(b) - center) / width;
      signature[c][b] = 0.1 + std::exp(-0.5 * z * z);
    }
  }

  ds.cube = HsiCube(spec.height, spec.width, spec.bands);
  ds.labels = LabelMap(spec.height, spec.width);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    // contiguous raster-order regions of (nearly) equal size
    const std::size_t c = p * spec.classes / pixels;
    ds.labels.labels[p] = static_cast<std::uint16_t>(c + 1);
    for (std::size_t b = 0; b < spec.bands; ++b) {
      const double n = spec.noise > 0 ? spec.noise * noise(rng) : 0.0;
      ds.cube.values[p * spec.bands + b] = static_cast<float>(signature[c][b] + n);
    }
  }
  return ds;
}

template <typename Scalar>
Batch<Scalar> assemble_batch(const HsiCube& cube, std::span<const PixelSample> samples, std::size_t window) {
  Batch<Scalar> batch;
  batch.patches = Tensor<Scalar>({samples.size(), window, window, cube.bands});
  const std::size_t per = window * window * cube.bands;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const Tensor<float> patch = extract_patch(cube, samples[i].row, samples[i].col, window);
    std::copy(patch.values().begin(), patch.values().end(), batch.patches.data() + i * per);
    batch.labels.push_back(samples[i].label);
  }
  return batch;
}

template <typename Scalar>
BatchIterator<Scalar>::BatchIterator(const HsiCube& cube, std::vector<PixelSample> samples, std::size_t batch_size,
                                     std::size_t window, bool shuffle, std::uint64_t seed)
    : cube_(&cube), samples_(std::move(samples)), batch_size_(batch_size), window_(window), shuffle_(shuffle), rng_(seed) {
  if (samples_.empty()) throw DataError("batch iterator over an empty sample list");
  if (batch_size_ == 0) throw DataError("batch size must be at least 1");
}

template <typename Scalar>
void BatchIterator<Scalar>::start_epoch() {
  cursor_ = 0;
  if (shuffle_) std::shuffle(samples_.begin(), samples_.end(), rng_);
}

template <typename Scalar>
std::optional<Batch<Scalar>> BatchIterator<Scalar>::next() {
  if (cursor_ >= samples_.size()) return std::nullopt;
  const std::size_t n = std::min(batch_size_, samples_.size() - cursor_);
  auto batch = assemble_batch<Scalar>(*cube_, std::span<const PixelSample>(samples_).subspan(cursor_, n), window_);
  cursor_ += n;
  return batch;
}

template <typename Scalar>
std::size_t BatchIterator<Scalar>::batches_per_epoch() const {
  return (samples_.size() + batch_size_ - 1) / batch_size_;
}

template Batch<float> assemble_batch(const HsiCube&, std::span<const PixelSample>, std::size_t);
template Batch<double> assemble_batch(const HsiCube&, std::span<const PixelSample>, std::size_t);
template class BatchIterator<float>;
template class BatchIterator<double>;

}  // namespace convsst
