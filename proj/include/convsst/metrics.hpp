#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace convsst {

/// C x C counts; entry (i, j) = samples of true class i predicted as j.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(std::size_t classes);
  ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts);

  void update(std::size_t truth, std::size_t predicted);
  /// Elementwise sum of shard matrices.
  void merge(const ConfusionMatrix& other);

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth * classes_ + predicted]; }
  std::uint64_t total() const;
  std::uint64_t trace() const;
  std::uint64_t row_sum(std::size_t truth) const;
  std::uint64_t col_sum(std::size_t predicted) const;
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_ = 0;
  std::vector<std::uint64_t> counts_;
};

// All metrics are fractions in [0, 1] (kappa in [-1, 1]).

/// trace / total. Throws on an empty matrix.
double overall_accuracy(const ConfusionMatrix& cm);

/// Mean of per-class recall over classes with at least one sample. Classes
/// with an empty row are skipped and reported through `excluded` and a
/// warning on stderr. Throws when every row is empty.
double average_accuracy(const ConfusionMatrix& cm, std::vector<std::size_t>* excluded = nullptr);

/// Cohen's kappa (p_o - p_e) / (1 - p_e); 0 when p_e == 1.
double kappa(const ConfusionMatrix& cm);

/// diagonal / row sum per class; NaN for classes with no samples.
std::vector<double> per_class_accuracy(const ConfusionMatrix& cm);

/// {"oa", "aa", "kappa", "per_class", "confusion"}; empty classes give null.
nlohmann::ordered_json metrics_report(const ConfusionMatrix& cm);

/// Percentages to two decimals, one metric per line, for humans.
std::string format_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names = {});

}  // namespace convsst
