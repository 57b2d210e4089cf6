#include "convsst/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <limits>
#include <sstream>

#include "convsst/error.hpp"

namespace convsst {

ConfusionMatrix::ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

ConfusionMatrix::ConfusionMatrix(std::size_t classes, std::vector<std::uint64_t> counts)
    : classes_(classes), counts_(std::move(counts)) {
  if (counts_.size() != classes_ * classes_) throw Error("confusion matrix counts do not form a square");
}

void ConfusionMatrix::update(std::size_t truth, std::size_t predicted) {
  if (truth >= classes_ || predicted >= classes_) {
    throw Error("class index out of range: (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                ") with " + std::to_string(classes_) + " classes");
  }
  ++counts_[truth * classes_ + predicted];
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.classes_ != classes_) throw Error("cannot merge confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (auto c : counts_) t += c;
  return t;
}

std::uint64_t ConfusionMatrix::trace() const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, i);
  return t;
}

std::uint64_t ConfusionMatrix::row_sum(std::size_t truth) const {
  std::uint64_t t = 0;
  for (std::size_t j = 0; j < classes_; ++j) t += at(truth, j);
  return t;
}

std::uint64_t ConfusionMatrix::col_sum(std::size_t predicted) const {
  std::uint64_t t = 0;
  for (std::size_t i = 0; i < classes_; ++i) t += at(i, predicted);
  return t;
}

double overall_accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error("overall accuracy of an empty confusion matrix");
  return static_cast<double>(cm.trace()) / static_cast<double>(total);
}

double average_accuracy(const ConfusionMatrix& cm, std::vector<std::size_t>* excluded) {
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const auto row = cm.row_sum(i);
    if (row == 0) {
      std::cerr << "warning: class " << i << " has no samples; excluded from average accuracy\n";
      if (excluded) excluded->push_back(i);
      continue;
    }
    acc += static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
    ++used;
  }
  if (used == 0) throw Error("average accuracy with every class empty");
  return acc / static_cast<double>(used);
}

double kappa(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw Error("kappa of an empty confusion matrix");
  // (p_o - p_e) / (1 - p_e) scaled by total^2, kept in integers until the final division
  using Wide = __int128;
  Wide chance = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) chance += static_cast<Wide>(cm.row_sum(i)) * cm.col_sum(i);
  const Wide n = total;
  const Wide denom = n * n - chance;
  if (denom == 0) return 0.0;
  const Wide numer = n * static_cast<Wide>(cm.trace()) - chance;
  return static_cast<double>(numer) / static_cast<double>(denom);
}

std::vector<double> per_class_accuracy(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes(), std::numeric_limits<double>::quiet_NaN());
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const auto row = cm.row_sum(i);
    if (row) out[i] = static_cast<double>(cm.at(i, i)) / static_cast<double>(row);
  }
  return out;
}

nlohmann::ordered_json metrics_report(const ConfusionMatrix& cm) {
  nlohmann::ordered_json j;
  j["oa"] = overall_accuracy(cm);
  j["aa"] = average_accuracy(cm);
  j["kappa"] = kappa(cm);
  auto per_class = nlohmann::ordered_json::array();
  for (double v : per_class_accuracy(cm)) {
    per_class.push_back(std::isnan(v) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(v));
  }
  j["per_class"] = per_class;
  auto rows = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    auto row = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < cm.classes(); ++k) row.push_back(cm.at(i, k));
    rows.push_back(row);
  }
  j["confusion"] = rows;
  return j;
}

std::string format_report(const ConfusionMatrix& cm, const std::vector<std::string>& class_names) {
  std::ostringstream out;
  char buf[128];
  const auto per_class = per_class_accuracy(cm);
  for (std::size_t i = 0; i < per_class.size(); ++i) {
    const std::string name = i < class_names.size() ? class_names[i] : "";
    if (std::isnan(per_class[i])) {
      std::snprintf(buf, sizeof buf, "%-4zu %-20s %8s\n", i + 1, name.c_str(), "-");
    } else {
      std::snprintf(buf, sizeof buf, "%-4zu %-20s %8.2f\n", i + 1, name.c_str(), 100.0 * per_class[i]);
    }
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "%-25s %8.2f\n%-25s %8.2f\n%-25s %8.2f\n", "OA", 100.0 * overall_accuracy(cm),
                "AA", 100.0 * average_accuracy(cm), "Kappa", 100.0 * kappa(cm));
  out << buf;
  return out.str();
}

}  // namespace convsst
