#include "mltr/metrics.hpp"

#include "mltr/error.hpp"

namespace mltr::metrics {

ConfusionMatrix::ConfusionMatrix(std::size_t classes)
    : counts_(classes, std::vector<std::uint64_t>(classes, 0)) {
  if (classes < 2) throw ContractError("confusion matrix needs at least 2 classes");
}

ConfusionMatrix ConfusionMatrix::from_counts(std::vector<std::vector<std::uint64_t>> counts) {
  ConfusionMatrix cm(counts.size());
  for (const auto& row : counts) {
    if (row.size() != counts.size()) throw ShapeError("confusion matrix must be square");
  }
  cm.counts_ = std::move(counts);
  return cm;
}

void ConfusionMatrix::add(std::size_t truth, std::size_t predicted, std::uint64_t n) {
  if (truth >= classes() || predicted >= classes()) {
    throw IndexError("confusion matrix entry (" + std::to_string(truth) + ", " + std::to_string(predicted) +
                     ") out of range for " + std::to_string(classes()) + " classes");
  }
  counts_[truth][predicted] += n;
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (const auto& row : counts_)
    for (auto v : row) t += v;
  return t;
}

double accuracy(const ConfusionMatrix& cm) {
  const auto total = cm.total();
  if (total == 0) throw ContractError("accuracy of an empty confusion matrix");
  std::uint64_t diag = 0;
  for (std::size_t i = 0; i < cm.classes(); ++i) diag += cm.at(i, i);
  return static_cast<double>(diag) / static_cast<double>(total);
}

double macro_f1(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw ContractError("F1 of an empty confusion matrix");
  const std::size_t k = cm.classes();
  double acc = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t tp = cm.at(c, c), pred = 0, truth = 0;
    for (std::size_t j = 0; j < k; ++j) {
      pred += cm.at(j, c);
      truth += cm.at(c, j);
    }
    const double precision = pred ? static_cast<double>(tp) / static_cast<double>(pred) : 0.0;
    const double recall = truth ? static_cast<double>(tp) / static_cast<double>(truth) : 0.0;
    if (precision + recall > 0) acc += 2 * precision * recall / (precision + recall);
  }
  return acc / static_cast<double>(k);
}

double qw_kappa(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes();
  const auto total = static_cast<double>(cm.total());
  if (total == 0) throw ContractError("kappa of an empty confusion matrix");
  std::vector<double> rows(k, 0), cols(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      rows[i] += static_cast<double>(cm.at(i, j));
      cols[j] += static_cast<double>(cm.at(i, j));
    }
  }
  const double denom_w = static_cast<double>((k - 1) * (k - 1));
  double observed = 0, expected = 0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double diff = static_cast<double>(i) - static_cast<double>(j);
      const double w = diff * diff / denom_w;
      observed += w * static_cast<double>(cm.at(i, j));
      expected += w * rows[i] * cols[j] / total;
    }
  }
  if (expected == 0) {
    if (observed == 0) return 1.0;
    throw ContractError("quadratic weighted kappa undefined: zero expected disagreement");
  }
  return 1.0 - observed / expected;
}

nlohmann::json to_json(const ConfusionMatrix& cm) {
  return {{"accuracy", accuracy(cm)},
          {"f1_macro", macro_f1(cm)},
          {"qw_kappa", qw_kappa(cm)},
          {"confusion_matrix", cm.counts()}};
}

}  // namespace mltr::metrics
