#pragma once

#include <cstdint>
#include <vector>

#include <json.hpp>

namespace mltr::metrics {

// counts[i][j]: samples whose true class is i and predicted class is j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes);
  static ConfusionMatrix from_counts(std::vector<std::vector<std::uint64_t>> counts);

  void add(std::size_t truth, std::size_t predicted, std::uint64_t n = 1);

  std::size_t classes() const { return counts_.size(); }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_[truth][predicted]; }
  std::uint64_t total() const;
  const std::vector<std::vector<std::uint64_t>>& counts() const { return counts_; }

 private:
  std::vector<std::vector<std::uint64_t>> counts_;
};

double accuracy(const ConfusionMatrix& cm);
// Unweighted mean of per-class F1; a class with precision + recall == 0
// contributes 0.
double macro_f1(const ConfusionMatrix& cm);
// 1 - sum(W O) / sum(W E), W = (i-j)^2/(K-1)^2, E = outer(row sums, col sums)/total.
// When sum(W E) == 0 the result is 1 if sum(W O) == 0, otherwise a
// ContractError.
double qw_kappa(const ConfusionMatrix& cm);

// {accuracy, f1_macro, qw_kappa, confusion_matrix}
nlohmann::json to_json(const ConfusionMatrix& cm);

}  // namespace mltr::metrics
