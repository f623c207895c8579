#include "mltr/optim.hpp"

#include <cmath>
#include <numbers>

namespace mltr::optim {

template <typename T>
void Adam<T>::enable_lookahead(std::size_t k, double alpha) {
  if (k == 0) throw ConfigError("lookahead interval must be >= 1");
  lookahead_k_ = k;
  lookahead_alpha_ = alpha;
  init_slow();
}

template <typename T>
void Adam<T>::init_slow() {
  for (auto& s : slots_) s.slow.assign(s.param.data().begin(), s.param.data().end());
}

template <typename T>
void Adam<T>::step(double lr, double weight_decay) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(steps_));
  const T b1 = static_cast<T>(hyper_.beta1), b2 = static_cast<T>(hyper_.beta2);
  for (auto& s : slots_) {
    auto w = s.param.mutable_data();
    const auto g = s.param.grad();
    if (!g.empty() && g.size() != w.size()) {
      throw ContractError("gradient of " + s.name + " has " + std::to_string(g.size()) + " values for " +
                          std::to_string(w.size()) + " weights");
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T gi = g.empty() ? T(0) : g[i];
      s.m[i] = b1 * s.m[i] + (T(1) - b1) * gi;
      s.v[i] = b2 * s.v[i] + (T(1) - b2) * gi * gi;
      const double mhat = static_cast<double>(s.m[i]) / bc1;
      const double vhat = static_cast<double>(s.v[i]) / bc2;
      double wi = static_cast<double>(w[i]);
      wi -= lr * weight_decay * wi;
      wi -= lr * mhat / (std::sqrt(vhat) + hyper_.eps);
      w[i] = static_cast<T>(wi);
    }
  }
  if (lookahead_k_) lookahead_sync();
}

template <typename T>
bool Adam<T>::lookahead_sync() {
  if (!lookahead_k_) throw ContractError("lookahead_sync without lookahead enabled");
  if (steps_ == 0 || steps_ % lookahead_k_ != 0) return false;
  const T a = static_cast<T>(lookahead_alpha_);
  for (auto& s : slots_) {
    auto w = s.param.mutable_data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.slow[i] += a * (w[i] - s.slow[i]);
      w[i] = s.slow[i];
    }
  }
  return true;
}

template <typename T>
bool Adam<T>::tracks(const std::string& name) const {
  for (const auto& s : slots_)
    if (s.name == name) return true;
  return false;
}

double cosine_lr(std::uint64_t step, std::uint64_t total_steps, double lr_max, double lr_min) {
  if (total_steps == 0 || step >= total_steps) return step >= total_steps ? lr_min : lr_max;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

template class Adam<float>;
template class Adam<double>;

}  // namespace mltr::optim
