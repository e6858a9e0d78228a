#include "cyb/metrics.hpp"

#include <Eigen/Core>

#include <cmath>

namespace cyb {

namespace {

void check_lengths(std::span<const double> obs, std::span<const double> pred) {
  if (obs.size() != pred.size()) {
    throw std::invalid_argument("observed and predicted lengths differ (" +
                                std::to_string(obs.size()) + " vs " + std::to_string(pred.size()) +
                                ")");
  }
}

Eigen::Map<const Eigen::ArrayXd> view(std::span<const double> s) {
  return {s.data(), static_cast<Eigen::Index>(s.size())};
}

}  // namespace

double r2(std::span<const double> observed, std::span<const double> predicted) {
  check_lengths(observed, predicted);
  if (observed.size() < 2) throw UndefinedMetric("R2 needs at least two observations");
  const auto obs = view(observed);
  const auto pred = view(predicted);
  const double ss_tot = (obs - obs.mean()).square().sum();
  if (ss_tot == 0.0) throw UndefinedMetric("R2 undefined: observations have zero variance");
  return 1.0 - (obs - pred).square().sum() / ss_tot;
}

ErrorMetrics rmse_mae(std::span<const double> observed, std::span<const double> predicted) {
  check_lengths(observed, predicted);
  if (observed.empty()) throw std::invalid_argument("rmse/mae of an empty sample");
  const auto err = view(observed) - view(predicted);
  return {std::sqrt(err.square().mean()), err.abs().mean()};
}

}  // namespace cyb
