#pragma once

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cyb {

class UndefinedMetric : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Coefficient of determination, 1 - SS_res / SS_tot. Throws UndefinedMetric
/// for fewer than two observations or constant observations.
double r2(std::span<const double> observed, std::span<const double> predicted);

struct ErrorMetrics {
  double rmse = 0.0;
  double mae = 0.0;
};

ErrorMetrics rmse_mae(std::span<const double> observed, std::span<const double> predicted);

}  // namespace cyb
