#pragma once

#include "cyb/autodiff.hpp"
#include "cyb/model.hpp"

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace cyb {

/// One differentiable operation exercised by the gradient suite.
struct GradPrimitive {
  std::string name;
  std::vector<Shape> shapes;
  std::function<Var(Tape&, std::span<const Var>)> build;
};

/// Every tape primitive, each on small fixed shapes.
std::vector<GradPrimitive> gradient_primitives();

/// x^2 whose backward rule is off by 1%; a negative control for the checker.
GradPrimitive faulty_square_primitive();

/// Contracts `y` against fixed random weights so every output coordinate
/// contributes to the scalar being differentiated.
Var weighted_sum(Tape& tape, Var y, std::uint64_t seed);

struct SuiteResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

/// Worst relative gradient error over `trials` seeded inputs per primitive.
SuiteResult check_primitive_gradients(const std::vector<GradPrimitive>& prims, int trials,
                                      std::uint64_t seed, double tol = 1e-3);

/// Central differences on the full model loss w.r.t. every parameter. The loss
/// is O(y^2), so steps below ~1e-4 let roundoff swamp the smallest gradients.
SuiteResult check_model_gradient(const ModelConfig& config, Index n_pixels, Index m_pixels,
                                 std::uint64_t seed, double tol = 1e-3, double step = 1e-4);

/// r2 / rmse / mae against brute-force sums on random vectors.
SuiteResult check_metric_oracles(int vectors, std::uint64_t seed);

/// Quota example, seed-independent counts, determinism.
SuiteResult check_sampler(std::uint64_t seed);

/// Round trips over random shapes plus corrupted headers.
SuiteResult check_containers(int shapes, std::uint64_t seed);

struct VerifyOptions {
  int primitive_trials = 20;
  bool inject_backward_bug = false;
  std::uint64_t seed = 0;
};

std::vector<SuiteResult> run_verification(const VerifyOptions& opts);

}  // namespace cyb
