#pragma once

// Central finite-difference verification of reverse-mode gradients, 64-bit.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "blockdiff/tensor.hpp"

namespace blockdiff {

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
  long entries = 0;
  // the entry behind max_rel_error
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// |a - b| / max(|a|, |b|, floor). The floor keeps entries whose true
/// gradient is ~0 from dividing rounding noise by nothing.
double gradient_relative_error(double analytic, double numeric, double floor = 1e-5);

using ScalarGraph = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

/// Compares tape gradients of `f` (which must return a 1x1 node) against
/// central differences with step h for every entry of every input.
GradCheckResult check_gradients(const std::string& name, const ScalarGraph& f,
                                const std::vector<Matrix<double>>& inputs, double h = 1e-5);

/// Every differentiable primitive plus the composed model losses, for one seed.
std::vector<GradCheckResult> grad_check_suite(std::uint64_t seed);

}  // namespace blockdiff
