#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dept/tensor.hpp"

namespace dept {

struct GradCheckReport {
  bool passed = true;
  std::size_t checked = 0;
  double max_rel_error = 0.0;
  // Location of the worst coordinate: index into the tensor list, then flat offset.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;

  std::string summary() const;
};

// Compares analytic gradients of `loss` against central differences
// (f(x + h e) - f(x - h e)) / 2h for every coordinate of every tensor in
// `inputs`. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. Inputs must be leaves; they are perturbed in place and
// restored. Runs in 64-bit only.
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss,
                                  std::vector<Tensor<double>> inputs, double h, double tol);

// Single-input form: f is applied to x.
GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  Tensor<double> x, double h, double tol);

}  // namespace dept
