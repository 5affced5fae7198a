#include "dept/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dept {

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os << (passed ? "pass" : "FAIL") << ": " << checked << " coordinates, max rel error "
     << max_rel_error << " at tensor " << worst_tensor << " index " << worst_index
     << " (analytic " << worst_analytic << ", numeric " << worst_numeric << ")";
  return os.str();
}

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& loss,
                                  std::vector<Tensor<double>> inputs, double h, double tol) {
  for (auto& x : inputs) {
    if (!x.is_leaf()) throw ContractError("finite_diff_check: inputs must be leaf tensors");
    x.set_requires_grad(true);
    x.zero_grad();
  }
  loss().backward();

  GradCheckReport report;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto& x = inputs[t];
    const std::vector<double> analytic = x.has_grad()
                                             ? std::vector<double>(x.grad().begin(), x.grad().end())
                                             : std::vector<double>(x.numel(), 0.0);
    auto values = x.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double up = loss().item();
      values[i] = saved - h;
      const double down = loss().item();
      values[i] = saved;

      const double numeric = (up - down) / (2.0 * h);
      const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
      const double rel = std::abs(analytic[i] - numeric) / denom;
      ++report.checked;
      if (rel > report.max_rel_error || report.checked == 1) {
        report.max_rel_error = rel;
        report.worst_tensor = t;
        report.worst_index = i;
        report.worst_analytic = analytic[i];
        report.worst_numeric = numeric;
      }
    }
    x.zero_grad();
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

GradCheckReport finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                                  Tensor<double> x, double h, double tol) {
  return finite_diff_check([&f, &x] { return f(x); }, {x}, h, tol);
}

}  // namespace dept
