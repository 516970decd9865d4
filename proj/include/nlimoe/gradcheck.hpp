#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "nlimoe/errors.hpp"
#include "nlimoe/tensor.hpp"

namespace nlimoe {

struct ParameterCheck {
  std::string name;
  std::size_t coordinates = 0;
  double max_relative_error = 0.0;
  double max_abs_analytic = 0.0;
  double max_abs_numeric = 0.0;
  /// Analytic gradient is exactly zero and the numeric one is within h^2.
  bool no_gradient_path = false;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  double step = 0.0;
  std::vector<ParameterCheck> parameters;

  bool passed(double tolerance) const { return max_relative_error <= tolerance; }
};

/// Relative error used throughout: |a - n| / max(1, |a|, |n|).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Compares reverse-mode gradients of `f` against central differences.
///
/// `f` must be deterministic: it is evaluated twice up front and a
/// disagreement is a ContractError. Parameters are perturbed in place and
/// restored exactly.
template <class F>
GradCheckReport finite_diff_check(F&& f, std::vector<Tensor>& params, double h,
                                  const std::vector<std::string>& names = {}) {
  if (!(h > 0.0)) throw ContractError("finite_diff_check: step must be positive");

  for (auto& p : params) p.zero_grad();
  const Tensor loss = f();
  const double base = loss.item();
  backward(loss);
  const double again = f().item();
  if (std::memcmp(&base, &again, sizeof(double)) != 0) {
    throw ContractError("finite_diff_check: objective is not deterministic (" + std::to_string(base) + " vs " +
                        std::to_string(again) + ")");
  }

  GradCheckReport report;
  report.step = h;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k];
    ParameterCheck check;
    check.name = k < names.size() ? names[k] : "param" + std::to_string(k);
    check.coordinates = p.numel();
    const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                      : std::vector<double>(p.numel(), 0.0);
    auto values = p.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + h;
      const double up = f().item();
      values[i] = original - h;
      const double down = f().item();
      values[i] = original;
      const double numeric = (up - down) / (2.0 * h);
      check.max_relative_error = std::max(check.max_relative_error, relative_error(analytic[i], numeric));
      check.max_abs_analytic = std::max(check.max_abs_analytic, std::abs(analytic[i]));
      check.max_abs_numeric = std::max(check.max_abs_numeric, std::abs(numeric));
    }
    check.no_gradient_path = check.max_abs_analytic == 0.0 && check.max_abs_numeric <= h * h;
    report.coordinates += check.coordinates;
    report.max_relative_error = std::max(report.max_relative_error, check.max_relative_error);
    report.parameters.push_back(std::move(check));
  }
  return report;
}

}  // namespace nlimoe
