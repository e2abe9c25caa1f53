#pragma once

// Central finite-difference verification of tape gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xdistill/autograd.hpp"

namespace xdistill {

struct GradCheckResult {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  std::string worst;  // "<input index>[<element>]"
  bool ok(double tol) const { return max_rel_error < tol; }
};

/// Compares analytic gradients of `f` w.r.t. each input against central
/// differences. `f` must build a fresh graph from the given leaves and return
/// a scalar. At most `max_elems` entries per input are probed (evenly strided).
///
/// The relative error is |a - n| / max(|a|, |n|, floor), so entries whose
/// true gradient is zero are judged on absolute error against `floor`.
template <class T>
GradCheckResult grad_check(const std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>& f,
                           std::vector<Var<T>> inputs, double eps = 1e-5, std::size_t max_elems = 64,
                           double floor = 1e-6) {
  for (auto& v : inputs) {
    v->requires_grad = true;
    v->zero_grad();
  }
  {
    Tape<T> tape;
    auto loss = f(tape, inputs);
    tape.backward(loss);
  }
  std::vector<Tensor<T>> analytic;
  for (auto& v : inputs) analytic.push_back(v->grad.empty() ? Tensor<T>(v->value.shape()) : v->grad);

  auto eval = [&]() {
    Tape<T> tape;
    return static_cast<double>(f(tape, inputs)->value.item());
  };

  GradCheckResult r;
  for (std::size_t a = 0; a < inputs.size(); ++a) {
    auto& x = inputs[a]->value;
    const std::size_t n = x.size();
    const std::size_t step = n > max_elems ? n / max_elems : 1;
    for (std::size_t i = 0; i < n; i += step) {
      const T orig = x[i];
      x[i] = orig + static_cast<T>(eps);
      const double up = eval();
      x[i] = orig - static_cast<T>(eps);
      const double dn = eval();
      x[i] = orig;
      const double num = (up - dn) / (2 * eps);
      const double ana = static_cast<double>(analytic[a][i]);
      const double abs_err = std::abs(num - ana);
      const double rel = abs_err / std::max({std::abs(num), std::abs(ana), floor});
      if (rel > r.max_rel_error) {
        r.max_rel_error = rel;
        r.worst = std::to_string(a) + "[" + std::to_string(i) + "]";
      }
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      ++r.checked;
    }
  }
  for (auto& v : inputs) v->zero_grad();
  return r;
}

}  // namespace xdistill
