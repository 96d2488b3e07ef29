#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "fd/tensor.hpp"

namespace fd {

// Central-difference verification oracle. `f` rebuilds the scalar loss graph
// from the current values of its leaves each time it is called; runs in
// double so the difference quotient is trustworthy at h ~ 1e-5.
//
// Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
inline double grad_check(const std::function<TensorD()>& f, std::vector<TensorD> leaves, double h = 1e-5) {
  FD_CHECK(h > 0.0, "grad_check: step must be positive");
  FD_CHECK(!leaves.empty(), "grad_check: no leaves given");
  for (auto& x : leaves) {
    FD_CHECK(x.defined() && x.requires_grad(), "grad_check: leaves must require grad");
    x.zero_grad();
  }
  TensorD loss = f();
  FD_CHECK(loss.size() == 1, "grad_check: f must return a scalar");
  FD_CHECK(std::isfinite(loss.item()), "grad_check: non-finite loss");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& x : leaves) analytic.push_back(x.grad());

  double worst = 0.0;
  for (size_t t = 0; t < leaves.size(); ++t) {
    auto& vals = leaves[t].value();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double orig = vals[i];
      vals[i] = orig + h;
      const double fp = f().item();
      vals[i] = orig - h;
      const double fm = f().item();
      vals[i] = orig;
      FD_CHECK(std::isfinite(fp) && std::isfinite(fm), "grad_check: non-finite perturbed loss");
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic[t][i];
      const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(a));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

inline double grad_check(const std::function<TensorD()>& f, TensorD x, double h = 1e-5) {
  return grad_check(f, std::vector<TensorD>{std::move(x)}, h);
}

}  // namespace fd
