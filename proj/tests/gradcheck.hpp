#pragma once

// Central finite differences in double against the reverse-mode gradients.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "melt/tensor.hpp"

namespace melt::testing {

struct GradCheck {
  std::string name;
  double relative_error = 0.0;
};

/// Relative error ||a - n|| / max(||a||, ||n||, tiny) per parameter.
/// `loss` must rebuild the graph from the current parameter values.
inline std::vector<GradCheck> gradient_check(std::vector<Tensor<double>> params,
                                             const std::function<Tensor<double>()>& loss,
                                             double h = 1e-5) {
  for (auto& p : params) p.zero_grad();
  backward(loss());
  std::vector<GradCheck> out;
  for (auto& p : params) {
    const Matrix<double> analytic = p.grad();
    Matrix<double> numeric(p.rows(), p.cols());
    Matrix<double>& value = p.mutable_value();
    for (Index i = 0; i < value.size(); ++i) {
      const double saved = value.data()[i];
      value.data()[i] = saved + h;
      const double up = loss().item();
      value.data()[i] = saved - h;
      const double down = loss().item();
      value.data()[i] = saved;
      numeric.data()[i] = (up - down) / (2.0 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-12});
    out.push_back({p.name(), (analytic - numeric).norm() / scale});
  }
  return out;
}

inline double worst(const std::vector<GradCheck>& checks) {
  double w = 0.0;
  for (const auto& c : checks) w = std::max(w, c.relative_error);
  return w;
}

}  // namespace melt::testing
