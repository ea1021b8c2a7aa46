#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "melt/tensor.hpp"

namespace melt {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double base_lr = 4e-3;
  double weight_decay = 0.1;
};

template <typename Scalar>
struct AdamWState {
  std::vector<Matrix<Scalar>> first_moment;
  std::vector<Matrix<Scalar>> second_moment;
  std::int64_t step = 0;
  AdamWOptions options;

  static AdamWState for_parameters(std::span<const Tensor<Scalar>> params,
                                    const AdamWOptions& options) {
    AdamWState state;
    state.options = options;
    for (const auto& p : params) {
      state.first_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      state.second_moment.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
    return state;
  }
};

/// Linear warm-up to base_lr over warmup_steps, then constant.
inline double warmup_lr(std::int64_t step, double base_lr, std::int64_t warmup_steps) {
  if (warmup_steps <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(warmup_steps);
  return base_lr * std::min(1.0, frac);
}

template <typename Scalar>
void zero_grads(std::span<Tensor<Scalar>> params) {
  for (auto& p : params) p.zero_grad();
}

/// One AdamW update with decoupled weight decay:
///   theta <- theta - lr * wd * theta
///   theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)
template <typename Scalar>
void adamw_step(std::span<Tensor<Scalar>> params, AdamWState<Scalar>& state, double lr) {
  if (params.size() != state.first_moment.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) +
                         " parameters for optimizer state of " +
                         std::to_string(state.first_moment.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].has_grad()) {
      const std::string& name = params[i].name();
      throw DimensionError("adamw_step: parameter '" + (name.empty() ? std::to_string(i) : name) +
                           "' has no gradient");
    }
    if (params[i].rows() != state.first_moment[i].rows() ||
        params[i].cols() != state.first_moment[i].cols()) {
      throw DimensionError("adamw_step: state shape mismatch for parameter " +
                           std::to_string(i));
    }
  }
  ++state.step;
  const auto& o = state.options;
  const double bias1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.step));
  const Scalar b1 = static_cast<Scalar>(o.beta1);
  const Scalar b2 = static_cast<Scalar>(o.beta2);
  const Scalar decay = static_cast<Scalar>(1.0 - lr * o.weight_decay);
  const Scalar step_size = static_cast<Scalar>(lr / bias1);
  const Scalar inv_sqrt_bias2 = static_cast<Scalar>(1.0 / std::sqrt(bias2));
  const Scalar eps = static_cast<Scalar>(o.eps);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& theta = params[i].mutable_value();
    const auto& g = params[i].grad();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    m = b1 * m + (Scalar(1) - b1) * g;
    v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
    theta *= decay;
    theta.array() -=
        step_size * m.array() / ((v.array().sqrt() * inv_sqrt_bias2) + eps);
  }
}

}  // namespace melt
