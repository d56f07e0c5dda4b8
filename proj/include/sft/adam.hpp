#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>

#include "sft/error.hpp"

namespace sft {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::int64_t step = 0;

  static AdamState zeros(Eigen::Index n) {
    return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), 0};
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
                      const AdamConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size() || grad.size() != params.size()) {
    throw Error(ErrorKind::LengthMismatch, "adam state, gradient and parameters differ in length");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad;
  state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  params.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

}  // namespace sft
