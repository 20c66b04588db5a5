#pragma once

#include "recurf/diffcore.hpp"

#include <Eigen/Dense>

#include <vector>

namespace recurf {

struct LossWeights {
  double alpha1 = 1.0;   // squared-error hinge
  double alpha2 = 0.01;  // pull toward zero
  double beta1 = 1.0;    // per-level color MSE
  double beta2 = 0.1;    // per-level uncertainty loss
};

struct LossBreakdown {
  std::vector<double> mse;
  std::vector<double> l_se;
  std::vector<double> l_0;
  double total = 0.0;
};

/// Sum over rays of the squared color residual norm.
double mse_loss(const Tensor& rendered, const Tensor& truth);
double ray_sq_error(const Eigen::Vector3d& rendered, const Eigen::Vector3d& truth);

struct UncertaintyTerms {
  double l_se = 0.0;
  double l_0 = 0.0;
  double l_unct = 0.0;
};

/// errors[r] is E(r); deltas[r] holds the sample uncertainties of ray r.
UncertaintyTerms uncertainty_loss(const std::vector<double>& errors,
                                  const std::vector<std::vector<double>>& deltas,
                                  const LossWeights& weights);

/// One exit level's rendered colors plus its per-sample uncertainties
/// (grouped per ray, samples_per_ray rows each).
struct LevelBatch {
  Tensor rendered;  // [R x 3]
  Tensor delta;     // [R*S x 1]
  int samples_per_ray = 1;
};

LossBreakdown total_loss(const std::vector<LevelBatch>& levels, const Tensor& truth,
                         const LossWeights& weights);

// -- Differentiable forms used in training --------------------------------------

struct LevelLossVars {
  Var mse;
  Var l_se;
  Var l_0;
};

/// E(r) is taken from the rendered value and enters as a constant, so the
/// hinge only supervises delta.
LevelLossVars level_loss(Var rendered, Var delta, const Tensor& truth, int samples_per_ray);

/// sum_i beta1 * mse_i + beta2 * (alpha1 * l_se_i + alpha2 * l_0_i), with the
/// numeric parts written into `breakdown` when given.
Var combine_levels(const std::vector<LevelLossVars>& parts, const LossWeights& weights,
                   LossBreakdown* breakdown = nullptr);

}  // namespace recurf
