#include "recurf/loss.hpp"

#include <algorithm>
#include <stdexcept>

namespace recurf {

double mse_loss(const Tensor& rendered, const Tensor& truth) {
  if (rendered.rows() != truth.rows() || rendered.cols() != truth.cols()) {
    throw std::invalid_argument("mse_loss: " + std::to_string(rendered.rows()) + " rendered rays vs " +
                                std::to_string(truth.rows()) + " ground-truth rays");
  }
  return (rendered - truth).squaredNorm();
}

double ray_sq_error(const Eigen::Vector3d& rendered, const Eigen::Vector3d& truth) {
  return (rendered - truth).squaredNorm();
}

UncertaintyTerms uncertainty_loss(const std::vector<double>& errors,
                                  const std::vector<std::vector<double>>& deltas,
                                  const LossWeights& weights) {
  if (errors.size() != deltas.size()) throw std::invalid_argument("uncertainty_loss: ray count mismatch");
  UncertaintyTerms u;
  for (std::size_t r = 0; r < errors.size(); ++r) {
    for (double d : deltas[r]) {
      u.l_se += std::max(errors[r] - d, 0.0);
      u.l_0 += std::max(d, 0.0);
    }
  }
  u.l_unct = weights.alpha1 * u.l_se + weights.alpha2 * u.l_0;
  return u;
}

LossBreakdown total_loss(const std::vector<LevelBatch>& levels, const Tensor& truth,
                         const LossWeights& weights) {
  LossBreakdown b;
  for (const LevelBatch& lv : levels) {
    const double mse = mse_loss(lv.rendered, truth);
    std::vector<double> errors(static_cast<std::size_t>(truth.rows()));
    std::vector<std::vector<double>> deltas(errors.size());
    for (Eigen::Index r = 0; r < truth.rows(); ++r) {
      errors[r] = ray_sq_error(lv.rendered.row(r).transpose(), truth.row(r).transpose());
      for (int i = 0; i < lv.samples_per_ray; ++i) deltas[r].push_back(lv.delta(r * lv.samples_per_ray + i, 0));
    }
    const UncertaintyTerms u = uncertainty_loss(errors, deltas, weights);
    b.mse.push_back(mse);
    b.l_se.push_back(u.l_se);
    b.l_0.push_back(u.l_0);
    b.total += weights.beta1 * mse + weights.beta2 * u.l_unct;
  }
  return b;
}

LevelLossVars level_loss(Var rendered, Var delta, const Tensor& truth, int samples_per_ray) {
  Tape& tape = *rendered.tape;
  if (rendered.rows() != truth.rows() || delta.rows() != truth.rows() * samples_per_ray) {
    throw std::invalid_argument("level_loss: batch shapes do not line up");
  }
  Var residual = sub(rendered, tape.constant(truth));
  Var mse = sum(square(residual));
  const Tensor per_ray = (rendered.value() - truth).rowwise().squaredNorm();
  Tensor err(delta.rows(), 1);
  for (Eigen::Index r = 0; r < truth.rows(); ++r) err.middleRows(r * samples_per_ray, samples_per_ray).setConstant(per_ray(r, 0));
  Var l_se = sum(relu(sub(tape.constant(std::move(err)), delta)));
  Var l_0 = sum(relu(delta));
  return {mse, l_se, l_0};
}

Var combine_levels(const std::vector<LevelLossVars>& parts, const LossWeights& weights,
                   LossBreakdown* breakdown) {
  if (parts.empty()) throw std::invalid_argument("combine_levels: no levels");
  Var total;
  for (const LevelLossVars& p : parts) {
    Var unct = add(scale(p.l_se, weights.alpha1), scale(p.l_0, weights.alpha2));
    Var term = add(scale(p.mse, weights.beta1), scale(unct, weights.beta2));
    total = total.valid() ? add(total, term) : term;
    if (breakdown != nullptr) {
      breakdown->mse.push_back(p.mse.value()(0, 0));
      breakdown->l_se.push_back(p.l_se.value()(0, 0));
      breakdown->l_0.push_back(p.l_0.value()(0, 0));
    }
  }
  if (breakdown != nullptr) breakdown->total += total.value()(0, 0);
  return total;
}

}  // namespace recurf
