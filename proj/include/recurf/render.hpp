#pragma once

#include "recurf/diffcore.hpp"
#include "recurf/field.hpp"
#include "recurf/geometry.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace recurf {

/// Width used for the final quadrature interval.
inline constexpr double kLastIntervalCap = 1e10;

/// One t per equal bin of [near, far]. Without an rng the bin midpoints are
/// returned; with one, a uniform draw inside each bin.
std::vector<double> stratified_samples(const Ray& ray, int n, std::mt19937_64* rng = nullptr);

/// Bin edges for piecewise-constant sampling around sorted sample positions:
/// near, midpoints between neighbours, far.
std::vector<double> sample_bin_edges(const Ray& ray, const std::vector<double>& t);

/// Inverse-CDF samples from the distribution that places mass weights[i] on
/// bin i (edges from sample_bin_edges). `uniforms` must lie in [0, 1).
/// All-zero weights fall back to a uniform distribution.
std::vector<double> inverse_cdf_samples(const std::vector<double>& edges,
                                        const std::vector<double>& weights,
                                        const std::vector<double>& uniforms);

/// Draws `n_fine` importance samples from coarse weights; deterministic
/// evenly spaced quantiles when rng is null. Output is sorted.
std::vector<double> hierarchical_samples(const Ray& ray, const std::vector<double>& coarse_t,
                                         const std::vector<double>& coarse_weights, int n_fine,
                                         std::mt19937_64* rng = nullptr);

/// Sorted union of two sample sets.
std::vector<double> merge_samples(const std::vector<double>& a, const std::vector<double>& b);

template <typename Scalar>
struct CompositeResult {
  Eigen::Matrix<Scalar, 3, 1> rgb;
  std::vector<Scalar> weights;
};

/// Discrete emission-absorption quadrature along one ray.
/// alpha_i = 1 - exp(-sigma_i dt_i), T_i = prod_{j<i}(1 - alpha_j),
/// w_i = T_i alpha_i, C = sum w_i c_i (+ background * (1 - sum w_i)).
template <typename Scalar>
CompositeResult<Scalar> composite(const std::vector<Scalar>& sigmas,
                                  const std::vector<Eigen::Matrix<Scalar, 3, 1>>& colors,
                                  const std::vector<Scalar>& t,
                                  const Eigen::Matrix<Scalar, 3, 1>* background = nullptr) {
  const std::size_t n = t.size();
  if (sigmas.size() != n || colors.size() != n) {
    throw std::invalid_argument("composite: sigma, color and t lengths differ");
  }
  for (std::size_t i = 1; i < n; ++i) {
    if (t[i] < t[i - 1]) throw std::invalid_argument("composite: t values not sorted");
  }
  CompositeResult<Scalar> out;
  out.rgb.setZero();
  out.weights.assign(n, Scalar(0));
  Scalar transmittance(1);
  for (std::size_t i = 0; i < n; ++i) {
    const Scalar dt = (i + 1 < n) ? t[i + 1] - t[i] : Scalar(kLastIntervalCap);
    const Scalar keep = std::exp(-sigmas[i] * dt);
    out.weights[i] = transmittance * (Scalar(1) - keep);
    out.rgb += out.weights[i] * colors[i];
    transmittance *= keep;
  }
  if (background != nullptr) out.rgb += transmittance * (*background);
  return out;
}

/// Tape primitive compositing R rays of S samples each. sigma is [R*S x 1] and
/// rgb is [R*S x 3] with ray r owning rows r*S .. r*S+S-1; t is [R x S].
/// Returns the [R x 3] pixel colors; `weights_out`, if given, receives the
/// detached [R x S] sample weights.
Var composite_rays(Var sigma, Var rgb, const Tensor& t, bool white_background,
                   Tensor* weights_out = nullptr);

enum class RenderMode {
  early_exit,  // delta < epsilon gate
  fixed_level, // each sample exits at min(level, leaf depth)
  full_depth,  // fixed_level at the deepest stage
};

struct RenderOptions {
  double epsilon = 1e-3;
  RenderMode mode = RenderMode::early_exit;
  int level = 1;
  int n_coarse = 64;
  int n_fine = 128;
  bool white_background = true;
  bool coarse_early_exit = true;
  /// Emit one partial image per stage holding only samples that exited there.
  bool per_stage_images = false;
  int threads = 1;
  int chunk_rays = 16;
};

struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> data;  // row-major H x W x 3

  Image() = default;
  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}
  double& at(int r, int c, int ch) { return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch]; }
  [[nodiscard]] double at(int r, int c, int ch) const {
    return data[(static_cast<std::size_t>(r) * width + c) * 3 + ch];
  }
};

struct RenderOutput {
  Image image;
  /// exit_histogram[d-1] counts fine-pass samples that exited at depth d.
  std::vector<std::int64_t> exit_histogram;
  std::vector<std::int64_t> coarse_exit_histogram;
  /// Linear-layer FLOPs of both passes.
  std::int64_t total_flops = 0;
  std::int64_t fine_flops = 0;
  /// Per pixel, exit depth of the fine sample carrying the largest weight.
  std::vector<int> exit_map;
  std::vector<Image> stage_images;
  /// Fine-pass FLOPs summed per exit depth.
  std::vector<std::int64_t> flops_by_exit;
};

ExitPolicy exit_policy_for(const RenderOptions& options, const StageNode& root);

/// Two-pass render of the given rays: coarse samples through the coarse tree,
/// importance samples from its weights, then the merged set through the fine
/// tree. `image` holds one pixel per ray, laid out as a [rays x 1] image.
RenderOutput render_rays(const ModelTree& model, const std::vector<Ray>& rays,
                         const RenderOptions& options);

RenderOutput render_image(const ModelTree& model, const CameraPose& pose, const RenderOptions& options);

}  // namespace recurf
