#pragma once

#include "recurf/render.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace recurf {

/// Identical images report this value instead of +inf.
inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) over all elements of two images in [0, 1].
double psnr(const Image& a, const Image& b);

/// Single-scale SSIM on luma (0.2989 R + 0.5870 G + 0.1140 B) with an 11x11
/// Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range 1,
/// averaged over all valid window positions.
double ssim(const Image& a, const Image& b);

struct FlopsReport {
  std::vector<std::int64_t> per_exit_flops;
  std::vector<double> per_exit_fraction;
  double mean_flops_per_pixel = 0.0;
  double mean_layers_per_sample = 0.0;
};

/// sum_d fraction_d * layers_d.
double mean_layers(const std::vector<double>& fractions, const std::vector<int>& layers_at_exit);

/// Aggregates a render into per-exit totals. `layers_at_exit[d-1]` is the
/// number of MLP layers a sample passes through when it exits at depth d.
FlopsReport flops_report(const RenderOutput& render, const std::vector<int>& layers_at_exit,
                         std::int64_t pixels);

std::string flops_report_csv(const FlopsReport& report);
std::string flops_report_table(const FlopsReport& report);

}  // namespace recurf
