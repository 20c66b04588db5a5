#include "recurf/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace recurf {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.width != b.width || a.height != b.height || a.data.size() != b.data.size()) {
    throw std::invalid_argument(std::string(what) + ": image shapes differ (" + std::to_string(a.width) +
                                "x" + std::to_string(a.height) + " vs " + std::to_string(b.width) + "x" +
                                std::to_string(b.height) + ")");
  }
}

Eigen::MatrixXd luma(const Image& img) {
  Eigen::MatrixXd y(img.height, img.width);
  for (int r = 0; r < img.height; ++r)
    for (int c = 0; c < img.width; ++c)
      y(r, c) = 0.2989 * img.at(r, c, 0) + 0.5870 * img.at(r, c, 1) + 0.1140 * img.at(r, c, 2);
  return y;
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) se += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  const double mse = se / static_cast<double>(a.data.size());
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5;
  if (a.width < kWin || a.height < kWin) {
    throw std::invalid_argument("ssim: images must be at least 11x11");
  }
  Eigen::Matrix<double, kWin, kWin> w;
  for (int i = 0; i < kWin; ++i)
    for (int j = 0; j < kWin; ++j) {
      const double di = i - kWin / 2, dj = j - kWin / 2;
      w(i, j) = std::exp(-(di * di + dj * dj) / (2.0 * kSigma * kSigma));
    }
  w /= w.sum();
  const Eigen::MatrixXd x = luma(a), y = luma(b);
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double acc = 0.0;
  int count = 0;
  for (int r = 0; r + kWin <= a.height; ++r) {
    for (int c = 0; c + kWin <= a.width; ++c) {
      const auto px = x.block<kWin, kWin>(r, c);
      const auto py = y.block<kWin, kWin>(r, c);
      const double mx = (w.array() * px.array()).sum();
      const double my = (w.array() * py.array()).sum();
      const double sxx = (w.array() * px.array().square()).sum() - mx * mx;
      const double syy = (w.array() * py.array().square()).sum() - my * my;
      const double sxy = (w.array() * px.array() * py.array()).sum() - mx * my;
      acc += ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
      ++count;
    }
  }
  return acc / count;
}

double mean_layers(const std::vector<double>& fractions, const std::vector<int>& layers_at_exit) {
  if (fractions.size() != layers_at_exit.size()) throw std::invalid_argument("mean_layers: length mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < fractions.size(); ++i) m += fractions[i] * layers_at_exit[i];
  return m;
}

FlopsReport flops_report(const RenderOutput& render, const std::vector<int>& layers_at_exit,
                         std::int64_t pixels) {
  FlopsReport rep;
  rep.per_exit_flops = render.flops_by_exit;
  const std::int64_t samples =
      std::accumulate(render.exit_histogram.begin(), render.exit_histogram.end(), std::int64_t{0});
  for (std::int64_t c : render.exit_histogram) {
    rep.per_exit_fraction.push_back(samples > 0 ? static_cast<double>(c) / static_cast<double>(samples) : 0.0);
  }
  std::vector<int> layers = layers_at_exit;
  layers.resize(rep.per_exit_fraction.size(), layers.empty() ? 0 : layers.back());
  rep.mean_layers_per_sample = mean_layers(rep.per_exit_fraction, layers);
  rep.mean_flops_per_pixel = pixels > 0 ? static_cast<double>(render.total_flops) / static_cast<double>(pixels) : 0.0;
  return rep;
}

std::string flops_report_csv(const FlopsReport& report) {
  std::ostringstream os;
  os << std::setprecision(10);
  os << "exit_depth,flops,fraction\n";
  for (std::size_t d = 0; d < report.per_exit_fraction.size(); ++d) {
    os << d + 1 << ',' << (d < report.per_exit_flops.size() ? report.per_exit_flops[d] : 0) << ','
       << report.per_exit_fraction[d] << '\n';
  }
  os << "mean_flops_per_pixel," << report.mean_flops_per_pixel << ",\n";
  os << "mean_layers_per_sample," << report.mean_layers_per_sample << ",\n";
  return os.str();
}

std::string flops_report_table(const FlopsReport& report) {
  std::ostringstream os;
  os << std::fixed;
  os << "exit  fraction   flops\n";
  for (std::size_t d = 0; d < report.per_exit_fraction.size(); ++d) {
    os << std::setw(4) << d + 1 << "  " << std::setprecision(4) << std::setw(8)
       << 100.0 * report.per_exit_fraction[d] << "%  "
       << (d < report.per_exit_flops.size() ? report.per_exit_flops[d] : 0) << '\n';
  }
  os << std::setprecision(1) << "mean FLOPs/pixel: " << report.mean_flops_per_pixel << '\n';
  os << std::setprecision(3) << "mean layers/sample: " << report.mean_layers_per_sample << '\n';
  return os.str();
}

}  // namespace recurf
