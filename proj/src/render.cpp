#include "recurf/render.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace recurf {

std::vector<double> stratified_samples(const Ray& ray, int n, std::mt19937_64* rng) {
  if (n < 1) throw std::invalid_argument("stratified_samples: need at least one sample");
  std::vector<double> t(static_cast<std::size_t>(n));
  const double width = (ray.far - ray.near) / n;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < n; ++i) {
    const double offset = rng != nullptr ? u(*rng) : 0.5;
    t[static_cast<std::size_t>(i)] = ray.near + (i + offset) * width;
  }
  return t;
}

std::vector<double> sample_bin_edges(const Ray& ray, const std::vector<double>& t) {
  std::vector<double> edges;
  edges.reserve(t.size() + 1);
  edges.push_back(ray.near);
  for (std::size_t i = 1; i < t.size(); ++i) edges.push_back(0.5 * (t[i - 1] + t[i]));
  edges.push_back(ray.far);
  return edges;
}

std::vector<double> inverse_cdf_samples(const std::vector<double>& edges,
                                        const std::vector<double>& weights,
                                        const std::vector<double>& uniforms) {
  const std::size_t bins = weights.size();
  if (edges.size() != bins + 1) throw std::invalid_argument("inverse_cdf_samples: need bins + 1 edges");
  double total = 0.0;
  for (double w : weights) {
    if (w < 0.0) throw std::invalid_argument("inverse_cdf_samples: negative weight");
    total += w;
  }
  std::vector<double> pdf(bins);
  for (std::size_t i = 0; i < bins; ++i) pdf[i] = total > 0.0 ? weights[i] / total : 1.0 / bins;
  std::vector<double> cdf(bins + 1, 0.0);
  for (std::size_t i = 0; i < bins; ++i) cdf[i + 1] = cdf[i] + pdf[i];
  std::vector<double> out;
  out.reserve(uniforms.size());
  for (double u : uniforms) {
    // Last bin with cdf[j] <= u that carries mass.
    std::size_t j = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end() - 1, u) - cdf.begin());
    j = j == 0 ? 0 : j - 1;
    while (pdf[j] <= 0.0 && j + 1 < bins) ++j;
    while (pdf[j] <= 0.0 && j > 0) --j;
    const double frac = pdf[j] > 0.0 ? std::clamp((u - cdf[j]) / pdf[j], 0.0, 1.0) : 0.5;
    out.push_back(edges[j] + frac * (edges[j + 1] - edges[j]));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<double> hierarchical_samples(const Ray& ray, const std::vector<double>& coarse_t,
                                         const std::vector<double>& coarse_weights, int n_fine,
                                         std::mt19937_64* rng) {
  if (coarse_t.size() != coarse_weights.size()) {
    throw std::invalid_argument("hierarchical_samples: weights and t differ in length");
  }
  std::vector<double> u(static_cast<std::size_t>(n_fine));
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  for (int i = 0; i < n_fine; ++i) {
    u[static_cast<std::size_t>(i)] = rng != nullptr ? dist(*rng) : (i + 0.5) / n_fine;
  }
  return inverse_cdf_samples(sample_bin_edges(ray, coarse_t), coarse_weights, u);
}

std::vector<double> merge_samples(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> out(a.size() + b.size());
  std::merge(a.begin(), a.end(), b.begin(), b.end(), out.begin());
  return out;
}

Var composite_rays(Var sigma, Var rgb, const Tensor& t, bool white_background, Tensor* weights_out) {
  const Eigen::Index rays = t.rows(), per = t.cols();
  if (sigma.rows() != rays * per || rgb.rows() != rays * per || sigma.cols() != 1 || rgb.cols() != 3) {
    throw std::invalid_argument("composite_rays: expected [R*S x 1] sigma and [R*S x 3] rgb for t of " +
                                std::to_string(rays) + "x" + std::to_string(per));
  }
  const Tensor& sv = sigma.value();
  const Tensor& cv = rgb.value();
  Tensor out(rays, 3);
  Tensor weights(rays, per);
  const Eigen::Vector3d white = Eigen::Vector3d::Ones();
  std::vector<double> s(static_cast<std::size_t>(per)), tt(static_cast<std::size_t>(per));
  std::vector<Eigen::Vector3d> c(static_cast<std::size_t>(per));
  for (Eigen::Index r = 0; r < rays; ++r) {
    for (Eigen::Index i = 0; i < per; ++i) {
      s[i] = sv(r * per + i, 0);
      c[i] = cv.row(r * per + i).transpose();
      tt[i] = t(r, i);
    }
    const auto res = composite(s, c, tt, white_background ? &white : nullptr);
    out.row(r) = res.rgb.transpose();
    for (Eigen::Index i = 0; i < per; ++i) weights(r, i) = res.weights[i];
  }
  if (weights_out != nullptr) *weights_out = weights;
  Tape& tape = *sigma.tape;
  const int is = sigma.id, ic = rgb.id;
  return tape.push(std::move(out), {is, ic},
                   [is, ic, t, weights, white_background, rays, per](Tape& tp, int self) {
                     const Tensor& g = tp.grad_slot(self);
                     const Tensor& sv = tp.value(is);
                     const Tensor& cv = tp.value(ic);
                     const bool need_s = tp.needs_grad(is), need_c = tp.needs_grad(ic);
                     Tensor* gs = need_s ? &tp.grad_slot(is) : nullptr;
                     Tensor* gc = need_c ? &tp.grad_slot(ic) : nullptr;
                     for (Eigen::Index r = 0; r < rays; ++r) {
                       const Eigen::RowVector3d gr = g.row(r);
                       if (gc != nullptr) {
                         for (Eigen::Index i = 0; i < per; ++i) gc->row(r * per + i) += weights(r, i) * gr;
                       }
                       if (gs == nullptr) continue;
                       // T after each sample, then suffix sums of w_i c_i.
                       std::vector<double> after(static_cast<std::size_t>(per));
                       std::vector<double> dt(static_cast<std::size_t>(per));
                       double trans = 1.0;
                       for (Eigen::Index i = 0; i < per; ++i) {
                         dt[i] = (i + 1 < per) ? t(r, i + 1) - t(r, i) : kLastIntervalCap;
                         trans *= std::exp(-sv(r * per + i, 0) * dt[i]);
                         after[i] = trans;
                       }
                       const double bg = white_background ? gr.sum() * trans : 0.0;
                       double tail = 0.0;  // sum_{i>k} w_i <c_i, g>
                       for (Eigen::Index k = per - 1; k >= 0; --k) {
                         const double cg = cv.row(r * per + k).dot(gr);
                         const double d_tau = cg * after[k] - tail - bg;
                         (*gs)(r * per + k, 0) += d_tau * dt[k];
                         tail += weights(r, k) * cg;
                       }
                     }
                   });
}

ExitPolicy exit_policy_for(const RenderOptions& options, const StageNode& root) {
  ExitPolicy p;
  switch (options.mode) {
    case RenderMode::early_exit:
      p.epsilon = options.epsilon;
      break;
    case RenderMode::fixed_level:
      p.fixed_level = std::max(1, options.level);
      break;
    case RenderMode::full_depth:
      p.fixed_level = tree_depth(root);
      break;
  }
  return p;
}

namespace {

struct ChunkResult {
  std::vector<Eigen::Vector3d> rgb;
  std::vector<int> exit_map;
  std::vector<std::vector<Eigen::Vector3d>> stage_rgb;
  std::vector<std::int64_t> hist, coarse_hist, flops_by_exit;
  std::int64_t coarse_flops = 0, fine_flops = 0;
};

void add_hist(std::vector<std::int64_t>& h, int depth, std::int64_t amount = 1) {
  if (static_cast<int>(h.size()) < depth) h.resize(static_cast<std::size_t>(depth), 0);
  h[static_cast<std::size_t>(depth - 1)] += amount;
}

EncodedBatch batch_for(const ModelTree& model, const std::vector<Ray>& rays, std::size_t begin,
                       std::size_t count, const std::vector<std::vector<double>>& t) {
  std::size_t total = 0;
  for (std::size_t r = 0; r < count; ++r) total += t[r].size();
  Tensor pos(static_cast<Eigen::Index>(total), 3), dir(static_cast<Eigen::Index>(total), 3);
  Eigen::Index k = 0;
  for (std::size_t r = 0; r < count; ++r) {
    const Ray& ray = rays[begin + r];
    for (double ti : t[r]) {
      pos.row(k) = ray.at(ti).transpose();
      dir.row(k) = ray.direction.transpose();
      ++k;
    }
  }
  return encode_batch(model.config, pos, dir);
}

ChunkResult render_chunk(const ModelTree& model, const std::vector<Ray>& rays, std::size_t begin,
                         std::size_t count, const RenderOptions& opt) {
  ChunkResult res;
  const Eigen::Vector3d white = Eigen::Vector3d::Ones();
  const Eigen::Vector3d* bg = opt.white_background ? &white : nullptr;

  std::vector<std::vector<double>> tc(count);
  for (std::size_t r = 0; r < count; ++r) tc[r] = stratified_samples(rays[begin + r], opt.n_coarse);
  RenderOptions coarse_opt = opt;
  if (!opt.coarse_early_exit && opt.mode == RenderMode::early_exit) coarse_opt.mode = RenderMode::full_depth;
  const EarlyExitBatch coarse = forward_early_exit(model.coarse_root, model.config,
                                                   batch_for(model, rays, begin, count, tc),
                                                   exit_policy_for(coarse_opt, model.coarse_root));
  std::vector<std::vector<double>> tf(count);
  {
    std::size_t k = 0;
    for (std::size_t r = 0; r < count; ++r) {
      std::vector<double> s(tc[r].size());
      std::vector<Eigen::Vector3d> c(tc[r].size());
      for (std::size_t i = 0; i < tc[r].size(); ++i, ++k) {
        s[i] = coarse.sigma(static_cast<Eigen::Index>(k), 0);
        c[i] = coarse.rgb.row(static_cast<Eigen::Index>(k)).transpose();
        res.coarse_flops += coarse.flops[k];
        add_hist(res.coarse_hist, coarse.exit_stage[k]);
      }
      const auto comp = composite(s, c, tc[r], bg);
      const auto extra = hierarchical_samples(rays[begin + r], tc[r], comp.weights, opt.n_fine);
      tf[r] = merge_samples(tc[r], extra);
    }
  }

  const EarlyExitBatch fine = forward_early_exit(model.fine_root, model.config,
                                                 batch_for(model, rays, begin, count, tf),
                                                 exit_policy_for(opt, model.fine_root));
  const int depth = tree_depth(model.fine_root);
  res.hist.assign(static_cast<std::size_t>(depth), 0);
  res.flops_by_exit.assign(static_cast<std::size_t>(depth), 0);
  res.rgb.resize(count);
  res.exit_map.resize(count);
  if (opt.per_stage_images) res.stage_rgb.assign(static_cast<std::size_t>(depth), std::vector<Eigen::Vector3d>(count));
  std::size_t k = 0;
  for (std::size_t r = 0; r < count; ++r) {
    const std::size_t n = tf[r].size();
    std::vector<double> s(n);
    std::vector<Eigen::Vector3d> c(n);
    std::vector<int> stage(n);
    for (std::size_t i = 0; i < n; ++i, ++k) {
      s[i] = fine.sigma(static_cast<Eigen::Index>(k), 0);
      c[i] = fine.rgb.row(static_cast<Eigen::Index>(k)).transpose();
      stage[i] = fine.exit_stage[k];
      res.fine_flops += fine.flops[k];
      add_hist(res.hist, stage[i]);
      add_hist(res.flops_by_exit, stage[i], fine.flops[k]);
    }
    const auto comp = composite(s, c, tf[r], bg);
    res.rgb[r] = comp.rgb;
    const auto best = std::max_element(comp.weights.begin(), comp.weights.end()) - comp.weights.begin();
    res.exit_map[r] = stage[static_cast<std::size_t>(best)];
    if (opt.per_stage_images) {
      for (int d = 1; d <= depth; ++d) {
        std::vector<double> sd(n);
        for (std::size_t i = 0; i < n; ++i) sd[i] = stage[i] == d ? s[i] : 0.0;
        res.stage_rgb[static_cast<std::size_t>(d - 1)][r] = composite(sd, c, tf[r], bg).rgb;
      }
    }
  }
  return res;
}

}  // namespace

RenderOutput render_rays(const ModelTree& model, const std::vector<Ray>& rays, const RenderOptions& options) {
  const std::size_t chunk = static_cast<std::size_t>(std::max(1, options.chunk_rays));
  const std::size_t n_chunks = (rays.size() + chunk - 1) / chunk;
  std::vector<ChunkResult> parts(n_chunks);
  const int threads = std::max(1, std::min<int>(options.threads, static_cast<int>(n_chunks)));
  auto work = [&](int tid) {
    for (std::size_t c = static_cast<std::size_t>(tid); c < n_chunks; c += static_cast<std::size_t>(threads)) {
      const std::size_t begin = c * chunk;
      parts[c] = render_chunk(model, rays, begin, std::min(chunk, rays.size() - begin), options);
    }
  };
  if (threads == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, t);
    for (auto& th : pool) th.join();
  }

  RenderOutput out;
  const int depth = tree_depth(model.fine_root);
  out.image = Image(1, static_cast<int>(rays.size()));
  out.exit_histogram.assign(static_cast<std::size_t>(depth), 0);
  out.flops_by_exit.assign(static_cast<std::size_t>(depth), 0);
  out.coarse_exit_histogram.assign(static_cast<std::size_t>(tree_depth(model.coarse_root)), 0);
  if (options.per_stage_images) out.stage_images.assign(static_cast<std::size_t>(depth), Image(1, static_cast<int>(rays.size())));
  std::size_t row = 0;
  for (const ChunkResult& p : parts) {
    for (std::size_t i = 0; i < p.rgb.size(); ++i, ++row) {
      for (int ch = 0; ch < 3; ++ch) {
        out.image.at(static_cast<int>(row), 0, ch) = p.rgb[i][ch];
        for (std::size_t d = 0; d < p.stage_rgb.size(); ++d) {
          out.stage_images[d].at(static_cast<int>(row), 0, ch) = p.stage_rgb[d][i][ch];
        }
      }
      out.exit_map.push_back(p.exit_map[i]);
    }
    for (std::size_t d = 0; d < p.hist.size(); ++d) {
      out.exit_histogram[d] += p.hist[d];
      out.flops_by_exit[d] += p.flops_by_exit[d];
    }
    for (std::size_t d = 0; d < p.coarse_hist.size() && d < out.coarse_exit_histogram.size(); ++d) {
      out.coarse_exit_histogram[d] += p.coarse_hist[d];
    }
    out.fine_flops += p.fine_flops;
    out.total_flops += p.fine_flops + p.coarse_flops;
  }
  return out;
}

namespace {

Image reshape(const Image& column, int width, int height) {
  Image img(width, height);
  img.data = column.data;
  return img;
}

}  // namespace

RenderOutput render_image(const ModelTree& model, const CameraPose& pose, const RenderOptions& options) {
  const auto rays = camera_rays(pose, all_pixels(pose.width, pose.height), model.config.bounds);
  RenderOutput out = render_rays(model, rays, options);
  out.image = reshape(out.image, pose.width, pose.height);
  for (Image& s : out.stage_images) s = reshape(s, pose.width, pose.height);
  return out;
}

}  // namespace recurf
