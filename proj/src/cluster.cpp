#include "recurf/cluster.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>

namespace recurf {

int nearest_center(const std::vector<Eigen::Vector3d>& centers, const Eigen::Vector3d& p) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < centers.size(); ++i) {
    const double d = (centers[i] - p).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(i);
    }
  }
  return best;
}

namespace {

std::vector<Eigen::Vector3d> seed_plus_plus(const std::vector<Eigen::Vector3d>& points, int k,
                                            std::mt19937_64& rng) {
  std::vector<Eigen::Vector3d> centers;
  std::uniform_int_distribution<std::size_t> first(0, points.size() - 1);
  centers.push_back(points[first(rng)]);
  std::vector<double> d2(points.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(centers.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      d2[i] = std::min(d2[i], (points[i] - centers.back()).squaredNorm());
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total <= 0.0) {
      pick = first(rng);
    } else {
      std::uniform_real_distribution<double> u(0.0, total);
      const double target = u(rng);
      double acc = 0.0;
      pick = points.size() - 1;
      for (std::size_t i = 0; i < points.size(); ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    centers.push_back(points[pick]);
  }
  return centers;
}

double assign(const std::vector<Eigen::Vector3d>& points, const std::vector<Eigen::Vector3d>& centers,
              std::vector<int>& assignments) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    assignments[i] = nearest_center(centers, points[i]);
    inertia += (points[i] - centers[static_cast<std::size_t>(assignments[i])]).squaredNorm();
  }
  return inertia;
}

}  // namespace

namespace {

void update_centers(const std::vector<Eigen::Vector3d>& points, int k, ClusterResult& r) {
  std::vector<Eigen::Vector3d> sums(static_cast<std::size_t>(k), Eigen::Vector3d::Zero());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    sums[static_cast<std::size_t>(r.assignments[i])] += points[i];
    counts[static_cast<std::size_t>(r.assignments[i])] += 1;
  }
  std::vector<char> taken(points.size(), 0);
  for (int c = 0; c < k; ++c) {
    if (counts[static_cast<std::size_t>(c)] > 0) {
      r.centers[static_cast<std::size_t>(c)] = sums[static_cast<std::size_t>(c)] / counts[static_cast<std::size_t>(c)];
      continue;
    }
    // Empty cluster: move it onto the worst-served point.
    double worst = -1.0;
    std::size_t worst_i = 0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double d = (points[i] - r.centers[static_cast<std::size_t>(r.assignments[i])]).squaredNorm();
      if (!taken[i] && d > worst) {
        worst = d;
        worst_i = i;
      }
    }
    taken[worst_i] = 1;
    r.centers[static_cast<std::size_t>(c)] = points[worst_i];
  }
}

/// One sweep of single-point transfers: moves a point whenever relocating it
/// lowers the inertia once both centroids are updated. Returns whether any
/// point moved. Centers hold the cluster means afterwards.
bool transfer_sweep(const std::vector<Eigen::Vector3d>& points, int k, ClusterResult& r) {
  std::vector<Eigen::Vector3d> sums(static_cast<std::size_t>(k), Eigen::Vector3d::Zero());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    sums[static_cast<std::size_t>(r.assignments[i])] += points[i];
    counts[static_cast<std::size_t>(r.assignments[i])] += 1;
  }
  bool moved = false;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto a = static_cast<std::size_t>(r.assignments[i]);
    if (counts[a] < 2) continue;
    const double na = counts[a];
    const double cost_out = na / (na - 1.0) * (points[i] - sums[a] / na).squaredNorm();
    double best_gain = 0.0;
    int best_c = -1;
    for (int c = 0; c < k; ++c) {
      const auto cc = static_cast<std::size_t>(c);
      if (cc == a || counts[cc] == 0) continue;
      const double nb = counts[cc];
      const double cost_in = nb / (nb + 1.0) * (points[i] - sums[cc] / nb).squaredNorm();
      const double gain = cost_out - cost_in;
      if (gain > 1e-12 * (cost_out + cost_in) && gain > best_gain) {
        best_gain = gain;
        best_c = c;
      }
    }
    if (best_c < 0) continue;
    const auto b = static_cast<std::size_t>(best_c);
    sums[a] -= points[i];
    counts[a] -= 1;
    sums[b] += points[i];
    counts[b] += 1;
    r.assignments[i] = best_c;
    moved = true;
  }
  if (moved) update_centers(points, k, r);
  return moved;
}

}  // namespace

ClusterResult kmeans(const std::vector<Eigen::Vector3d>& points, int k, std::uint64_t seed, int max_iters) {
  if (k < 1) throw std::invalid_argument("kmeans: k must be positive");
  if (points.size() < static_cast<std::size_t>(k)) {
    throw std::invalid_argument("kmeans: " + std::to_string(points.size()) +
                                " points cannot form " + std::to_string(k) + " clusters");
  }
  std::mt19937_64 rng(seed);
  ClusterResult r;
  r.centers = seed_plus_plus(points, k, rng);
  r.assignments.assign(points.size(), 0);
  r.inertia = assign(points, r.centers, r.assignments);
  r.inertia_trace.push_back(r.inertia);
  int it = 0;
  while (true) {
    for (; it < max_iters; ++it) {
      update_centers(points, k, r);
      const std::vector<int> previous = r.assignments;
      r.inertia = assign(points, r.centers, r.assignments);
      r.inertia_trace.push_back(r.inertia);
      r.iterations_run = it + 1;
      if (r.assignments == previous) break;
    }
    if (it >= max_iters || !transfer_sweep(points, k, r)) break;
    // Reassigning to the refined means can only lower the inertia further.
    r.inertia = assign(points, r.centers, r.assignments);
    r.inertia_trace.push_back(r.inertia);
    ++it;
  }
  return r;
}

ClusterResult kmeans_best_of(const std::vector<Eigen::Vector3d>& points, int k, std::uint64_t seed,
                             int max_iters, int restarts) {
  ClusterResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int i = 0; i < std::max(1, restarts); ++i) {
    ClusterResult r = kmeans(points, k, seed + 0x632be59bd9b4e019ULL * static_cast<std::uint64_t>(i), max_iters);
    if (r.inertia < best.inertia) best = std::move(r);
  }
  return best;
}

std::vector<Eigen::Vector3d> grid_points(const Aabb& bounds, int n) {
  std::vector<Eigen::Vector3d> out;
  out.reserve(static_cast<std::size_t>(n) * n * n);
  const Eigen::Vector3d step = (bounds.hi - bounds.lo) / n;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < n; ++l)
        out.emplace_back(bounds.lo + step.cwiseProduct(Eigen::Vector3d(i + 0.5, j + 0.5, l + 0.5)));
  return out;
}

namespace {

bool find_path(const StageNode& node, const StageNode& target, std::vector<int>& path) {
  if (&node == &target) return true;
  for (std::size_t c = 0; c < node.children.size(); ++c) {
    path.push_back(static_cast<int>(c));
    if (find_path(node.children[c], target, path)) return true;
    path.pop_back();
  }
  return false;
}

}  // namespace

std::vector<int> path_to(const StageNode& root, const StageNode& target) {
  std::vector<int> path;
  if (!find_path(root, target, path)) throw std::invalid_argument("path_to: stage not in tree");
  return path;
}

std::vector<Eigen::Vector3d> sample_uncertain_points(const StageNode& root, const StageNode& target,
                                                     const FieldConfig& config,
                                                     const std::vector<Eigen::Vector3d>& candidates,
                                                     double epsilon, std::size_t cap,
                                                     std::uint64_t seed) {
  const std::vector<int> path = path_to(root, target);
  std::vector<Eigen::Vector3d> routed;
  for (const auto& p : candidates) {
    const StageNode* n = &root;
    bool ok = true;
    for (int c : path) {
      if (route(*n, p) != c) {
        ok = false;
        break;
      }
      n = &n->children[static_cast<std::size_t>(c)];
    }
    if (ok) routed.push_back(p);
  }
  std::vector<Eigen::Vector3d> kept;
  constexpr std::size_t kChunk = 8192;
  for (std::size_t start = 0; start < routed.size(); start += kChunk) {
    const std::size_t count = std::min(kChunk, routed.size() - start);
    Tensor pos(static_cast<Eigen::Index>(count), 3);
    for (std::size_t i = 0; i < count; ++i) pos.row(static_cast<Eigen::Index>(i)) = routed[start + i].transpose();
    // Uncertainty does not depend on the view direction.
    const Tensor dirs = Tensor::Zero(static_cast<Eigen::Index>(count), 3);
    const EncodedBatch batch = encode_batch(config, pos, dirs);
    Tape tape(false);
    Var pos_enc = tape.constant(batch.pos_enc);
    Var input = pos_enc;
    const StageNode* n = &root;
    std::size_t step = 0;
    while (true) {
      const StageTrunk trunk = stage_trunk(tape, *n, input);
      if (n == &target) {
        for (std::size_t i = 0; i < count; ++i) {
          if (trunk.delta.value()(static_cast<Eigen::Index>(i), 0) >= epsilon) kept.push_back(routed[start + i]);
        }
        break;
      }
      n = &n->children[static_cast<std::size_t>(path[step++])];
      input = config.reinject_position ? concat_cols(trunk.y, pos_enc) : trunk.y;
    }
  }
  if (kept.size() > cap) {
    std::mt19937_64 rng(seed);
    std::shuffle(kept.begin(), kept.end(), rng);
    kept.resize(cap);
  }
  return kept;
}

}  // namespace recurf
