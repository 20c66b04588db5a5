#pragma once

#include "recurf/field.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace recurf {

struct ClusterResult {
  std::vector<Eigen::Vector3d> centers;
  std::vector<int> assignments;
  double inertia = 0.0;
  int iterations_run = 0;
  /// Inertia after every assignment step, in order.
  std::vector<double> inertia_trace;
};

/// Nearest center with ties resolved to the lowest index.
int nearest_center(const std::vector<Eigen::Vector3d>& centers, const Eigen::Vector3d& p);

/// k-means++ seeding followed by Lloyd iterations until the assignments stop
/// changing or `max_iters` updates ran. A Lloyd fixpoint is then refined by
/// single-point transfers and Lloyd resumes, until neither changes anything.
/// An empty cluster is reseeded at the point farthest from its current center.
ClusterResult kmeans(const std::vector<Eigen::Vector3d>& points, int k, std::uint64_t seed,
                     int max_iters = 100);

/// Lowest-inertia result over `restarts` independently seeded runs.
ClusterResult kmeans_best_of(const std::vector<Eigen::Vector3d>& points, int k, std::uint64_t seed,
                             int max_iters = 100, int restarts = 5);

/// Regular n^3 grid of cell centers over the box.
std::vector<Eigen::Vector3d> grid_points(const Aabb& bounds, int n);

/// Path of child indices from `root` to `target`; empty when target is root.
/// Throws if target is not in the tree.
std::vector<int> path_to(const StageNode& root, const StageNode& target);

/// Candidates routed to `target` whose uncertainty there is >= epsilon,
/// capped at `cap` points (a seeded subsample when more qualify).
std::vector<Eigen::Vector3d> sample_uncertain_points(const StageNode& root, const StageNode& target,
                                                     const FieldConfig& config,
                                                     const std::vector<Eigen::Vector3d>& candidates,
                                                     double epsilon, std::size_t cap,
                                                     std::uint64_t seed);

}  // namespace recurf
