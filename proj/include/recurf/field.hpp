#pragma once

#include "recurf/diffcore.hpp"
#include "recurf/geometry.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace recurf {

struct EncodingConfig {
  int pos_frequencies = 10;
  int dir_frequencies = 4;
  bool include_raw = true;

  [[nodiscard]] int position_width() const { return 3 * ((include_raw ? 1 : 0) + 2 * pos_frequencies); }
  [[nodiscard]] int direction_width() const { return 3 * ((include_raw ? 1 : 0) + 2 * dir_frequencies); }
};

/// Per component: optionally p, then sin(2^j pi p), cos(2^j pi p) for j < L.
Eigen::VectorXd positional_encode(const Eigen::VectorXd& p, int frequencies, bool include_raw);

/// Row-wise encoding of an [N x 3] array.
Tensor encode_rows(const Tensor& points, int frequencies, bool include_raw);

struct FieldConfig {
  int width = 256;
  int color_hidden = 128;
  EncodingConfig encoding;
  /// Concatenate the encoded position onto the parent latent at every child.
  bool reinject_position = false;
  /// Positions are mapped from these bounds onto [-1, 1]^3 before encoding.
  Aabb bounds;

  [[nodiscard]] int child_input_width() const {
    return width + (reinject_position ? encoding.position_width() : 0);
  }
};

struct OutNet {
  Linear alpha;    // feature -> 1, density logit
  Linear feature;  // feature -> feature
  Linear color_hidden;  // feature ++ encoded direction -> hidden
  Linear color_out;     // hidden -> 3

  [[nodiscard]] std::int64_t param_count() const;
  [[nodiscard]] std::int64_t flops_per_sample() const;
};

struct StageNode {
  int stage_index = 1;
  std::vector<Linear> mlp;
  Linear uncertainty;
  OutNet out;
  std::vector<StageNode> children;
  std::vector<Eigen::Vector3d> centers;

  [[nodiscard]] bool is_leaf() const { return children.empty(); }
  [[nodiscard]] int input_width() const { return mlp.empty() ? 0 : mlp.front().in_features(); }
  /// MLP layers plus the uncertainty head.
  [[nodiscard]] std::int64_t trunk_flops() const;
  [[nodiscard]] std::int64_t head_flops() const { return out.flops_per_sample(); }
};

/// Fresh stage with `depth` MLP layers taking `input_width` features.
StageNode make_stage(int stage_index, int input_width, int depth, const FieldConfig& config,
                     std::mt19937_64& rng);

struct ModelTree {
  FieldConfig config;
  StageNode coarse_root;
  StageNode fine_root;
  double epsilon = 1e-3;
};

ModelTree make_model(const FieldConfig& config, int root_depth, double epsilon, std::uint64_t seed);

struct FieldSample {
  Eigen::Vector3d c = Eigen::Vector3d::Zero();
  double sigma = 0.0;
  double delta = 0.0;
  Eigen::VectorXd y;
};

/// Index of the nearest child center; ties resolve to the lowest index.
int route(const StageNode& node, const Eigen::Vector3d& position);

/// Maximum root-to-leaf depth (1 for a single stage).
int tree_depth(const StageNode& root);
std::int64_t count_params(const StageNode& root);
std::int64_t count_params(const ModelTree& model);

/// Calls f(node) for every stage, parents before children.
template <typename Node, typename F>
void for_each_stage(Node& root, F&& f) {
  f(root);
  for (auto& child : root.children) for_each_stage(child, f);
}

/// Cumulative MLP layer count at each depth along the first child path
/// (e.g. 2, 4, 8, 12 for the default schedule).
std::vector<int> cumulative_layers(const StageNode& root);

// -- Batched forward passes ---------------------------------------------------

struct StageTrunk {
  Var y;
  Var delta;
};
struct StageHead {
  Var sigma;
  Var rgb;
};

StageTrunk stage_trunk(Tape& tape, const StageNode& node, Var input);
StageHead stage_head(Tape& tape, const StageNode& node, Var y, Var encoded_dir);

/// Encoded [N x width] inputs for a batch of world positions and directions.
struct EncodedBatch {
  Tensor positions;  // world coordinates, [N x 3]
  Tensor pos_enc;
  Tensor dir_enc;
};
EncodedBatch encode_batch(const FieldConfig& config, const Tensor& positions, const Tensor& directions);

/// Outputs seen by an image rendered at exit level l: each sample exits at
/// stage min(l, its path depth).
struct LevelOutputs {
  Var sigma;  // [N x 1]
  Var rgb;    // [N x 3]
  Var delta;  // [N x 1]
};

struct AllExitsBatch {
  std::vector<LevelOutputs> levels;  // levels[0] is exit level 1
  std::vector<int> path_depth;       // per sample
};

/// Every sample passes through every stage on its routed path; all outlets
/// are differentiable.
AllExitsBatch forward_all_exits(Tape& tape, const StageNode& root, const FieldConfig& config,
                                const EncodedBatch& batch);

struct ExitPolicy {
  /// Exit at the first stage with delta < epsilon. epsilon <= 0 disables
  /// early exit, so every sample leaves at its leaf.
  double epsilon = 0.0;
  /// When positive, ignore delta and exit at min(fixed_level, leaf depth).
  int fixed_level = 0;
};

struct EarlyExitBatch {
  Tensor sigma;  // [N x 1]
  Tensor rgb;    // [N x 3]
  Tensor delta;  // [N x 1]
  std::vector<int> exit_stage;
  std::vector<std::int64_t> flops;
};

/// Inference pass: OutNet runs only at the exit stage and deeper stages are
/// skipped. Values are bitwise identical to the matching forward_all_exits
/// entries.
EarlyExitBatch forward_early_exit(const StageNode& root, const FieldConfig& config,
                                  const EncodedBatch& batch, const ExitPolicy& policy);

// -- Single-query convenience wrappers ------------------------------------------

FieldSample stage_forward(const StageNode& node, const Eigen::VectorXd& input_feature,
                          const Eigen::VectorXd& encoded_dir);

std::vector<FieldSample> forward_all_exits(const StageNode& root, const FieldConfig& config,
                                           const Eigen::Vector3d& position,
                                           const Eigen::Vector3d& direction);

struct EarlyExitResult {
  FieldSample sample;
  int exit_stage = 1;
  std::int64_t flops = 0;
};

EarlyExitResult forward_early_exit(const StageNode& root, const FieldConfig& config,
                                   const Eigen::Vector3d& position, const Eigen::Vector3d& direction,
                                   double epsilon);

// -- Growth -----------------------------------------------------------------------

enum class Division {
  kmeans,  // k-means++ / Lloyd over the uncertain points
  random,  // k uncertain points drawn uniformly as centers
};

struct GrowthResult {
  bool grown = false;
  std::string status;
  double inertia = 0.0;
};

/// Installs k children at cluster centers of `uncertain_points`. Each child
/// gets `child_depth` fresh MLP layers, a fresh uncertainty head and OutNet,
/// but inherits the parent's alpha linear weights and bias verbatim.
/// k = 1 is accepted for the chain (no-branch) ablation.
GrowthResult grow(StageNode& node, const std::vector<Eigen::Vector3d>& uncertain_points, int k,
                  int child_depth, std::uint64_t seed, const FieldConfig& config,
                  Division division = Division::kmeans);

/// Leaves of the tree, in depth-first order.
std::vector<StageNode*> leaves(StageNode& root);

}  // namespace recurf
