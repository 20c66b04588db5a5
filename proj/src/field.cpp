#include "recurf/field.hpp"

#include "recurf/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace recurf {

Eigen::VectorXd positional_encode(const Eigen::VectorXd& p, int frequencies, bool include_raw) {
  if (frequencies < 0) throw std::invalid_argument("positional_encode: negative frequency count");
  const int per = (include_raw ? 1 : 0) + 2 * frequencies;
  Eigen::VectorXd out(p.size() * per);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (include_raw) out[k++] = p[i];
    double freq = std::numbers::pi;
    for (int j = 0; j < frequencies; ++j) {
      out[k++] = std::sin(freq * p[i]);
      out[k++] = std::cos(freq * p[i]);
      freq *= 2.0;
    }
  }
  return out;
}

Tensor encode_rows(const Tensor& points, int frequencies, bool include_raw) {
  const int per = (include_raw ? 1 : 0) + 2 * frequencies;
  Tensor out(points.rows(), points.cols() * per);
  for (Eigen::Index r = 0; r < points.rows(); ++r) {
    out.row(r) = positional_encode(points.row(r).transpose(), frequencies, include_raw).transpose();
  }
  return out;
}

std::int64_t OutNet::param_count() const {
  return alpha.param_count() + feature.param_count() + color_hidden.param_count() +
         color_out.param_count();
}

std::int64_t OutNet::flops_per_sample() const {
  return alpha.flops_per_sample() + feature.flops_per_sample() + color_hidden.flops_per_sample() +
         color_out.flops_per_sample();
}

std::int64_t StageNode::trunk_flops() const {
  std::int64_t f = uncertainty.flops_per_sample();
  for (const Linear& l : mlp) f += l.flops_per_sample();
  return f;
}

StageNode make_stage(int stage_index, int input_width, int depth, const FieldConfig& config,
                     std::mt19937_64& rng) {
  if (depth < 1) throw std::invalid_argument("make_stage: a stage needs at least one MLP layer");
  StageNode node;
  node.stage_index = stage_index;
  const std::string prefix = "stage" + std::to_string(stage_index);
  int in = input_width;
  for (int i = 0; i < depth; ++i) {
    node.mlp.emplace_back(in, config.width, rng, prefix + ".mlp" + std::to_string(i));
    in = config.width;
  }
  node.uncertainty = Linear(config.width, 1, rng, prefix + ".uncertainty");
  node.out.alpha = Linear(config.width, 1, rng, prefix + ".alpha");
  node.out.feature = Linear(config.width, config.width, rng, prefix + ".feature");
  node.out.color_hidden = Linear(config.width + config.encoding.direction_width(), config.color_hidden,
                                 rng, prefix + ".color_hidden");
  node.out.color_out = Linear(config.color_hidden, 3, rng, prefix + ".color_out");
  return node;
}

ModelTree make_model(const FieldConfig& config, int root_depth, double epsilon, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ModelTree m;
  m.config = config;
  m.epsilon = epsilon;
  m.coarse_root = make_stage(1, config.encoding.position_width(), root_depth, config, rng);
  m.fine_root = make_stage(1, config.encoding.position_width(), root_depth, config, rng);
  return m;
}

int route(const StageNode& node, const Eigen::Vector3d& position) {
  if (node.is_leaf() || node.centers.empty()) {
    throw std::logic_error("route: stage " + std::to_string(node.stage_index) + " is a leaf");
  }
  return nearest_center(node.centers, position);
}

int tree_depth(const StageNode& root) {
  int d = 0;
  for (const StageNode& c : root.children) d = std::max(d, tree_depth(c));
  return d + 1;
}

std::int64_t count_params(const StageNode& root) {
  std::int64_t n = 0;
  for_each_stage(root, [&n](const StageNode& s) {
    for (const Linear& l : s.mlp) n += l.param_count();
    n += s.uncertainty.param_count() + s.out.param_count();
  });
  return n;
}

std::int64_t count_params(const ModelTree& model) {
  return count_params(model.coarse_root) + count_params(model.fine_root);
}

std::vector<int> cumulative_layers(const StageNode& root) {
  std::vector<int> out;
  const StageNode* n = &root;
  int total = 0;
  while (true) {
    total += static_cast<int>(n->mlp.size());
    out.push_back(total);
    if (n->is_leaf()) break;
    n = &n->children.front();
  }
  return out;
}

StageTrunk stage_trunk(Tape& tape, const StageNode& node, Var input) {
  if (input.cols() != node.input_width()) {
    throw std::invalid_argument("stage " + std::to_string(node.stage_index) + ": input width " +
                                std::to_string(input.cols()) + " but MLP expects " +
                                std::to_string(node.input_width()));
  }
  Var x = input;
  for (const Linear& layer : node.mlp) x = relu(tape.linear(layer, x));
  return {x, tape.linear(node.uncertainty, x)};
}

StageHead stage_head(Tape& tape, const StageNode& node, Var y, Var encoded_dir) {
  if (encoded_dir.cols() + y.cols() != node.out.color_hidden.in_features()) {
    throw std::invalid_argument("stage " + std::to_string(node.stage_index) +
                                ": direction encoding width " + std::to_string(encoded_dir.cols()) +
                                " does not match the color head");
  }
  Var sigma = softplus(tape.linear(node.out.alpha, y));
  Var feat = tape.linear(node.out.feature, y);
  Var h = relu(tape.linear(node.out.color_hidden, concat_cols(feat, encoded_dir)));
  Var rgb = sigmoid(tape.linear(node.out.color_out, h));
  return {sigma, rgb};
}

EncodedBatch encode_batch(const FieldConfig& config, const Tensor& positions, const Tensor& directions) {
  if (positions.cols() != 3 || directions.cols() != 3 || positions.rows() != directions.rows()) {
    throw std::invalid_argument("encode_batch: expected matching [N x 3] positions and directions");
  }
  const Eigen::RowVector3d c = config.bounds.center().transpose();
  const Eigen::RowVector3d h = config.bounds.half_extent().transpose();
  Tensor normalized(positions.rows(), 3);
  for (Eigen::Index r = 0; r < positions.rows(); ++r) {
    normalized.row(r) = (positions.row(r) - c).cwiseQuotient(h);
  }
  EncodedBatch b;
  b.positions = positions;
  b.pos_enc = encode_rows(normalized, config.encoding.pos_frequencies, config.encoding.include_raw);
  b.dir_enc = encode_rows(directions, config.encoding.dir_frequencies, config.encoding.include_raw);
  return b;
}

namespace {

struct Piece {
  int depth = 1;
  bool leaf = false;
  std::vector<int> rows;
  Var sigma, rgb, delta;
};

// Splits local rows of `node` by routed child.
std::vector<std::vector<int>> partition_by_route(const StageNode& node, const Tensor& positions,
                                                 const std::vector<int>& global_rows,
                                                 const std::vector<int>& local) {
  std::vector<std::vector<int>> parts(node.children.size());
  for (int li : local) {
    const Eigen::Vector3d p = positions.row(global_rows[li]).transpose();
    parts[route(node, p)].push_back(li);
  }
  return parts;
}

Var child_input(const FieldConfig& config, Var y, Var pos_enc) {
  return config.reinject_position ? concat_cols(y, pos_enc) : y;
}

void visit_all(Tape& tape, const StageNode& node, const FieldConfig& config, const EncodedBatch& batch,
               Var input, Var dir_enc, Var pos_enc, const std::vector<int>& rows, int depth,
               std::vector<Piece>& pieces, std::vector<int>& path_depth) {
  const StageTrunk trunk = stage_trunk(tape, node, input);
  const StageHead head = stage_head(tape, node, trunk.y, dir_enc);
  pieces.push_back(Piece{depth, node.is_leaf(), rows, head.sigma, head.rgb, trunk.delta});
  if (node.is_leaf()) {
    for (int r : rows) path_depth[r] = depth;
    return;
  }
  std::vector<int> local(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) local[i] = static_cast<int>(i);
  const auto parts = partition_by_route(node, batch.positions, rows, local);
  for (std::size_t c = 0; c < parts.size(); ++c) {
    if (parts[c].empty()) continue;
    std::vector<int> child_rows;
    child_rows.reserve(parts[c].size());
    for (int li : parts[c]) child_rows.push_back(rows[li]);
    Var cy = gather_rows(trunk.y, parts[c]);
    Var cd = gather_rows(dir_enc, parts[c]);
    Var cp = gather_rows(pos_enc, parts[c]);
    visit_all(tape, node.children[c], config, batch, child_input(config, cy, cp), cd, cp, child_rows,
              depth + 1, pieces, path_depth);
  }
}

}  // namespace

AllExitsBatch forward_all_exits(Tape& tape, const StageNode& root, const FieldConfig& config,
                                const EncodedBatch& batch) {
  const int n = static_cast<int>(batch.positions.rows());
  if (n == 0) throw std::invalid_argument("forward_all_exits: empty batch");
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rows[i] = i;
  std::vector<Piece> pieces;
  AllExitsBatch out;
  out.path_depth.assign(static_cast<std::size_t>(n), 0);
  Var pos = tape.constant(batch.pos_enc);
  Var dir = tape.constant(batch.dir_enc);
  visit_all(tape, root, config, batch, pos, dir, pos, rows, 1, pieces, out.path_depth);

  const int depth = *std::max_element(out.path_depth.begin(), out.path_depth.end());
  for (int level = 1; level <= depth; ++level) {
    std::vector<Var> sig, rgb, del;
    std::vector<std::vector<int>> idx;
    for (const Piece& p : pieces) {
      if (p.depth == level || (p.leaf && p.depth < level)) {
        sig.push_back(p.sigma);
        rgb.push_back(p.rgb);
        del.push_back(p.delta);
        idx.push_back(p.rows);
      }
    }
    out.levels.push_back({stitch_rows(sig, idx, n), stitch_rows(rgb, idx, n), stitch_rows(del, idx, n)});
  }
  return out;
}

namespace {

bool exits_here(const StageNode& node, int depth, double delta, const ExitPolicy& policy) {
  if (node.is_leaf()) return true;
  if (policy.fixed_level > 0) return depth >= policy.fixed_level;
  return policy.epsilon > 0.0 && delta < policy.epsilon;
}

void visit_early(Tape& tape, const StageNode& node, const FieldConfig& config,
                 const EncodedBatch& batch, Var input, Var dir_enc, Var pos_enc,
                 const std::vector<int>& rows, int depth, const ExitPolicy& policy,
                 EarlyExitBatch& out) {
  const StageTrunk trunk = stage_trunk(tape, node, input);
  const Tensor& delta = trunk.delta.value();
  std::vector<int> exit_local, pass_local;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.flops[rows[i]] += node.trunk_flops();
    out.delta(rows[i], 0) = delta(static_cast<Eigen::Index>(i), 0);
    (exits_here(node, depth, delta(static_cast<Eigen::Index>(i), 0), policy) ? exit_local : pass_local)
        .push_back(static_cast<int>(i));
  }
  if (!exit_local.empty()) {
    const StageHead head = stage_head(tape, node, gather_rows(trunk.y, exit_local),
                                      gather_rows(dir_enc, exit_local));
    for (std::size_t j = 0; j < exit_local.size(); ++j) {
      const int g = rows[exit_local[j]];
      out.sigma(g, 0) = head.sigma.value()(static_cast<Eigen::Index>(j), 0);
      out.rgb.row(g) = head.rgb.value().row(static_cast<Eigen::Index>(j));
      out.exit_stage[g] = depth;
      out.flops[g] += node.head_flops();
    }
  }
  if (pass_local.empty()) return;
  const auto parts = partition_by_route(node, batch.positions, rows, pass_local);
  for (std::size_t c = 0; c < parts.size(); ++c) {
    if (parts[c].empty()) continue;
    std::vector<int> child_rows;
    for (int li : parts[c]) child_rows.push_back(rows[li]);
    Var cy = gather_rows(trunk.y, parts[c]);
    Var cd = gather_rows(dir_enc, parts[c]);
    Var cp = gather_rows(pos_enc, parts[c]);
    visit_early(tape, node.children[c], config, batch, child_input(config, cy, cp), cd, cp, child_rows,
                depth + 1, policy, out);
  }
}

}  // namespace

EarlyExitBatch forward_early_exit(const StageNode& root, const FieldConfig& config,
                                  const EncodedBatch& batch, const ExitPolicy& policy) {
  const int n = static_cast<int>(batch.positions.rows());
  EarlyExitBatch out;
  out.sigma = Tensor::Zero(n, 1);
  out.rgb = Tensor::Zero(n, 3);
  out.delta = Tensor::Zero(n, 1);
  out.exit_stage.assign(static_cast<std::size_t>(n), 0);
  out.flops.assign(static_cast<std::size_t>(n), 0);
  if (n == 0) return out;
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) rows[i] = i;
  Tape tape(false);
  Var pos = tape.constant(batch.pos_enc);
  Var dir = tape.constant(batch.dir_enc);
  visit_early(tape, root, config, batch, pos, dir, pos, rows, 1, policy, out);
  return out;
}

FieldSample stage_forward(const StageNode& node, const Eigen::VectorXd& input_feature,
                          const Eigen::VectorXd& encoded_dir) {
  Tape tape(false);
  Var in = tape.constant(input_feature.transpose());
  Var dir = tape.constant(encoded_dir.transpose());
  const StageTrunk trunk = stage_trunk(tape, node, in);
  const StageHead head = stage_head(tape, node, trunk.y, dir);
  FieldSample s;
  s.y = trunk.y.value().row(0).transpose();
  s.delta = trunk.delta.value()(0, 0);
  s.sigma = head.sigma.value()(0, 0);
  s.c = head.rgb.value().row(0).transpose();
  return s;
}

namespace {

EncodedBatch single_query(const FieldConfig& config, const Eigen::Vector3d& position,
                          const Eigen::Vector3d& direction) {
  Tensor p(1, 3), d(1, 3);
  p.row(0) = position.transpose();
  d.row(0) = direction.transpose();
  return encode_batch(config, p, d);
}

}  // namespace

std::vector<FieldSample> forward_all_exits(const StageNode& root, const FieldConfig& config,
                                           const Eigen::Vector3d& position,
                                           const Eigen::Vector3d& direction) {
  const EncodedBatch batch = single_query(config, position, direction);
  std::vector<FieldSample> out;
  const StageNode* node = &root;
  Eigen::VectorXd input = batch.pos_enc.row(0).transpose();
  const Eigen::VectorXd dir = batch.dir_enc.row(0).transpose();
  while (true) {
    FieldSample s = stage_forward(*node, input, dir);
    out.push_back(s);
    if (node->is_leaf()) break;
    node = &node->children[route(*node, position)];
    if (config.reinject_position) {
      input.resize(s.y.size() + batch.pos_enc.cols());
      input << s.y, batch.pos_enc.row(0).transpose();
    } else {
      input = s.y;
    }
  }
  return out;
}

EarlyExitResult forward_early_exit(const StageNode& root, const FieldConfig& config,
                                   const Eigen::Vector3d& position, const Eigen::Vector3d& direction,
                                   double epsilon) {
  const EncodedBatch batch = single_query(config, position, direction);
  ExitPolicy policy;
  policy.epsilon = epsilon;
  const EarlyExitBatch b = forward_early_exit(root, config, batch, policy);
  EarlyExitResult r;
  r.sample.sigma = b.sigma(0, 0);
  r.sample.c = b.rgb.row(0).transpose();
  r.sample.delta = b.delta(0, 0);
  r.exit_stage = b.exit_stage[0];
  r.flops = b.flops[0];
  // The latent at the exit stage is recomputed along the same path.
  const auto all = forward_all_exits(root, config, position, direction);
  r.sample.y = all[static_cast<std::size_t>(r.exit_stage - 1)].y;
  return r;
}

GrowthResult grow(StageNode& node, const std::vector<Eigen::Vector3d>& uncertain_points, int k,
                  int child_depth, std::uint64_t seed, const FieldConfig& config, Division division) {
  if (!node.is_leaf()) {
    throw std::logic_error("grow: stage " + std::to_string(node.stage_index) + " already has children");
  }
  if (k < 1 || k > 4) throw std::invalid_argument("grow: k must be in [1, 4], got " + std::to_string(k));
  GrowthResult result;
  std::vector<Eigen::Vector3d> centers;
  if (k == 1) {
    Eigen::Vector3d c = config.bounds.center();
    if (!uncertain_points.empty()) {
      c.setZero();
      for (const auto& p : uncertain_points) c += p;
      c /= static_cast<double>(uncertain_points.size());
    }
    centers.push_back(c);
  } else {
    if (uncertain_points.size() < static_cast<std::size_t>(k)) {
      result.status = "skipped: " + std::to_string(uncertain_points.size()) +
                      " uncertain points for k=" + std::to_string(k);
      return result;
    }
    if (division == Division::kmeans) {
      const ClusterResult cr = kmeans_best_of(uncertain_points, k, seed);
      centers = cr.centers;
      result.inertia = cr.inertia;
    } else {
      std::mt19937_64 rng(seed);
      std::vector<int> idx(uncertain_points.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
      for (int i = 0; i < k; ++i) {
        std::uniform_int_distribution<std::size_t> pick(static_cast<std::size_t>(i), idx.size() - 1);
        std::swap(idx[static_cast<std::size_t>(i)], idx[pick(rng)]);
        centers.push_back(uncertain_points[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])]);
      }
    }
  }
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  for (std::size_t c = 0; c < centers.size(); ++c) {
    StageNode child = make_stage(node.stage_index + 1, config.child_input_width(), child_depth, config, rng);
    child.out.alpha.weight.value = node.out.alpha.weight.value;
    child.out.alpha.bias.value = node.out.alpha.bias.value;
    node.children.push_back(std::move(child));
  }
  node.centers = centers;
  result.grown = true;
  result.status = "grown: " + std::to_string(centers.size()) + " children";
  return result;
}

std::vector<StageNode*> leaves(StageNode& root) {
  std::vector<StageNode*> out;
  for_each_stage(root, [&out](StageNode& s) {
    if (s.is_leaf()) out.push_back(&s);
  });
  return out;
}

}  // namespace recurf
