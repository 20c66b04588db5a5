#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recurf/field.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace recurf;

namespace {

FieldConfig small_config() {
  FieldConfig c;
  c.width = 8;
  c.color_hidden = 6;
  c.encoding.pos_frequencies = 3;
  c.encoding.dir_frequencies = 2;
  c.bounds = Aabb(Eigen::Vector3d::Constant(-1.0), Eigen::Vector3d::Constant(1.0));
  return c;
}

void zero_layer(Linear& l) {
  l.weight.value.setZero();
  l.bias.value.setZero();
}

void zero_stage(StageNode& s) {
  for (Linear& l : s.mlp) zero_layer(l);
  zero_layer(s.uncertainty);
  zero_layer(s.out.alpha);
  zero_layer(s.out.feature);
  zero_layer(s.out.color_hidden);
  zero_layer(s.out.color_out);
}

Eigen::VectorXd affine(const Linear& l, const Eigen::VectorXd& x) {
  Eigen::VectorXd y(l.out_features());
  for (int o = 0; o < l.out_features(); ++o) {
    double acc = 0.0;
    for (int k = 0; k < l.in_features(); ++k) acc += l.weight.value(o, k) * x[k];
    y[o] = acc + l.bias.value(o, 0);
  }
  return y;
}

Eigen::VectorXd relu_v(Eigen::VectorXd v) {
  for (auto& x : v) x = x > 0.0 ? x : 0.0;
  return v;
}

FieldSample reference_stage(const StageNode& s, const Eigen::VectorXd& in, const Eigen::VectorXd& dir) {
  Eigen::VectorXd y = in;
  for (const Linear& l : s.mlp) y = relu_v(affine(l, y));
  FieldSample out;
  out.y = y;
  out.delta = affine(s.uncertainty, y)[0];
  out.sigma = std::log1p(std::exp(affine(s.out.alpha, y)[0]));
  const Eigen::VectorXd feat = affine(s.out.feature, y);
  Eigen::VectorXd cat(feat.size() + dir.size());
  cat << feat, dir;
  const Eigen::VectorXd logits = affine(s.out.color_out, relu_v(affine(s.out.color_hidden, cat)));
  for (int i = 0; i < 3; ++i) out.c[i] = 1.0 / (1.0 + std::exp(-logits[i]));
  return out;
}

std::vector<Eigen::Vector3d> blob(const Eigen::Vector3d& c, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 0.05);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < n; ++i) pts.push_back(c + Eigen::Vector3d(g(rng), g(rng), g(rng)));
  return pts;
}

// Grows a single-branch chain of `stages` stages whose uncertainty heads emit
// the given constants.
StageNode delta_chain(const FieldConfig& cfg, const std::vector<double>& deltas) {
  std::mt19937_64 rng(11);
  StageNode root = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  StageNode* node = &root;
  std::vector<Eigen::Vector3d> pts{Eigen::Vector3d::Zero()};
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    node->uncertainty.weight.value.setZero();
    node->uncertainty.bias.value(0, 0) = deltas[i];
    if (i + 1 < deltas.size()) {
      REQUIRE(grow(*node, pts, 1, 2, 5 + i, cfg).grown);
      node = &node->children[0];
    }
  }
  return root;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  Eigen::VectorXd p(1);
  p << 0.0;
  Eigen::VectorXd e = positional_encode(p, 2, false);
  REQUIRE(e.size() == 4);
  CHECK(e[0] == doctest::Approx(0.0));
  CHECK(e[1] == doctest::Approx(1.0));
  CHECK(e[2] == doctest::Approx(0.0));
  CHECK(e[3] == doctest::Approx(1.0));

  p << 1.0;
  e = positional_encode(p, 1, false);
  CHECK(std::abs(e[0]) < 1e-12);
  CHECK(e[1] == doctest::Approx(-1.0));

  p << 0.5;
  e = positional_encode(p, 2, false);
  CHECK(e[0] == doctest::Approx(1.0));
  CHECK(std::abs(e[1]) < 1e-12);
  CHECK(std::abs(e[2]) < 1e-12);
  CHECK(e[3] == doctest::Approx(-1.0));
}

TEST_CASE("encoding widths") {
  EncodingConfig c;
  CHECK(c.position_width() == 63);
  CHECK(c.direction_width() == 27);
  Eigen::Vector3d p(0.1, -0.2, 0.3);
  CHECK(positional_encode(p, 10, true).size() == 63);
  const Eigen::VectorXd e = positional_encode(p, 1, true);
  CHECK(e[0] == 0.1);
  CHECK(e[1] == doctest::Approx(std::sin(std::numbers::pi * 0.1)));
  CHECK(e[3] == -0.2);
}

TEST_CASE("zero network outputs") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(1);
  StageNode s = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  zero_stage(s);
  const Eigen::VectorXd in = Eigen::VectorXd::Random(cfg.encoding.position_width());
  const Eigen::VectorXd dir = Eigen::VectorXd::Random(cfg.encoding.direction_width());
  const FieldSample out = stage_forward(s, in, dir);
  CHECK(out.sigma == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  for (int i = 0; i < 3; ++i) CHECK(out.c[i] == 0.5);
  CHECK(out.delta == 0.0);

  s.out.alpha.bias.value(0, 0) = 10.0;
  CHECK(std::abs(stage_forward(s, in, dir).sigma - 10.0) < 1e-4);
}

TEST_CASE("stage forward matches a straight-line evaluation") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    StageNode s = make_stage(1, cfg.encoding.position_width(), 3, cfg, rng);
    const Eigen::VectorXd in = Eigen::VectorXd::Random(cfg.encoding.position_width());
    const Eigen::VectorXd dir = Eigen::VectorXd::Random(cfg.encoding.direction_width());
    const FieldSample a = stage_forward(s, in, dir);
    const FieldSample b = reference_stage(s, in, dir);
    CHECK((a.y - b.y).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(std::abs(a.delta - b.delta) < 1e-12);
    CHECK(std::abs(a.sigma - b.sigma) < 1e-12);
    CHECK((a.c - b.c).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("width mismatch names the stage") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(3);
  StageNode s = make_stage(3, cfg.encoding.position_width(), 2, cfg, rng);
  const Eigen::VectorXd dir = Eigen::VectorXd::Zero(cfg.encoding.direction_width());
  try {
    stage_forward(s, Eigen::VectorXd::Zero(5), dir);
    FAIL("expected a width error");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("stage 3") != std::string::npos);
  }
}

TEST_CASE("route picks the nearest center") {
  StageNode n;
  n.children.resize(2);
  n.centers = {Eigen::Vector3d(0, 0, 0), Eigen::Vector3d(5, 5, 5)};
  CHECK(route(n, Eigen::Vector3d(1, 1, 1)) == 0);
  CHECK(route(n, Eigen::Vector3d(2.5, 2.5, 2.5)) == 0);
  CHECK(route(n, Eigen::Vector3d(4, 4, 4)) == 1);

  StageNode leaf;
  CHECK_THROWS_AS(route(leaf, Eigen::Vector3d::Zero()), std::logic_error);
}

TEST_CASE("route agrees with a brute-force scan") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  StageNode n;
  n.children.resize(3);
  for (int i = 0; i < 3; ++i) n.centers.emplace_back(u(rng), u(rng), u(rng));
  for (int i = 0; i < 1000; ++i) {
    const Eigen::Vector3d p(u(rng), u(rng), u(rng));
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int c = 0; c < 3; ++c) {
      const double d = (p - n.centers[c]).squaredNorm();
      if (d < bd) {
        bd = d;
        best = c;
      }
    }
    REQUIRE(route(n, p) == best);
    REQUIRE(route(n, p) == route(n, p));
  }
}

TEST_CASE("all exits along the routed path") {
  const FieldConfig cfg = small_config();
  ModelTree m = make_model(cfg, 2, 1e-3, 7);
  const Eigen::Vector3d pos(0.2, -0.1, 0.4), dir(0, 0, 1);
  CHECK(forward_all_exits(m.coarse_root, cfg, pos, dir).size() == 1);

  std::mt19937_64 rng(8);
  const std::vector<int> depths{2, 4, 4};
  for (int g = 0; g < 3; ++g) {
    for (StageNode* leaf : leaves(m.coarse_root)) {
      auto pts = blob(Eigen::Vector3d(-0.5, 0, 0), 20, rng);
      const auto more = blob(Eigen::Vector3d(0.5, 0, 0), 20, rng);
      pts.insert(pts.end(), more.begin(), more.end());
      REQUIRE(grow(*leaf, pts, 2, depths[g], 100 + g, cfg).grown);
    }
  }
  const auto a = forward_all_exits(m.coarse_root, cfg, pos, dir);
  const auto b = forward_all_exits(m.coarse_root, cfg, pos, dir);
  REQUIRE(a.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].sigma == b[i].sigma);
    CHECK(a[i].delta == b[i].delta);
    CHECK(a[i].c == b[i].c);
    CHECK(a[i].y == b[i].y);
    CHECK(a[i].sigma >= 0.0);
    CHECK(a[i].c.minCoeff() >= 0.0);
    CHECK(a[i].c.maxCoeff() <= 1.0);
  }
  CHECK(cumulative_layers(m.coarse_root) == std::vector<int>{2, 4, 8, 12});
  CHECK(tree_depth(m.coarse_root) == 4);
}

TEST_CASE("early exit examples") {
  const FieldConfig cfg = small_config();
  const StageNode chain = delta_chain(cfg, {0.5, 0.2, 0.05, 0.01});
  const Eigen::Vector3d pos(0.1, 0.2, 0.3), dir(1, 0, 0);

  CHECK(forward_early_exit(chain, cfg, pos, dir, std::numeric_limits<double>::infinity()).exit_stage == 1);
  CHECK(forward_early_exit(chain, cfg, pos, dir, 0.1).exit_stage == 3);

  const EarlyExitResult forced = forward_early_exit(chain, cfg, pos, dir, 0.0);
  CHECK(forced.exit_stage == 4);
  std::int64_t full = 0;
  for_each_stage(chain, [&full](const StageNode& s) { full += s.trunk_flops(); });
  const StageNode* leaf = &chain;
  while (!leaf->is_leaf()) leaf = &leaf->children[0];
  CHECK(forced.flops == full + leaf->head_flops());
}

TEST_CASE("early exit equals the matching all-exits entry") {
  const FieldConfig cfg = small_config();
  ModelTree m = make_model(cfg, 2, 1e-3, 9);
  std::mt19937_64 rng(10);
  for (int g = 0; g < 2; ++g) {
    for (StageNode* leaf : leaves(m.fine_root)) {
      auto pts = blob(Eigen::Vector3d(0, -0.5, 0), 15, rng);
      const auto more = blob(Eigen::Vector3d(0, 0.5, 0.2), 15, rng);
      pts.insert(pts.end(), more.begin(), more.end());
      REQUIRE(grow(*leaf, pts, 2, 2, 200 + g, cfg).grown);
    }
  }
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int q = 0; q < 50; ++q) {
    const Eigen::Vector3d pos(u(rng), u(rng), u(rng));
    const Eigen::Vector3d dir = Eigen::Vector3d(u(rng), u(rng), u(rng)).normalized();
    const auto all = forward_all_exits(m.fine_root, cfg, pos, dir);
    std::vector<double> eps{all[0].delta + 1e-9, all[1].delta + 1e-9, 0.0,
                            std::numeric_limits<double>::infinity()};
    std::int64_t prev_flops = std::numeric_limits<std::int64_t>::max();
    std::sort(eps.begin(), eps.end());
    for (double e : eps) {
      const EarlyExitResult r = forward_early_exit(m.fine_root, cfg, pos, dir, e);
      const FieldSample& ref = all[static_cast<std::size_t>(r.exit_stage - 1)];
      CHECK(r.sample.sigma == ref.sigma);
      CHECK(r.sample.delta == ref.delta);
      CHECK(r.sample.c == ref.c);
      CHECK(r.flops <= prev_flops);
      prev_flops = r.flops;
    }
  }
}

TEST_CASE("batched early exit matches single queries bitwise") {
  const FieldConfig cfg = small_config();
  ModelTree m = make_model(cfg, 2, 1e-3, 12);
  std::mt19937_64 rng(13);
  auto pts = blob(Eigen::Vector3d(-0.3, 0, 0), 20, rng);
  const auto more = blob(Eigen::Vector3d(0.3, 0, 0), 20, rng);
  pts.insert(pts.end(), more.begin(), more.end());
  REQUIRE(grow(m.coarse_root, pts, 2, 2, 3, cfg).grown);
  const int n = 40;
  Tensor p = Tensor::Random(n, 3), d(n, 3);
  for (int i = 0; i < n; ++i) d.row(i) = Eigen::RowVector3d::Random().normalized();
  const EncodedBatch batch = encode_batch(cfg, p, d);
  ExitPolicy policy;
  policy.epsilon = 0.0;
  const EarlyExitBatch b = forward_early_exit(m.coarse_root, cfg, batch, policy);
  for (int i = 0; i < n; ++i) {
    const auto all = forward_all_exits(m.coarse_root, cfg, p.row(i).transpose(), d.row(i).transpose());
    CHECK(b.exit_stage[i] == 2);
    CHECK(b.sigma(i, 0) == all.back().sigma);
    CHECK(Eigen::Vector3d(b.rgb.row(i).transpose()) == all.back().c);
  }

  policy.fixed_level = 1;
  const EarlyExitBatch f = forward_early_exit(m.coarse_root, cfg, batch, policy);
  for (int i = 0; i < n; ++i) CHECK(f.exit_stage[i] == 1);
}

TEST_CASE("growth installs children at blob means with inherited alpha") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(14);
  StageNode s = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  const Eigen::Vector3d a(-0.6, 0.1, 0.0), b(0.5, -0.2, 0.3);
  auto pts = blob(a, 50, rng);
  const auto pb = blob(b, 50, rng);
  pts.insert(pts.end(), pb.begin(), pb.end());
  Eigen::Vector3d ma = Eigen::Vector3d::Zero(), mb = Eigen::Vector3d::Zero();
  for (int i = 0; i < 50; ++i) {
    ma += pts[i];
    mb += pts[50 + i];
  }
  ma /= 50.0;
  mb /= 50.0;

  const GrowthResult r = grow(s, pts, 2, 4, 21, cfg);
  REQUIRE(r.grown);
  REQUIRE(s.children.size() == 2);
  REQUIRE(s.centers.size() == 2);
  const bool order = (s.centers[0] - ma).norm() < (s.centers[1] - ma).norm();
  CHECK((s.centers[order ? 0 : 1] - ma).norm() < 1e-12);
  CHECK((s.centers[order ? 1 : 0] - mb).norm() < 1e-12);

  for (const StageNode& c : s.children) {
    CHECK(c.stage_index == 2);
    CHECK(c.mlp.size() == 4);
    CHECK(c.input_width() == cfg.width);
    for (int t = 0; t < 20; ++t) {
      const Eigen::VectorXd f = Eigen::VectorXd::Random(cfg.width);
      CHECK(affine(c.out.alpha, f)[0] == affine(s.out.alpha, f)[0]);
    }
    CHECK(c.out.alpha.weight.adam.t == 0);
  }
  CHECK(s.children[0].out.feature.weight.value != s.out.feature.weight.value);

  CHECK_THROWS_AS(grow(s, pts, 2, 2, 1, cfg), std::logic_error);
  StageNode lone = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  const GrowthResult skipped = grow(lone, {Eigen::Vector3d::Zero()}, 2, 2, 1, cfg);
  CHECK_FALSE(skipped.grown);
  CHECK(lone.is_leaf());
  CHECK_THROWS_AS(grow(lone, pts, 5, 2, 1, cfg), std::invalid_argument);
}

TEST_CASE("growth is deterministic under a seed") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(15);
  auto pts = blob(Eigen::Vector3d(0.2, 0.2, 0.2), 30, rng);
  const auto more = blob(Eigen::Vector3d(-0.4, 0.1, -0.3), 30, rng);
  pts.insert(pts.end(), more.begin(), more.end());
  std::mt19937_64 r1(1), r2(1);
  StageNode a = make_stage(1, cfg.encoding.position_width(), 2, cfg, r1);
  StageNode b = make_stage(1, cfg.encoding.position_width(), 2, cfg, r2);
  grow(a, pts, 3, 2, 99, cfg);
  grow(b, pts, 3, 2, 99, cfg);
  REQUIRE(a.children.size() == 3);
  for (int i = 0; i < 3; ++i) {
    CHECK(a.centers[i] == b.centers[i]);
    CHECK(a.children[i].mlp[0].weight.value == b.children[i].mlp[0].weight.value);
  }
}

TEST_CASE("random division picks centers among the points") {
  const FieldConfig cfg = small_config();
  std::mt19937_64 rng(16);
  StageNode s = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  const auto pts = blob(Eigen::Vector3d::Zero(), 30, rng);
  REQUIRE(grow(s, pts, 3, 2, 4, cfg, Division::random).grown);
  for (const auto& c : s.centers) {
    bool found = false;
    for (const auto& p : pts) found = found || p == c;
    CHECK(found);
  }
  CHECK(s.centers[0] != s.centers[1]);
}

TEST_CASE("parameter counting") {
  std::mt19937_64 rng(17);
  Linear l(2, 3, rng, "l");
  CHECK(l.param_count() == 9);

  StageNode empty;
  CHECK(count_params(empty) == 0);

  FieldConfig cfg;
  cfg.width = 64;
  cfg.color_hidden = 32;
  cfg.bounds = Aabb(Eigen::Vector3d::Constant(-1.0), Eigen::Vector3d::Constant(1.0));
  ModelTree m = make_model(cfg, 2, 1e-3, 18);
  auto pts = blob(Eigen::Vector3d(-0.5, 0, 0), 20, rng);
  const auto more = blob(Eigen::Vector3d(0.5, 0, 0), 20, rng);
  pts.insert(pts.end(), more.begin(), more.end());
  const std::vector<int> depths{2, 4, 4};
  for (int g = 0; g < 3; ++g)
    for (StageNode* leaf : leaves(m.coarse_root)) grow(*leaf, pts, 2, depths[g], g, cfg);

  std::int64_t walk = 0;
  std::vector<const StageNode*> stack{&m.coarse_root};
  while (!stack.empty()) {
    const StageNode* s = stack.back();
    stack.pop_back();
    std::vector<const Linear*> layers{&s->uncertainty, &s->out.alpha, &s->out.feature,
                                      &s->out.color_hidden, &s->out.color_out};
    for (const Linear& x : s->mlp) layers.push_back(&x);
    for (const Linear* x : layers) walk += x->weight.value.size() + x->bias.value.size();
    for (const StageNode& c : s->children) stack.push_back(&c);
  }
  CHECK(count_params(m.coarse_root) == walk);
  CHECK(count_params(m) == walk + count_params(m.fine_root));
}

TEST_CASE("reinjected position widens child inputs") {
  FieldConfig cfg = small_config();
  cfg.reinject_position = true;
  std::mt19937_64 rng(19);
  StageNode s = make_stage(1, cfg.encoding.position_width(), 2, cfg, rng);
  auto pts = blob(Eigen::Vector3d(-0.5, 0, 0), 10, rng);
  const auto more = blob(Eigen::Vector3d(0.5, 0, 0), 10, rng);
  pts.insert(pts.end(), more.begin(), more.end());
  REQUIRE(grow(s, pts, 2, 2, 1, cfg).grown);
  CHECK(s.children[0].input_width() == cfg.width + cfg.encoding.position_width());
  const auto all = forward_all_exits(s, cfg, Eigen::Vector3d(0.1, 0, 0), Eigen::Vector3d(0, 1, 0));
  CHECK(all.size() == 2);
}
