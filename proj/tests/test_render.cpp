#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "recurf/render.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <random>

using namespace recurf;

namespace {

Aabb unit_box() { return Aabb(Eigen::Vector3d::Constant(-1.0), Eigen::Vector3d::Constant(1.0)); }

FieldConfig small_config() {
  FieldConfig c;
  c.width = 8;
  c.color_hidden = 6;
  c.encoding.pos_frequencies = 2;
  c.encoding.dir_frequencies = 1;
  c.bounds = unit_box();
  return c;
}

std::vector<Eigen::Vector3d> two_blobs(std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 0.1);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 30; ++i) {
    pts.emplace_back(-0.5 + g(rng), g(rng), g(rng));
    pts.emplace_back(0.5 + g(rng), g(rng), g(rng));
  }
  return pts;
}

// Two growths in both trees, with uncertainty heads biased so that exits
// spread over the stages.
ModelTree grown_model() {
  const FieldConfig cfg = small_config();
  ModelTree m = make_model(cfg, 2, 1e-3, 5);
  std::mt19937_64 rng(6);
  for (StageNode* root : {&m.coarse_root, &m.fine_root}) {
    for (int g = 0; g < 2; ++g)
      for (StageNode* leaf : leaves(*root)) REQUIRE(grow(*leaf, two_blobs(rng), 2, 2, 10 + g, cfg).grown);
    for_each_stage(*root, [](StageNode& s) { s.out.alpha.bias.value(0, 0) = 1.0; });
  }
  return m;
}

CameraPose front_camera(int size) {
  CameraPose pose;
  pose.camera_to_world =
      look_at<double>(Eigen::Vector3d(0.3, 0.4, 3.5), Eigen::Vector3d::Zero(), Eigen::Vector3d(0, 1, 0));
  pose.width = size;
  pose.height = size;
  pose.focal = focal_from_fov(size, 0.6);
  return pose;
}

std::vector<double> brute_force_inverse_cdf(const std::vector<double>& edges, const std::vector<double>& w,
                                            const std::vector<double>& u) {
  double total = 0.0;
  for (double x : w) total += x;
  std::vector<double> out;
  for (double ui : u) {
    double below = 0.0;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double p = w[j] / total;
      if (p > 0.0 && ui < below + p) {
        out.push_back(edges[j] + (ui - below) / p * (edges[j + 1] - edges[j]));
        break;
      }
      below += p;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST_CASE("camera rays") {
  CameraPose pose;
  pose.width = 5;
  pose.height = 5;
  pose.focal = 3.0;
  const Aabb box(Eigen::Vector3d(-1, -1, -5), Eigen::Vector3d(1, 1, -3));
  const auto center = camera_rays(pose, {{2, 2}}, box);
  CHECK((center[0].direction - Eigen::Vector3d(0, 0, -1)).norm() < 1e-12);
  CHECK(center[0].near > 0.0);
  CHECK(center[0].far > center[0].near);

  const auto rays = camera_rays(pose, all_pixels(5, 5), box);
  for (const Ray& r : rays) CHECK(std::abs(r.direction.norm() - 1.0) < 1e-9);

  CameraPose wide;
  wide.width = 64;
  wide.height = 64;
  wide.focal = focal_from_fov(64, std::numbers::pi / 2);
  CHECK(wide.focal == doctest::Approx(32.0).epsilon(1e-12));
  const Ray corner = camera_rays(wide, {{0, 0}}, box)[0];
  // Pixel center sits half a pixel inside the image edge, where x = tan(45 deg) |z|.
  const double expect = std::tan(std::numbers::pi / 4) * (32.0 - 0.5) / 32.0;
  CHECK(corner.direction.x() / -corner.direction.z() == doctest::Approx(-expect).epsilon(1e-12));
  CHECK(corner.direction.y() / -corner.direction.z() == doctest::Approx(expect).epsilon(1e-12));

  CHECK_THROWS_AS(camera_rays(pose, {{5, 0}}, box), std::out_of_range);
  CHECK_THROWS_AS(camera_rays(pose, {{0, -1}}, box), std::out_of_range);
}

TEST_CASE("rays clip to the enlarged bounds") {
  Ray r;
  r.origin = Eigen::Vector3d(0, 0, 5);
  r.direction = Eigen::Vector3d(0, 0, -1);
  clip_to_bounds(r, unit_box());
  CHECK(r.near == doctest::Approx(3.9));
  CHECK(r.far == doctest::Approx(6.1));

  Ray miss;
  miss.origin = Eigen::Vector3d(5, 5, 5);
  miss.direction = Eigen::Vector3d(1, 0, 0);
  clip_to_bounds(miss, unit_box());
  CHECK(miss.near > 0.0);
  CHECK(miss.far > miss.near);
}

TEST_CASE("stratified samples") {
  Ray r;
  r.near = 0.0;
  r.far = 1.0;
  const auto t = stratified_samples(r, 4);
  CHECK(t == std::vector<double>{0.125, 0.375, 0.625, 0.875});

  std::mt19937_64 rng(1);
  r.near = 2.0;
  r.far = 6.0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto s = stratified_samples(r, 16, &rng);
    for (int i = 0; i < 16; ++i) {
      CHECK(s[i] >= 2.0 + i * 0.25);
      CHECK(s[i] < 2.0 + (i + 1) * 0.25);
    }
    CHECK(std::is_sorted(s.begin(), s.end()));
  }
  CHECK_THROWS_AS(stratified_samples(r, 0), std::invalid_argument);
}

TEST_CASE("hierarchical samples") {
  Ray r;
  r.near = 0.0;
  r.far = 1.0;
  const auto coarse = stratified_samples(r, 8);
  const auto edges = sample_bin_edges(r, coarse);
  REQUIRE(edges.size() == 9);
  CHECK(edges.front() == 0.0);
  CHECK(edges.back() == 1.0);

  std::mt19937_64 rng(2);
  {
    std::vector<int> occupancy(8, 0);
    const auto s = hierarchical_samples(r, coarse, std::vector<double>(8, 1.0), 8000, &rng);
    for (double x : s) {
      const auto bin = std::upper_bound(edges.begin(), edges.end(), x) - edges.begin() - 1;
      occupancy[static_cast<std::size_t>(bin)] += 1;
    }
    for (int b = 0; b < 8; ++b) CHECK(std::abs(occupancy[b] - 1000.0) < 5 * std::sqrt(1000.0));
  }
  {
    std::vector<double> w(8, 0.0);
    w[5] = 2.5;
    const auto s = hierarchical_samples(r, coarse, w, 500, &rng);
    for (double x : s) {
      CHECK(x >= edges[5]);
      CHECK(x <= edges[6]);
    }
  }
  {
    const auto s = hierarchical_samples(r, coarse, std::vector<double>(8, 0.0), 64);
    CHECK(s.size() == 64);
    CHECK(std::is_sorted(s.begin(), s.end()));
    CHECK(s.front() >= 0.0);
    CHECK(s.back() <= 1.0);
  }
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> w(8);
    for (auto& x : w) x = u(rng) < 0.3 ? 0.0 : u(rng);
    w[3] = 0.1;
    std::vector<double> draws(50);
    for (auto& x : draws) x = u(rng);
    const auto a = inverse_cdf_samples(edges, w, draws);
    const auto b = brute_force_inverse_cdf(edges, w, draws);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  }
  CHECK_THROWS_AS(inverse_cdf_samples(edges, std::vector<double>(8, -1.0), {0.5}), std::invalid_argument);
}

TEST_CASE("merge keeps order") {
  const auto m = merge_samples({0.1, 0.5, 0.9}, {0.2, 0.6});
  CHECK(m == std::vector<double>{0.1, 0.2, 0.5, 0.6, 0.9});
}

TEST_CASE("composite examples") {
  using V = Eigen::Vector3d;
  std::vector<double> t{0.0, 0.5, 1.0};
  std::vector<V> c(3, V(0.2, 0.4, 0.6));
  {
    const auto r = composite<double>({0, 0, 0}, c, t);
    CHECK(r.rgb == V::Zero());
    for (double w : r.weights) CHECK(w == 0.0);
  }
  {
    std::vector<V> cc{V(0.1, 0.7, 0.3), V(1, 1, 1), V(0, 0, 0)};
    const auto r = composite<double>({100.0, 1.0, 1.0}, cc, t);
    CHECK((r.rgb - cc[0]).cwiseAbs().maxCoeff() < 1e-9);
  }
  {
    const int n = 256;
    std::vector<double> ts(n), s(n);
    std::vector<V> cs(n, V::Ones());
    // Unit slab on [0, 1] inside an empty ray of length 2.
    for (int i = 0; i < n; ++i) {
      ts[i] = (i + 0.5) * 2.0 / n;
      s[i] = ts[i] < 1.0 ? 1.0 : 0.0;
    }
    const auto r = composite(s, cs, ts);
    for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(r.rgb[ch] - (1.0 - std::exp(-1.0))) < 1e-3);
    double total = 0.0;
    for (double w : r.weights) {
      CHECK(w >= 0.0);
      total += w;
    }
    CHECK(total <= 1.0 + 1e-9);
  }
  {
    const V white = V::Ones();
    const auto r = composite<double>({0, 0, 0}, c, t, &white);
    CHECK(r.rgb == white);
  }
  CHECK_THROWS_AS(composite<double>({0, 0, 0}, c, {0.0, 1.0, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(composite<double>({0, 0}, c, t), std::invalid_argument);
}

TEST_CASE("tape compositing matches the scalar quadrature") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int rays = 3, per = 7;
  Tensor sig(rays * per, 1), rgb(rays * per, 3), t(rays, per);
  for (Eigen::Index i = 0; i < sig.size(); ++i) sig.data()[i] = 3.0 * u(rng);
  for (Eigen::Index i = 0; i < rgb.size(); ++i) rgb.data()[i] = u(rng);
  for (int r = 0; r < rays; ++r) {
    double acc = 0.0;
    for (int i = 0; i < per; ++i) t(r, i) = acc += 0.05 + 0.2 * u(rng);
  }
  Tape tape;
  Tensor weights;
  const Var out = composite_rays(tape.leaf(sig), tape.leaf(rgb), t, true, &weights);
  for (int r = 0; r < rays; ++r) {
    std::vector<double> s, tt;
    std::vector<Eigen::Vector3d> c;
    for (int i = 0; i < per; ++i) {
      s.push_back(sig(r * per + i, 0));
      c.emplace_back(rgb.row(r * per + i).transpose());
      tt.push_back(t(r, i));
    }
    const Eigen::Vector3d white = Eigen::Vector3d::Ones();
    const auto ref = composite(s, c, tt, &white);
    for (int ch = 0; ch < 3; ++ch) CHECK(out.value()(r, ch) == ref.rgb[ch]);
    for (int i = 0; i < per; ++i) CHECK(weights(r, i) == ref.weights[i]);
  }
}

TEST_CASE("render mode equivalences") {
  const ModelTree m = grown_model();
  const CameraPose pose = front_camera(6);
  RenderOptions opt;
  opt.n_coarse = 16;
  opt.n_fine = 16;

  RenderOptions full = opt;
  full.mode = RenderMode::full_depth;
  RenderOptions eps0 = opt;
  eps0.epsilon = 0.0;
  const RenderOutput a = render_image(m, pose, full);
  const RenderOutput b = render_image(m, pose, eps0);
  CHECK(a.image.data == b.image.data);
  CHECK(a.total_flops == b.total_flops);

  RenderOptions level1 = opt;
  level1.mode = RenderMode::fixed_level;
  level1.level = 1;
  RenderOptions inf = opt;
  inf.epsilon = std::numeric_limits<double>::infinity();
  const RenderOutput c = render_image(m, pose, level1);
  const RenderOutput d = render_image(m, pose, inf);
  CHECK(c.image.data == d.image.data);
  CHECK(d.total_flops <= b.total_flops);
  CHECK(d.exit_histogram[0] == 36 * 32);

  for (double v : a.image.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("histogram totals and monotone compute") {
  ModelTree m = grown_model();
  // Spread the uncertainties so early exits actually happen.
  std::mt19937_64 rng(9);
  for (StageNode* root : {&m.coarse_root, &m.fine_root}) {
    for_each_stage(*root, [&rng](StageNode& s) {
      std::normal_distribution<double> g(0.0, 0.5);
      for (Eigen::Index i = 0; i < s.uncertainty.weight.value.size(); ++i) s.uncertainty.weight.value.data()[i] = g(rng);
      s.uncertainty.bias.value(0, 0) = 0.02;
    });
  }
  const CameraPose pose = front_camera(5);
  RenderOptions opt;
  opt.n_coarse = 12;
  opt.n_fine = 10;
  std::int64_t prev = std::numeric_limits<std::int64_t>::max();
  for (double eps : {0.0, 1e-4, 1e-3, 1e-2, 0.1, std::numeric_limits<double>::infinity()}) {
    opt.epsilon = eps;
    const RenderOutput r = render_image(m, pose, opt);
    std::int64_t total = 0, flops = 0;
    for (std::size_t d = 0; d < r.exit_histogram.size(); ++d) {
      total += r.exit_histogram[d];
      flops += r.flops_by_exit[d];
    }
    CHECK(total == 25 * 22);
    CHECK(flops == r.fine_flops);
    CHECK(r.exit_map.size() == 25);
    CHECK(r.total_flops <= prev);
    prev = r.total_flops;
  }
}

TEST_CASE("per-stage images and threading") {
  const ModelTree m = grown_model();
  const CameraPose pose = front_camera(6);
  RenderOptions opt;
  opt.n_coarse = 8;
  opt.n_fine = 8;
  opt.per_stage_images = true;
  opt.chunk_rays = 5;
  const RenderOutput single = render_image(m, pose, opt);
  CHECK(single.stage_images.size() == 3);
  opt.threads = 3;
  const RenderOutput multi = render_image(m, pose, opt);
  CHECK(single.image.data == multi.image.data);
  CHECK(single.exit_histogram == multi.exit_histogram);
  CHECK(single.total_flops == multi.total_flops);
}

TEST_CASE("single-stage tree renders as a plain field") {
  const FieldConfig cfg = small_config();
  const ModelTree m = make_model(cfg, 3, 1e-3, 4);
  const CameraPose pose = front_camera(4);
  RenderOptions opt;
  opt.n_coarse = 10;
  opt.n_fine = 6;
  const RenderOutput r = render_image(m, pose, opt);
  REQUIRE(r.exit_histogram.size() == 1);
  CHECK(r.exit_histogram[0] == 16 * 16);

  // Same image assembled by hand through the field and the quadrature.
  const auto rays = camera_rays(pose, all_pixels(4, 4), cfg.bounds);
  const Eigen::Vector3d white = Eigen::Vector3d::Ones();
  for (std::size_t p = 0; p < rays.size(); ++p) {
    const Ray& ray = rays[p];
    auto eval = [&](const StageNode& root, const std::vector<double>& ts, std::vector<double>& s,
                    std::vector<Eigen::Vector3d>& c) {
      for (double t : ts) {
        const auto all = forward_all_exits(root, cfg, ray.at(t), ray.direction);
        s.push_back(all.back().sigma);
        c.push_back(all.back().c);
      }
    };
    const auto tc = stratified_samples(ray, 10);
    std::vector<double> sc;
    std::vector<Eigen::Vector3d> cc;
    eval(m.coarse_root, tc, sc, cc);
    const auto wc = composite(sc, cc, tc, &white).weights;
    const auto tf = merge_samples(tc, hierarchical_samples(ray, tc, wc, 6));
    std::vector<double> sf;
    std::vector<Eigen::Vector3d> cf;
    eval(m.fine_root, tf, sf, cf);
    const Eigen::Vector3d px = composite(sf, cf, tf, &white).rgb;
    const int row = static_cast<int>(p) / 4, col = static_cast<int>(p) % 4;
    for (int ch = 0; ch < 3; ++ch) CHECK(std::abs(r.image.at(row, col, ch) - px[ch]) < 1e-12);
  }
}
