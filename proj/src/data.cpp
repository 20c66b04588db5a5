#include "recurf/data.hpp"

#include <json.hpp>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>

namespace recurf {

using nlohmann::json;

bool Primitive::contains(const Eigen::Vector3d& p) const {
  if (shape == Shape::sphere) return (p - center).squaredNorm() <= radius * radius;
  return ((p - center).cwiseAbs().array() <= half_extent.array()).all();
}

std::optional<std::pair<double, double>> Primitive::intersect(const Eigen::Vector3d& o,
                                                              const Eigen::Vector3d& d) const {
  if (shape == Shape::sphere) {
    const Eigen::Vector3d oc = o - center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc <= 0.0) return std::nullopt;
    const double s = std::sqrt(disc);
    return std::make_pair(-b - s, -b + s);
  }
  const Aabb box{center - half_extent, center + half_extent};
  double t0 = -std::numeric_limits<double>::infinity();
  double t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (d[a] == 0.0) {
      if (o[a] < box.lo[a] || o[a] > box.hi[a]) return std::nullopt;
      continue;
    }
    double ta = (box.lo[a] - o[a]) / d[a];
    double tb = (box.hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t1 <= t0) return std::nullopt;
  return std::make_pair(t0, t1);
}

namespace {

Primitive make_box(Eigen::Vector3d c, Eigen::Vector3d h, Eigen::Vector3d albedo, double density) {
  Primitive p;
  p.shape = Primitive::Shape::box;
  p.center = c;
  p.half_extent = h;
  p.albedo = albedo;
  p.density = density;
  return p;
}

}  // namespace

SceneSpec cornell_mini() {
  SceneSpec s;
  s.name = "cornell-mini";
  s.bounds = Aabb{Eigen::Vector3d::Constant(-1.1), Eigen::Vector3d::Constant(1.1)};
  constexpr double kDensity = 40.0;
  const Eigen::Vector3d white(0.8, 0.8, 0.78);
  s.primitives.push_back(make_box({0, 0, -1.05}, {1.1, 1.1, 0.05}, white, kDensity));            // back
  s.primitives.push_back(make_box({0, -1.05, 0}, {1.1, 0.05, 1.1}, {0.7, 0.7, 0.68}, kDensity));  // floor
  s.primitives.push_back(make_box({0, 1.05, 0}, {1.1, 0.05, 1.1}, {0.85, 0.85, 0.85}, kDensity)); // ceiling
  s.primitives.push_back(make_box({-1.05, 0, 0}, {0.05, 1.1, 1.1}, {0.75, 0.12, 0.12}, kDensity)); // left
  s.primitives.push_back(make_box({1.05, 0, 0}, {0.05, 1.1, 1.1}, {0.15, 0.6, 0.18}, kDensity));   // right
  s.primitives.push_back(make_box({-0.4, -0.4, -0.35}, {0.3, 0.6, 0.3}, {0.65, 0.65, 0.72}, kDensity));
  s.primitives.push_back(make_box({0.45, -0.7, 0.25}, {0.3, 0.3, 0.3}, {0.9, 0.8, 0.55}, kDensity));
  Primitive sphere;
  sphere.shape = Primitive::Shape::sphere;
  sphere.center = {0.45, -0.15, 0.25};
  sphere.radius = 0.25;
  sphere.albedo = {0.25, 0.35, 0.9};
  sphere.density = kDensity;
  s.primitives.push_back(sphere);
  return s;
}

void validate_scene(const SceneSpec& spec) {
  if ((spec.bounds.hi.array() <= spec.bounds.lo.array()).any()) {
    throw std::invalid_argument("scene '" + spec.name + "': bounds max must exceed min");
  }
  const double tol = 1e-9;
  for (std::size_t i = 0; i < spec.primitives.size(); ++i) {
    const Primitive& p = spec.primitives[i];
    const std::string field = "primitives[" + std::to_string(i) + "]";
    if (p.density < 0.0) throw std::invalid_argument("scene '" + spec.name + "': " + field + ".density is negative");
    const Eigen::Vector3d ext = p.shape == Primitive::Shape::sphere ? Eigen::Vector3d::Constant(p.radius) : p.half_extent;
    if (((p.center - ext).array() < spec.bounds.lo.array() - tol).any() ||
        ((p.center + ext).array() > spec.bounds.hi.array() + tol).any()) {
      throw std::invalid_argument("scene '" + spec.name + "': " + field + " extends outside bounds");
    }
    if ((p.albedo.array() < 0.0).any() || (p.albedo.array() > 1.0).any()) {
      throw std::invalid_argument("scene '" + spec.name + "': " + field + ".albedo outside [0, 1]");
    }
  }
}

namespace {

Eigen::Vector3d vec3_field(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key)) throw std::invalid_argument(where + ": missing field '" + key + "'");
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number()) {
    throw std::invalid_argument(where + ": field '" + key + "' must be an array of 3 numbers");
  }
  return {v[0].get<double>(), v[1].get<double>(), v[2].get<double>()};
}

double number_field(const json& j, const std::string& key, const std::string& where) {
  if (!j.contains(key) || !j.at(key).is_number()) {
    throw std::invalid_argument(where + ": field '" + key + "' must be a number");
  }
  return j.at(key).get<double>();
}

json vec3_json(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }

json bounds_json(const Aabb& b) { return json{{"min", vec3_json(b.lo)}, {"max", vec3_json(b.hi)}}; }

Aabb bounds_field(const json& j, const std::string& where) {
  return Aabb{vec3_field(j, "min", where), vec3_field(j, "max", where)};
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

}  // namespace

SceneSpec load_scene(const std::filesystem::path& path) {
  const json j = read_json(path);
  const std::string where = path.string();
  SceneSpec s;
  s.name = j.value("name", path.stem().string());
  if (!j.contains("bounds")) throw std::invalid_argument(where + ": missing field 'bounds'");
  s.bounds = bounds_field(j.at("bounds"), where + ": bounds");
  if (j.contains("background")) s.background = vec3_field(j, "background", where);
  if (!j.contains("primitives") || !j.at("primitives").is_array()) {
    throw std::invalid_argument(where + ": field 'primitives' must be an array");
  }
  for (std::size_t i = 0; i < j.at("primitives").size(); ++i) {
    const json& pj = j.at("primitives")[i];
    const std::string pw = where + ": primitives[" + std::to_string(i) + "]";
    Primitive p;
    const std::string shape = pj.value("shape", "");
    if (shape == "box") {
      p.shape = Primitive::Shape::box;
      p.half_extent = vec3_field(pj, "half_extent", pw);
    } else if (shape == "sphere") {
      p.shape = Primitive::Shape::sphere;
      p.radius = number_field(pj, "radius", pw);
    } else {
      throw std::invalid_argument(pw + ": field 'shape' must be \"box\" or \"sphere\"");
    }
    p.center = vec3_field(pj, "center", pw);
    p.albedo = vec3_field(pj, "albedo", pw);
    p.density = number_field(pj, "density", pw);
    s.primitives.push_back(p);
  }
  validate_scene(s);
  return s;
}

void save_scene(const SceneSpec& spec, const std::filesystem::path& path) {
  json j;
  j["name"] = spec.name;
  j["bounds"] = bounds_json(spec.bounds);
  j["background"] = vec3_json(spec.background);
  j["primitives"] = json::array();
  for (const Primitive& p : spec.primitives) {
    json pj;
    pj["shape"] = p.shape == Primitive::Shape::box ? "box" : "sphere";
    pj["center"] = vec3_json(p.center);
    if (p.shape == Primitive::Shape::box) {
      pj["half_extent"] = vec3_json(p.half_extent);
    } else {
      pj["radius"] = p.radius;
    }
    pj["albedo"] = vec3_json(p.albedo);
    pj["density"] = p.density;
    j["primitives"].push_back(pj);
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

SceneSpec resolve_scene(const std::string& name_or_path) {
  if (name_or_path == "cornell-mini") return cornell_mini();
  if (!std::filesystem::exists(name_or_path)) {
    throw std::invalid_argument("unknown scene '" + name_or_path + "' (not a builtin and no such file)");
  }
  return load_scene(name_or_path);
}

ScenePoint eval_scene(const SceneSpec& spec, const Eigen::Vector3d& position, const Eigen::Vector3d&) {
  for (const Primitive& p : spec.primitives) {
    if (p.contains(position)) return {p.density, p.albedo};
  }
  return {0.0, spec.background};
}

Eigen::Vector3d oracle_ray(const SceneSpec& spec, const Ray& ray, double step) {
  if (step <= 0.0) throw std::invalid_argument("oracle_ray: step must be positive");
  std::vector<double> cuts;
  for (double t = ray.near; t < ray.far; t += step) cuts.push_back(t);
  cuts.push_back(ray.far);
  for (const Primitive& p : spec.primitives) {
    if (auto hit = p.intersect(ray.origin, ray.direction)) {
      for (double t : {hit->first, hit->second}) {
        if (t > ray.near && t < ray.far) cuts.push_back(t);
      }
    }
  }
  std::sort(cuts.begin(), cuts.end());
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
  double transmittance = 1.0;
  for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
    const double len = cuts[i + 1] - cuts[i];
    if (len <= 0.0) continue;
    const ScenePoint sp = eval_scene(spec, ray.at(0.5 * (cuts[i] + cuts[i + 1])), ray.direction);
    if (sp.sigma <= 0.0) continue;
    const double keep = std::exp(-sp.sigma * len);
    color += transmittance * (1.0 - keep) * sp.rgb;
    transmittance *= keep;
  }
  return color + transmittance * spec.background;
}

Image oracle_render(const SceneSpec& spec, const CameraPose& pose, double step) {
  const auto rays = camera_rays(pose, all_pixels(pose.width, pose.height), spec.bounds);
  Image img(pose.width, pose.height);
  for (std::size_t i = 0; i < rays.size(); ++i) {
    const Eigen::Vector3d c = oracle_ray(spec, rays[i], step);
    for (int ch = 0; ch < 3; ++ch) img.data[i * 3 + static_cast<std::size_t>(ch)] = c[ch];
  }
  return img;
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

Dataset Dataset::subset(Split s) const {
  Dataset d;
  d.bounds = bounds;
  d.camera_angle_x = camera_angle_x;
  for (std::size_t i : indices(s)) {
    d.images.push_back(images[i]);
    d.poses.push_back(poses[i]);
    d.splits.push_back(s);
  }
  return d;
}

Dataset make_dataset(const SceneSpec& spec, int n_views, int resolution, std::uint64_t seed,
                     const OrbitConfig& orbit) {
  if (n_views < 2) throw std::invalid_argument("make_dataset: need at least 2 views");
  if (resolution < 1) throw std::invalid_argument("make_dataset: resolution must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  Dataset d;
  d.bounds = spec.bounds;
  d.camera_angle_x = orbit.fov_x;
  const Eigen::Vector3d target = spec.bounds.center();
  const double step = spec.bounds.diameter() / 1000.0;
  for (int i = 0; i < n_views; ++i) {
    const double u = (i + 0.5 + 0.5 * jitter(rng)) / n_views;
    const double polar = orbit.max_polar * std::sqrt(u);
    const double azimuth = 2.0 * std::numbers::pi * orbit.turns * u;
    const Eigen::Vector3d eye = target + orbit.radius * Eigen::Vector3d(std::sin(polar) * std::cos(azimuth),
                                                                        std::sin(polar) * std::sin(azimuth),
                                                                        std::cos(polar));
    CameraPose pose;
    pose.camera_to_world = look_at<double>(eye, target, Eigen::Vector3d::UnitY());
    pose.width = resolution;
    pose.height = resolution;
    pose.focal = focal_from_fov(resolution, orbit.fov_x);
    d.poses.push_back(pose);
    d.images.push_back(oracle_render(spec, pose, step));
    d.splits.push_back(Split::train);
  }
  std::vector<std::size_t> order(static_cast<std::size_t>(n_views));
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_test = static_cast<std::size_t>(std::lround(orbit.test_fraction * n_views));
  for (std::size_t i = 0; i < n_test && i < order.size(); ++i) d.splits[order[i]] = Split::test;
  return d;
}

Image png_read(const std::filesystem::path& path) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (png_image_begin_read_from_file(&img, path.string().c_str()) == 0) {
    throw std::runtime_error("png_read " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGBA;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(img));
  if (png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr) == 0) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw std::runtime_error("png_read " + path.string() + ": " + msg);
  }
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  for (std::size_t p = 0; p < static_cast<std::size_t>(img.width) * img.height; ++p) {
    const double a = buf[p * 4 + 3] / 255.0;
    for (int ch = 0; ch < 3; ++ch) {
      const double v = buf[p * 4 + static_cast<std::size_t>(ch)] / 255.0;
      out.data[p * 3 + static_cast<std::size_t>(ch)] = v * a + (1.0 - a);
    }
  }
  return out;
}

void png_write(const std::filesystem::path& path, const Image& image) {
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  std::vector<png_byte> buf(image.data.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<png_byte>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
  }
  if (png_image_write_to_file(&img, path.string().c_str(), 0, buf.data(), 0, nullptr) == 0) {
    throw std::runtime_error("png_write " + path.string() + ": " + img.message);
  }
}

namespace {

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::val: return "val";
  }
  return "train";
}

Eigen::Matrix4d matrix_field(const json& frame, const std::string& where) {
  if (!frame.contains("transform_matrix")) throw std::invalid_argument(where + ": missing field 'transform_matrix'");
  const json& m = frame.at("transform_matrix");
  if (!m.is_array() || m.size() != 4) throw std::invalid_argument(where + ": 'transform_matrix' must have 4 rows");
  Eigen::Matrix4d out;
  for (int r = 0; r < 4; ++r) {
    if (!m[r].is_array() || m[r].size() != 4) {
      throw std::invalid_argument(where + ": 'transform_matrix' row " + std::to_string(r) + " must have 4 entries");
    }
    for (int c = 0; c < 4; ++c) {
      if (!m[r][c].is_number()) throw std::invalid_argument(where + ": 'transform_matrix' entry is not a number");
      out(r, c) = m[r][c].get<double>();
    }
  }
  const Eigen::Matrix3d rot = out.topLeftCorner<3, 3>();
  if ((rot.transpose() * rot - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > 1e-4) {
    throw std::invalid_argument(where + ": 'transform_matrix' rotation is not orthonormal");
  }
  return out;
}

}  // namespace

void write_blender_dataset(const std::filesystem::path& dir, const Dataset& dataset) {
  std::filesystem::create_directories(dir);
  for (Split s : {Split::train, Split::test, Split::val}) {
    const auto idx = dataset.indices(s);
    if (idx.empty()) continue;
    const std::string name = split_name(s);
    std::filesystem::create_directories(dir / name);
    json j;
    j["camera_angle_x"] = dataset.camera_angle_x;
    j["scene_bounds"] = bounds_json(dataset.bounds);
    j["frames"] = json::array();
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::string stem = "r_" + std::to_string(k);
      png_write(dir / name / (stem + ".png"), dataset.images[idx[k]]);
      json rows = json::array();
      const Eigen::Matrix4d& m = dataset.poses[idx[k]].camera_to_world;
      for (int r = 0; r < 4; ++r) rows.push_back(json::array({m(r, 0), m(r, 1), m(r, 2), m(r, 3)}));
      j["frames"].push_back(json{{"file_path", "./" + name + "/" + stem}, {"rotation", 0.0}, {"transform_matrix", rows}});
    }
    std::ofstream out(dir / ("transforms_" + name + ".json"));
    if (!out) throw std::runtime_error("cannot write transforms for split " + name);
    out << j.dump(2) << '\n';
  }
}

Dataset load_blender_dataset(const std::filesystem::path& dir) {
  Dataset d;
  d.bounds = Aabb{Eigen::Vector3d::Constant(-1.5), Eigen::Vector3d::Constant(1.5)};
  bool any = false;
  for (Split s : {Split::train, Split::test, Split::val}) {
    const auto file = dir / ("transforms_" + std::string(split_name(s)) + ".json");
    if (!std::filesystem::exists(file)) continue;
    any = true;
    const json j = read_json(file);
    const std::string where = file.string();
    if (!j.contains("camera_angle_x") || !j.at("camera_angle_x").is_number()) {
      throw std::invalid_argument(where + ": missing numeric field 'camera_angle_x'");
    }
    d.camera_angle_x = j.at("camera_angle_x").get<double>();
    if (j.contains("scene_bounds")) d.bounds = bounds_field(j.at("scene_bounds"), where + ": scene_bounds");
    if (!j.contains("frames") || !j.at("frames").is_array()) {
      throw std::invalid_argument(where + ": missing array field 'frames'");
    }
    for (std::size_t f = 0; f < j.at("frames").size(); ++f) {
      const json& frame = j.at("frames")[f];
      const std::string fw = where + ": frames[" + std::to_string(f) + "]";
      if (!frame.contains("file_path") || !frame.at("file_path").is_string()) {
        throw std::invalid_argument(fw + ": missing string field 'file_path'");
      }
      std::filesystem::path img_path = dir / frame.at("file_path").get<std::string>();
      if (img_path.extension() != ".png") img_path += ".png";
      CameraPose pose;
      pose.camera_to_world = matrix_field(frame, fw);
      Image img = png_read(img_path);
      pose.width = img.width;
      pose.height = img.height;
      pose.focal = focal_from_fov(img.width, d.camera_angle_x);
      d.images.push_back(std::move(img));
      d.poses.push_back(pose);
      d.splits.push_back(s);
    }
  }
  if (!any) throw std::runtime_error(dir.string() + ": no transforms_{train,test,val}.json found");
  for (const Image& img : d.images) {
    if (img.width != d.images.front().width || img.height != d.images.front().height) {
      throw std::invalid_argument(dir.string() + ": images have mixed resolutions");
    }
  }
  return d;
}

}  // namespace recurf
