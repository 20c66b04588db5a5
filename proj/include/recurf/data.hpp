#pragma once

#include "recurf/geometry.hpp"
#include "recurf/render.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace recurf {

struct Primitive {
  enum class Shape { sphere, box };
  Shape shape = Shape::box;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d half_extent = Eigen::Vector3d::Constant(0.5);  // box
  double radius = 0.5;                                            // sphere
  Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.8);
  double density = 40.0;

  [[nodiscard]] bool contains(const Eigen::Vector3d& p) const;
  /// Entry/exit parameters of o + t d (d unit), if the line meets the shape.
  [[nodiscard]] std::optional<std::pair<double, double>> intersect(const Eigen::Vector3d& o,
                                                                   const Eigen::Vector3d& d) const;
};

struct SceneSpec {
  std::string name = "scene";
  Aabb bounds;
  std::vector<Primitive> primitives;
  Eigen::Vector3d background = Eigen::Vector3d::Ones();
};

/// Open-front box room: five walls, two interior boxes and a sphere.
SceneSpec cornell_mini();

/// Throws if a density is negative or a primitive leaves the bounds.
void validate_scene(const SceneSpec& spec);

SceneSpec load_scene(const std::filesystem::path& path);
void save_scene(const SceneSpec& spec, const std::filesystem::path& path);
/// Builtin name ("cornell-mini") or a path to a scene document.
SceneSpec resolve_scene(const std::string& name_or_path);

struct ScenePoint {
  double sigma = 0.0;
  Eigen::Vector3d rgb = Eigen::Vector3d::Zero();
};

/// First-listed primitive containing the point wins; outside all, (0, background).
ScenePoint eval_scene(const SceneSpec& spec, const Eigen::Vector3d& position,
                      const Eigen::Vector3d& direction);

/// Ground truth color along a ray. The medium is piecewise constant, so
/// each fixed step is split at primitive boundaries and integrated in
/// closed form; `step` only bounds the segment length.
Eigen::Vector3d oracle_ray(const SceneSpec& spec, const Ray& ray, double step);
Image oracle_render(const SceneSpec& spec, const CameraPose& pose, double step);

enum class Split { train, test, val };

struct Dataset {
  std::vector<Image> images;
  std::vector<CameraPose> poses;
  std::vector<Split> splits;
  Aabb bounds;
  double camera_angle_x = 0.0;

  [[nodiscard]] std::vector<std::size_t> indices(Split s) const;
  [[nodiscard]] Dataset subset(Split s) const;
};

struct OrbitConfig {
  double radius = 4.0;
  double fov_x = 0.7853981633974483;  // 45 degrees
  double max_polar = 0.5235987755982988;  // 30 degrees from +z
  double turns = 3.0;
  double test_fraction = 0.2;
};

/// Views on a spherical spiral facing the scene center, rendered with the
/// oracle. A seeded shuffle assigns the test split.
Dataset make_dataset(const SceneSpec& spec, int n_views, int resolution, std::uint64_t seed,
                     const OrbitConfig& orbit = {});

Image png_read(const std::filesystem::path& path);
void png_write(const std::filesystem::path& path, const Image& image);

/// Writes transforms_{train,test}.json plus PNGs under train/ and test/.
void write_blender_dataset(const std::filesystem::path& dir, const Dataset& dataset);
/// Reads every transforms_{train,test,val}.json present, compositing RGBA over white.
Dataset load_blender_dataset(const std::filesystem::path& dir);

}  // namespace recurf
