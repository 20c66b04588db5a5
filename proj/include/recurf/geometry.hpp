#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace recurf {

template <typename Scalar>
struct AabbT {
  Eigen::Matrix<Scalar, 3, 1> lo = Eigen::Matrix<Scalar, 3, 1>::Constant(Scalar(-1));
  Eigen::Matrix<Scalar, 3, 1> hi = Eigen::Matrix<Scalar, 3, 1>::Constant(Scalar(1));

  [[nodiscard]] Eigen::Matrix<Scalar, 3, 1> center() const { return (lo + hi) / Scalar(2); }
  [[nodiscard]] Eigen::Matrix<Scalar, 3, 1> half_extent() const { return (hi - lo) / Scalar(2); }
  [[nodiscard]] Scalar diameter() const { return (hi - lo).norm(); }
  [[nodiscard]] bool contains(const Eigen::Matrix<Scalar, 3, 1>& p) const {
    return (p.array() >= lo.array()).all() && (p.array() <= hi.array()).all();
  }
  /// Box scaled about its center by `factor`.
  [[nodiscard]] AabbT scaled(Scalar factor) const {
    const Eigen::Matrix<Scalar, 3, 1> c = center();
    const Eigen::Matrix<Scalar, 3, 1> h = half_extent() * factor;
    return AabbT{c - h, c + h};
  }
  /// Slab test; returns the entry/exit parameters along o + t d.
  [[nodiscard]] std::optional<std::pair<Scalar, Scalar>> intersect(
      const Eigen::Matrix<Scalar, 3, 1>& o, const Eigen::Matrix<Scalar, 3, 1>& d) const {
    Scalar t0 = -std::numeric_limits<Scalar>::infinity();
    Scalar t1 = std::numeric_limits<Scalar>::infinity();
    for (int a = 0; a < 3; ++a) {
      if (d[a] == Scalar(0)) {
        if (o[a] < lo[a] || o[a] > hi[a]) return std::nullopt;
        continue;
      }
      Scalar ta = (lo[a] - o[a]) / d[a];
      Scalar tb = (hi[a] - o[a]) / d[a];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
    }
    if (t1 <= t0 || t1 <= Scalar(0)) return std::nullopt;
    return std::make_pair(t0, t1);
  }
};

template <typename Scalar>
struct RayT {
  Eigen::Matrix<Scalar, 3, 1> origin = Eigen::Matrix<Scalar, 3, 1>::Zero();
  Eigen::Matrix<Scalar, 3, 1> direction = Eigen::Matrix<Scalar, 3, 1>(0, 0, -1);
  Scalar near = Scalar(0.1);
  Scalar far = Scalar(1);

  [[nodiscard]] Eigen::Matrix<Scalar, 3, 1> at(Scalar t) const { return origin + t * direction; }
};

/// Pinhole camera; camera space looks along -z with +y up.
template <typename Scalar>
struct CameraPoseT {
  Eigen::Matrix<Scalar, 4, 4> camera_to_world = Eigen::Matrix<Scalar, 4, 4>::Identity();
  Scalar focal = Scalar(1);
  int width = 1;
  int height = 1;

  [[nodiscard]] Eigen::Matrix<Scalar, 3, 3> rotation() const {
    return camera_to_world.template topLeftCorner<3, 3>();
  }
  [[nodiscard]] Eigen::Matrix<Scalar, 3, 1> position() const {
    return camera_to_world.template topRightCorner<3, 1>();
  }
};

using Aabb = AabbT<double>;
using Ray = RayT<double>;
using CameraPose = CameraPoseT<double>;

struct Pixel {
  int row = 0;
  int col = 0;
};

/// Orthonormal camera-to-world transform at `eye` looking at `target`.
template <typename Scalar>
Eigen::Matrix<Scalar, 4, 4> look_at(const Eigen::Matrix<Scalar, 3, 1>& eye,
                                    const Eigen::Matrix<Scalar, 3, 1>& target,
                                    const Eigen::Matrix<Scalar, 3, 1>& up) {
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(up);
  if (right.norm() < Scalar(1e-9)) right = forward.cross(Vec3(1, 0, 0));
  right.normalize();
  const Vec3 cam_up = right.cross(forward);
  Eigen::Matrix<Scalar, 4, 4> m = Eigen::Matrix<Scalar, 4, 4>::Identity();
  m.template block<3, 1>(0, 0) = right;
  m.template block<3, 1>(0, 1) = cam_up;
  m.template block<3, 1>(0, 2) = -forward;
  m.template block<3, 1>(0, 3) = eye;
  return m;
}

/// Focal length in pixels for a horizontal field of view (radians).
template <typename Scalar>
Scalar focal_from_fov(int width, Scalar fov_x) {
  return Scalar(0.5) * Scalar(width) / std::tan(Scalar(0.5) * fov_x);
}

/// Sets near/far from the intersection of the ray with `bounds` enlarged by
/// 10%. Rays that miss get a short interval around their closest approach
/// to the box center, which lies in empty space.
template <typename Scalar>
void clip_to_bounds(RayT<Scalar>& ray, const AabbT<Scalar>& bounds) {
  const AabbT<Scalar> grown = bounds.scaled(Scalar(1.1));
  constexpr Scalar kMinNear = Scalar(1e-3);
  if (auto hit = grown.intersect(ray.origin, ray.direction)) {
    ray.near = std::max(hit->first, kMinNear);
    ray.far = std::max(hit->second, ray.near + kMinNear);
    return;
  }
  const Scalar tc = std::max((grown.center() - ray.origin).dot(ray.direction), kMinNear);
  const Scalar span = Scalar(0.05) * grown.diameter();
  ray.near = std::max(tc - span, kMinNear);
  ray.far = ray.near + Scalar(2) * span;
}

/// One ray per pixel, through the pixel center.
template <typename Scalar>
std::vector<RayT<Scalar>> camera_rays(const CameraPoseT<Scalar>& pose, const std::vector<Pixel>& pixels,
                                      const AabbT<Scalar>& bounds) {
  using Vec3 = Eigen::Matrix<Scalar, 3, 1>;
  const Eigen::Matrix<Scalar, 3, 3> rot = pose.rotation();
  const Vec3 origin = pose.position();
  std::vector<RayT<Scalar>> rays;
  rays.reserve(pixels.size());
  for (const Pixel& px : pixels) {
    if (px.row < 0 || px.row >= pose.height || px.col < 0 || px.col >= pose.width) {
      throw std::out_of_range("camera_rays: pixel (" + std::to_string(px.row) + ", " +
                              std::to_string(px.col) + ") outside " + std::to_string(pose.height) +
                              "x" + std::to_string(pose.width) + " image");
    }
    const Vec3 cam((Scalar(px.col) + Scalar(0.5) - Scalar(pose.width) / Scalar(2)) / pose.focal,
                   -(Scalar(px.row) + Scalar(0.5) - Scalar(pose.height) / Scalar(2)) / pose.focal,
                   Scalar(-1));
    RayT<Scalar> ray;
    ray.origin = origin;
    ray.direction = (rot * cam).normalized();
    clip_to_bounds(ray, bounds);
    rays.push_back(ray);
  }
  return rays;
}

/// Every pixel of the image in row-major order.
inline std::vector<Pixel> all_pixels(int width, int height) {
  std::vector<Pixel> px;
  px.reserve(static_cast<std::size_t>(width) * height);
  for (int r = 0; r < height; ++r)
    for (int c = 0; c < width; ++c) px.push_back({r, c});
  return px;
}

}  // namespace recurf
