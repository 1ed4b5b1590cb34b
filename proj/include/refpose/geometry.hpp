/**
 * \file geometry.hpp
 * \brief Depth-map geometry: backprojection, projection, forward-difference
 *        gradients and surface normals.
 */
#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <vector>

#include "refpose/camera.hpp"
#include "refpose/types.hpp"

namespace refpose {
namespace geom {

/// \brief Camera-frame points lifted from a depth map, with the source pixel
///        of every point kept alongside it.
struct PointCloud {
  std::vector<Eigen::Vector3d> points;
  std::vector<Eigen::Vector2d> pixels;

  std::size_t size() const { return points.size(); }
};

/// \brief Projection of one 3-D point: pixel coordinates plus a flag telling
///        whether the pixel falls inside the image bounds.
struct Projection {
  Eigen::Vector2d px = Eigen::Vector2d::Zero();
  bool in_bounds = false;
};

/**
 * \brief Per-pixel forward-difference gradient of a scalar field.
 *
 * du holds f(u+1, v) - f(u, v) and dv holds f(u, v+1) - f(u, v). A component
 * is zero when its stencil leaves the image or touches an invalid pixel;
 * valid_u / valid_v track availability per component and valid(u, v) requires
 * both. mag is the Euclidean norm of the stored 2-vector.
 */
struct GradientMap {
  Image<double> du;
  Image<double> dv;
  Image<double> mag;
  Mask valid_u;
  Mask valid_v;

  bool valid(int u, int v) const { return valid_u.at(u, v) && valid_v.at(u, v); }
};

/// \brief Unit surface normals, oriented toward the camera (n_z <= 0).
///        Pixels lacking a full stencil carry a zero normal and valid = 0.
struct NormalMap {
  Image<double> nx;
  Image<double> ny;
  Image<double> nz;
  Mask valid;

  Eigen::Vector3d normal(int u, int v) const {
    return {nx.at(u, v), ny.at(u, v), nz.at(u, v)};
  }
};

/// \brief Lifts every valid (and unmasked) depth pixel to a camera-frame
///        point z * ((u - cx)/fx, (v - cy)/fy, 1).
inline PointCloud backproject(const DepthMap& depth, const CameraIntrinsics& K,
                              const Mask* mask = nullptr) {
  if (!K.plausible()) throw InvalidInputError("backproject: implausible intrinsics");
  if (depth.grid().empty()) throw InvalidInputError("backproject: empty depth map");
  if (mask) require_same_size(depth, *mask, "backproject");
  PointCloud cloud;
  cloud.points.reserve(depth.grid().size());
  cloud.pixels.reserve(depth.grid().size());
  for (int v = 0; v < depth.height(); ++v) {
    for (int u = 0; u < depth.width(); ++u) {
      if (!depth.valid(u, v) || !mask_allows(mask, u, v)) continue;
      cloud.points.push_back(K.lift(u, v, depth.at(u, v)));
      cloud.pixels.emplace_back(u, v);
    }
  }
  return cloud;
}

/// \brief Projects camera-frame points to pixels. Any point with z <= 0 is a
///        domain violation and raises InvalidInputError.
inline std::vector<Projection> project(const std::vector<Eigen::Vector3d>& points,
                                       const CameraIntrinsics& K) {
  if (!K.plausible()) throw InvalidInputError("project: implausible intrinsics");
  std::vector<Projection> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    Projection pr;
    pr.px = K.project(p);
    pr.in_bounds = pr.px.x() >= 0.0 && pr.px.x() <= K.width - 1.0 &&
                   pr.px.y() >= 0.0 && pr.px.y() <= K.height - 1.0;
    out.push_back(pr);
  }
  return out;
}

/**
 * \brief Forward-difference gradient of a scalar field.
 *
 * \param field  scalar grid to differentiate
 * \param valid  optional per-pixel validity; a difference touching an invalid
 *               pixel is unavailable (component forced to zero)
 */
inline GradientMap scalar_gradient(const Image<double>& field, const Mask* valid = nullptr) {
  if (field.empty()) throw InvalidInputError("scalar_gradient: empty field");
  if (valid) require_same_size(field, *valid, "scalar_gradient");
  const int w = field.width(), h = field.height();
  GradientMap g;
  g.du = Image<double>(w, h, 0.0);
  g.dv = Image<double>(w, h, 0.0);
  g.mag = Image<double>(w, h, 0.0);
  g.valid_u = Mask(w, h, 0);
  g.valid_v = Mask(w, h, 0);
  auto ok = [&](int u, int v) { return mask_allows(valid, u, v); };
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      if (!ok(u, v)) continue;
      if (u + 1 < w && ok(u + 1, v)) {
        g.du.at(u, v) = field.at(u + 1, v) - field.at(u, v);
        g.valid_u.at(u, v) = 1;
      }
      if (v + 1 < h && ok(u, v + 1)) {
        g.dv.at(u, v) = field.at(u, v + 1) - field.at(u, v);
        g.valid_v.at(u, v) = 1;
      }
      g.mag.at(u, v) = std::hypot(g.du.at(u, v), g.dv.at(u, v));
    }
  }
  return g;
}

/// \brief Validity mask of a depth map intersected with an optional user mask.
inline Mask depth_validity(const DepthMap& depth, const Mask* mask = nullptr) {
  Mask m(depth.width(), depth.height(), 0);
  for (int v = 0; v < depth.height(); ++v)
    for (int u = 0; u < depth.width(); ++u)
      m.at(u, v) = (depth.valid(u, v) && mask_allows(mask, u, v)) ? 1 : 0;
  return m;
}

/**
 * \brief Surface normals of a backprojected depth map.
 *
 * With P(u, v) the lifted point, the normal is the normalized cross product
 * of P(u+1, v) - P(u, v) and P(u, v+1) - P(u, v), sign-flipped so it faces
 * the camera (n_z <= 0). Pixels whose stencil leaves the image, touches an
 * invalid depth or yields a near-zero cross product get a zero normal.
 */
inline NormalMap normals_from_depth(const DepthMap& depth, const CameraIntrinsics& K,
                                    const Mask* mask = nullptr) {
  if (!K.plausible()) throw InvalidInputError("normals_from_depth: implausible intrinsics");
  if (mask) require_same_size(depth, *mask, "normals_from_depth");
  const int w = depth.width(), h = depth.height();
  NormalMap nm;
  nm.nx = Image<double>(w, h, 0.0);
  nm.ny = Image<double>(w, h, 0.0);
  nm.nz = Image<double>(w, h, 0.0);
  nm.valid = Mask(w, h, 0);
  auto ok = [&](int u, int v) { return depth.valid(u, v) && mask_allows(mask, u, v); };
  constexpr double kMinCrossNorm = 1e-12;
  for (int v = 0; v + 1 < h; ++v) {
    for (int u = 0; u + 1 < w; ++u) {
      if (!ok(u, v) || !ok(u + 1, v) || !ok(u, v + 1)) continue;
      const Eigen::Vector3d p0 = K.lift(u, v, depth.at(u, v));
      const Eigen::Vector3d pu = K.lift(u + 1, v, depth.at(u + 1, v)) - p0;
      const Eigen::Vector3d pv = K.lift(u, v + 1, depth.at(u, v + 1)) - p0;
      Eigen::Vector3d n = pu.cross(pv);
      const double norm = n.norm();
      if (norm < kMinCrossNorm) continue;
      n /= norm;
      if (n.z() > 0.0) n = -n;
      nm.nx.at(u, v) = n.x();
      nm.ny.at(u, v) = n.y();
      nm.nz.at(u, v) = n.z();
      nm.valid.at(u, v) = 1;
    }
  }
  return nm;
}

}  // namespace geom
}  // namespace refpose
