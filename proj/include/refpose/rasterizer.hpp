/**
 * \file rasterizer.hpp
 * \brief CPU z-buffer triangle rasterization producing depth maps with
 *        perspective-correct interpolation at the camera resolution.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Core>

#include "refpose/camera.hpp"
#include "refpose/mesh.hpp"
#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::rasterizer {

/// \brief Camera-space depths closer than this are treated as behind the
///        camera; triangles touching that region are skipped, not clipped.
inline constexpr double kNearPlane = 1e-6;

/**
 * \brief Per-pixel rasterization output. Uncovered pixels hold depth 0
 *        (invalid), triangle index -1 and zero model-space position.
 */
struct RenderBuffers {
  DepthMap depth;
  Image<int> triangle;
  Image<double> model_x;
  Image<double> model_y;
  Image<double> model_z;
};

namespace detail {

inline double edge(double ax, double ay, double bx, double by, double px, double py) {
  return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

/// Rasterizes the posed mesh into \p depth; \p extra, when given, also
/// receives per-pixel triangle ids and perspective-correct model positions.
inline void rasterize(const mesh::MeshModel& m, const RigidTransform& pose,
                      const CameraIntrinsics& k, DepthMap& depth,
                      RenderBuffers* extra) {
  if (!k.plausible()) throw InvalidInputError("render_depth: implausible intrinsics");
  depth = DepthMap(k.width, k.height, 0.0);
  if (extra != nullptr) {
    extra->triangle = Image<int>(k.width, k.height, -1);
    extra->model_x = Image<double>(k.width, k.height, 0.0);
    extra->model_y = Image<double>(k.width, k.height, 0.0);
    extra->model_z = Image<double>(k.width, k.height, 0.0);
  }

  std::vector<Eigen::Vector3d> cam(m.vertices.size());
  for (std::size_t i = 0; i < m.vertices.size(); ++i) cam[i] = pose.apply(m.vertices[i]);

  for (std::size_t ti = 0; ti < m.triangles.size(); ++ti) {
    const auto& tri = m.triangles[ti];
    const Eigen::Vector3d& pa = cam[tri[0]];
    const Eigen::Vector3d& pb = cam[tri[1]];
    const Eigen::Vector3d& pc = cam[tri[2]];
    if (pa.z() <= kNearPlane || pb.z() <= kNearPlane || pc.z() <= kNearPlane) continue;

    const double ax = k.fx * pa.x() / pa.z() + k.cx, ay = k.fy * pa.y() / pa.z() + k.cy;
    const double bx = k.fx * pb.x() / pb.z() + k.cx, by = k.fy * pb.y() / pb.z() + k.cy;
    const double cx = k.fx * pc.x() / pc.z() + k.cx, cy = k.fy * pc.y() / pc.z() + k.cy;

    const double area = edge(ax, ay, bx, by, cx, cy);
    if (area == 0.0) continue;

    const int u0 = std::max(0, static_cast<int>(std::ceil(std::min({ax, bx, cx}))));
    const int u1 = std::min(k.width - 1, static_cast<int>(std::floor(std::max({ax, bx, cx}))));
    const int v0 = std::max(0, static_cast<int>(std::ceil(std::min({ay, by, cy}))));
    const int v1 = std::min(k.height - 1, static_cast<int>(std::floor(std::max({ay, by, cy}))));
    if (u0 > u1 || v0 > v1) continue;

    const double iza = 1.0 / pa.z(), izb = 1.0 / pb.z(), izc = 1.0 / pc.z();
    for (int v = v0; v <= v1; ++v) {
      for (int u = u0; u <= u1; ++u) {
        const double px = static_cast<double>(u), py = static_cast<double>(v);
        const double w0 = edge(bx, by, cx, cy, px, py);
        const double w1 = edge(cx, cy, ax, ay, px, py);
        const double w2 = edge(ax, ay, bx, by, px, py);
        const bool covered = (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0) ||
                             (w0 <= 0.0 && w1 <= 0.0 && w2 <= 0.0);
        if (!covered) continue;

        const double l0 = w0 / area, l1 = w1 / area, l2 = w2 / area;
        const double inv_z = l0 * iza + l1 * izb + l2 * izc;
        if (!(inv_z > 0.0)) continue;
        const double z = 1.0 / inv_z;

        const double prev = depth.at(u, v);
        if (prev > 0.0 && prev <= z) continue;
        depth.at(u, v) = z;
        if (extra != nullptr) {
          const Eigen::Vector3d& ma = m.vertices[tri[0]];
          const Eigen::Vector3d& mb = m.vertices[tri[1]];
          const Eigen::Vector3d& mc = m.vertices[tri[2]];
          const Eigen::Vector3d pos =
              (l0 * iza * ma + l1 * izb * mb + l2 * izc * mc) * z;
          extra->triangle.at(u, v) = static_cast<int>(ti);
          extra->model_x.at(u, v) = pos.x();
          extra->model_y.at(u, v) = pos.y();
          extra->model_z.at(u, v) = pos.z();
        }
      }
    }
  }
}

}  // namespace detail

/**
 * \brief Renders the posed mesh into a depth map at the camera resolution.
 *
 * Integer pixel coordinates are the sample centers. Depth is the camera-frame
 * z of the nearest surface; pixels no triangle covers stay 0 (invalid). A
 * mesh entirely behind the camera yields a zero-coverage map, not an error.
 */
inline DepthMap render_depth(const mesh::MeshModel& m, const RigidTransform& pose,
                             const CameraIntrinsics& k) {
  DepthMap depth;
  detail::rasterize(m, pose, k, depth, nullptr);
  return depth;
}

/// \brief render_depth plus per-pixel triangle ids and perspective-correct
///        model-space hit positions (for texture synthesis and masking).
inline RenderBuffers render_geometry(const mesh::MeshModel& m,
                                     const RigidTransform& pose,
                                     const CameraIntrinsics& k) {
  RenderBuffers out;
  detail::rasterize(m, pose, k, out.depth, &out);
  return out;
}

}  // namespace refpose::rasterizer
