/**
 * \file camera.hpp
 * \brief Pinhole camera intrinsics and the per-point lift/project helpers.
 */
#pragma once

#include <Eigen/Core>

#include "refpose/types.hpp"

namespace refpose {

/// \brief Pinhole intrinsics (no distortion). Pixel (u, v) maps integer
///        coordinates to its sample center.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  /// \brief Unit-depth viewing ray ((u - cx)/fx, (v - cy)/fy, 1).
  Eigen::Vector3d ray(double u, double v) const {
    return {(u - cx) / fx, (v - cy) / fy, 1.0};
  }

  /// \brief Camera-frame point for pixel (u, v) at metric depth z.
  Eigen::Vector3d lift(double u, double v, double z) const {
    return z * ray(u, v);
  }

  /// \brief Pixel coordinates of a camera-frame point; requires z > 0.
  Eigen::Vector2d project(const Eigen::Vector3d& p) const {
    if (!(p.z() > 0.0))
      throw InvalidInputError("project: point at or behind the camera (z = " +
                              std::to_string(p.z()) + ")");
    return {fx * p.x() / p.z() + cx, fy * p.y() / p.z() + cy};
  }

  bool plausible() const {
    return fx > 0.0 && fy > 0.0 && width > 0 && height > 0 &&
           std::isfinite(cx) && std::isfinite(cy);
  }
};

}  // namespace refpose
