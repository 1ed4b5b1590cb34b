/**
 * \file transform.hpp
 * \brief Rigid SE(3) transforms: composition, inversion, point application.
 */
#pragma once

#include <algorithm>
#include <cmath>

#include <Eigen/Core>
#include <Eigen/Geometry>

#include "refpose/types.hpp"

namespace refpose {

/// \brief Rigid transform p -> R p + t with R in SO(3).
struct RigidTransform {
  Eigen::Matrix3d R = Eigen::Matrix3d::Identity();
  Eigen::Vector3d t = Eigen::Vector3d::Zero();

  static RigidTransform identity() { return {}; }

  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return R * p + t; }

  /// \brief Exact inverse: (Rᵀ, -Rᵀ t).
  RigidTransform inverse() const { return {R.transpose(), -(R.transpose() * t)}; }

  /// \brief Composition such that (a * b).apply(p) == a.apply(b.apply(p)).
  friend RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
    return {a.R * b.R, a.R * b.t + a.t};
  }

  /// \brief Frobenius distance of RᵀR from the identity.
  double orthonormality_error() const {
    return (R.transpose() * R - Eigen::Matrix3d::Identity()).norm();
  }

  bool is_rotation(double tol = 1e-6) const {
    return orthonormality_error() < tol && R.determinant() > 0.0;
  }
};

/// \brief Rotation about a unit axis by an angle in radians.
inline Eigen::Matrix3d axis_angle(const Eigen::Vector3d& axis, double angle_rad) {
  return Eigen::AngleAxisd(angle_rad, axis.normalized()).toRotationMatrix();
}

/// \brief Geodesic angle (radians) between two rotations.
inline double rotation_angle_between(const Eigen::Matrix3d& a, const Eigen::Matrix3d& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

}  // namespace refpose
