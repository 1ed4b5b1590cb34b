/**
 * \file pose_solver.hpp
 * \brief Lifting 2D matches to 3D correspondences, closed-form weighted
 *        rigid fitting, seeded sample-consensus registration and the
 *        reference-to-query pose composition.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "refpose/camera.hpp"
#include "refpose/matching.hpp"
#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::pose {

/// Reported in pose records so downstream consumers know which registration
/// backend produced the estimate.
inline constexpr const char* kSolverName = "sample-consensus";

/// \brief Paired camera-frame points lifted from matches, with confidences.
struct Correspondence3D {
  std::vector<Eigen::Vector3d> query;
  std::vector<Eigen::Vector3d> reference;
  std::vector<double> confidence;
  int dropped = 0;  ///< matches lost to invalid depth, masks or bounds

  std::size_t size() const { return query.size(); }
};

/// \brief Output of robust_register.
struct PoseEstimate {
  RigidTransform transform;            ///< maps query-frame points to reference frame
  std::vector<std::uint8_t> inliers;   ///< per-correspondence flag
  double rms = 0.0;                    ///< residual over inliers, meters
  int iterations = 0;                  ///< hypotheses evaluated
  int inlier_count = 0;
};

namespace detail {

/// Bilinear depth at a subpixel position. Corners outside the image, with
/// invalid depth or excluded by the mask are unusable; if any corner is
/// unusable the nearest usable corner's value is returned instead (weight
/// ties go in corner order). Returns false when no corner is usable.
inline bool sample_depth(const DepthMap& depth, const Mask* mask, double u, double v,
                         double* out) {
  const int u0 = static_cast<int>(std::floor(u));
  const int v0 = static_cast<int>(std::floor(v));
  const double fu = u - u0, fv = v - v0;
  const int cu[4] = {u0, u0 + 1, u0, u0 + 1};
  const int cv[4] = {v0, v0, v0 + 1, v0 + 1};
  const double w[4] = {(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv),
                       (1.0 - fu) * fv, fu * fv};
  bool usable[4];
  bool all = true, any = false;
  for (int k = 0; k < 4; ++k) {
    usable[k] = depth.grid().inside(cu[k], cv[k]) && depth.valid(cu[k], cv[k]) &&
                mask_allows(mask, cu[k], cv[k]);
    all = all && usable[k];
    any = any || usable[k];
  }
  if (!any) return false;
  if (all) {
    *out = w[0] * depth.at(cu[0], cv[0]) + w[1] * depth.at(cu[1], cv[1]) +
           w[2] * depth.at(cu[2], cv[2]) + w[3] * depth.at(cu[3], cv[3]);
    return true;
  }
  int best = -1;
  for (int k = 0; k < 4; ++k) {
    if (!usable[k]) continue;
    if (best < 0 || w[k] > w[best]) best = k;
  }
  *out = depth.at(cu[best], cv[best]);
  return true;
}

}  // namespace detail

/**
 * \brief Lifts matches to paired 3D points in their camera frames.
 *
 * Depth is read bilinearly at the subpixel match positions with a
 * nearest-valid fallback when a corner is invalid or masked out; matches with
 * no usable depth on either side, or outside either image, are dropped and
 * tallied. Throws when fewer than 3 pairs survive.
 */
inline Correspondence3D lift_matches(const matching::MatchSet& matches,
                                     const DepthMap& depth_q, const DepthMap& depth_r,
                                     const CameraIntrinsics& kq, const CameraIntrinsics& kr,
                                     const Mask* mask_q = nullptr,
                                     const Mask* mask_r = nullptr) {
  if (!kq.plausible() || !kr.plausible())
    throw InvalidInputError("lift_matches: implausible camera intrinsics");
  if (mask_q != nullptr) require_same_size(*mask_q, depth_q, "lift_matches: query mask");
  if (mask_r != nullptr) require_same_size(*mask_r, depth_r, "lift_matches: reference mask");

  Correspondence3D out;
  for (const matching::Match& m : matches.matches) {
    const bool q_in = m.qx >= 0.0 && m.qx <= depth_q.width() - 1.0 &&
                      m.qy >= 0.0 && m.qy <= depth_q.height() - 1.0;
    const bool r_in = m.rx >= 0.0 && m.rx <= depth_r.width() - 1.0 &&
                      m.ry >= 0.0 && m.ry <= depth_r.height() - 1.0;
    double zq = 0.0, zr = 0.0;
    if (!q_in || !r_in ||
        !detail::sample_depth(depth_q, mask_q, m.qx, m.qy, &zq) ||
        !detail::sample_depth(depth_r, mask_r, m.rx, m.ry, &zr)) {
      ++out.dropped;
      continue;
    }
    out.query.push_back(kq.lift(m.qx, m.qy, zq));
    out.reference.push_back(kr.lift(m.rx, m.ry, zr));
    out.confidence.push_back(m.confidence);
  }
  if (out.size() < 3)
    throw SolveFailureError("lift_matches: only " + std::to_string(out.size()) +
                            " correspondences survive (need 3)");
  return out;
}

/**
 * \brief Weighted least-squares rigid transform src -> dst.
 *
 * Rotation from the SVD of the weighted cross-covariance with the standard
 * reflection correction (smallest singular direction flipped when the
 * determinant would be negative); translation from the weighted centroids.
 * Minimizes sum w_i |R src_i + t - dst_i|^2.
 */
inline RigidTransform rigid_fit(const std::vector<Eigen::Vector3d>& src,
                                const std::vector<Eigen::Vector3d>& dst,
                                const std::vector<double>* weights = nullptr) {
  const std::size_t n = src.size();
  if (n != dst.size())
    throw InvalidInputError("rigid_fit: src and dst lengths differ");
  if (n < 3)
    throw InvalidInputError("rigid_fit: need at least 3 pairs, got " + std::to_string(n));
  if (weights != nullptr && weights->size() != n)
    throw InvalidInputError("rigid_fit: weight count does not match pair count");

  double wsum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    if (!(w >= 0.0) || !std::isfinite(w))
      throw InvalidInputError("rigid_fit: weights must be finite and nonnegative");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw InvalidInputError("rigid_fit: weights sum to zero");

  Eigen::Vector3d mu_s = Eigen::Vector3d::Zero(), mu_d = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    mu_s += w * src[i];
    mu_d += w * dst[i];
  }
  mu_s /= wsum;
  mu_d /= wsum;

  Eigen::Matrix3d H = Eigen::Matrix3d::Zero();
  for (std::size_t i = 0; i < n; ++i) {
    const double w = weights ? (*weights)[i] : 1.0;
    H += w * (src[i] - mu_s) * (dst[i] - mu_d).transpose();
  }

  Eigen::JacobiSVD<Eigen::Matrix3d> svd(H, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-9 * sv(0))
    throw DegenerateFitError("rigid_fit: collinear or degenerate point configuration");

  const Eigen::Matrix3d U = svd.matrixU(), V = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, 1.0);
  d(2) = (V * U.transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  RigidTransform T;
  T.R = V * d.asDiagonal() * U.transpose();
  T.t = mu_d - T.R * mu_s;
  return T;
}

/**
 * \brief Seeded minimal-sample consensus registration around rigid_fit.
 *
 * Correspondences are brought into a canonical order (lexicographic on the
 * paired coordinates) before sampling, so the estimate does not depend on
 * input permutation. Each iteration fits a 3-pair hypothesis and counts
 * pairs with residual strictly below the threshold; the highest count wins,
 * ties going to the earliest hypothesis. The best inlier set is refit with
 * the match confidences as weights, and the returned flags, count and rms
 * are evaluated at that final transform.
 */
inline PoseEstimate robust_register(const Correspondence3D& corr,
                                    double inlier_threshold = 0.01,
                                    int max_iters = 2048,
                                    std::uint64_t seed = 0) {
  const std::size_t n = corr.size();
  if (corr.reference.size() != n || corr.confidence.size() != n)
    throw InvalidInputError("robust_register: correspondence lists have unequal lengths");
  if (n < 3)
    throw SolveFailureError("robust_register: need at least 3 correspondences, got " +
                            std::to_string(n));
  if (!(inlier_threshold > 0.0))
    throw InvalidInputError("robust_register: inlier threshold must be positive");
  if (max_iters < 1)
    throw InvalidInputError("robust_register: max_iters must be at least 1");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    for (int k = 0; k < 3; ++k) {
      if (corr.query[a](k) != corr.query[b](k)) return corr.query[a](k) < corr.query[b](k);
    }
    for (int k = 0; k < 3; ++k) {
      if (corr.reference[a](k) != corr.reference[b](k))
        return corr.reference[a](k) < corr.reference[b](k);
    }
    return corr.confidence[a] < corr.confidence[b];
  });

  std::mt19937_64 rng(seed);
  const auto draw = [&]() { return static_cast<std::size_t>(rng() % n); };

  int best_count = 0;
  RigidTransform best_T;
  std::vector<Eigen::Vector3d> s3(3), d3(3);

  for (int iter = 0; iter < max_iters; ++iter) {
    std::size_t a = draw(), b = draw(), c = draw();
    while (b == a) b = draw();
    while (c == a || c == b) c = draw();
    s3[0] = corr.query[order[a]];
    s3[1] = corr.query[order[b]];
    s3[2] = corr.query[order[c]];
    d3[0] = corr.reference[order[a]];
    d3[1] = corr.reference[order[b]];
    d3[2] = corr.reference[order[c]];

    RigidTransform T;
    try {
      T = rigid_fit(s3, d3);
    } catch (const DegenerateFitError&) {
      continue;
    }
    int count = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t k = order[i];
      if ((T.apply(corr.query[k]) - corr.reference[k]).norm() < inlier_threshold) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best_T = T;
    }
  }

  if (best_count < 3)
    throw SolveFailureError("robust_register: no hypothesis reached 3 inliers in " +
                            std::to_string(max_iters) + " iterations");

  // Confidence-weighted refit on the consensus set, then score the refit.
  std::vector<Eigen::Vector3d> si, di;
  std::vector<double> wi;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k = order[i];
    if ((best_T.apply(corr.query[k]) - corr.reference[k]).norm() < inlier_threshold) {
      si.push_back(corr.query[k]);
      di.push_back(corr.reference[k]);
      wi.push_back(corr.confidence[k]);
    }
  }
  const bool weighted = std::accumulate(wi.begin(), wi.end(), 0.0) > 0.0;
  RigidTransform T_final;
  try {
    T_final = rigid_fit(si, di, weighted ? &wi : nullptr);
  } catch (const DegenerateFitError& e) {
    throw SolveFailureError(std::string("robust_register: consensus refit degenerate (") +
                            e.what() + ")");
  }

  PoseEstimate est;
  est.transform = T_final;
  est.iterations = max_iters;
  est.inliers.assign(n, 0);
  double sq = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (T_final.apply(corr.query[i]) - corr.reference[i]).norm();
    if (r < inlier_threshold) {
      est.inliers[i] = 1;
      ++est.inlier_count;
      sq += r * r;
    }
  }
  if (est.inlier_count < 3)
    throw SolveFailureError("robust_register: refit lost the consensus set");
  est.rms = std::sqrt(sq / est.inlier_count);
  return est;
}

/**
 * \brief Query pose from the reference pose and the relative transform:
 *        the inverse query pose is t_r_inv composed with t_q_to_r.
 */
inline RigidTransform compose_query_pose(const RigidTransform& t_r_inv,
                                         const RigidTransform& t_q_to_r) {
  return t_r_inv * t_q_to_r;
}

}  // namespace refpose::pose
