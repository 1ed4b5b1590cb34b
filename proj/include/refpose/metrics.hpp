/**
 * \file metrics.hpp
 * \brief Pose error metrics (VSD, MSSD, MSPD, ADD/ADD-S), recall tables and
 *        dense depth-quality metrics.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "refpose/camera.hpp"
#include "refpose/mesh.hpp"
#include "refpose/rasterizer.hpp"
#include "refpose/transform.hpp"
#include "refpose/types.hpp"

namespace refpose::metrics {

/// \brief Per-instance pose errors with flags for which were computed.
///        When \c symmetric is set, \c add holds the ADD-S value.
struct PoseErrorReport {
  double vsd = 0.0;
  double mssd = 0.0;
  double mspd = 0.0;
  double add = 0.0;
  bool has_vsd = false;
  bool has_mssd = false;
  bool has_mspd = false;
  bool has_add = false;
  bool symmetric = false;
};

/**
 * \brief VSD flavors. \c mean_absolute averages |depth difference| in meters
 *        over the visibility union, substituting the tolerance delta at
 *        pixels only one rendering covers. \c step_cost is the thresholded
 *        0/1 cost (dimensionless, in [0, 1]) with its own misalignment
 *        tolerance.
 */
enum class VsdVariant { mean_absolute, step_cost };

/// \brief Caveat that report writers attach next to every VSD column.
inline constexpr const char* kVsdSingleCoverageNote =
    "VSD: pixels covered by only one rendering contribute the tolerance "
    "delta instead of an undefined depth difference";

/**
 * \brief Visible surface discrepancy between two poses of the same mesh.
 *
 * Both poses are rendered at the camera resolution. A pixel belongs to a
 * pose's visibility set when its rendering covers the pixel; if \p scene
 * is given, the pixel must additionally carry a scene reading within
 * \p delta of the rendered depth. The result averages over the union of
 * the two sets: mutually covered pixels contribute the absolute depth
 * difference (or the 0/1 step cost), single-coverage pixels contribute
 * \p delta (or cost 1). An empty union yields 0.
 */
inline double vsd(const RigidTransform& pose_hat, const RigidTransform& pose_bar,
                  const mesh::MeshModel& mesh, const CameraIntrinsics& k,
                  double delta, const DepthMap* scene = nullptr,
                  VsdVariant variant = VsdVariant::mean_absolute,
                  double step_tolerance = 0.02) {
  if (!(delta > 0.0)) throw InvalidInputError("vsd: delta must be positive");
  if (variant == VsdVariant::step_cost && !(step_tolerance > 0.0))
    throw InvalidInputError("vsd: step tolerance must be positive");

  const DepthMap d_hat = rasterizer::render_depth(mesh, pose_hat, k);
  const DepthMap d_bar = rasterizer::render_depth(mesh, pose_bar, k);
  if (scene != nullptr) require_same_size(scene->grid(), d_hat.grid(), "vsd");

  const auto visible = [&](const DepthMap& d, int u, int v) {
    if (!d.valid(u, v)) return false;
    if (scene == nullptr) return true;
    return scene->valid(u, v) && std::abs(d.at(u, v) - scene->at(u, v)) < delta;
  };

  double sum = 0.0;
  long long n_union = 0;
  for (int v = 0; v < d_hat.height(); ++v) {
    for (int u = 0; u < d_hat.width(); ++u) {
      const bool in_hat = visible(d_hat, u, v);
      const bool in_bar = visible(d_bar, u, v);
      if (!in_hat && !in_bar) continue;
      ++n_union;
      if (variant == VsdVariant::mean_absolute) {
        sum += (in_hat && in_bar) ? std::abs(d_hat.at(u, v) - d_bar.at(u, v)) : delta;
      } else {
        const bool ok = in_hat && in_bar &&
                        std::abs(d_hat.at(u, v) - d_bar.at(u, v)) < step_tolerance;
        sum += ok ? 0.0 : 1.0;
      }
    }
  }
  return n_union == 0 ? 0.0 : sum / static_cast<double>(n_union);
}

/// \brief Maximum symmetry-aware surface distance:
///        min over symmetries S of max over vertices x of |P̂x - P̄Sx|.
inline double mssd(const RigidTransform& pose_hat, const RigidTransform& pose_bar,
                   const mesh::MeshModel& mesh) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : mesh.symmetries) {
    double worst = 0.0;
    for (const auto& x : mesh.vertices) {
      const double d = (pose_hat.apply(x) - pose_bar.apply(s.apply(x))).norm();
      worst = std::max(worst, d);
    }
    best = std::min(best, worst);
  }
  return best;
}

/// \brief Maximum symmetry-aware projection distance in pixels. Vertices at
///        or behind the camera under either pose raise InvalidInputError.
inline double mspd(const RigidTransform& pose_hat, const RigidTransform& pose_bar,
                   const mesh::MeshModel& mesh, const CameraIntrinsics& k) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& s : mesh.symmetries) {
    double worst = 0.0;
    for (const auto& x : mesh.vertices) {
      const Eigen::Vector2d a = k.project(pose_hat.apply(x));
      const Eigen::Vector2d b = k.project(pose_bar.apply(s.apply(x)));
      worst = std::max(worst, (a - b).norm());
    }
    best = std::min(best, worst);
  }
  return best;
}

/**
 * \brief Average vertex distance between the two posed models.
 *
 * Plain ADD is the mean of |P̂x - P̄x| over vertices. With \p symmetric set
 * (ADD-S) each estimated vertex is matched to its nearest neighbor in the
 * ground-truth posed vertex set.
 */
inline double add_error(const RigidTransform& pose_hat, const RigidTransform& pose_bar,
                        const mesh::MeshModel& mesh, bool symmetric) {
  const std::size_t n = mesh.vertices.size();
  if (!symmetric) {
    double sum = 0.0;
    for (const auto& x : mesh.vertices)
      sum += (pose_hat.apply(x) - pose_bar.apply(x)).norm();
    return sum / static_cast<double>(n);
  }
  std::vector<Eigen::Vector3d> gt(n);
  for (std::size_t i = 0; i < n; ++i) gt[i] = pose_bar.apply(mesh.vertices[i]);
  double sum = 0.0;
  for (const auto& x : mesh.vertices) {
    const Eigen::Vector3d p = pose_hat.apply(x);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& y : gt) best = std::min(best, (p - y).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(n);
}

/**
 * \brief Threshold grids for recall aggregation. MSSD and ADD thresholds are
 *        fractions of the object diameter, MSPD thresholds are in scaled
 *        pixels, VSD thresholds are in the VSD value's own units.
 */
struct RecallConfig {
  std::vector<double> mssd_fractions;
  std::vector<double> mspd_thresholds;
  std::vector<double> vsd_thresholds;
  double add_fraction = 0.1;
  double vsd_delta = 0.015;

  void validate() const {
    const auto check = [](const std::vector<double>& v, const char* who) {
      if (v.empty())
        throw InvalidInputError(std::string("RecallConfig: empty ") + who + " grid");
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (!(v[i] > 0.0) || !std::isfinite(v[i]))
          throw InvalidInputError(std::string("RecallConfig: nonpositive ") + who +
                                  " threshold");
        if (i > 0 && !(v[i] > v[i - 1]))
          throw InvalidInputError(std::string("RecallConfig: ") + who +
                                  " grid not strictly increasing");
      }
    };
    check(mssd_fractions, "MSSD");
    check(mspd_thresholds, "MSPD");
    check(vsd_thresholds, "VSD");
    if (!(add_fraction > 0.0))
      throw InvalidInputError("RecallConfig: nonpositive ADD fraction");
    if (!(vsd_delta > 0.0))
      throw InvalidInputError("RecallConfig: nonpositive VSD tolerance");
  }
};

/**
 * \brief Customary grids: MSSD/ADD fractions 0.05..0.50 of the diameter,
 *        MSPD 5r..50r pixels with r = image_width / 640, VSD thresholds
 *        0.05..0.5 of a 0.3 m normalizer with tolerance 0.015 m.
 */
inline RecallConfig bop_default_recalls(int image_width) {
  if (image_width <= 0)
    throw InvalidInputError("bop_default_recalls: image width must be positive");
  RecallConfig cfg;
  const double r = static_cast<double>(image_width) / 640.0;
  for (int i = 1; i <= 10; ++i) {
    cfg.mssd_fractions.push_back(0.05 * i);
    cfg.mspd_thresholds.push_back(5.0 * i * r);
    cfg.vsd_thresholds.push_back(0.05 * i * 0.3);
  }
  cfg.add_fraction = 0.1;
  cfg.vsd_delta = 0.015;
  return cfg;
}

/// \brief Recalls in percent. \c ar averages the VSD, MSSD and MSPD recalls;
///        \c add is the single-threshold ADD(S) recall at add_fraction * d.
struct RecallTable {
  double vsd = 0.0;
  double mssd = 0.0;
  double mspd = 0.0;
  double add = 0.0;
  double ar = 0.0;
  int count = 0;
};

/**
 * \brief Aggregates per-instance error reports into recall percentages.
 *
 * A report passes a threshold when the metric was computed and its value is
 * at most the threshold; reports lacking a metric count as misses for it.
 * Each metric's recall is the pass fraction averaged over its grid.
 */
inline RecallTable pose_recalls(const std::vector<PoseErrorReport>& reports,
                                const mesh::MeshModel& mesh, const RecallConfig& cfg) {
  if (reports.empty()) throw InvalidInputError("pose_recalls: no reports");
  cfg.validate();

  const double n = static_cast<double>(reports.size());
  const auto grid_recall = [&](const std::vector<double>& thresholds, auto value) {
    double acc = 0.0;
    for (const double th : thresholds) {
      int pass = 0;
      for (const auto& r : reports) {
        const auto [has, val] = value(r);
        if (has && val <= th) ++pass;
      }
      acc += static_cast<double>(pass) / n;
    }
    return 100.0 * acc / static_cast<double>(thresholds.size());
  };

  std::vector<double> mssd_thresholds, add_threshold;
  for (const double f : cfg.mssd_fractions) mssd_thresholds.push_back(f * mesh.diameter);
  add_threshold.push_back(cfg.add_fraction * mesh.diameter);

  RecallTable out;
  out.count = static_cast<int>(reports.size());
  out.vsd = grid_recall(cfg.vsd_thresholds,
                        [](const PoseErrorReport& r) { return std::pair(r.has_vsd, r.vsd); });
  out.mssd = grid_recall(mssd_thresholds,
                         [](const PoseErrorReport& r) { return std::pair(r.has_mssd, r.mssd); });
  out.mspd = grid_recall(cfg.mspd_thresholds,
                         [](const PoseErrorReport& r) { return std::pair(r.has_mspd, r.mspd); });
  out.add = grid_recall(add_threshold,
                        [](const PoseErrorReport& r) { return std::pair(r.has_add, r.add); });
  out.ar = (out.vsd + out.mssd + out.mspd) / 3.0;
  return out;
}

/// \brief Dense depth-quality metrics. delta_percents[i] is the percentage
///        of pixels with max(gt/pred, pred/gt) < delta_thresholds[i].
struct DepthMetricReport {
  double abs_rel = 0.0;
  double sq_rel = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  double log10 = 0.0;
  std::vector<double> delta_thresholds;
  std::vector<double> delta_percents;
  int pixel_count = 0;
  int ratio_excluded = 0;
};

/**
 * \brief Evaluates predicted depth against ground truth over the masked
 *        valid-ground-truth pixels.
 *
 * A pixel enters the aggregation when the mask allows it, the ground truth
 * is valid and the prediction is finite. Absolute and relative errors use
 * every such pixel (epsilon 1e-8 guards the relative denominators); pixels
 * where either value is nonpositive are excluded from the log10 and ratio
 * metrics and tallied in ratio_excluded.
 */
inline DepthMetricReport depth_metrics(const DepthMap& pred, const DepthMap& gt,
                                       const Mask* mask = nullptr,
                                       std::vector<double> deltas = {1.05, 1.10, 1.25}) {
  require_same_size(pred.grid(), gt.grid(), "depth_metrics");
  if (mask != nullptr) require_same_size(*mask, gt.grid(), "depth_metrics");
  if (deltas.empty()) throw InvalidInputError("depth_metrics: empty delta list");
  constexpr double kEps = 1e-8;

  DepthMetricReport out;
  out.delta_thresholds = deltas;
  out.delta_percents.assign(deltas.size(), 0.0);

  double abs_sum = 0.0, sq_sum = 0.0, sq_err_sum = 0.0, mae_sum = 0.0, log_sum = 0.0;
  std::vector<long long> delta_hits(deltas.size(), 0);
  long long n = 0, n_ratio = 0;

  for (int v = 0; v < gt.height(); ++v) {
    for (int u = 0; u < gt.width(); ++u) {
      if (!mask_allows(mask, u, v) || !gt.valid(u, v)) continue;
      const double p = pred.at(u, v);
      if (!std::isfinite(p)) continue;
      const double g = gt.at(u, v);
      const double e = p - g;
      ++n;
      abs_sum += std::abs(e) / (g + kEps);
      sq_sum += e * e / (g + kEps);
      sq_err_sum += e * e;
      mae_sum += std::abs(e);
      if (p > 0.0 && g > 0.0) {
        ++n_ratio;
        log_sum += std::abs(std::log10(p) - std::log10(g));
        const double ratio = std::max(p / g, g / p);
        for (std::size_t i = 0; i < deltas.size(); ++i)
          if (ratio < deltas[i]) ++delta_hits[i];
      } else {
        ++out.ratio_excluded;
      }
    }
  }
  if (n == 0) throw InvalidInputError("depth_metrics: no valid overlapping pixels");

  const double dn = static_cast<double>(n);
  out.pixel_count = static_cast<int>(n);
  out.abs_rel = abs_sum / dn;
  out.sq_rel = sq_sum / dn;
  out.rmse = std::sqrt(sq_err_sum / dn);
  out.mae = mae_sum / dn;
  out.log10 = n_ratio > 0 ? log_sum / static_cast<double>(n_ratio) : 0.0;
  for (std::size_t i = 0; i < deltas.size(); ++i)
    out.delta_percents[i] =
        n_ratio > 0 ? 100.0 * static_cast<double>(delta_hits[i]) / static_cast<double>(n_ratio)
                    : 0.0;
  return out;
}

}  // namespace refpose::metrics
