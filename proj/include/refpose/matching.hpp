/**
 * \file matching.hpp
 * \brief Depth-aware coarse-to-fine feature matching: feature fusion,
 *        temperature similarity, dual-softmax probabilities, mutual
 *        nearest-neighbor filtering and expectation-based subpixel
 *        refinement, plus a deterministic built-in feature provider.
 */
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include "refpose/types.hpp"

namespace refpose::matching {

/// Source pixels covered by one coarse grid cell.
inline constexpr int kCoarseScale = 8;
/// Source pixels covered by one fine grid cell.
inline constexpr int kFineScale = 2;

/**
 * \brief Dense grid of per-cell descriptor vectors.
 *
 * Cells are laid out row-major; the C channels of cell (x, y) are contiguous.
 * scale gives the number of source-image pixels per cell side (8 for coarse
 * maps, 2 for fine maps). All descriptor entries must be finite.
 */
struct FeatureMap {
  int width = 0;
  int height = 0;
  int channels = 0;
  int scale = kCoarseScale;
  std::vector<double> data;

  FeatureMap() = default;

  FeatureMap(int w, int h, int c, int s)
      : width(w), height(h), channels(c), scale(s),
        data(static_cast<std::size_t>(w) * h * c, 0.0) {
    if (w <= 0 || h <= 0 || c <= 0 || s <= 0)
      throw InvalidInputError("FeatureMap: dimensions must be positive");
  }

  int cells() const { return width * height; }

  double* desc(int x, int y) {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const double* desc(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }

  Eigen::Map<const Eigen::VectorXd> vec(int x, int y) const {
    return {desc(x, y), channels};
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  bool same_shape(const FeatureMap& o) const {
    return width == o.width && height == o.height && channels == o.channels &&
           scale == o.scale;
  }
};

/// \brief Coarse (1/8 resolution) and fine (1/2 resolution) maps of one image.
struct FeaturePyramid {
  FeatureMap coarse;
  FeatureMap fine;
};

/// \brief Matching hyperparameters.
struct MatchConfig {
  double tau = 0.1;      ///< coarse softmax temperature
  double theta_c = 0.2;  ///< coarse confidence threshold
  int window = 5;        ///< odd fine-window side length in fine cells
  /// Fine-window softmax temperature. Much sharper than the coarse
  /// temperature: unit-norm descriptors separate by small cosine gaps, and
  /// the heatmap expectation must concentrate on the best cell for the
  /// refinement to stay subpixel.
  double tau_fine = 0.0125;

  void validate() const {
    if (!(tau > 0.0) || !std::isfinite(tau))
      throw InvalidInputError("MatchConfig: tau must be positive");
    if (!(tau_fine > 0.0) || !std::isfinite(tau_fine))
      throw InvalidInputError("MatchConfig: tau_fine must be positive");
    if (!(theta_c > 0.0 && theta_c < 1.0))
      throw InvalidInputError("MatchConfig: theta_c must lie in (0,1)");
    if (window < 3 || window % 2 == 0)
      throw InvalidInputError("MatchConfig: window must be odd and >= 3");
  }
};

/**
 * \brief One correspondence between a query cell and a reference cell.
 *
 * qx/qy and rx/ry are source-image pixel coordinates (an integer coordinate
 * addresses that pixel's sample point). For coarse matches both sides carry
 * the anchored cell position; fine refinement replaces rx/ry with the
 * subpixel expectation.
 */
struct Match {
  int qi = 0;              ///< linear query cell index
  int ri = 0;              ///< linear reference cell index
  double confidence = 0.0; ///< dual-softmax probability of the coarse pair
  double qx = 0.0, qy = 0.0;
  double rx = 0.0, ry = 0.0;
};

/// \brief Match list plus bookkeeping counters for the run report.
struct MatchSet {
  std::vector<Match> matches;
  int tie_breaks = 0;            ///< argmax ties resolved by lowest index
  int dropped_out_of_bounds = 0; ///< fine windows that left the grid
};

/// \brief Optional hook standing in for a learned feature decoder.
using DecoderHook = std::function<FeatureMap(const FeatureMap&)>;

namespace detail {

inline constexpr double kTinyStd = 1e-12;

/// Mean and population standard deviation of one channel across all cells.
inline std::pair<double, double> channel_moments(const FeatureMap& fm, int c) {
  const int n = fm.cells();
  double mean = 0.0;
  for (int i = 0; i < n; ++i) mean += fm.data[static_cast<std::size_t>(i) * fm.channels + c];
  mean /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double d = fm.data[static_cast<std::size_t>(i) * fm.channels + c] - mean;
    var += d * d;
  }
  return {mean, std::sqrt(var / n)};
}

/// Standardizes each channel across cells, decorrelates the channels with a
/// ridge-regularized symmetric whitening, then rescales every descriptor to
/// unit length; degenerate channels and zero descriptors become zero.
/// Without the whitening step, correlated channels concentrate the cell
/// descriptors in a few directions and the similarity softmax over all cells
/// flattens; the symmetric (ZCA) form is used because it has no eigenvector
/// sign ambiguity, so near-identical images whiten near-identically.
inline void finish_map(FeatureMap& fm) {
  for (int c = 0; c < fm.channels; ++c) {
    const auto [mean, sd] = channel_moments(fm, c);
    for (int i = 0; i < fm.cells(); ++i) {
      double& v = fm.data[static_cast<std::size_t>(i) * fm.channels + c];
      v = sd < kTinyStd ? 0.0 : (v - mean) / sd;
    }
  }
  const int n = fm.cells();
  Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> X(
      fm.data.data(), n, fm.channels);
  const Eigen::MatrixXd cov = X.transpose() * X / static_cast<double>(n);
  if (cov.trace() > kTinyStd) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    const double ridge = 1e-3 * cov.trace() / fm.channels;
    const Eigen::VectorXd scale =
        (es.eigenvalues().array() + ridge).cwiseMax(ridge).rsqrt();
    const Eigen::MatrixXd zca = es.eigenvectors() * scale.asDiagonal() *
                                es.eigenvectors().transpose();
    X *= zca;  // zca is symmetric, so rows transform as descriptors
  }
  for (int i = 0; i < fm.cells(); ++i) {
    double* d = fm.data.data() + static_cast<std::size_t>(i) * fm.channels;
    double norm = 0.0;
    for (int c = 0; c < fm.channels; ++c) norm += d[c] * d[c];
    norm = std::sqrt(norm);
    if (norm < kTinyStd) {
      std::fill(d, d + fm.channels, 0.0);
    } else {
      for (int c = 0; c < fm.channels; ++c) d[c] /= norm;
    }
  }
}

/// True when any descriptor entry is nonzero.
inline bool has_signal(const FeatureMap& fm) {
  for (const double v : fm.data)
    if (v != 0.0) return true;
  return false;
}

/// Source-pixel coordinate anchoring coarse cell index c for refinement.
inline double anchor_px(int c) {
  return kCoarseScale * c + (kCoarseScale / kFineScale / 2) * kFineScale + 0.5;
}

/// Fine-grid cell anchoring coarse cell index c (nearest to the cell center).
inline int anchor_cell(int c) {
  return (kCoarseScale / kFineScale) * c + kCoarseScale / kFineScale / 2;
}

}  // namespace detail

/**
 * \brief Adds a normalized depth feature map onto an rgb feature map.
 *
 * Each depth channel is standardized to zero mean and unit standard deviation
 * across cells, then scaled by a gain g = min(1, std_rgb) so the depth
 * contribution never exceeds the spread of the rgb channel it joins. A flat
 * depth channel contributes nothing (the rgb values pass through untouched);
 * a flat rgb channel waives the cap so a pure depth signal survives.
 */
inline FeatureMap fuse_features(const FeatureMap& rgb, const FeatureMap& depth) {
  if (!rgb.same_shape(depth))
    throw InvalidInputError("fuse_features: feature map shapes differ");
  if (!rgb.all_finite() || !depth.all_finite())
    throw InvalidInputError("fuse_features: non-finite descriptor entries");

  FeatureMap out = rgb;
  const int n = rgb.cells();
  for (int c = 0; c < rgb.channels; ++c) {
    const auto [mean_d, sd_d] = detail::channel_moments(depth, c);
    if (sd_d < detail::kTinyStd) continue;
    const auto [mean_rgb, sd_rgb] = detail::channel_moments(rgb, c);
    (void)mean_rgb;
    const double gain =
        sd_rgb < detail::kTinyStd ? 1.0 : std::min(1.0, sd_rgb);
    for (int i = 0; i < n; ++i) {
      const std::size_t k = static_cast<std::size_t>(i) * rgb.channels + c;
      out.data[k] += gain * (depth.data[k] - mean_d) / sd_d;
    }
  }
  return out;
}

/**
 * \brief Pairwise descriptor similarity S(i, j) = <q_i, r_j> / tau.
 *
 * Rows index query cells, columns reference cells, both in row-major cell
 * order. The optional decoder hook transforms both maps before the inner
 * products; the default is the identity.
 */
inline Eigen::MatrixXd similarity_matrix(const FeatureMap& fq,
                                         const FeatureMap& fr, double tau,
                                         const DecoderHook& decoder = {}) {
  if (!(tau > 0.0) || !std::isfinite(tau))
    throw InvalidInputError("similarity_matrix: tau must be positive");
  FeatureMap qd, rd;
  const FeatureMap* qp = &fq;
  const FeatureMap* rp = &fr;
  if (decoder) {
    qd = decoder(fq);
    rd = decoder(fr);
    qp = &qd;
    rp = &rd;
  }
  if (qp->channels != rp->channels)
    throw InvalidInputError("similarity_matrix: channel counts differ");
  if (!qp->all_finite() || !rp->all_finite())
    throw InvalidInputError("similarity_matrix: non-finite descriptor entries");

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> Q(qp->data.data(), qp->cells(), qp->channels);
  Eigen::Map<const RowMat> R(rp->data.data(), rp->cells(), rp->channels);
  return (Q * R.transpose()) / tau;
}

/**
 * \brief Dual-softmax matching probabilities.
 *
 * P(i, j) is the product of the softmax over row i evaluated at j and the
 * softmax over column j evaluated at i. Rows and columns are normalized with
 * the usual max-subtraction, so arbitrarily large similarities are safe.
 */
inline Eigen::MatrixXd dual_softmax(const Eigen::MatrixXd& S) {
  if (!S.allFinite())
    throw InvalidInputError("dual_softmax: similarity matrix has non-finite entries");
  const Eigen::ArrayXXd A = S.array();
  const Eigen::ArrayXd rmax = A.rowwise().maxCoeff();
  Eigen::ArrayXXd rowe = (A.colwise() - rmax).exp();
  const Eigen::ArrayXd rsum = rowe.rowwise().sum();
  const Eigen::ArrayXXd rowp = rowe.colwise() / rsum;

  const Eigen::Array<double, 1, Eigen::Dynamic> cmax = A.colwise().maxCoeff();
  Eigen::ArrayXXd cole = (A.rowwise() - cmax).exp();
  const Eigen::Array<double, 1, Eigen::Dynamic> csum = cole.colwise().sum();
  const Eigen::ArrayXXd colp = cole.rowwise() / csum;

  return (rowp * colp).matrix();
}

/**
 * \brief Mutual-nearest-neighbor filter over a probability matrix.
 *
 * Keeps (i, j) when j is the argmax of row i, i is the argmax of column j,
 * and P(i, j) >= theta_c. Argmax ties go to the lowest index and are counted
 * in the returned tie_breaks. Matches come out sorted by query index.
 */
inline MatchSet mutual_nn_filter(const Eigen::MatrixXd& P, double theta_c) {
  if (!P.allFinite())
    throw InvalidInputError("mutual_nn_filter: probability matrix has non-finite entries");
  const Eigen::Index nq = P.rows(), nr = P.cols();
  MatchSet out;
  if (nq == 0 || nr == 0) return out;

  std::vector<Eigen::Index> row_arg(nq), col_arg(nr);
  for (Eigen::Index i = 0; i < nq; ++i) {
    Eigen::Index best = 0;
    bool tied = false;
    for (Eigen::Index j = 1; j < nr; ++j) {
      if (P(i, j) > P(i, best)) {
        best = j;
        tied = false;
      } else if (P(i, j) == P(i, best)) {
        tied = true;
      }
    }
    row_arg[i] = best;
    if (tied) ++out.tie_breaks;
  }
  for (Eigen::Index j = 0; j < nr; ++j) {
    Eigen::Index best = 0;
    bool tied = false;
    for (Eigen::Index i = 1; i < nq; ++i) {
      if (P(i, j) > P(best, j)) {
        best = i;
        tied = false;
      } else if (P(i, j) == P(best, j)) {
        tied = true;
      }
    }
    col_arg[j] = best;
    if (tied) ++out.tie_breaks;
  }

  for (Eigen::Index i = 0; i < nq; ++i) {
    const Eigen::Index j = row_arg[i];
    if (col_arg[j] != i) continue;
    if (!(P(i, j) >= theta_c)) continue;
    Match m;
    m.qi = static_cast<int>(i);
    m.ri = static_cast<int>(j);
    m.confidence = P(i, j);
    out.matches.push_back(m);
  }
  return out;
}

/**
 * \brief Expectation-based subpixel refinement of coarse matches.
 *
 * Each coarse cell anchors at the fine cell nearest its center. The anchored
 * query descriptor is correlated against a window x window patch of reference
 * descriptors around the anchored reference cell; the softmax of those
 * correlations (at temperature tau_fine) forms a heatmap whose expectation,
 * mapped back to source pixels, becomes the refined reference position.
 * Matches whose window leaves the fine grid are dropped and tallied.
 */
inline MatchSet fine_refine(const MatchSet& coarse, const FeatureMap& fine_q,
                            const FeatureMap& fine_r, const MatchConfig& cfg) {
  cfg.validate();
  if (fine_q.scale != kFineScale || fine_r.scale != kFineScale)
    throw InvalidInputError("fine_refine: expected fine-resolution feature maps");
  if (fine_q.channels != fine_r.channels)
    throw InvalidInputError("fine_refine: channel counts differ");
  const int ratio = kCoarseScale / kFineScale;
  if (fine_q.width % ratio != 0 || fine_r.width % ratio != 0)
    throw InvalidInputError("fine_refine: fine grid width is not a multiple of the coarse/fine ratio");

  const int wq = fine_q.width / ratio;
  const int wr = fine_r.width / ratio;
  const int half = (cfg.window - 1) / 2;

  MatchSet out;
  out.tie_breaks = coarse.tie_breaks;
  std::vector<double> w(static_cast<std::size_t>(cfg.window) * cfg.window);

  for (const Match& cm : coarse.matches) {
    const int qcx = cm.qi % wq, qcy = cm.qi / wq;
    const int rcx = cm.ri % wr, rcy = cm.ri / wr;
    const int qfx = detail::anchor_cell(qcx), qfy = detail::anchor_cell(qcy);
    const int rfx = detail::anchor_cell(rcx), rfy = detail::anchor_cell(rcy);

    const bool q_ok = qfx >= 0 && qfx < fine_q.width && qfy >= 0 && qfy < fine_q.height;
    const bool r_ok = rfx - half >= 0 && rfx + half < fine_r.width &&
                      rfy - half >= 0 && rfy + half < fine_r.height;
    if (!q_ok || !r_ok) {
      ++out.dropped_out_of_bounds;
      continue;
    }

    const auto qd = fine_q.vec(qfx, qfy);
    double cmax = -std::numeric_limits<double>::infinity();
    int k = 0;
    for (int dy = -half; dy <= half; ++dy)
      for (int dx = -half; dx <= half; ++dx, ++k) {
        w[k] = qd.dot(fine_r.vec(rfx + dx, rfy + dy)) / cfg.tau_fine;
        cmax = std::max(cmax, w[k]);
      }
    double sum = 0.0;
    for (double& v : w) {
      v = std::exp(v - cmax);
      sum += v;
    }
    double ex = 0.0, ey = 0.0;
    k = 0;
    for (int dy = -half; dy <= half; ++dy)
      for (int dx = -half; dx <= half; ++dx, ++k) {
        ex += w[k] * (rfx + dx);
        ey += w[k] * (rfy + dy);
      }
    ex /= sum;
    ey /= sum;

    Match m = cm;
    m.qx = detail::anchor_px(qcx);
    m.qy = detail::anchor_px(qcy);
    m.rx = kFineScale * ex + 0.5;
    m.ry = kFineScale * ey + 0.5;
    out.matches.push_back(m);
  }
  return out;
}

/**
 * \brief Deterministic classical descriptors for one scalar field.
 *
 * Per cell, over a window twice the grid stride centered on the cell:
 * intensity standard deviation, mean gradient magnitude, an 8-bin
 * magnitude-weighted gradient orientation histogram per window quadrant,
 * and the quadrant means (centered on the window mean) and standard
 * deviations. Every channel ignores a constant offset of the field, so level
 * differences between scene regions cannot leak a shared component into
 * all descriptors of one region. Channels are then standardized across
 * cells and each descriptor is L2-normalized; featureless cells become
 * zero vectors.
 */
namespace detail {

inline FeatureMap stats_level(const Image<double>& img, int cell) {
  // layout: [0] sd, [1] energy, [2+8q+b] quadrant orientation histograms,
  // [34+q] quadrant mean diffs, [38+q] quadrant sds
  constexpr int kChannels = 42;
  const int cw = img.width() / cell, ch = img.height() / cell;
  FeatureMap fm(cw, ch, kChannels, cell);

  // Central-difference gradients with clamped borders.
  Image<double> gx(img.width(), img.height()), gy(img.width(), img.height());
  for (int v = 0; v < img.height(); ++v)
    for (int u = 0; u < img.width(); ++u) {
      const int u0 = std::max(u - 1, 0), u1 = std::min(u + 1, img.width() - 1);
      const int v0 = std::max(v - 1, 0), v1 = std::min(v + 1, img.height() - 1);
      gx.at(u, v) = 0.5 * (img.at(u1, v) - img.at(u0, v));
      gy.at(u, v) = 0.5 * (img.at(u, v1) - img.at(u, v0));
    }

  // Each descriptor pools a window twice the grid stride, centered on its
  // cell. Pixels are soft-assigned to the window quadrants with bilinear
  // tent weights and to orientation bins by linear interpolation, so no
  // statistic flips across a hard boundary when the matched content sits at
  // a sub-cell offset instead of on the grid. The tent weights taper to
  // zero at the window rim, which also acts as a soft window.
  for (int cy = 0; cy < ch; ++cy)
    for (int cx = 0; cx < cw; ++cx) {
      double* d = fm.desc(cx, cy);
      const int bu = cx * cell - cell / 2, bv = cy * cell - cell / 2;
      const int wu0 = std::max(bu, 0), wu1 = std::min(bu + 2 * cell, img.width());
      const int wv0 = std::max(bv, 0), wv1 = std::min(bv + 2 * cell, img.height());

      double qw[4] = {}, qsum[4] = {}, qsq[4] = {};
      double tw = 0.0, tsum = 0.0, tsq = 0.0, energy = 0.0;
      for (int v = wv0; v < wv1; ++v)
        for (int u = wu0; u < wu1; ++u) {
          // position in sub-block units, sub-block centers at 0.5 and 1.5
          const double ax = (u - bu + 0.5) / cell, ay = (v - bv + 0.5) / cell;
          double wx[2], wy[2];
          for (int s = 0; s < 2; ++s) {
            wx[s] = std::max(0.0, 1.0 - std::abs(ax - (s + 0.5)));
            wy[s] = std::max(0.0, 1.0 - std::abs(ay - (s + 0.5)));
          }
          const double val = img.at(u, v);
          const double dx = gx.at(u, v), dy = gy.at(u, v);
          const double mag = std::hypot(dx, dy);
          double fb = 0.0;
          if (mag > 0.0)
            fb = (std::atan2(dy, dx) + std::numbers::pi) *
                     (8.0 / (2.0 * std::numbers::pi)) -
                 0.5;
          const int b0 = static_cast<int>(std::floor(fb));
          const double bt = fb - b0;
          for (int sy = 0; sy < 2; ++sy)
            for (int sx = 0; sx < 2; ++sx) {
              const double w = wx[sx] * wy[sy];
              if (w == 0.0) continue;
              const int q = sy * 2 + sx;
              qw[q] += w;
              qsum[q] += w * val;
              qsq[q] += w * val * val;
              tw += w;
              tsum += w * val;
              tsq += w * val * val;
              if (mag > 0.0) {
                energy += w * mag;
                d[2 + 8 * q + ((b0 % 8 + 8) % 8)] += w * mag * (1.0 - bt);
                d[2 + 8 * q + ((b0 + 1) % 8 + 8) % 8] += w * mag * bt;
              }
            }
        }

      const double mean = tsum / tw;
      d[0] = std::sqrt(std::max(0.0, tsq / tw - mean * mean));
      d[1] = energy / tw;
      for (int q = 0; q < 4; ++q) {
        if (qw[q] == 0.0) continue;
        const double qm = qsum[q] / qw[q];
        // Histograms are normalized to orientation distributions so that a
        // viewpoint-induced rescaling of the gradients cancels out.
        double qmag = 0.0;
        for (int b = 0; b < 8; ++b) qmag += d[2 + 8 * q + b];
        if (qmag > 0.0)
          for (int b = 0; b < 8; ++b) d[2 + 8 * q + b] /= qmag;
        d[34 + q] = qm - mean;
        d[38 + q] = std::sqrt(std::max(0.0, qsq[q] / qw[q] - qm * qm));
      }
    }

  finish_map(fm);
  return fm;
}

inline FeaturePyramid field_pyramid(const Image<double>& field) {
  return {stats_level(field, kCoarseScale), stats_level(field, kFineScale)};
}

}  // namespace detail

/**
 * \brief Built-in feature provider.
 *
 * Produces coarse (1/8) and fine (1/2) descriptor maps of local intensity
 * statistics and oriented gradient histograms. When a depth map is given, a
 * parallel pyramid is built from the depth values (invalid pixels read as 0)
 * and fused onto the intensity features channel by channel. Fusion pushes
 * descriptors off the unit sphere and leaves region-wide common components
 * in the depth channels, so a fused map is standardized and renormalized
 * again: the matcher's temperature expects cosine-scale similarities with
 * the shared component removed. A degenerate depth field (all invalid or
 * constant) contributes nothing and the intensity features pass through
 * bit for bit.
 */
inline FeaturePyramid builtin_features(const Image<double>& gray,
                                       const DepthMap* depth = nullptr) {
  if (gray.empty() || gray.width() % 8 != 0 || gray.height() % 8 != 0)
    throw InvalidInputError("builtin_features: image dimensions must be positive multiples of 8");
  FeaturePyramid pyr = detail::field_pyramid(gray);
  if (depth != nullptr) {
    require_same_size(gray, *depth, "builtin_features");
    Image<double> field(depth->width(), depth->height(), 0.0);
    for (int v = 0; v < depth->height(); ++v)
      for (int u = 0; u < depth->width(); ++u)
        if (depth->valid(u, v)) field.at(u, v) = depth->at(u, v);
    const FeaturePyramid dp = detail::field_pyramid(field);
    if (detail::has_signal(dp.coarse) || detail::has_signal(dp.fine)) {
      pyr.coarse = fuse_features(pyr.coarse, dp.coarse);
      pyr.fine = fuse_features(pyr.fine, dp.fine);
      detail::finish_map(pyr.coarse);
      detail::finish_map(pyr.fine);
    }
  }
  return pyr;
}

/// \brief Coarse and refined matches of one image pair.
struct MatchResult {
  MatchSet coarse;
  MatchSet fine;
};

/**
 * \brief Full matching chain: similarity, dual-softmax, MNN filter, fine
 *        refinement. Coarse matches carry anchored cell positions in source
 *        pixels; fine matches carry the subpixel reference expectation.
 */
inline MatchResult match_pyramids(const FeaturePyramid& query,
                                  const FeaturePyramid& reference,
                                  const MatchConfig& cfg = {},
                                  const DecoderHook& decoder = {}) {
  cfg.validate();
  const Eigen::MatrixXd S =
      similarity_matrix(query.coarse, reference.coarse, cfg.tau, decoder);
  const Eigen::MatrixXd P = dual_softmax(S);
  MatchSet coarse = mutual_nn_filter(P, cfg.theta_c);
  for (Match& m : coarse.matches) {
    m.qx = detail::anchor_px(m.qi % query.coarse.width);
    m.qy = detail::anchor_px(m.qi / query.coarse.width);
    m.rx = detail::anchor_px(m.ri % reference.coarse.width);
    m.ry = detail::anchor_px(m.ri / reference.coarse.width);
  }
  MatchSet fine = fine_refine(coarse, query.fine, reference.fine, cfg);
  return {std::move(coarse), std::move(fine)};
}

// ---------------------------------------------------------------------------
// Binary feature container and the feature-provider registry.
// ---------------------------------------------------------------------------

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {
      static_cast<unsigned char>(v & 0xff),
      static_cast<unsigned char>((v >> 8) & 0xff),
      static_cast<unsigned char>((v >> 16) & 0xff),
      static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

/**
 * \brief Writes a feature map to the binary container: width, height and
 *        channel count as little-endian 32-bit integers, then the row-major
 *        descriptors as little-endian 32-bit floats.
 */
inline void save_feature_map(const std::string& path, const FeatureMap& fm) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_feature_map: cannot open " + path);
  detail::put_u32(os, static_cast<std::uint32_t>(fm.width));
  detail::put_u32(os, static_cast<std::uint32_t>(fm.height));
  detail::put_u32(os, static_cast<std::uint32_t>(fm.channels));
  for (double v : fm.data)
    detail::put_u32(os, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!os) throw FormatError("save_feature_map: write failed for " + path);
}

/**
 * \brief Reads a feature map from the binary container. The resolution tag
 *        is supplied by the caller (the container stores grid dimensions
 *        only). Truncated files and non-finite entries are format errors.
 */
inline FeatureMap load_feature_map(const std::string& path, int scale) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_feature_map: cannot open " + path);
  const std::uint32_t w = detail::get_u32(is);
  const std::uint32_t h = detail::get_u32(is);
  const std::uint32_t c = detail::get_u32(is);
  if (!is) throw FormatError("load_feature_map: truncated header in " + path);
  if (w == 0 || h == 0 || c == 0 || w > 1u << 20 || h > 1u << 20 || c > 1u << 16)
    throw FormatError("load_feature_map: implausible dimensions in " + path);
  FeatureMap fm(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c), scale);
  for (double& v : fm.data) {
    const float f = std::bit_cast<float>(detail::get_u32(is));
    if (!is) throw FormatError("load_feature_map: truncated data in " + path);
    v = static_cast<double>(f);
  }
  if (!fm.all_finite())
    throw FormatError("load_feature_map: non-finite descriptor entries in " + path);
  return fm;
}

/**
 * \brief Input bundle handed to a feature provider. The builtin provider
 *        reads gray (and optionally depth); the import provider reads the
 *        container paths, fusing the optional depth feature pair when given.
 */
struct ProviderRequest {
  const Image<double>* gray = nullptr;
  const DepthMap* depth = nullptr;
  std::string coarse_path;
  std::string fine_path;
  std::string depth_coarse_path;
  std::string depth_fine_path;
};

using FeatureProvider = std::function<FeaturePyramid(const ProviderRequest&)>;

namespace detail {

inline FeaturePyramid builtin_provider(const ProviderRequest& req) {
  if (req.gray == nullptr)
    throw InvalidInputError("feature provider 'builtin' requires an image");
  return builtin_features(*req.gray, req.depth);
}

inline FeaturePyramid import_provider(const ProviderRequest& req) {
  if (req.coarse_path.empty() || req.fine_path.empty())
    throw InvalidInputError("feature provider 'import' requires coarse and fine container paths");
  FeaturePyramid pyr{load_feature_map(req.coarse_path, kCoarseScale),
                     load_feature_map(req.fine_path, kFineScale)};
  if (!req.depth_coarse_path.empty() || !req.depth_fine_path.empty()) {
    if (req.depth_coarse_path.empty() || req.depth_fine_path.empty())
      throw InvalidInputError("feature provider 'import' needs both depth container paths or neither");
    pyr.coarse = fuse_features(pyr.coarse, load_feature_map(req.depth_coarse_path, kCoarseScale));
    pyr.fine = fuse_features(pyr.fine, load_feature_map(req.depth_fine_path, kFineScale));
  }
  return pyr;
}

}  // namespace detail

/// \brief Name-to-provider registry; 'builtin' and 'import' are always present.
inline std::map<std::string, FeatureProvider>& provider_registry() {
  static std::map<std::string, FeatureProvider> reg = {
      {"builtin", detail::builtin_provider},
      {"import", detail::import_provider},
  };
  return reg;
}

/// \brief Looks up a feature provider; unknown names are input errors.
inline FeatureProvider find_provider(const std::string& name) {
  const auto& reg = provider_registry();
  const auto it = reg.find(name);
  if (it == reg.end())
    throw InvalidInputError("unknown feature provider: " + name);
  return it->second;
}

/// \brief Registers (or replaces) a named feature provider.
inline void register_provider(const std::string& name, FeatureProvider fn) {
  provider_registry()[name] = std::move(fn);
}

}  // namespace refpose::matching
