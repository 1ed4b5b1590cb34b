/**
 * \file losses.hpp
 * \brief Composite depth loss: scale/shift-invariant term, multi-scale
 *        gradient matching, reversed-Huber penalty, scale-alignment,
 *        edge-emphasized and normal-consistency terms, the depth-prior
 *        rescale, and analytic gradients for every term.
 *
 * Every term averages over the pixels that actually contribute to it: plain
 * per-pixel terms use the valid-overlap set; stencil-based terms (gradients,
 * normals) drop pixels whose stencil leaves the image or touches an invalid
 * pixel, from the sum and from its normalizer alike.
 */
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "refpose/geometry.hpp"
#include "refpose/types.hpp"

namespace refpose {
namespace losses {

/// \brief Weights and shape parameters of the composite loss.
struct LossWeights {
  double alpha = 0.9;    ///< reversed-Huber weight
  double eta = 0.2;      ///< scale-alignment robustness
  double sigma = 1.0;    ///< edge-weight decay on image gradients
  double lambda = 1.0;   ///< normal-weight decay on depth gradients
  double w_scale = 1.0;
  double w_edge = 0.7;
  double w_norm = 0.6;
  double w_reg = 0.5;
  int levels = 4;        ///< gradient-matching pyramid depth
};

/// \brief Affine map s * pred + t aligning a prediction to metric depth.
struct ScaleShift {
  double s = 1.0;
  double t = 0.0;
};

/// \brief Per-term loss values; total carries the weighted sum.
struct LossReport {
  double ssi = 0.0;
  double reg = 0.0;
  double berhu = 0.0;
  double scale = 0.0;
  double edge = 0.0;
  double norm = 0.0;
  double total = 0.0;
  int valid_count = 0;
};

/// \brief Terms addressable by the gradient evaluators.
enum class LossTerm { ssi, reg, berhu, scale, edge, norm, total };

namespace detail {

/// Validity of the overlap: both depths valid and the mask allows the pixel.
inline Mask overlap_validity(const DepthMap& pred, const DepthMap& gt, const Mask* mask) {
  require_same_size(pred, gt, "depth loss");
  if (mask) require_same_size(pred, *mask, "depth loss");
  Mask m(pred.width(), pred.height(), 0);
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      m.at(u, v) = (pred.valid(u, v) && gt.valid(u, v) && mask_allows(mask, u, v)) ? 1 : 0;
  return m;
}

inline int count_nonzero(const Mask& m) {
  int n = 0;
  for (auto b : m.data()) n += (b != 0);
  return n;
}

/// 2x2 area downsampling; an output pixel survives only when all four of its
/// children are valid.
inline void downsample2(const Image<double>& in, const Mask& valid,
                        Image<double>* out, Mask* out_valid) {
  const int w = in.width() / 2, h = in.height() / 2;
  *out = Image<double>(w, h, 0.0);
  *out_valid = Mask(w, h, 0);
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const int su = 2 * u, sv = 2 * v;
      if (valid.at(su, sv) && valid.at(su + 1, sv) &&
          valid.at(su, sv + 1) && valid.at(su + 1, sv + 1)) {
        out->at(u, v) = 0.25 * (in.at(su, sv) + in.at(su + 1, sv) +
                                in.at(su, sv + 1) + in.at(su + 1, sv + 1));
        out_valid->at(u, v) = 1;
      }
    }
  }
}

struct PyramidLevel {
  Image<double> e;
  Mask valid;
};

inline std::vector<PyramidLevel> error_pyramid(const DepthMap& pred, const DepthMap& gt,
                                               const Mask& overlap, int levels) {
  if (levels < 1) throw InvalidInputError("gradient_matching_loss: levels must be >= 1");
  const int w = pred.width(), h = pred.height();
  if ((w >> (levels - 1)) < 1 || (h >> (levels - 1)) < 1)
    throw InvalidInputError("gradient_matching_loss: image too small for pyramid depth " +
                            std::to_string(levels));
  std::vector<PyramidLevel> pyr(levels);
  pyr[0].e = Image<double>(w, h, 0.0);
  pyr[0].valid = overlap;
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      if (overlap.at(u, v)) pyr[0].e.at(u, v) = pred.at(u, v) - gt.at(u, v);
  for (int k = 1; k < levels; ++k)
    downsample2(pyr[k - 1].e, pyr[k - 1].valid, &pyr[k].e, &pyr[k].valid);
  return pyr;
}

}  // namespace detail

/**
 * \brief Least-squares scale and shift aligning pred to gt:
 *        argmin over (s, t) of the sum of (s * pred + t - gt)^2.
 *
 * Solved in centered form, which is the closed-form normal-equation solution
 * of the stacked system with rows [pred_i, 1].
 */
inline ScaleShift fit_scale_shift(const DepthMap& pred, const DepthMap& gt,
                                  const Mask* mask = nullptr) {
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  double sp = 0.0, sg = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) { sp += pred.at(u, v); sg += gt.at(u, v); ++n; }
  if (n < 2) throw DegenerateFitError("fit_scale_shift: fewer than 2 valid overlapping pixels");
  const double mp = sp / n, mg = sg / n;
  double var = 0.0, cov = 0.0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) {
        const double dp = pred.at(u, v) - mp;
        var += dp * dp;
        cov += dp * (gt.at(u, v) - mg);
      }
  if (var <= 1e-14 * n * std::max(1.0, mp * mp))
    throw DegenerateFitError("fit_scale_shift: constant prediction, 2x2 system is singular");
  ScaleShift out;
  out.s = cov / var;
  out.t = mg - out.s * mp;
  return out;
}

/// \brief Scale/shift-invariant loss: half the mean squared residual after
///        the closed-form alignment.
inline double ssi_loss(const DepthMap& pred, const DepthMap& gt, const Mask* mask = nullptr) {
  const ScaleShift f = fit_scale_shift(pred, gt, mask);
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  double acc = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) {
        const double r = f.s * pred.at(u, v) + f.t - gt.at(u, v);
        acc += r * r;
        ++n;
      }
  return 0.5 * acc / n;
}

/**
 * \brief Multi-scale gradient matching on the metric error field.
 *
 * Sums |forward-difference| components of pred - gt over a pyramid built by
 * 2x2 area downsampling and divides once by the full-resolution valid count.
 */
inline double gradient_matching_loss(const DepthMap& pred, const DepthMap& gt,
                                     const Mask* mask = nullptr, int levels = 4) {
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  const auto pyr = detail::error_pyramid(pred, gt, ov, levels);
  const int M = detail::count_nonzero(ov);
  if (M == 0) return 0.0;
  double acc = 0.0;
  for (const auto& level : pyr) {
    const auto g = geom::scalar_gradient(level.e, &level.valid);
    for (int v = 0; v < level.e.height(); ++v)
      for (int u = 0; u < level.e.width(); ++u) {
        if (g.valid_u.at(u, v)) acc += std::abs(g.du.at(u, v));
        if (g.valid_v.at(u, v)) acc += std::abs(g.dv.at(u, v));
      }
  }
  return acc / M;
}

/**
 * \brief Reversed Huber penalty with an adaptive threshold.
 *
 * c = 0.1 * max |pred - gt| over valid pixels; below c the penalty is |e|,
 * above it (e^2 + c^2) / (2c). Zero error everywhere (c = 0) gives 0.
 */
inline double berhu(const DepthMap& pred, const DepthMap& gt, const Mask* mask = nullptr) {
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  double max_abs = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) {
        max_abs = std::max(max_abs, std::abs(pred.at(u, v) - gt.at(u, v)));
        ++n;
      }
  if (n < 1) throw InvalidInputError("berhu: no valid overlapping pixels");
  const double c = 0.1 * max_abs;
  if (c == 0.0) return 0.0;
  double acc = 0.0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) {
        const double e = pred.at(u, v) - gt.at(u, v);
        const double a = std::abs(e);
        acc += (a <= c) ? a : (e * e + c * c) / (2.0 * c);
      }
  return acc / n;
}

/// \brief Robustified quadratic alignment term: mean of e^2 / (1 + eta |e|).
inline double scale_alignment_loss(const DepthMap& pred, const DepthMap& gt,
                                   const Mask* mask = nullptr, double eta = 0.2) {
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  double acc = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (ov.at(u, v)) {
        const double e = pred.at(u, v) - gt.at(u, v);
        acc += e * e / (1.0 + eta * std::abs(e));
        ++n;
      }
  if (n < 1) throw InvalidInputError("scale_alignment_loss: no valid overlapping pixels");
  return acc / n;
}

/**
 * \brief Edge-emphasized gradient difference.
 *
 * Mean over stencil-valid pixels of exp(-sigma * |grad I|) times the squared
 * Euclidean difference of the depth gradients. Image gradients are taken on
 * the full frame; depth gradients respect validity.
 */
inline double edge_emphasize_loss(const DepthMap& pred, const DepthMap& gt,
                                  const Image<double>& rgb_gray, const Mask* mask = nullptr,
                                  double sigma = 1.0) {
  require_same_size(pred, rgb_gray, "edge_emphasize_loss");
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  const auto gi = geom::scalar_gradient(rgb_gray);
  const auto gp = geom::scalar_gradient(pred.grid(), &ov);
  const auto gg = geom::scalar_gradient(gt.grid(), &ov);
  double acc = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u) {
      if (!gp.valid(u, v)) continue;
      const double w = std::exp(-sigma * gi.mag.at(u, v));
      const double du = gp.du.at(u, v) - gg.du.at(u, v);
      const double dv = gp.dv.at(u, v) - gg.dv.at(u, v);
      acc += w * (du * du + dv * dv);
      ++n;
    }
  return n == 0 ? 0.0 : acc / n;
}

/**
 * \brief Normal-consistency term: mean over pixels with valid normals in both
 *        maps of exp(-lambda * |grad d_gt|) * (1 - cos angle(n_pred, n_gt)).
 *        The down-weighting gradient is taken on the ground-truth depth.
 */
inline double normal_consistency_loss(const DepthMap& pred, const DepthMap& gt,
                                      const CameraIntrinsics& K, const Mask* mask = nullptr,
                                      double lambda = 1.0) {
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  const auto np = geom::normals_from_depth(pred, K, &ov);
  const auto ng = geom::normals_from_depth(gt, K, &ov);
  const auto gg = geom::scalar_gradient(gt.grid(), &ov);
  double acc = 0.0;
  int n = 0;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u) {
      if (!np.valid.at(u, v) || !ng.valid.at(u, v)) continue;
      const double w = std::exp(-lambda * gg.mag.at(u, v));
      const double cosang =
          std::clamp(np.normal(u, v).dot(ng.normal(u, v)), -1.0, 1.0);
      acc += w * (1.0 - cosang);
      ++n;
    }
  return n == 0 ? 0.0 : acc / n;
}

/// \brief All six terms plus their weighted sum.
inline LossReport total_depth_loss(const DepthMap& pred, const DepthMap& gt,
                                   const Image<double>& rgb_gray, const CameraIntrinsics& K,
                                   const Mask* mask = nullptr, const LossWeights& w = {}) {
  LossReport r;
  r.valid_count = detail::count_nonzero(detail::overlap_validity(pred, gt, mask));
  r.ssi = ssi_loss(pred, gt, mask);
  r.reg = gradient_matching_loss(pred, gt, mask, w.levels);
  r.berhu = berhu(pred, gt, mask);
  r.scale = scale_alignment_loss(pred, gt, mask, w.eta);
  r.edge = edge_emphasize_loss(pred, gt, rgb_gray, mask, w.sigma);
  r.norm = normal_consistency_loss(pred, gt, K, mask, w.lambda);
  r.total = r.ssi + w.w_reg * r.reg + w.alpha * r.berhu +
            w.w_scale * r.scale + w.w_edge * r.edge + w.w_norm * r.norm;
  return r;
}

/**
 * \brief Rescales a relative prediction into metric range using a sparse raw
 *        prior: blends the reciprocals of the prior extremes linearly in the
 *        min-max normalized prediction, then inverts and clamps.
 *
 * Normalized 0 maps to max(raw), normalized 1 to min(raw). A constant
 * prediction normalizes to 0 everywhere. Output validity follows pred.
 */
inline DepthMap rescale_with_prior(const DepthMap& pred, const DepthMap& raw,
                                   double d_min = kDepthMin, double d_max = kDepthMax) {
  require_same_size(pred, raw, "rescale_with_prior");
  double raw_min = std::numeric_limits<double>::infinity();
  double raw_max = -std::numeric_limits<double>::infinity();
  int n_raw = 0;
  for (int v = 0; v < raw.height(); ++v)
    for (int u = 0; u < raw.width(); ++u)
      if (raw.valid(u, v)) {
        raw_min = std::min(raw_min, raw.at(u, v));
        raw_max = std::max(raw_max, raw.at(u, v));
        ++n_raw;
      }
  if (n_raw < 2 || !(raw_min < raw_max))
    throw DegenerateFitError("rescale_with_prior: raw prior is constant or too sparse");

  double p_min = std::numeric_limits<double>::infinity();
  double p_max = -std::numeric_limits<double>::infinity();
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u)
      if (pred.valid(u, v)) {
        p_min = std::min(p_min, pred.at(u, v));
        p_max = std::max(p_max, pred.at(u, v));
      }
  const double span = p_max - p_min;

  DepthMap out(pred.width(), pred.height(), 0.0);
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u) {
      if (!pred.valid(u, v)) continue;
      const double nv = span > 0.0 ? (pred.at(u, v) - p_min) / span : 0.0;
      double ds;
      if (nv == 0.0) {
        ds = raw_max;  // endpoint algebra, kept exact
      } else if (nv == 1.0) {
        ds = raw_min;
      } else {
        ds = 1.0 / (nv * (1.0 / raw_min - 1.0 / raw_max) + 1.0 / raw_max);
      }
      out.at(u, v) = std::clamp(ds, d_min, d_max);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/**
 * \brief Central-difference gradient of an arbitrary scalar loss functional
 *        with respect to each valid pixel of pred.
 */
template <typename F>
inline Image<double> finite_difference_gradient(F&& loss, const DepthMap& pred, double step) {
  if (!(step > 0.0)) throw InvalidInputError("finite_difference_gradient: step must be > 0");
  Image<double> g(pred.width(), pred.height(), 0.0);
  DepthMap probe = pred;
  for (int v = 0; v < pred.height(); ++v)
    for (int u = 0; u < pred.width(); ++u) {
      if (!pred.valid(u, v)) continue;
      const double d0 = pred.at(u, v);
      probe.at(u, v) = d0 + step;
      const double hi = loss(static_cast<const DepthMap&>(probe));
      probe.at(u, v) = d0 - step;
      const double lo = loss(static_cast<const DepthMap&>(probe));
      probe.at(u, v) = d0;
      g.at(u, v) = (hi - lo) / (2.0 * step);
    }
  return g;
}

/**
 * \brief Analytic gradient of one loss term with respect to pred pixels.
 *
 * When \p kink_free is supplied it is filled with 1 at pixels whose gradient
 * is reliable and 0 near non-differentiable points (absolute-value kinks, the
 * adaptive reversed-Huber threshold and its argmax, degenerate normals),
 * judged with the relative margin \p kink_margin. Used by the verification
 * suite to compare against finite differences away from kinks.
 */
inline Image<double> analytic_gradient(LossTerm term, const DepthMap& pred, const DepthMap& gt,
                                       const Image<double>& rgb_gray, const CameraIntrinsics& K,
                                       const Mask* mask = nullptr, const LossWeights& w = {},
                                       Mask* kink_free = nullptr, double kink_margin = 1e-3) {
  const int W = pred.width(), H = pred.height();
  const Mask ov = detail::overlap_validity(pred, gt, mask);
  const int M = detail::count_nonzero(ov);
  Image<double> g(W, H, 0.0);
  Mask smooth(W, H, 1);
  if (M == 0) {
    if (kink_free) *kink_free = std::move(smooth);
    return g;
  }

  auto for_valid = [&](auto&& fn) {
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u)
        if (ov.at(u, v)) fn(u, v);
  };

  switch (term) {
    case LossTerm::ssi: {
      const ScaleShift f = fit_scale_shift(pred, gt, mask);
      for_valid([&](int u, int v) {
        g.at(u, v) = f.s * (f.s * pred.at(u, v) + f.t - gt.at(u, v)) / M;
      });
      break;
    }
    case LossTerm::scale: {
      for_valid([&](int u, int v) {
        const double e = pred.at(u, v) - gt.at(u, v);
        const double den = 1.0 + w.eta * std::abs(e);
        g.at(u, v) = (2.0 * e + w.eta * e * std::abs(e)) / (den * den * M);
      });
      break;
    }
    case LossTerm::berhu: {
      double max_abs = 0.0, second = 0.0;
      int mu = -1, mv = -1;
      for_valid([&](int u, int v) {
        const double a = std::abs(pred.at(u, v) - gt.at(u, v));
        if (a > max_abs) {
          second = max_abs;
          max_abs = a;
          mu = u; mv = v;
        } else if (a > second) {
          second = a;
        }
      });
      const double c = 0.1 * max_abs;
      if (c == 0.0) {
        // no slope information at all-zero error; everything is a kink
        for_valid([&](int u, int v) { smooth.at(u, v) = 0; });
        break;
      }
      double dldc = 0.0;  // sensitivity of the sum to the threshold
      for_valid([&](int u, int v) {
        const double e = pred.at(u, v) - gt.at(u, v);
        const double a = std::abs(e);
        if (a <= c) {
          g.at(u, v) = (e > 0.0 ? 1.0 : (e < 0.0 ? -1.0 : 0.0)) / M;
        } else {
          g.at(u, v) = e / (c * M);
          dldc += 0.5 * (1.0 - e * e / (c * c));
        }
        if (std::abs(a - c) <= kink_margin * std::max(c, 1e-12) || a <= kink_margin)
          smooth.at(u, v) = 0;
      });
      // the max pixel moves the threshold with it
      const double e_m = pred.at(mu, mv) - gt.at(mu, mv);
      g.at(mu, mv) += 0.1 * (e_m > 0.0 ? 1.0 : -1.0) * dldc / M;
      if (second >= max_abs * (1.0 - kink_margin)) {
        for_valid([&](int u, int v) {
          if (std::abs(pred.at(u, v) - gt.at(u, v)) >= max_abs * (1.0 - kink_margin))
            smooth.at(u, v) = 0;
        });
      }
      break;
    }
    case LossTerm::reg: {
      const auto pyr = detail::error_pyramid(pred, gt, ov, w.levels);
      if (M == 0) break;
      // accumulate per-level seeds from the deepest level down to full
      // resolution, splitting each parent gradient equally over its children
      Image<double> carry;
      Mask carry_kink;
      for (int k = static_cast<int>(pyr.size()) - 1; k >= 0; --k) {
        const auto& lv = pyr[k];
        const int lw = lv.e.width(), lh = lv.e.height();
        Image<double> gk(lw, lh, 0.0);
        Mask kk(lw, lh, 0);
        const auto ge = geom::scalar_gradient(lv.e, &lv.valid);
        for (int v = 0; v < lh; ++v)
          for (int u = 0; u < lw; ++u) {
            if (ge.valid_u.at(u, v)) {
              const double d = ge.du.at(u, v);
              const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
              gk.at(u + 1, v) += s;
              gk.at(u, v) -= s;
              if (std::abs(d) <= kink_margin * 1e-1) { kk.at(u, v) = 1; kk.at(u + 1, v) = 1; }
            }
            if (ge.valid_v.at(u, v)) {
              const double d = ge.dv.at(u, v);
              const double s = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
              gk.at(u, v + 1) += s;
              gk.at(u, v) -= s;
              if (std::abs(d) <= kink_margin * 1e-1) { kk.at(u, v) = 1; kk.at(u, v + 1) = 1; }
            }
          }
        if (!carry.empty()) {
          for (int v = 0; v < carry.height(); ++v)
            for (int u = 0; u < carry.width(); ++u) {
              if (pyr[k + 1].valid.at(u, v)) {
                const double q = 0.25 * carry.at(u, v);
                gk.at(2 * u, 2 * v) += q;
                gk.at(2 * u + 1, 2 * v) += q;
                gk.at(2 * u, 2 * v + 1) += q;
                gk.at(2 * u + 1, 2 * v + 1) += q;
              }
              if (carry_kink.at(u, v)) {
                kk.at(2 * u, 2 * v) = 1;
                kk.at(2 * u + 1, 2 * v) = 1;
                kk.at(2 * u, 2 * v + 1) = 1;
                kk.at(2 * u + 1, 2 * v + 1) = 1;
              }
            }
        }
        carry = std::move(gk);
        carry_kink = std::move(kk);
      }
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
          if (ov.at(u, v)) g.at(u, v) = carry.at(u, v) / M;
          if (carry_kink.at(u, v)) smooth.at(u, v) = 0;
        }
      break;
    }
    case LossTerm::edge: {
      require_same_size(pred, rgb_gray, "analytic_gradient");
      const auto gi = geom::scalar_gradient(rgb_gray);
      const auto gp = geom::scalar_gradient(pred.grid(), &ov);
      const auto gg = geom::scalar_gradient(gt.grid(), &ov);
      int n = 0;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u)
          if (gp.valid(u, v)) ++n;
      if (n == 0) break;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
          if (!gp.valid(u, v)) continue;
          const double wt = std::exp(-w.sigma * gi.mag.at(u, v)) * 2.0 / n;
          const double ddu = gp.du.at(u, v) - gg.du.at(u, v);
          const double ddv = gp.dv.at(u, v) - gg.dv.at(u, v);
          g.at(u + 1, v) += wt * ddu;
          g.at(u, v) -= wt * ddu;
          g.at(u, v + 1) += wt * ddv;
          g.at(u, v) -= wt * ddv;
        }
      break;
    }
    case LossTerm::norm: {
      const auto np = geom::normals_from_depth(pred, K, &ov);
      const auto ng = geom::normals_from_depth(gt, K, &ov);
      const auto ggrad = geom::scalar_gradient(gt.grid(), &ov);
      int n = 0;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u)
          if (np.valid.at(u, v) && ng.valid.at(u, v)) ++n;
      if (n == 0) break;
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u) {
          if (!np.valid.at(u, v) || !ng.valid.at(u, v)) continue;
          const double wt = std::exp(-w.lambda * ggrad.mag.at(u, v)) / n;
          const Eigen::Vector3d r0 = K.ray(u, v);
          const Eigen::Vector3d r1 = K.ray(u + 1, v);
          const Eigen::Vector3d r2 = K.ray(u, v + 1);
          const double d0 = pred.at(u, v), d1 = pred.at(u + 1, v), d2 = pred.at(u, v + 1);
          const Eigen::Vector3d a = d1 * r1 - d0 * r0;
          const Eigen::Vector3d b = d2 * r2 - d0 * r0;
          const Eigen::Vector3d cr = a.cross(b);
          const double N = cr.norm();
          const Eigen::Vector3d q = cr / N;
          const double flip = q.z() > 0.0 ? -1.0 : 1.0;
          const Eigen::Vector3d ngt = ng.normal(u, v);
          // d cos / d cross, with the camera-facing sign folded in
          const Eigen::Vector3d dcos = flip * (ngt - q.dot(ngt) * q) / N;
          g.at(u, v) -= wt * dcos.dot(r0.cross(a - b));
          g.at(u + 1, v) -= wt * dcos.dot(r1.cross(b));
          g.at(u, v + 1) -= wt * dcos.dot(a.cross(r2));
          if (N <= kink_margin * (a.norm() * b.norm() + 1e-300) ||
              std::abs(q.z()) <= kink_margin) {
            smooth.at(u, v) = 0;
            smooth.at(u + 1, v) = 0;
            smooth.at(u, v + 1) = 0;
          }
        }
      break;
    }
    case LossTerm::total: {
      const LossTerm parts[] = {LossTerm::ssi, LossTerm::reg, LossTerm::berhu,
                                LossTerm::scale, LossTerm::edge, LossTerm::norm};
      const double scale_of[] = {1.0, w.w_reg, w.alpha, w.w_scale, w.w_edge, w.w_norm};
      for (int i = 0; i < 6; ++i) {
        Mask part_smooth(W, H, 1);
        const auto gi = analytic_gradient(parts[i], pred, gt, rgb_gray, K, mask, w,
                                          &part_smooth, kink_margin);
        for (std::size_t j = 0; j < g.data().size(); ++j) {
          g.data()[j] += scale_of[i] * gi.data()[j];
          if (!part_smooth.data()[j]) smooth.data()[j] = 0;
        }
      }
      break;
    }
  }
  if (kink_free) *kink_free = std::move(smooth);
  return g;
}

/// \brief Finite-difference gradient of a named loss term, sharing the
///        argument set of analytic_gradient. Verification plumbing.
inline Image<double> finite_difference_gradient(LossTerm term, const DepthMap& pred,
                                                const DepthMap& gt, const Image<double>& rgb_gray,
                                                const CameraIntrinsics& K,
                                                const Mask* mask = nullptr,
                                                const LossWeights& w = {}, double step = 1e-6) {
  auto eval = [&](const DepthMap& p) -> double {
    switch (term) {
      case LossTerm::ssi: return ssi_loss(p, gt, mask);
      case LossTerm::reg: return gradient_matching_loss(p, gt, mask, w.levels);
      case LossTerm::berhu: return berhu(p, gt, mask);
      case LossTerm::scale: return scale_alignment_loss(p, gt, mask, w.eta);
      case LossTerm::edge: return edge_emphasize_loss(p, gt, rgb_gray, mask, w.sigma);
      case LossTerm::norm: return normal_consistency_loss(p, gt, K, mask, w.lambda);
      case LossTerm::total: return total_depth_loss(p, gt, rgb_gray, K, mask, w).total;
    }
    return 0.0;
  };
  return finite_difference_gradient(eval, pred, step);
}

}  // namespace losses
}  // namespace refpose
