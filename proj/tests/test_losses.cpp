#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "refpose/losses.hpp"
#include "test_support.hpp"

using namespace refpose;
using namespace refpose::losses;
using testsup::make_K;
using testsup::plane_depth;
using testsup::random_gray;
using testsup::smooth_depth;

namespace {

// ---------------------------------------------------------------------------
// Independent oracle: the six published formulas written as straight-line
// loops, sharing no code with the library implementation. The affine fit is
// solved by Cramer's rule on the raw normal equations instead of the centered
// form the library uses.
// ---------------------------------------------------------------------------
struct OracleTotals {
  double ssi, reg, berhu, scale, edge, norm;
};

OracleTotals oracle_total(const DepthMap& pred, const DepthMap& gt, const Image<double>& gray,
                          const CameraIntrinsics& K, const LossWeights& w) {
  const int W = pred.width(), H = pred.height();
  auto valid = [&](int u, int v) { return pred.at(u, v) > 0.0 && gt.at(u, v) > 0.0; };

  // affine fit via raw normal equations
  double a11 = 0, a12 = 0, b1 = 0, b2 = 0;
  int M = 0;
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u)
      if (valid(u, v)) {
        const double p = pred.at(u, v), g = gt.at(u, v);
        a11 += p * p; a12 += p; b1 += p * g; b2 += g; ++M;
      }
  const double det = a11 * M - a12 * a12;
  const double s = (b1 * M - a12 * b2) / det;
  const double t = (a11 * b2 - a12 * b1) / det;

  OracleTotals o{0, 0, 0, 0, 0, 0};

  // half mean squared aligned residual
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u)
      if (valid(u, v)) {
        const double r = s * pred.at(u, v) + t - gt.at(u, v);
        o.ssi += r * r;
      }
  o.ssi *= 0.5 / M;

  // multi-scale |forward diff| sums of the error field / full-res M
  {
    std::vector<std::vector<double>> e(H, std::vector<double>(W, 0.0));
    std::vector<std::vector<int>> ok(H, std::vector<int>(W, 0));
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u)
        if (valid(u, v)) { e[v][u] = pred.at(u, v) - gt.at(u, v); ok[v][u] = 1; }
    double sum = 0.0;
    int lw = W, lh = H;
    for (int k = 0; k < w.levels; ++k) {
      for (int v = 0; v < lh; ++v)
        for (int u = 0; u < lw; ++u) {
          if (!ok[v][u]) continue;
          if (u + 1 < lw && ok[v][u + 1]) sum += std::abs(e[v][u + 1] - e[v][u]);
          if (v + 1 < lh && ok[v + 1][u]) sum += std::abs(e[v + 1][u] - e[v][u]);
        }
      const int nw = lw / 2, nh = lh / 2;
      std::vector<std::vector<double>> ne(nh, std::vector<double>(nw, 0.0));
      std::vector<std::vector<int>> nok(nh, std::vector<int>(nw, 0));
      for (int v = 0; v < nh; ++v)
        for (int u = 0; u < nw; ++u)
          if (ok[2 * v][2 * u] && ok[2 * v][2 * u + 1] && ok[2 * v + 1][2 * u] &&
              ok[2 * v + 1][2 * u + 1]) {
            ne[v][u] = 0.25 * (e[2 * v][2 * u] + e[2 * v][2 * u + 1] +
                               e[2 * v + 1][2 * u] + e[2 * v + 1][2 * u + 1]);
            nok[v][u] = 1;
          }
      e = std::move(ne); ok = std::move(nok); lw = nw; lh = nh;
    }
    o.reg = sum / M;
  }

  // reversed Huber
  {
    double mx = 0.0;
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u)
        if (valid(u, v)) mx = std::max(mx, std::abs(pred.at(u, v) - gt.at(u, v)));
    const double c = 0.1 * mx;
    if (c > 0.0) {
      for (int v = 0; v < H; ++v)
        for (int u = 0; u < W; ++u)
          if (valid(u, v)) {
            const double err = pred.at(u, v) - gt.at(u, v), a = std::abs(err);
            o.berhu += a <= c ? a : (err * err + c * c) / (2.0 * c);
          }
      o.berhu /= M;
    }
  }

  // robust scale alignment
  for (int v = 0; v < H; ++v)
    for (int u = 0; u < W; ++u)
      if (valid(u, v)) {
        const double err = pred.at(u, v) - gt.at(u, v);
        o.scale += err * err / (1.0 + w.eta * std::abs(err));
      }
  o.scale /= M;

  // edge-weighted gradient difference (interior pixels with full stencils)
  {
    double acc = 0.0;
    int n = 0;
    for (int v = 0; v + 1 < H; ++v)
      for (int u = 0; u + 1 < W; ++u) {
        if (!valid(u, v) || !valid(u + 1, v) || !valid(u, v + 1)) continue;
        const double giu = gray.at(u + 1, v) - gray.at(u, v);
        const double giv = gray.at(u, v + 1) - gray.at(u, v);
        const double wgt = std::exp(-w.sigma * std::sqrt(giu * giu + giv * giv));
        const double ddu = (pred.at(u + 1, v) - pred.at(u, v)) - (gt.at(u + 1, v) - gt.at(u, v));
        const double ddv = (pred.at(u, v + 1) - pred.at(u, v)) - (gt.at(u, v + 1) - gt.at(u, v));
        acc += wgt * (ddu * ddu + ddv * ddv);
        ++n;
      }
    o.edge = n ? acc / n : 0.0;
  }

  // normal consistency with gt-gradient down-weighting
  {
    auto lift = [&](int u, int v, double z) {
      return Eigen::Vector3d(z * (u - K.cx) / K.fx, z * (v - K.cy) / K.fy, z);
    };
    auto normal_of = [&](const DepthMap& d, int u, int v) {
      const Eigen::Vector3d p0 = lift(u, v, d.at(u, v));
      const Eigen::Vector3d a = lift(u + 1, v, d.at(u + 1, v)) - p0;
      const Eigen::Vector3d b = lift(u, v + 1, d.at(u, v + 1)) - p0;
      Eigen::Vector3d n = a.cross(b);
      const double nn = n.norm();
      if (nn < 1e-12) return Eigen::Vector3d::Zero().eval();
      n /= nn;
      return (n.z() > 0.0 ? -n : n).eval();
    };
    double acc = 0.0;
    int n = 0;
    for (int v = 0; v + 1 < H; ++v)
      for (int u = 0; u + 1 < W; ++u) {
        if (!valid(u, v) || !valid(u + 1, v) || !valid(u, v + 1)) continue;
        const Eigen::Vector3d npred = normal_of(pred, u, v), ngt = normal_of(gt, u, v);
        if (npred.norm() == 0.0 || ngt.norm() == 0.0) continue;
        const double du = gt.at(u + 1, v) - gt.at(u, v);
        const double dv = gt.at(u, v + 1) - gt.at(u, v);
        const double wgt = std::exp(-w.lambda * std::sqrt(du * du + dv * dv));
        acc += wgt * (1.0 - std::clamp(npred.dot(ngt), -1.0, 1.0));
        ++n;
      }
    o.norm = n ? acc / n : 0.0;
  }
  return o;
}

DepthMap affine_of(const DepthMap& gt, double a, double b) {
  DepthMap pred(gt.width(), gt.height());
  for (int v = 0; v < gt.height(); ++v)
    for (int u = 0; u < gt.width(); ++u)
      pred.at(u, v) = a * gt.at(u, v) + b;
  return pred;
}

}  // namespace

TEST_CASE("fit_scale_shift recovers exact affine maps") {
  std::mt19937 rng(31);
  const auto gt = smooth_depth(rng, 12, 10);

  SECTION("identity") {
    const auto f = fit_scale_shift(gt, gt);
    REQUIRE(f.s == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(f.t == Catch::Approx(0.0).margin(1e-12));
  }
  SECTION("pred = 2 gt + 0.5 inverts to (0.5, -0.25)") {
    const auto pred = affine_of(gt, 2.0, 0.5);
    const auto f = fit_scale_shift(pred, gt);
    REQUIRE(f.s == Catch::Approx(0.5).margin(1e-9));
    REQUIRE(f.t == Catch::Approx(-0.25).margin(1e-9));
    double resid = 0.0;
    for (int v = 0; v < gt.height(); ++v)
      for (int u = 0; u < gt.width(); ++u)
        resid += std::abs(f.s * pred.at(u, v) + f.t - gt.at(u, v));
    REQUIRE(resid < 1e-9);
  }
  SECTION("degenerate inputs throw") {
    DepthMap constant(gt.width(), gt.height(), 2.0);
    REQUIRE_THROWS_AS(fit_scale_shift(constant, gt), DegenerateFitError);
    DepthMap tiny(1, 1, 1.0);
    REQUIRE_THROWS_AS(fit_scale_shift(tiny, tiny), DegenerateFitError);
  }
}

TEST_CASE("fit_scale_shift beats a dense grid search on noisy affine data") {
  std::mt19937 rng(32);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int trial = 0; trial < 20; ++trial) {
    const auto gt = smooth_depth(rng, 16, 16);
    auto pred = affine_of(gt, 1.7, -0.4);
    for (auto& z : pred.grid().data()) z += noise(rng);
    const auto f = fit_scale_shift(pred, gt);

    auto cost = [&](double s, double t) {
      double acc = 0.0;
      for (int v = 0; v < gt.height(); ++v)
        for (int u = 0; u < gt.width(); ++u) {
          const double r = s * pred.at(u, v) + t - gt.at(u, v);
          acc += r * r;
        }
      return acc;
    };

    // 200x200 exhaustive grid centered on the closed-form answer
    const double span_s = 0.05, span_t = 0.05;
    double best_s = f.s, best_t = f.t, best_cost = cost(f.s, f.t);
    double grid_best = std::numeric_limits<double>::infinity();
    double grid_s = 0, grid_t = 0;
    for (int i = 0; i < 200; ++i)
      for (int j = 0; j < 200; ++j) {
        const double s = f.s - span_s + 2.0 * span_s * i / 199.0;
        const double t = f.t - span_t + 2.0 * span_t * j / 199.0;
        const double c = cost(s, t);
        if (c < grid_best) { grid_best = c; grid_s = s; grid_t = t; }
      }
    // closed form is optimal: no grid point beats it
    REQUIRE(best_cost <= grid_best + 1e-12);
    // the grid winner costs no more than a one-cell step away from the fit
    // (the valley is oblique, so parameter distance alone is misleading)
    const double cell_s = 2.0 * span_s / 199.0, cell_t = 2.0 * span_t / 199.0;
    double step_cost = best_cost;
    for (double ds : {-cell_s, cell_s})
      for (double dt : {-cell_t, cell_t})
        step_cost = std::max(step_cost, cost(best_s + ds, best_t + dt));
    REQUIRE(grid_best <= step_cost + 1e-12);
    // and sits within a few cells of the continuous argmin
    REQUIRE(std::abs(grid_s - best_s) <= 8.0 * cell_s + 1e-12);
    REQUIRE(std::abs(grid_t - best_t) <= 8.0 * cell_t + 1e-12);
  }
}

TEST_CASE("ssi_loss basics and invariance") {
  std::mt19937 rng(33);
  const auto gt = smooth_depth(rng, 14, 11);

  REQUIRE(ssi_loss(gt, gt) == Catch::Approx(0.0).margin(1e-15));

  for (double a : {0.25, 1.0, 3.0, 10.0})
    for (double b : {-1.0, -0.2, 0.0, 0.7, 1.0}) {
      const auto pred = affine_of(gt, a, b);
      // combinations that push the prediction out of the valid range (<= 0)
      // have nothing to fit on and are skipped
      double mn = 1e30;
      for (auto z : pred.grid().data()) mn = std::min(mn, z);
      if (mn <= 0.0) continue;
      REQUIRE(ssi_loss(pred, gt) < 1e-10);
    }
}

TEST_CASE("ssi_loss on a perturbed pixel matches the direct residual sum") {
  std::mt19937 rng(34);
  const auto gt = smooth_depth(rng, 9, 9);
  auto pred = affine_of(gt, 1.3, 0.1);
  pred.at(4, 4) += 0.5;

  // oracle: grid-refined fit plus a direct residual sum
  double best_s = 0, best_t = 0, best = std::numeric_limits<double>::infinity();
  double lo_s = 0.5, hi_s = 1.0, lo_t = -0.5, hi_t = 0.5;
  for (int round = 0; round < 6; ++round) {
    for (int i = 0; i < 100; ++i)
      for (int j = 0; j < 100; ++j) {
        const double s = lo_s + (hi_s - lo_s) * i / 99.0;
        const double t = lo_t + (hi_t - lo_t) * j / 99.0;
        double acc = 0.0;
        for (int v = 0; v < 9; ++v)
          for (int u = 0; u < 9; ++u) {
            const double r = s * pred.at(u, v) + t - gt.at(u, v);
            acc += r * r;
          }
        if (acc < best) { best = acc; best_s = s; best_t = t; }
      }
    const double ds = (hi_s - lo_s) / 99.0, dt = (hi_t - lo_t) / 99.0;
    lo_s = best_s - 2 * ds; hi_s = best_s + 2 * ds;
    lo_t = best_t - 2 * dt; hi_t = best_t + 2 * dt;
  }
  const double oracle = 0.5 * best / (9 * 9);
  REQUIRE(ssi_loss(pred, gt) == Catch::Approx(oracle).epsilon(1e-7));
  REQUIRE(ssi_loss(pred, gt) <= oracle + 1e-12);  // closed form is the argmin
}

TEST_CASE("gradient_matching_loss hand values") {
  std::mt19937 rng(35);
  const auto gt = smooth_depth(rng, 16, 16);
  REQUIRE(gradient_matching_loss(gt, gt) == 0.0);
  const auto offset = affine_of(gt, 1.0, 0.35);
  REQUIRE(gradient_matching_loss(offset, gt) < 1e-12);

  // 3x1 error field [0,1,0]: |1| + |-1| = 2 over M = 3 valid pixels
  DepthMap g3(3, 1, 1.0);
  DepthMap p3(3, 1, 1.0);
  p3.at(1, 0) = 2.0;
  REQUIRE(gradient_matching_loss(p3, g3, nullptr, 1) == Catch::Approx(2.0 / 3.0).margin(1e-15));

  // too small to halve 3 times
  REQUIRE_THROWS_AS(gradient_matching_loss(p3, g3, nullptr, 4), InvalidInputError);
}

TEST_CASE("berhu hand values") {
  std::mt19937 rng(36);
  const auto gt = smooth_depth(rng, 8, 8);
  REQUIRE(berhu(gt, gt) == 0.0);

  // errors {0, 1}: c = 0.1, terms {0, 5.05}, mean 2.525
  DepthMap g2(2, 1, 1.0);
  DepthMap p2(2, 1, 1.0);
  p2.at(1, 0) = 2.0;
  REQUIRE(berhu(p2, g2) == Catch::Approx(2.525).margin(1e-9));

  // all errors equal eps: every pixel in the quadratic branch, mean 5.05 eps
  for (double eps : {1e-3, 0.02, 0.4}) {
    const auto pred = affine_of(gt, 1.0, eps);
    REQUIRE(berhu(pred, gt) == Catch::Approx(5.05 * eps).epsilon(1e-9));
  }
}

TEST_CASE("scale_alignment_loss hand values and robustness") {
  DepthMap g1(1, 1, 1.0), p1(1, 1, 2.0);
  REQUIRE(scale_alignment_loss(p1, g1, nullptr, 0.2) ==
          Catch::Approx(1.0 / 1.2).margin(1e-9));
  REQUIRE(scale_alignment_loss(g1, g1) == 0.0);

  // per-pixel value strictly increasing in |e| and bounded by e^2
  double prev = 0.0;
  for (double e = 0.25; e <= 8.0; e += 0.25) {
    DepthMap p(1, 1, 1.0 + e);
    const double val = scale_alignment_loss(p, g1, nullptr, 0.2);
    REQUIRE(val > prev);
    REQUIRE(val <= e * e + 1e-12);
    prev = val;
  }

  // sub-quadratic growth: loss(10e)/loss(e) < 100 for large e
  DepthMap pe(1, 1, 1.0 + 50.0), p10e(1, 1, 1.0 + 500.0);
  REQUIRE(scale_alignment_loss(p10e, g1) / scale_alignment_loss(pe, g1) < 100.0);
}

TEST_CASE("edge_emphasize_loss hand values") {
  std::mt19937 rng(37);
  const auto gt = smooth_depth(rng, 10, 8);
  const auto gray = random_gray(rng, 10, 8);
  REQUIRE(edge_emphasize_loss(gt, gt, gray) == 0.0);

  SECTION("flat image gives unit weight") {
    Image<double> flat(10, 8, 0.5);
    DepthMap pred = gt;
    pred.at(4, 4) += 0.3;  // perturbs gradients around (4,4)
    const double loss = edge_emphasize_loss(pred, gt, flat, nullptr, 1.0);
    // direct hand sum: only stencils touching (4,4) change
    double acc = 0.0;
    int n = 0;
    for (int v = 0; v + 1 < 8; ++v)
      for (int u = 0; u + 1 < 10; ++u) {
        const double ddu = (pred.at(u + 1, v) - pred.at(u, v)) - (gt.at(u + 1, v) - gt.at(u, v));
        const double ddv = (pred.at(u, v + 1) - pred.at(u, v)) - (gt.at(u, v + 1) - gt.at(u, v));
        acc += ddu * ddu + ddv * ddv;
        ++n;
      }
    REQUIRE(loss == Catch::Approx(acc / n).margin(1e-12));
  }

  SECTION("uniform image slope 2 with sigma 1 weights every pixel by exp(-2)") {
    const int W = 7, H = 6;
    Image<double> ramp(W, H);
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u) ramp.at(u, v) = 2.0 * u;
    DepthMap gtc(W, H, 2.0);
    DepthMap pred(W, H);
    for (int v = 0; v < H; ++v)
      for (int u = 0; u < W; ++u) pred.at(u, v) = 2.0 + 1.0 * u;
    const double loss = edge_emphasize_loss(pred, gtc, ramp, nullptr, 1.0);
    REQUIRE(loss == Catch::Approx(std::exp(-2.0)).margin(1e-9));
  }
}

TEST_CASE("normal_consistency_loss on analytic planes") {
  // principal point off-image keeps a narrow ray cone, so even steep planes
  // stay in front of the camera across the whole grid
  const auto K = make_K(300, 300, -20, -20, 24, 20);

  SECTION("identical surfaces score zero") {
    std::mt19937 rng(38);
    const auto gt = smooth_depth(rng, 24, 20);
    const auto Kc = make_K(300, 300, 12, 10, 24, 20);
    REQUIRE(normal_consistency_loss(gt, gt, Kc) == Catch::Approx(0.0).margin(1e-12));
  }

  SECTION("fronto-parallel gt vs 90-degree tilted pred scores 1") {
    DepthMap gt(24, 20, 2.0);
    const Eigen::Vector3d n(1.0, 0.0, 0.0);  // orthogonal to the view normal
    const auto pred = plane_depth(K, n, 1.0);
    REQUIRE(pred.valid_count() == 24 * 20);
    REQUIRE(normal_consistency_loss(pred, gt, K, nullptr, 0.7) ==
            Catch::Approx(1.0).margin(1e-12));
  }

  SECTION("60-degree tilt scores 1 - cos60 = 0.5 under a flat gt") {
    DepthMap gt(24, 20, 2.0);
    const double a = 60.0 * M_PI / 180.0;
    const Eigen::Vector3d n(std::sin(a), 0.0, -std::cos(a));
    const auto pred = plane_depth(K, n, -1.0 * std::cos(a));
    REQUIRE(pred.valid_count() == 24 * 20);
    REQUIRE(normal_consistency_loss(pred, gt, K, nullptr, 3.0) ==
            Catch::Approx(0.5).margin(1e-9));
  }

  SECTION("tilted gt weights by its own slope, matching the analytic oracle") {
    const double phi = 10.0 * M_PI / 180.0, tilt = 60.0 * M_PI / 180.0;
    const Eigen::Vector3d ngt(std::sin(phi), 0.0, -std::cos(phi));
    const Eigen::Vector3d npred(std::sin(phi + tilt), 0.0, -std::cos(phi + tilt));
    const auto gt = plane_depth(K, ngt, -2.0);
    const auto pred = plane_depth(K, npred, -2.5);
    REQUIRE(gt.valid_count() == 24 * 20);
    REQUIRE(pred.valid_count() == 24 * 20);
    const double lambda = 1.4;
    // oracle: per-pixel weight from the analytic gt plane depth differences
    double acc = 0.0;
    int cnt = 0;
    for (int v = 0; v + 1 < 20; ++v)
      for (int u = 0; u + 1 < 24; ++u) {
        const double du = gt.at(u + 1, v) - gt.at(u, v);
        const double dv = gt.at(u, v + 1) - gt.at(u, v);
        acc += std::exp(-lambda * std::sqrt(du * du + dv * dv)) * (1.0 - std::cos(tilt));
        ++cnt;
      }
    const double oracle = acc / cnt;
    REQUIRE(normal_consistency_loss(pred, gt, K, nullptr, lambda) ==
            Catch::Approx(oracle).margin(1e-9));
  }

  SECTION("steeper gt edges receive strictly smaller weight") {
    // same 40-degree normal disagreement, flatter vs steeper gt
    const double tilt = 40.0 * M_PI / 180.0;
    auto run = [&](double phi) {
      const Eigen::Vector3d ngt(std::sin(phi), 0.0, -std::cos(phi));
      const Eigen::Vector3d npred(std::sin(phi + tilt), 0.0, -std::cos(phi + tilt));
      return normal_consistency_loss(plane_depth(K, npred, -2.5), plane_depth(K, ngt, -2.0),
                                     K, nullptr, 1.0);
    };
    REQUIRE(run(35.0 * M_PI / 180.0) < run(5.0 * M_PI / 180.0));
  }
}

TEST_CASE("total_depth_loss decomposes and matches the straight-line oracle") {
  std::mt19937 rng(39);
  std::normal_distribution<double> noise(0.0, 0.15);
  const auto K = make_K(260, 270, 4.2, 3.8, 8, 8);
  const LossWeights w;

  for (int trial = 0; trial < 12; ++trial) {
    const auto gt = smooth_depth(rng, 8, 8);
    auto pred = gt;
    for (auto& z : pred.grid().data()) z += noise(rng);
    const auto gray = random_gray(rng, 8, 8);

    const auto rep = total_depth_loss(pred, gt, gray, K, nullptr, w);

    // decomposition identity
    const double recomposed = rep.ssi + w.w_reg * rep.reg + w.alpha * rep.berhu +
                              w.w_scale * rep.scale + w.w_edge * rep.edge + w.w_norm * rep.norm;
    REQUIRE(rep.total == Catch::Approx(recomposed).margin(1e-12));

    // component calls agree with the report
    REQUIRE(rep.ssi == Catch::Approx(ssi_loss(pred, gt)).margin(1e-15));
    REQUIRE(rep.berhu == Catch::Approx(berhu(pred, gt)).margin(1e-15));

    // independent straight-line formulas
    const auto o = oracle_total(pred, gt, gray, K, w);
    REQUIRE(rep.ssi == Catch::Approx(o.ssi).margin(1e-9));
    REQUIRE(rep.reg == Catch::Approx(o.reg).margin(1e-9));
    REQUIRE(rep.berhu == Catch::Approx(o.berhu).margin(1e-9));
    REQUIRE(rep.scale == Catch::Approx(o.scale).margin(1e-9));
    REQUIRE(rep.edge == Catch::Approx(o.edge).margin(1e-9));
    REQUIRE(rep.norm == Catch::Approx(o.norm).margin(1e-9));

    // every term nonnegative
    for (double term : {rep.ssi, rep.reg, rep.berhu, rep.scale, rep.edge, rep.norm, rep.total})
      REQUIRE(term >= 0.0);

    // zero at identity
    const auto zero = total_depth_loss(gt, gt, gray, K, nullptr, w);
    REQUIRE(zero.total == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("rescale_with_prior endpoint algebra and clamping") {
  std::mt19937 rng(40);

  SECTION("norm 0 maps to max(raw), norm 1 to min(raw), exactly") {
    for (int trial = 0; trial < 10; ++trial) {
      const auto raw = testsup::random_depth(rng, 6, 6, 0.8, 5.5);
      auto pred = testsup::random_depth(rng, 6, 6, 0.1, 0.9);
      double raw_min = 1e30, raw_max = -1e30;
      for (auto z : raw.grid().data()) { raw_min = std::min(raw_min, z); raw_max = std::max(raw_max, z); }
      double p_min = 1e30, p_max = -1e30;
      int umin = 0, vmin = 0, umax = 0, vmax = 0;
      for (int v = 0; v < 6; ++v)
        for (int u = 0; u < 6; ++u) {
          if (pred.at(u, v) < p_min) { p_min = pred.at(u, v); umin = u; vmin = v; }
          if (pred.at(u, v) > p_max) { p_max = pred.at(u, v); umax = u; vmax = v; }
        }
      const auto out = rescale_with_prior(pred, raw);
      REQUIRE(out.at(umin, vmin) == raw_max);  // norm 0
      REQUIRE(out.at(umax, vmax) == raw_min);  // norm 1
    }
  }

  SECTION("midpoint formula: norm 0.5 with prior [1,2] gives 4/3") {
    DepthMap pred(3, 1);
    pred.at(0, 0) = 1.0; pred.at(1, 0) = 1.5; pred.at(2, 0) = 2.0;
    DepthMap raw(3, 1);
    raw.at(0, 0) = 1.0; raw.at(1, 0) = 2.0; raw.at(2, 0) = 1.5;
    const auto out = rescale_with_prior(pred, raw);
    REQUIRE(out.at(1, 0) == Catch::Approx(4.0 / 3.0).margin(1e-9));
  }

  SECTION("zeros in the raw prior are ignored for min/max") {
    DepthMap pred(4, 1);
    for (int u = 0; u < 4; ++u) pred.at(u, 0) = 1.0 + u;
    DepthMap raw(4, 1);
    raw.at(0, 0) = 0.0; raw.at(1, 0) = 2.0; raw.at(2, 0) = 0.0; raw.at(3, 0) = 4.0;
    const auto out = rescale_with_prior(pred, raw);
    REQUIRE(out.at(0, 0) == 4.0);
    REQUIRE(out.at(3, 0) == 2.0);
  }

  SECTION("constant raw prior is degenerate") {
    DepthMap pred(3, 1);
    pred.at(0, 0) = 1.0; pred.at(1, 0) = 1.5; pred.at(2, 0) = 2.0;
    REQUIRE_THROWS_AS(rescale_with_prior(pred, DepthMap(3, 1, 2.0)), DegenerateFitError);
  }

  SECTION("output clamps into the working range") {
    DepthMap pred(2, 1);
    pred.at(0, 0) = 0.2; pred.at(1, 0) = 0.9;
    DepthMap raw(2, 1);
    raw.at(0, 0) = 0.1; raw.at(1, 0) = 20.0;  // prior extremes outside [0.3, 8]
    const auto out = rescale_with_prior(pred, raw);
    REQUIRE(out.at(0, 0) == 8.0);   // norm 0 -> 20 clamped to kDepthMax
    REQUIRE(out.at(1, 0) == 0.3);   // norm 1 -> 0.1 clamped to kDepthMin
  }
}

TEST_CASE("analytic gradients: spot checks") {
  std::mt19937 rng(41);
  const auto K = make_K(260, 270, 7.5, 7.5, 16, 16);
  const auto gray = random_gray(rng, 16, 16);
  const LossWeights w;

  SECTION("ssi gradient vanishes at pred == gt") {
    const auto gt = smooth_depth(rng, 16, 16);
    const auto fd = finite_difference_gradient(LossTerm::ssi, gt, gt, gray, K, nullptr, w, 1e-6);
    const auto an = analytic_gradient(LossTerm::ssi, gt, gt, gray, K, nullptr, w);
    for (std::size_t i = 0; i < fd.data().size(); ++i) {
      REQUIRE(std::abs(fd.data()[i]) < 1e-6);
      REQUIRE(std::abs(an.data()[i]) < 1e-12);
    }
  }

  SECTION("berhu gradient is sign(e)/M in the linear branch") {
    const int W = 4, H = 4, M = W * H;
    DepthMap gt(W, H, 2.0);
    DepthMap pred(W, H, 2.0);
    pred.at(0, 0) = 4.0;                      // dominant error sets c = 0.2
    pred.at(1, 0) = 2.05;                     // linear branch, positive
    pred.at(2, 0) = 1.95;                     // linear branch, negative
    const auto g = analytic_gradient(LossTerm::berhu, pred, gt, gray, K, nullptr, w);
    REQUIRE(g.at(1, 0) == Catch::Approx(1.0 / M).margin(1e-15));
    REQUIRE(g.at(2, 0) == Catch::Approx(-1.0 / M).margin(1e-15));
  }

  SECTION("scale gradient matches the closed form") {
    const auto gt = smooth_depth(rng, 16, 16);
    auto pred = gt;
    std::normal_distribution<double> noise(0.0, 0.2);
    for (auto& z : pred.grid().data()) z += noise(rng);
    const auto g = analytic_gradient(LossTerm::scale, pred, gt, gray, K, nullptr, w);
    for (int v = 0; v < 16; ++v)
      for (int u = 0; u < 16; ++u) {
        const double e = pred.at(u, v) - gt.at(u, v);
        const double den = 1.0 + w.eta * std::abs(e);
        const double expect = (2.0 * e + w.eta * e * std::abs(e)) / (den * den * 256);
        REQUIRE(g.at(u, v) == Catch::Approx(expect).margin(1e-15));
      }
  }
}

TEST_CASE("analytic gradients agree with finite differences on random pairs") {
  std::mt19937 rng(4242);
  std::normal_distribution<double> noise(0.0, 0.18);
  const auto K = make_K(260, 270, 7.5, 7.5, 16, 16);
  const LossWeights w;
  const double h = 3e-6;

  const LossTerm terms[] = {LossTerm::ssi, LossTerm::reg, LossTerm::berhu,
                            LossTerm::scale, LossTerm::edge, LossTerm::norm};

  for (int trial = 0; trial < 8; ++trial) {
    const auto gt = smooth_depth(rng, 16, 16);
    auto pred = gt;
    for (auto& z : pred.grid().data()) z += noise(rng);
    const auto gray = random_gray(rng, 16, 16);

    for (const auto term : terms) {
      Mask smooth;
      const auto ga = analytic_gradient(term, pred, gt, gray, K, nullptr, w, &smooth, 1e-3);
      const auto gf = finite_difference_gradient(term, pred, gt, gray, K, nullptr, w, h);
      for (int v = 0; v < 16; ++v)
        for (int u = 0; u < 16; ++u) {
          if (!smooth.at(u, v)) continue;
          const double a = ga.at(u, v), f = gf.at(u, v);
          const double err = std::abs(a - f);
          REQUIRE(err <= 1e-5 * std::max({std::abs(a), std::abs(f), 1e-4}));
        }
    }
  }
}
