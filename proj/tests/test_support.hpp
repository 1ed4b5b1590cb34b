// Shared helpers for the unit and acceptance suites: camera construction,
// analytic plane depth fields, and seeded random grids.
#pragma once

#include <algorithm>
#include <random>

#include "refpose/camera.hpp"
#include "refpose/geometry.hpp"
#include "refpose/types.hpp"

namespace testsup {

inline refpose::CameraIntrinsics make_K(double fx, double fy, double cx, double cy,
                                        int w, int h) {
  refpose::CameraIntrinsics K;
  K.fx = fx; K.fy = fy; K.cx = cx; K.cy = cy; K.width = w; K.height = h;
  return K;
}

/// Depth of the plane {x : n.x = rho} sampled along pixel rays. Backprojected
/// points lie exactly in the plane, so forward-difference normals are exact.
inline refpose::DepthMap plane_depth(const refpose::CameraIntrinsics& K,
                                     const Eigen::Vector3d& n, double rho) {
  refpose::DepthMap d(K.width, K.height);
  for (int v = 0; v < K.height; ++v)
    for (int u = 0; u < K.width; ++u)
      d.at(u, v) = rho / n.dot(K.ray(u, v));
  return d;
}

inline refpose::DepthMap random_depth(std::mt19937& rng, int w, int h,
                                      double lo = 0.5, double hi = 4.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  refpose::DepthMap d(w, h);
  for (auto& z : d.grid().data()) z = dist(rng);
  return d;
}

/// Smooth depth: a plane plus a couple of low-frequency sinusoidal bumps.
inline refpose::DepthMap smooth_depth(std::mt19937& rng, int w, int h) {
  std::uniform_real_distribution<double> amp(0.05, 0.2), phase(0.0, 6.28), base(1.5, 2.5);
  const double z0 = base(rng), ax = amp(rng), ay = amp(rng), px = phase(rng), py = phase(rng);
  const double su = amp(rng) * 0.05, sv = amp(rng) * 0.05;
  refpose::DepthMap d(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u)
      d.at(u, v) = z0 + su * u + sv * v + ax * std::sin(0.41 * u + px) +
                   ay * std::cos(0.37 * v + py);
  return d;
}

inline refpose::Image<double> random_gray(std::mt19937& rng, int w, int h) {
  std::uniform_real_distribution<double> dist(0.0, 1.0);
  refpose::Image<double> img(w, h);
  for (auto& x : img.data()) x = dist(rng);
  return img;
}

// Textured synthetic image: blurred noise plus per-pixel jitter, so both
// 8x8 and 2x2 cells carry distinctive content.
inline refpose::Image<double> noise_texture(std::mt19937& rng, int w, int h) {
  auto img = random_gray(rng, w, h);
  refpose::Image<double> out(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      double acc = 0.0;
      int n = 0;
      for (int dv = -2; dv <= 2; ++dv)
        for (int du = -2; du <= 2; ++du) {
          acc += img.at(std::clamp(u + du, 0, w - 1), std::clamp(v + dv, 0, h - 1));
          ++n;
        }
      out.at(u, v) = acc / n;
    }
  std::uniform_real_distribution<double> jitter(-0.25, 0.25);
  for (auto& x : out.data()) x = std::clamp(x + jitter(rng), 0.0, 1.0);
  return out;
}

inline refpose::Image<double> crop(const refpose::Image<double>& img, int x0, int y0,
                                   int w, int h) {
  refpose::Image<double> out(w, h);
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) out.at(u, v) = img.at(x0 + u, y0 + v);
  return out;
}

}  // namespace testsup
