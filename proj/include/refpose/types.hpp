/**
 * \file types.hpp
 * \brief Core value types shared across the toolkit: dense grid images,
 *        validity masks and the error hierarchy used by every module.
 */
#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace refpose {

/// \brief Base class for all toolkit errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// \brief Raised when inputs violate a documented precondition
///        (mismatched sizes, empty ranges, out-of-domain values).
class InvalidInputError : public Error {
 public:
  using Error::Error;
};

/// \brief Raised when a file cannot be parsed or has an unsupported layout.
///        The message names the offending path and, where known, the offset.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// \brief Raised when a closed-form fit has no unique solution
///        (constant predictions, collinear point sets, constant priors).
class DegenerateFitError : public Error {
 public:
  using Error::Error;
};

/// \brief Raised when an iterative solve cannot produce a usable estimate
///        (too few correspondences, consensus below the minimal sample).
class SolveFailureError : public Error {
 public:
  using Error::Error;
};

/**
 * \brief Dense row-major 2-D grid of values.
 *
 * Pixel (u, v) addresses column u in row v; data() is laid out row by row.
 */
template <typename T>
class Image {
 public:
  Image() = default;

  Image(int width, int height, T fill = T{})
      : width_(width), height_(height),
        data_(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill) {
    if (width < 0 || height < 0) throw InvalidInputError("Image: negative dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }

  bool inside(int u, int v) const {
    return u >= 0 && u < width_ && v >= 0 && v < height_;
  }

  T& at(int u, int v) { return data_[static_cast<std::size_t>(v) * width_ + u]; }
  const T& at(int u, int v) const { return data_[static_cast<std::size_t>(v) * width_ + u]; }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_size(int w, int h) const { return width_ == w && height_ == h; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<T> data_;
};

/// \brief Default metric working range for depth values; loaders and the
///        prior rescale clamp into [kDepthMin, kDepthMax] meters.
inline constexpr double kDepthMin = 0.3;
inline constexpr double kDepthMax = 8.0;

/// \brief Binary inclusion mask; nonzero marks a pixel as included.
using Mask = Image<std::uint8_t>;

/// \brief True when \p mask is null (no mask supplied) or nonzero at (u, v).
inline bool mask_allows(const Mask* mask, int u, int v) {
  return mask == nullptr || mask->at(u, v) != 0;
}

/**
 * \brief Metric depth image. A pixel is valid when its value is finite and
 *        strictly positive; zero and negative entries mark missing data.
 */
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height, double fill = 0.0) : img_(width, height, fill) {}
  explicit DepthMap(Image<double> img) : img_(std::move(img)) {}

  int width() const { return img_.width(); }
  int height() const { return img_.height(); }

  double& at(int u, int v) { return img_.at(u, v); }
  double at(int u, int v) const { return img_.at(u, v); }

  bool valid(int u, int v) const {
    const double d = img_.at(u, v);
    return std::isfinite(d) && d > 0.0;
  }

  int valid_count(const Mask* mask = nullptr) const {
    int n = 0;
    for (int v = 0; v < height(); ++v)
      for (int u = 0; u < width(); ++u)
        if (valid(u, v) && mask_allows(mask, u, v)) ++n;
    return n;
  }

  Image<double>& grid() { return img_; }
  const Image<double>& grid() const { return img_; }

 private:
  Image<double> img_;
};

/// \brief Throws InvalidInputError unless both grids share \p w x \p h.
template <typename A, typename B>
inline void require_same_size(const A& a, const B& b, const char* who) {
  if (a.width() != b.width() || a.height() != b.height())
    throw InvalidInputError(std::string(who) + ": size mismatch " +
                            std::to_string(a.width()) + "x" + std::to_string(a.height()) + " vs " +
                            std::to_string(b.width()) + "x" + std::to_string(b.height()));
}

}  // namespace refpose
