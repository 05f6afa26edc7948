#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "emstop/errors.hpp"

namespace emstop {

// Nonnegative-or-general real array on a W x H pixel grid, stored row-major.
// Serves as object, data, background and PSF depending on context; the
// role-specific sign requirements are checked by the consuming constructors.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  Image() = default;

  Image(int w, int h, double fill = 0.0)
      : width(w), height(h), values(check_dims(w, h), fill) {}

  Image(int w, int h, std::vector<double> v)
      : width(w), height(h), values(std::move(v)) {
    if (values.size() != check_dims(w, h))
      throw ValidationError("Image: values.size() != width*height");
  }

  std::size_t size() const { return values.size(); }

  double& at(int x, int y) {
    return values[static_cast<std::size_t>(y) * width + x];
  }
  double at(int x, int y) const {
    return values[static_cast<std::size_t>(y) * width + x];
  }

  std::span<double> span() { return values; }
  std::span<const double> span() const { return values; }

  bool same_dims(const Image& other) const {
    return width == other.width && height == other.height;
  }

 private:
  static std::size_t check_dims(int w, int h) {
    if (w < 1 || h < 1) throw ValidationError("Image: dimensions must be >= 1");
    return static_cast<std::size_t>(w) * static_cast<std::size_t>(h);
  }
};

inline void require_finite(std::span<const double> v, const std::string& role) {
  for (double x : v)
    if (!std::isfinite(x))
      throw ValidationError(role + ": values must be finite");
}

inline void require_nonnegative(std::span<const double> v,
                                const std::string& role) {
  for (double x : v)
    if (!(x >= 0.0))
      throw ValidationError(role + ": values must be finite and >= 0");
}

inline void require_positive(std::span<const double> v,
                             const std::string& role) {
  for (double x : v)
    if (!(x > 0.0))
      throw ValidationError(role + ": values must be finite and > 0");
}

}  // namespace emstop
