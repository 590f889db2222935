#pragma once

// Grayscale float image with precomputed central-difference gradients and
// bilinear sampling of intensity and gradient.

#include <algorithm>
#include <cmath>
#include <concepts>
#include <vector>

#include "rsvio/errors.hpp"
#include "rsvio/lie.hpp"

namespace rsvio {

/// Anything the photometric energy can sample: intensity and its gradient at
/// a sub-pixel location, false if the location cannot be sampled.
template <class I>
concept SampledImage = requires(const I& im, const Vec2& u, double& v, Vec2& g) {
  { im.sample(u, v, g) } -> std::same_as<bool>;
  { im.width() } -> std::convertible_to<int>;
  { im.height() } -> std::convertible_to<int>;
};

class Image {
 public:
  Image() = default;
  Image(int width, int height, std::vector<float> data)
      : w_(width), h_(height), data_(std::move(data)) {
    if (width < 3 || height < 3) throw DataError("image: too small");
    if (data_.size() != static_cast<size_t>(width) * height) throw DataError("image: size mismatch");
    compute_gradients();
  }

  int width() const { return w_; }
  int height() const { return h_; }
  bool empty() const { return data_.empty(); }
  float at(int x, int y) const { return data_[static_cast<size_t>(y) * w_ + x]; }
  const std::vector<float>& data() const { return data_; }

  /// Bilinear sample; valid for x in [1, w-2], y in [1, h-2] so that every
  /// interpolated gradient comes from a central difference.
  bool sample(const Vec2& u, double& value, Vec2& grad) const {
    if (!(u.x() >= 1.0 && u.y() >= 1.0 && u.x() < w_ - 2.0 && u.y() < h_ - 2.0)) return false;
    const int x = static_cast<int>(u.x()), y = static_cast<int>(u.y());
    const double fx = u.x() - x, fy = u.y() - y;
    const double w00 = (1 - fx) * (1 - fy), w10 = fx * (1 - fy), w01 = (1 - fx) * fy, w11 = fx * fy;
    const size_t i = static_cast<size_t>(y) * w_ + x;
    auto lerp = [&](const std::vector<float>& c) {
      return w00 * c[i] + w10 * c[i + 1] + w01 * c[i + w_] + w11 * c[i + w_ + 1];
    };
    value = lerp(data_);
    grad = Vec2(lerp(gx_), lerp(gy_));
    return true;
  }

  /// 2x2 box downsampling.
  Image half() const {
    const int w = w_ / 2, h = h_ / 2;
    std::vector<float> d(static_cast<size_t>(w) * h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        d[static_cast<size_t>(y) * w + x] =
            0.25f * (at(2 * x, 2 * y) + at(2 * x + 1, 2 * y) + at(2 * x, 2 * y + 1) + at(2 * x + 1, 2 * y + 1));
    return Image(w, h, std::move(d));
  }

  float gradient_norm2(int x, int y) const {
    const size_t i = static_cast<size_t>(y) * w_ + x;
    return gx_[i] * gx_[i] + gy_[i] * gy_[i];
  }

 private:
  void compute_gradients() {
    gx_.assign(data_.size(), 0.0f);
    gy_.assign(data_.size(), 0.0f);
    for (int y = 1; y + 1 < h_; ++y)
      for (int x = 1; x + 1 < w_; ++x) {
        const size_t i = static_cast<size_t>(y) * w_ + x;
        gx_[i] = 0.5f * (data_[i + 1] - data_[i - 1]);
        gy_[i] = 0.5f * (data_[i + w_] - data_[i - w_]);
      }
  }

  int w_ = 0, h_ = 0;
  std::vector<float> data_, gx_, gy_;
};

}  // namespace rsvio
