#pragma once

// Pinhole camera with radial-tangential distortion and rolling-shutter row
// timing. The estimator works on undistorted images; the distortion map is
// only needed to find which sensor row (and hence which capture time) an
// undistorted pixel came from.

#include <yaml-cpp/yaml.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "rsvio/errors.hpp"
#include "rsvio/lie.hpp"

namespace rsvio {

struct RadTan {
  double k1 = 0.0, k2 = 0.0, p1 = 0.0, p2 = 0.0;
};

class CameraModel {
 public:
  /// Points closer than this (along the optical axis) count as behind the camera.
  static constexpr double kMinDepth = 1e-6;

  CameraModel() = default;

  CameraModel(double fx, double fy, double cx, double cy, RadTan dist, int width,
              int height, double row_time_td, int readout_sign = 1)
      : fx_(fx), fy_(fy), cx_(cx), cy_(cy), dist_(dist), width_(width),
        height_(height), y0_(0.5 * (height - 1)), row_time_td_(row_time_td),
        readout_sign_(readout_sign) {
    if (!(fx > 0.0 && fy > 0.0)) throw DataError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 1) throw DataError("camera: invalid image size");
    if (!(row_time_td >= 0.0)) throw DataError("camera: row_time_td must be >= 0");
    if (readout_sign != 1 && readout_sign != -1)
      throw DataError("camera: readout_sign must be +1 or -1");
    // Valid distortion domain: 1.5x the normalized radius of the farthest corner.
    double r2 = 0.0;
    for (double x : {0.0, width - 1.0})
      for (double y : {0.0, height - 1.0}) {
        const double nx = (x - cx) / fx, ny = (y - cy) / fy;
        r2 = std::max(r2, nx * nx + ny * ny);
      }
    max_r2_ = 2.25 * r2;
  }

  double fx() const { return fx_; }
  double fy() const { return fy_; }
  double cx() const { return cx_; }
  double cy() const { return cy_; }
  const RadTan& distortion() const { return dist_; }
  int width() const { return width_; }
  int height() const { return height_; }
  double y0() const { return y0_; }
  double row_time_td() const { return row_time_td_; }
  int readout_sign() const { return readout_sign_; }
  bool is_global_shutter() const { return row_time_td_ == 0.0; }

  CameraModel with_row_time(double td) const {
    CameraModel c = *this;
    if (!(td >= 0.0)) throw DataError("camera: row_time_td must be >= 0");
    c.row_time_td_ = td;
    return c;
  }

  bool in_image(const Vec2& u, double margin = 0.0) const {
    return u.x() >= margin && u.y() >= margin && u.x() <= width_ - 1 - margin &&
           u.y() <= height_ - 1 - margin;
  }

  /// Undistorted -> distorted pixel; nullopt outside the calibrated radius.
  /// If jac is given it receives d(distorted)/d(undistorted).
  std::optional<Vec2> try_distort(const Vec2& u, Mat2* jac = nullptr) const {
    const double x = (u.x() - cx_) / fx_;
    const double y = (u.y() - cy_) / fy_;
    const double x2 = x * x, y2 = y * y, xy = x * y, r2 = x2 + y2;
    if (!(r2 <= max_r2_)) return std::nullopt;
    const double radial = 1.0 + dist_.k1 * r2 + dist_.k2 * r2 * r2;
    const double xd = x * radial + 2.0 * dist_.p1 * xy + dist_.p2 * (r2 + 2.0 * x2);
    const double yd = y * radial + dist_.p1 * (r2 + 2.0 * y2) + 2.0 * dist_.p2 * xy;
    if (jac) {
      const double dradial = dist_.k1 + 2.0 * dist_.k2 * r2;  // d radial / d r2
      // Normalized-coordinate Jacobian.
      const double dxd_dx = radial + 2.0 * x2 * dradial + 2.0 * dist_.p1 * y + 6.0 * dist_.p2 * x;
      const double dxd_dy = 2.0 * xy * dradial + 2.0 * dist_.p1 * x + 2.0 * dist_.p2 * y;
      const double dyd_dx = 2.0 * xy * dradial + 2.0 * dist_.p1 * x + 2.0 * dist_.p2 * y;
      const double dyd_dy = radial + 2.0 * y2 * dradial + 6.0 * dist_.p1 * y + 2.0 * dist_.p2 * x;
      (*jac) << dxd_dx, dxd_dy * fx_ / fy_, dyd_dx * fy_ / fx_, dyd_dy;
    }
    return Vec2(fx_ * xd + cx_, fy_ * yd + cy_);
  }

  Vec2 distort(const Vec2& u, Mat2* jac = nullptr) const {
    auto d = try_distort(u, jac);
    if (!d) throw DomainError("camera: point outside the distortion domain");
    return *d;
  }

  /// Inverse of distort by Newton iteration (10 iterations, 1e-8 px).
  Vec2 undistort(const Vec2& d) const {
    Vec2 u = d;
    for (int it = 0; it < 10; ++it) {
      Mat2 J;
      const auto f = try_distort(u, &J);
      if (!f) throw DomainError("camera: undistortion left the distortion domain");
      const Vec2 err = *f - d;
      if (err.norm() < 1e-8) return u;
      u -= J.inverse() * err;
    }
    const auto f = try_distort(u);
    if (!f || (*f - d).norm() > 1e-6) throw DomainError("camera: undistortion did not converge");
    return u;
  }

  /// Capture time of an undistorted pixel in row units relative to the middle
  /// row (t = 0 at y0). If jac is given it receives dt/du.
  std::optional<double> try_capture_time(const Vec2& u, Eigen::RowVector2d* jac = nullptr) const {
    Mat2 J;
    const auto d = try_distort(u, jac ? &J : nullptr);
    if (!d) return std::nullopt;
    if (jac) *jac = readout_sign_ * J.row(1);
    return readout_sign_ * (d->y() - y0_);
  }

  double capture_time(const Vec2& u) const {
    auto t = try_capture_time(u);
    if (!t) throw DomainError("camera: point outside the distortion domain");
    return *t;
  }

  /// Capture-time offset in seconds relative to the middle row.
  double capture_time_seconds(const Vec2& u) const { return capture_time(u) * row_time_td_; }

  /// Pinhole projection; nullopt if the point is behind the camera. If jac is
  /// given it receives du/dp.
  std::optional<Vec2> try_project(const Vec3& p, Mat23* jac = nullptr) const {
    if (!(p.z() > kMinDepth)) return std::nullopt;
    const double iz = 1.0 / p.z();
    if (jac) {
      (*jac) << fx_ * iz, 0.0, -fx_ * p.x() * iz * iz,
                0.0, fy_ * iz, -fy_ * p.y() * iz * iz;
    }
    return Vec2(fx_ * p.x() * iz + cx_, fy_ * p.y() * iz + cy_);
  }

  Vec2 project(const Vec3& p) const {
    auto u = try_project(p);
    if (!u) throw DomainError("camera: point behind the camera");
    return *u;
  }

  /// Bearing with unit z for an undistorted pixel.
  Vec3 ray(const Vec2& u) const { return {(u.x() - cx_) / fx_, (u.y() - cy_) / fy_, 1.0}; }

  Vec3 unproject(const Vec2& u, double inv_depth) const {
    if (!(inv_depth > 0.0)) throw DomainError("camera: inverse depth must be positive");
    return ray(u) / inv_depth;
  }

  Mat3 K() const {
    Mat3 k;
    k << fx_, 0, cx_, 0, fy_, cy_, 0, 0, 1;
    return k;
  }

 private:
  double fx_ = 1.0, fy_ = 1.0, cx_ = 0.0, cy_ = 0.0;
  RadTan dist_;
  int width_ = 1, height_ = 2;
  double y0_ = 0.5;
  double row_time_td_ = 0.0;
  int readout_sign_ = 1;
  double max_r2_ = 0.0;
};

// Calibration file: flat YAML map with exactly these keys.
inline constexpr std::array<const char*, 12> kCameraKeys = {
    "fx", "fy", "cx", "cy", "k1", "k2", "p1", "p2",
    "width", "height", "row_time_td", "readout_sign"};

inline CameraModel camera_from_yaml(const YAML::Node& node, const std::string& where) {
  if (!node.IsMap()) throw DataError(where + ": calibration must be a key/value map");
  const std::set<std::string> allowed(kCameraKeys.begin(), kCameraKeys.end());
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw DataError(where + ": unknown calibration key '" + key + "'");
  }
  auto get = [&](const char* key) {
    if (!node[key]) throw DataError(where + ": missing calibration key '" + std::string(key) + "'");
    try {
      return node[key].as<double>();
    } catch (const YAML::Exception&) {
      throw DataError(where + ": calibration key '" + std::string(key) + "' is not a number");
    }
  };
  auto get_int = [&](const char* key) {
    const double v = get(key);
    if (v != std::floor(v)) throw DataError(where + ": '" + std::string(key) + "' must be an integer");
    return static_cast<int>(v);
  };
  return CameraModel(get("fx"), get("fy"), get("cx"), get("cy"),
                     RadTan{get("k1"), get("k2"), get("p1"), get("p2")},
                     get_int("width"), get_int("height"), get("row_time_td"),
                     get_int("readout_sign"));
}

inline CameraModel load_camera(const std::filesystem::path& path) {
  YAML::Node node;
  try {
    node = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return camera_from_yaml(node, path.string());
}

inline std::string camera_to_yaml(const CameraModel& c) {
  std::ostringstream os;
  os << std::setprecision(17);
  os << "fx: " << c.fx() << "\nfy: " << c.fy() << "\ncx: " << c.cx() << "\ncy: " << c.cy()
     << "\nk1: " << c.distortion().k1 << "\nk2: " << c.distortion().k2
     << "\np1: " << c.distortion().p1 << "\np2: " << c.distortion().p2
     << "\nwidth: " << c.width() << "\nheight: " << c.height()
     << "\nrow_time_td: " << c.row_time_td() << "\nreadout_sign: " << c.readout_sign() << "\n";
  return os.str();
}

inline void save_camera(const std::filesystem::path& path, const CameraModel& c) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << camera_to_yaml(c);
}

}  // namespace rsvio
