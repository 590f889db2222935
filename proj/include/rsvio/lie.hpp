#pragma once

// Lie group arithmetic for SO(3), SE(3) and the scale-plus-rotation group.
//
// Twist convention: 6-vectors are (translation, rotation). All adjoints and
// Jacobians in this library follow that ordering.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace rsvio {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;
using Mat6 = Eigen::Matrix<double, 6, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat36 = Eigen::Matrix<double, 3, 6>;

/// Angles below this are treated as zero rotation by exp/log branch selection.
inline constexpr double kSmallAngle = 1e-8;

/// Below this angle the Jacobian coefficient functions switch to their Taylor
/// series; the closed forms lose digits to cancellation long before 1e-8.
inline constexpr double kSeriesAngle = 1e-2;

inline Mat3 hat(const Vec3& w) {
  Mat3 m;
  m << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return m;
}

inline Vec3 vee(const Mat3& m) { return {m(2, 1), m(0, 2), m(1, 0)}; }

inline Mat4 hat6(const Vec6& xi) {
  Mat4 m = Mat4::Zero();
  m.topLeftCorner<3, 3>() = hat(xi.tail<3>());
  m.topRightCorner<3, 1>() = xi.head<3>();
  return m;
}

inline Vec6 vee6(const Mat4& m) {
  Vec6 xi;
  xi.head<3>() = m.topRightCorner<3, 1>();
  xi.tail<3>() = vee(m.topLeftCorner<3, 3>());
  return xi;
}

namespace detail {

// sin(t)/t
inline double coeff_a(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 1.0 - t2 / 6.0 + t2 * t2 / 120.0;
  }
  return std::sin(t) / t;
}

// (1 - cos t)/t^2
inline double coeff_b(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
  }
  const double s = std::sin(0.5 * t);
  return 2.0 * s * s / (t * t);
}

// (t - sin t)/t^3
inline double coeff_c(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  }
  return (t - std::sin(t)) / (t * t * t);
}

// (1 - a/(2b))/t^2, the W^2 coefficient of the inverse SO(3) Jacobians.
inline double coeff_d(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  }
  return (1.0 - coeff_a(t) / (2.0 * coeff_b(t))) / (t * t);
}

// (t^2 + 2cos t - 2)/(2 t^4)
inline double coeff_e(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0;
  }
  const double t2 = t * t;
  return (t2 + 2.0 * std::cos(t) - 2.0) / (2.0 * t2 * t2);
}

// (2t - 3 sin t + t cos t)/(2 t^5)
inline double coeff_f(double t) {
  if (t < kSeriesAngle) {
    const double t2 = t * t;
    return 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0;
  }
  const double t2 = t * t;
  return (2.0 * t - 3.0 * std::sin(t) + t * std::cos(t)) / (2.0 * t2 * t2 * t);
}

}  // namespace detail

/// Rotation matrix in SO(3).
class Rot3 {
 public:
  Rot3() : m_(Mat3::Identity()) {}
  explicit Rot3(const Mat3& m) : m_(m) {}

  static Rot3 identity() { return Rot3(); }

  static Rot3 exp(const Vec3& w) {
    const double t = w.norm();
    const Mat3 W = hat(w);
    if (t < kSmallAngle) {
      return Rot3(Mat3::Identity() + W + 0.5 * W * W);
    }
    return Rot3(Mat3::Identity() + detail::coeff_a(t) * W +
                detail::coeff_b(t) * W * W);
  }

  static Rot3 from_quaternion(const Eigen::Quaterniond& q) {
    return Rot3(q.normalized().toRotationMatrix());
  }

  /// Rotation vector with norm in [0, pi]. At exactly pi the axis sign is
  /// chosen so that its largest-magnitude component is positive.
  Vec3 log() const {
    const Vec3 axial = 0.5 * vee(m_ - m_.transpose());
    const double s = axial.norm();
    const double c = std::clamp(0.5 * (m_.trace() - 1.0), -1.0, 1.0);
    const double t = std::atan2(s, c);
    if (t < kSmallAngle) {
      // R ~ I + W: the antisymmetric part is the rotation vector to 2nd order.
      return axial;
    }
    if (c > -0.5) {
      return (t / s) * axial;
    }
    // Near pi the antisymmetric part vanishes; recover the axis from the
    // symmetric part, which equals cos(t) I + (1 - cos t) a a^T.
    const Mat3 aat = (0.5 * (m_ + m_.transpose()) - c * Mat3::Identity()) / (1.0 - c);
    int k = 0;
    aat.diagonal().maxCoeff(&k);
    Vec3 a = aat.col(k) / std::sqrt(std::max(aat(k, k), 0.0));
    a.normalize();
    if (s > 0.0 && a.dot(axial) < 0.0) a = -a;
    return t * a;
  }

  Rot3 inverse() const { return Rot3(m_.transpose()); }
  Rot3 operator*(const Rot3& o) const { return Rot3(m_ * o.m_); }
  Vec3 operator*(const Vec3& p) const { return m_ * p; }

  const Mat3& matrix() const { return m_; }
  Eigen::Quaterniond quaternion() const { return Eigen::Quaterniond(m_).normalized(); }

 private:
  Mat3 m_;
};

/// Rigid transform in SE(3); maps points of frame A into frame B (T_BA).
class Pose3 {
 public:
  Pose3() : r_(), t_(Vec3::Zero()) {}
  Pose3(const Rot3& r, const Vec3& t) : r_(r), t_(t) {}
  Pose3(const Mat3& r, const Vec3& t) : r_(r), t_(t) {}

  static Pose3 identity() { return Pose3(); }

  static Pose3 from_matrix(const Mat4& m) {
    return Pose3(Mat3(m.topLeftCorner<3, 3>()), Vec3(m.topRightCorner<3, 1>()));
  }

  const Rot3& rotation() const { return r_; }
  const Vec3& translation() const { return t_; }

  Pose3 inverse() const {
    const Mat3 rt = r_.matrix().transpose();
    return Pose3(rt, -rt * t_);
  }

  Pose3 operator*(const Pose3& o) const {
    return Pose3(r_ * o.r_, r_.matrix() * o.t_ + t_);
  }

  Vec3 operator*(const Vec3& p) const { return r_.matrix() * p + t_; }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = r_.matrix();
    m.topRightCorner<3, 1>() = t_;
    return m;
  }

 private:
  Rot3 r_;
  Vec3 t_;
};

/// Left Jacobian of SO(3); also the V matrix of the SE(3) exponential.
inline Mat3 so3_left_jacobian(const Vec3& w) {
  const double t = w.norm();
  const Mat3 W = hat(w);
  return Mat3::Identity() + detail::coeff_b(t) * W + detail::coeff_c(t) * W * W;
}

inline Mat3 so3_right_jacobian(const Vec3& w) { return so3_left_jacobian(-w); }

inline Mat3 so3_left_jacobian_inverse(const Vec3& w) {
  const double t = w.norm();
  const Mat3 W = hat(w);
  return Mat3::Identity() - 0.5 * W + detail::coeff_d(t) * W * W;
}

inline Mat3 so3_right_jacobian_inverse(const Vec3& w) {
  return so3_left_jacobian_inverse(-w);
}

/// exp(hat(xi) * t) in closed form.
inline Pose3 exp_se3(const Vec6& xi, double t = 1.0) {
  const Vec3 rho = xi.head<3>() * t;
  const Vec3 phi = xi.tail<3>() * t;
  return Pose3(Rot3::exp(phi), so3_left_jacobian(phi) * rho);
}

inline Vec6 log_se3(const Pose3& T) {
  const Vec3 phi = T.rotation().log();
  Vec6 xi;
  xi.head<3>() = so3_left_jacobian_inverse(phi) * T.translation();
  xi.tail<3>() = phi;
  return xi;
}

/// Adj(T) with T exp(d) = exp(Adj(T) d) T.
inline Mat6 adjoint(const Pose3& T) {
  const Mat3& R = T.rotation().matrix();
  Mat6 a = Mat6::Zero();
  a.topLeftCorner<3, 3>() = R;
  a.topRightCorner<3, 3>() = hat(T.translation()) * R;
  a.bottomRightCorner<3, 3>() = R;
  return a;
}

/// Left Jacobian of SE(3): exp(xi + e) ~ exp(J(xi) e) exp(xi).
inline Mat6 se3_left_jacobian(const Vec6& xi) {
  const Vec3 rho = xi.head<3>();
  const Vec3 phi = xi.tail<3>();
  const double t = phi.norm();
  const Mat3 P = hat(phi);
  const Mat3 Rh = hat(rho);
  const Mat3 PR = P * Rh;
  const Mat3 RP = Rh * P;
  const Mat3 PRP = PR * P;
  const Mat3 Q = 0.5 * Rh + detail::coeff_c(t) * (PR + RP + PRP) +
                 detail::coeff_e(t) * (P * PR + RP * P - 3.0 * PRP) +
                 detail::coeff_f(t) * (PRP * P + P * PRP);
  Mat6 j = Mat6::Zero();
  const Mat3 jl = so3_left_jacobian(phi);
  j.topLeftCorner<3, 3>() = jl;
  j.topRightCorner<3, 3>() = Q;
  j.bottomRightCorner<3, 3>() = jl;
  return j;
}

/// Element of R+ x SO(3), acting on points as s * R * p.
struct ScaledRot {
  double scale = 1.0;
  Rot3 rotation;

  ScaledRot() = default;
  ScaledRot(double s, const Rot3& r) : scale(s), rotation(r) {
    if (!(s > 0.0)) throw std::invalid_argument("ScaledRot: scale must be positive");
  }

  Vec3 operator*(const Vec3& p) const { return scale * (rotation.matrix() * p); }

  ScaledRot inverse() const { return ScaledRot(1.0 / scale, rotation.inverse()); }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = scale * rotation.matrix();
    return m;
  }
};

inline Vec3 apply_scaled_rot(const ScaledRot& s, const Vec3& p) { return s * p; }

/// Rotation about a unit axis by angle (radians).
inline Rot3 rot_axis(const Vec3& axis, double angle) {
  return Rot3::exp(axis.normalized() * angle);
}

inline Rot3 rot_z(double angle) { return Rot3::exp(Vec3(0, 0, angle)); }

}  // namespace rsvio
