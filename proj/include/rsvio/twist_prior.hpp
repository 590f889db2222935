#pragma once

// Coupling energy between the per-keyframe camera twist and the IMU:
// velocity and gyro give a metric IMU twist, the adjoint moves it into the
// camera frame, and division by the scale and multiplication by the row time
// turn it into the non-metric per-row twist the photometric model uses.

#include <Eigen/Dense>

#include <span>
#include <vector>

#include "rsvio/errors.hpp"
#include "rsvio/imu_preint.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/problem.hpp"
#include "rsvio/state.hpp"

namespace rsvio {

/// Body-frame IMU twist (R_IWm v, omega - b_g), metric, per second.
inline Vec6 imu_twist(const KeyframeState& kf, const ScaleGravity& sg, const Calibration& calib,
                      const Vec3& omega) {
  Vec6 xi;
  xi.head<3>() = rotation_imu_from_world(kf, sg, calib) * kf.velocity;
  xi.tail<3>() = omega - gyro_bias(kf.bias);
  return xi;
}

/// Camera-frame twist of T_CmWm(t) = exp(xi_cam t) T_CmWm for an IMU moving
/// as T_WmI(t) = T_WmI exp(xi_imu t).
inline Vec6 camera_twist(const Vec6& xi_imu, const Calibration& calib) {
  return -adjoint(calib.T_CmI) * xi_imu;
}

/// Metric per-second camera twist to non-metric per-row twist.
inline Vec6 prior_twist(const Vec6& xi_cam, double scale, double row_time) {
  if (!(scale > 0.0)) throw DomainError("prior_twist: scale must be positive");
  Vec6 xi;
  xi.head<3>() = row_time * xi_cam.head<3>() / scale;
  xi.tail<3>() = row_time * xi_cam.tail<3>();
  return xi;
}

/// Diagonal weights of the twist energy for residuals expressed per second:
/// the weight applied to the per-row residual is w / t_d^2.
struct TwistWeights {
  double translation = 1e2;
  double rotation = 1e2;
};

struct TwistPriorTerm {
  int64_t keyframe_id = 0;
  Vec3 omega = Vec3::Zero();  ///< gyro at the keyframe mid-row time, rad/s
};

/// Weight matrix on the per-row residual.
inline Mat6 twist_weight_matrix(const TwistWeights& w, double row_time, double beta) {
  Vec6 d;
  d << Vec3::Constant(w.translation), Vec3::Constant(w.rotation);
  return Mat6(d.asDiagonal()) * (beta / (row_time * row_time));
}

/// Linearizes r = prior_twist - twist for one keyframe over the window vector.
inline LinearFactor linearize_twist_factor(const WindowState& w, const TwistPriorTerm& term,
                                           const Calibration& calib, const TwistWeights& weights,
                                           double beta) {
  using namespace layout;
  const int slot = w.slot_of(term.keyframe_id);
  if (slot < 0) throw DomainError("twist prior references a keyframe outside the window");
  const double td = calib.camera.row_time_td();
  if (!(td > 0.0)) throw DomainError("twist prior requires a rolling-shutter camera");
  const auto& kf = w.frames[slot];
  const double s = w.sg.scale();
  const Vec6 prior = prior_twist(camera_twist(imu_twist(kf, w.sg, calib, term.omega), calib), s, td);

  const Mat3& Rci = calib.T_CmI.rotation().matrix();
  const Mat3 t_hat = hat(calib.T_CmI.translation());
  const Mat3 RcRt = kf.pose.rotation().matrix() * w.sg.rotation().matrix().transpose();
  const Vec3 v_c = RcRt * kf.velocity;

  LinearFactor f;
  f.r = prior - kf.twist;
  f.W = twist_weight_matrix(weights, td, beta);
  f.J = Eigen::MatrixXd::Zero(6, w.dim());
  const int o = frame_offset(slot);
  f.J.middleCols<6>(o + kTwist) = -Mat6::Identity();
  f.J.block<3, 3>(0, o + kVelocity) = -(td / s) * RcRt;
  f.J.block<3, 3>(0, o + kBiasGyro) = (td / s) * t_hat * Rci;
  f.J.block<3, 3>(3, o + kBiasGyro) = td * Rci;
  f.J.block<3, 3>(0, o + kPose + 3) = (td / s) * hat(v_c);
  f.J.block<3, 1>(0, kLogScale) = -prior.head<3>();
  f.J.block<3, 3>(0, kGravity) = -(td / s) * RcRt * hat(kf.velocity);
  return f;
}

/// beta * sum (xi_prior - xi)^T W (xi_prior - xi) over the given keyframes.
inline void twist_energy(const WindowState& w, std::span<const TwistPriorTerm> terms, const Calibration& calib,
                         const TwistWeights& weights, double beta, DenseSystem& sys) {
  for (const auto& t : terms) sys.add_factor(linearize_twist_factor(w, t, calib, weights, beta));
}

}  // namespace rsvio
