#pragma once

// Frame chain and per-keyframe optimization variables.
//
//   W_m <-(s R_WmWf)- W_f -(T_CfWf)-> C_f -(s I)-> C_m <-(T_CmI)- I
//
// Camera poses are optimized in the free-scale world W_f; IMU poses in the
// metric world W_m are derived from them and the scale/gravity variable.

#include <cstdint>

#include "rsvio/camera.hpp"
#include "rsvio/errors.hpp"
#include "rsvio/lie.hpp"

namespace rsvio {

/// Bias layout: (accelerometer, gyroscope).
using Bias = Vec6;

inline Vec3 accel_bias(const Bias& b) { return b.head<3>(); }
inline Vec3 gyro_bias(const Bias& b) { return b.tail<3>(); }

struct KeyframeState {
  int64_t id = 0;
  double timestamp = 0.0;   ///< seconds; capture time of the middle row
  Pose3 pose;               ///< T_CfWf at the middle row (t = 0)
  Vec6 twist = Vec6::Zero();  ///< camera-frame twist per row unit, non-metric
  Vec3 velocity = Vec3::Zero();  ///< IMU velocity in W_m, m/s
  Bias bias = Bias::Zero();
  double aff_a = 0.0;       ///< affine brightness: I' = exp(a) I + b
  double aff_b = 0.0;
};

struct ScaleGravity {
  ScaledRot T_WmWf;

  double scale() const { return T_WmWf.scale; }
  const Rot3& rotation() const { return T_WmWf.rotation; }
};

struct Calibration {
  Pose3 T_CmI;
  CameraModel camera;
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);

  Calibration() = default;
  Calibration(const Pose3& t_cm_i, const CameraModel& cam, const Vec3& g = Vec3(0, 0, -9.81))
      : T_CmI(t_cm_i), camera(cam), gravity(g) {
    const double n = g.norm();
    if (n < 9.5 || n > 10.1) throw DataError("calibration: gravity magnitude outside [9.5, 10.1]");
  }
};

/// T_WmI for a keyframe, composed along the frame chain.
inline Pose3 imu_pose_metric(const KeyframeState& kf, const ScaleGravity& sg, const Calibration& calib) {
  const double s = sg.scale();
  const Mat3& R = sg.rotation().matrix();
  const Mat3 Rc_t = kf.pose.rotation().matrix().transpose();
  const Mat3 rot = R * Rc_t * calib.T_CmI.rotation().matrix();
  const Vec3 trans = R * Rc_t * (calib.T_CmI.translation() - s * kf.pose.translation());
  return Pose3(rot, trans);
}

/// R_IWm = R_CmI^-1 R_CmCf R_CfWf R_WmWf^-1 with R_CmCf = I.
inline Rot3 rotation_imu_from_world(const KeyframeState& kf, const ScaleGravity& sg,
                                    const Calibration& calib) {
  return Rot3(calib.T_CmI.rotation().matrix().transpose() * kf.pose.rotation().matrix() *
              sg.rotation().matrix().transpose());
}

/// Inverse of imu_pose_metric: the non-metric camera pose T_CfWf that yields
/// the given metric IMU pose under the given scale/gravity.
inline Pose3 camera_pose_from_metric(const Pose3& T_WmI, const ScaleGravity& sg,
                                     const Calibration& calib) {
  const Mat3& R = sg.rotation().matrix();
  const Mat3 Rc = calib.T_CmI.rotation().matrix() * T_WmI.rotation().matrix().transpose() * R;
  const Vec3 tc = (calib.T_CmI.translation() - Rc * R.transpose() * T_WmI.translation()) / sg.scale();
  return Pose3(Rc, tc);
}

/// Derivatives of T_WmI = (R_i, p_i) with respect to the optimization
/// variables that determine it:
///   pose: T_CfWf <- exp(d) T_CfWf with d = (rho, phi)
///   log_s: s <- s exp(e)
///   theta: R_WmWf <- Exp(theta) R_WmWf
/// Rotation derivatives are expressed as right perturbations of R_i
/// (R_i <- R_i Exp(dtheta_right)).
struct MetricPoseJacobian {
  Mat3 rot_phi;    ///< d(dtheta_right)/d phi
  Mat3 rot_theta;  ///< d(dtheta_right)/d theta
  Mat3 pos_rho;
  Mat3 pos_phi;
  Vec3 pos_log_s;
  Mat3 pos_theta;
};

inline MetricPoseJacobian imu_pose_metric_jacobian(const KeyframeState& kf, const ScaleGravity& sg,
                                                   const Calibration& calib) {
  const double s = sg.scale();
  const Mat3& R = sg.rotation().matrix();
  const Mat3 RRc_t = R * kf.pose.rotation().matrix().transpose();
  const Mat3& Rci = calib.T_CmI.rotation().matrix();
  const Pose3 Twi = imu_pose_metric(kf, sg, calib);
  MetricPoseJacobian j;
  j.rot_phi = -Rci.transpose();
  j.rot_theta = Twi.rotation().matrix().transpose();
  j.pos_rho = -s * RRc_t;
  j.pos_phi = RRc_t * hat(calib.T_CmI.translation());
  j.pos_log_s = -s * RRc_t * kf.pose.translation();
  j.pos_theta = -hat(Twi.translation());
  return j;
}

}  // namespace rsvio
