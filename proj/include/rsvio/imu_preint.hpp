#pragma once

// On-manifold IMU preintegration between keyframes with first-order bias
// correction, state prediction and residuals.

#include <Eigen/Dense>

#include <algorithm>
#include <span>
#include <vector>

#include "rsvio/errors.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/problem.hpp"
#include "rsvio/state.hpp"

namespace rsvio {

using Mat9 = Eigen::Matrix<double, 9, 9>;
using Mat15 = Eigen::Matrix<double, 15, 15>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Vec15 = Eigen::Matrix<double, 15, 1>;

struct ImuSample {
  double timestamp = 0.0;  ///< seconds
  Vec3 gyro = Vec3::Zero();   ///< rad/s
  Vec3 accel = Vec3::Zero();  ///< m/s^2
};

/// Continuous-time noise densities and bias random walks.
/// Defaults are typical datasheet values for a BMI160-class MEMS IMU.
struct ImuNoise {
  double gyro_noise = 1.6e-4;         ///< rad/s/sqrt(Hz)
  double accel_noise = 2.0e-3;        ///< m/s^2/sqrt(Hz)
  double gyro_random_walk = 2.0e-5;   ///< rad/s^2/sqrt(Hz)
  double accel_random_walk = 3.0e-4;  ///< m/s^3/sqrt(Hz)
};

struct PreintegrationOptions {
  /// Include the 1/2 dR (a - b_a) dt^2 term in the position update.
  bool half_dt2_term = true;
  /// Accumulate rotation as dR <- dR exp(w dt); false replaces dR each step.
  bool accumulate_rotation = true;
};

/// Bias deviation beyond which first-order correction is not trusted.
inline constexpr double kReintegrateGyroBias = 1e-2;   // rad/s
inline constexpr double kReintegrateAccelBias = 1e-1;  // m/s^2

struct BiasCorrectedDeltas {
  Rot3 dR;
  Vec3 dv;
  Vec3 dp;
};

class Preintegrated {
 public:
  Preintegrated() = default;
  explicit Preintegrated(const Bias& bias_lin, const ImuNoise& noise = {},
                         const PreintegrationOptions& opt = {})
      : bias_lin_(bias_lin), noise_(noise), opt_(opt) {}

  /// Adds one zero-order-hold interval: sample held constant for dt seconds.
  void integrate(const ImuSample& s, double dt) {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw DomainError("preintegration: dt must be positive");
    if (!s.gyro.allFinite() || !s.accel.allFinite())
      throw DomainError("preintegration: non-finite IMU sample");
    steps_.push_back({s, dt});
    step(s, dt);
  }

  /// Re-runs the stored samples with a new linearization bias.
  void reintegrate(const Bias& bias_lin) {
    const auto steps = std::move(steps_);
    *this = Preintegrated(bias_lin, noise_, opt_);
    for (const auto& st : steps) integrate(st.sample, st.dt);
  }

  const Rot3& delta_R() const { return dR_; }
  const Vec3& delta_v() const { return dv_; }
  const Vec3& delta_p() const { return dp_; }
  double dt() const { return dt_; }
  const Bias& bias_lin() const { return bias_lin_; }
  const Mat9& covariance() const { return cov_; }
  const ImuNoise& noise() const { return noise_; }
  const Mat3& J_R_bg() const { return JR_bg_; }
  const Mat3& J_v_ba() const { return Jv_ba_; }
  const Mat3& J_v_bg() const { return Jv_bg_; }
  const Mat3& J_p_ba() const { return Jp_ba_; }
  const Mat3& J_p_bg() const { return Jp_bg_; }
  size_t num_steps() const { return steps_.size(); }

  bool requires_reintegration(const Bias& b) const {
    const Bias d = b - bias_lin_;
    return gyro_bias(d).norm() > kReintegrateGyroBias ||
           accel_bias(d).norm() > kReintegrateAccelBias;
  }

  /// First-order bias-corrected deltas. Only accurate while
  /// requires_reintegration(b) is false.
  BiasCorrectedDeltas correct_bias(const Bias& b) const {
    const Bias d = b - bias_lin_;
    const Vec3 dba = accel_bias(d), dbg = gyro_bias(d);
    return {dR_ * Rot3::exp(JR_bg_ * dbg), dv_ + Jv_ba_ * dba + Jv_bg_ * dbg,
            dp_ + Jp_ba_ * dba + Jp_bg_ * dbg};
  }

  /// 15x15 information matrix for (rotation, velocity, position, bias)
  /// residuals; bias block from the random walk over dt.
  Mat15 information() const {
    Mat15 cov = Mat15::Zero();
    cov.topLeftCorner<9, 9>() = cov_;
    cov.block<3, 3>(9, 9) = Mat3::Identity() * noise_.accel_random_walk * noise_.accel_random_walk * dt_;
    cov.block<3, 3>(12, 12) = Mat3::Identity() * noise_.gyro_random_walk * noise_.gyro_random_walk * dt_;
    cov = 0.5 * (cov + cov.transpose());
    Eigen::LDLT<Mat15> ldlt(cov);
    if (ldlt.info() != Eigen::Success || ldlt.vectorD().minCoeff() <= 1e-12) {
      cov.diagonal().array() += 1e-12;
    }
    return cov.inverse();
  }

 private:
  struct Step {
    ImuSample sample;
    double dt;
  };

  void step(const ImuSample& s, double dt) {
    const Vec3 a = s.accel - accel_bias(bias_lin_);
    const Vec3 w = s.gyro - gyro_bias(bias_lin_);
    const Mat3& R = dR_.matrix();
    const Mat3 Ra = R * hat(a);
    const double h = opt_.half_dt2_term ? 0.5 : 0.0;
    const Rot3 dRk = Rot3::exp(w * dt);
    const Mat3 Jr = so3_right_jacobian(w * dt);

    // Covariance, ordered (rotation, velocity, position).
    Mat9 A = Mat9::Identity();
    A.block<3, 3>(0, 0) = opt_.accumulate_rotation ? Mat3(dRk.matrix().transpose()) : Mat3::Zero();
    A.block<3, 3>(3, 0) = -Ra * dt;
    A.block<3, 3>(6, 0) = -h * Ra * dt * dt;
    A.block<3, 3>(6, 3) = Mat3::Identity() * dt;
    Eigen::Matrix<double, 9, 3> Bg = Eigen::Matrix<double, 9, 3>::Zero();
    Eigen::Matrix<double, 9, 3> Ba = Eigen::Matrix<double, 9, 3>::Zero();
    Bg.block<3, 3>(0, 0) = Jr * dt;
    Ba.block<3, 3>(3, 0) = R * dt;
    Ba.block<3, 3>(6, 0) = h * R * dt * dt;
    const double qg = noise_.gyro_noise * noise_.gyro_noise / dt;
    const double qa = noise_.accel_noise * noise_.accel_noise / dt;
    cov_ = A * cov_ * A.transpose() + qg * Bg * Bg.transpose() + qa * Ba * Ba.transpose();

    // Bias Jacobians use the pre-update rotation.
    Jp_ba_ += Jv_ba_ * dt - h * R * dt * dt;
    Jp_bg_ += Jv_bg_ * dt - h * Ra * JR_bg_ * dt * dt;
    Jv_ba_ -= R * dt;
    Jv_bg_ -= Ra * JR_bg_ * dt;
    if (opt_.accumulate_rotation) {
      JR_bg_ = dRk.matrix().transpose() * JR_bg_ - Jr * dt;
    } else {
      JR_bg_ = -Jr * dt;
    }

    dp_ += dv_ * dt + h * R * a * dt * dt;
    dv_ += R * a * dt;
    dR_ = opt_.accumulate_rotation ? dR_ * dRk : dRk;
    dt_ += dt;
  }

  Bias bias_lin_ = Bias::Zero();
  ImuNoise noise_;
  PreintegrationOptions opt_;
  Rot3 dR_;
  Vec3 dv_ = Vec3::Zero();
  Vec3 dp_ = Vec3::Zero();
  double dt_ = 0.0;
  Mat9 cov_ = Mat9::Zero();
  Mat3 JR_bg_ = Mat3::Zero();
  Mat3 Jv_ba_ = Mat3::Zero();
  Mat3 Jv_bg_ = Mat3::Zero();
  Mat3 Jp_ba_ = Mat3::Zero();
  Mat3 Jp_bg_ = Mat3::Zero();
  std::vector<Step> steps_;
};

/// Preintegrates a sorted sample stream over [t_begin, t_end]. Each sample is
/// held constant until the next sample's timestamp. Throws DataError if the
/// stream does not cover the interval.
inline Preintegrated preintegrate(std::span<const ImuSample> samples, double t_begin, double t_end,
                                  const Bias& bias_lin, const ImuNoise& noise = {},
                                  const PreintegrationOptions& opt = {}) {
  if (!(t_end >= t_begin)) throw DataError("preintegration: interval end before begin");
  Preintegrated pre(bias_lin, noise, opt);
  if (samples.empty() || samples.front().timestamp > t_begin + 1e-12 ||
      samples.back().timestamp < t_end - 1e-12) {
    throw DataError("preintegration: IMU stream does not cover the interval");
  }
  for (size_t k = 0; k < samples.size(); ++k) {
    const double a = std::max(samples[k].timestamp, t_begin);
    const double b = (k + 1 < samples.size()) ? std::min(samples[k + 1].timestamp, t_end) : t_end;
    if (b - a > 1e-12) pre.integrate(samples[k], b - a);
    if (k + 1 < samples.size() && samples[k + 1].timestamp >= t_end) break;
  }
  return pre;
}

/// Metric IMU state as used by the IMU factor.
struct MetricImuState {
  Rot3 R;
  Vec3 p = Vec3::Zero();
  Vec3 v = Vec3::Zero();
  Bias b = Bias::Zero();
};

struct PredictedState {
  Rot3 R;
  Vec3 p;
  Vec3 v;
};

inline PredictedState predict_state(const MetricImuState& si, const Preintegrated& pre, const Vec3& g) {
  const auto d = pre.correct_bias(si.b);
  const double dt = pre.dt();
  return {si.R * d.dR, si.p + dt * si.v + 0.5 * dt * dt * g + si.R.matrix() * d.dp,
          si.v + dt * g + si.R.matrix() * d.dv};
}

/// Residual and Jacobians of one IMU factor. Jacobian columns per state are
/// (dtheta_right, p, v, b_a, b_g).
struct ImuResidual {
  Vec15 r;
  Mat15 J_i;
  Mat15 J_j;
};

inline ImuResidual imu_residuals(const MetricImuState& si, const MetricImuState& sj,
                                 const Preintegrated& pre, const Vec3& g) {
  const double dt = pre.dt();
  const Bias db = si.b - pre.bias_lin();
  const Vec3 dbg = gyro_bias(db);
  const auto d = pre.correct_bias(si.b);
  const Mat3 Ri_t = si.R.matrix().transpose();

  ImuResidual out;
  out.J_i.setZero();
  out.J_j.setZero();
  const Rot3 err = d.dR.inverse() * si.R.inverse() * sj.R;
  const Vec3 rR = err.log();
  const Vec3 dv_world = sj.v - si.v - g * dt;
  const Vec3 dp_world = sj.p - si.p - si.v * dt - 0.5 * g * dt * dt;
  out.r.segment<3>(0) = rR;
  out.r.segment<3>(3) = Ri_t * dv_world - d.dv;
  out.r.segment<3>(6) = Ri_t * dp_world - d.dp;
  out.r.segment<6>(9) = sj.b - si.b;

  const Mat3 JrInv = so3_right_jacobian_inverse(rR);
  // rotation residual
  out.J_j.block<3, 3>(0, 0) = JrInv;
  out.J_i.block<3, 3>(0, 0) = -JrInv * sj.R.matrix().transpose() * si.R.matrix();
  out.J_i.block<3, 3>(0, 12) =
      -JrInv * err.matrix().transpose() * so3_right_jacobian(pre.J_R_bg() * dbg) * pre.J_R_bg();
  // velocity residual
  out.J_i.block<3, 3>(3, 0) = hat(Ri_t * dv_world);
  out.J_i.block<3, 3>(3, 6) = -Ri_t;
  out.J_j.block<3, 3>(3, 6) = Ri_t;
  out.J_i.block<3, 3>(3, 9) = -pre.J_v_ba();
  out.J_i.block<3, 3>(3, 12) = -pre.J_v_bg();
  // position residual
  out.J_i.block<3, 3>(6, 0) = hat(Ri_t * dp_world);
  out.J_i.block<3, 3>(6, 3) = -Ri_t;
  out.J_j.block<3, 3>(6, 3) = Ri_t;
  out.J_i.block<3, 3>(6, 6) = -Ri_t * dt;
  out.J_i.block<3, 3>(6, 9) = -pre.J_p_ba();
  out.J_i.block<3, 3>(6, 12) = -pre.J_p_bg();
  // bias residual
  out.J_i.block<6, 6>(9, 9) = -Eigen::Matrix<double, 6, 6>::Identity();
  out.J_j.block<6, 6>(9, 9) = Eigen::Matrix<double, 6, 6>::Identity();
  return out;
}

/// Linear interpolation of the gyroscope at time t.
inline Vec3 interpolate_gyro(std::span<const ImuSample> samples, double t) {
  if (samples.empty() || t < samples.front().timestamp - 1e-9 || t > samples.back().timestamp + 1e-9)
    throw DataError("gyro interpolation: no IMU coverage at requested time");
  auto it = std::lower_bound(samples.begin(), samples.end(), t,
                             [](const ImuSample& s, double v) { return s.timestamp < v; });
  if (it == samples.begin()) return it->gyro;
  if (it == samples.end()) return samples.back().gyro;
  const auto& b = *it;
  const auto& a = *(it - 1);
  const double span = b.timestamp - a.timestamp;
  const double w = span > 0 ? (t - a.timestamp) / span : 0.0;
  return (1.0 - w) * a.gyro + w * b.gyro;
}

/// IMU factor between two keyframes of the window.
struct ImuFactor {
  int64_t from_id = 0;
  int64_t to_id = 0;
  Preintegrated preint;
};

inline MetricImuState metric_state(const KeyframeState& kf, const ScaleGravity& sg, const Calibration& calib) {
  const Pose3 T = imu_pose_metric(kf, sg, calib);
  return {T.rotation(), T.translation(), kf.velocity, kf.bias};
}

/// Writes the columns of a metric-state Jacobian (dtheta_right, p, v, b) into
/// the window Jacobian through the metric/non-metric conversion.
inline void chain_metric_jacobian(const Eigen::Ref<const Eigen::MatrixXd>& J, const KeyframeState& kf,
                                  const ScaleGravity& sg, const Calibration& calib, int slot,
                                  Eigen::Ref<Eigen::MatrixXd> out) {
  using namespace layout;
  const auto m = imu_pose_metric_jacobian(kf, sg, calib);
  const int o = frame_offset(slot);
  const auto Jr = J.middleCols<3>(0);
  const auto Jp = J.middleCols<3>(3);
  out.middleCols<3>(o + kPose) += Jp * m.pos_rho;
  out.middleCols<3>(o + kPose + 3) += Jr * m.rot_phi + Jp * m.pos_phi;
  out.col(kLogScale) += Jp * m.pos_log_s;
  out.middleCols<3>(kGravity) += Jr * m.rot_theta + Jp * m.pos_theta;
  out.middleCols<3>(o + kVelocity) += J.middleCols<3>(6);
  out.middleCols<6>(o + kBias) += J.middleCols<6>(9);
}

/// Linearizes one IMU factor over the full window vector, weighted by
/// alpha times the preintegration information.
inline LinearFactor linearize_imu_factor(const WindowState& w, const ImuFactor& f, const Calibration& calib,
                                         double alpha) {
  const int si = w.slot_of(f.from_id), sj = w.slot_of(f.to_id);
  if (si < 0 || sj < 0) throw DomainError("IMU factor references a keyframe outside the window");
  const auto& ki = w.frames[si];
  const auto& kj = w.frames[sj];
  const auto res = imu_residuals(metric_state(ki, w.sg, calib), metric_state(kj, w.sg, calib), f.preint,
                                 calib.gravity);
  LinearFactor out;
  out.r = res.r;
  out.W = alpha * f.preint.information();
  out.J = Eigen::MatrixXd::Zero(15, w.dim());
  chain_metric_jacobian(res.J_i, ki, w.sg, calib, si, out.J);
  chain_metric_jacobian(res.J_j, kj, w.sg, calib, sj, out.J);
  return out;
}

/// alpha * sum r^T Sigma^-1 r over the IMU factors, accumulated into sys.
inline void imu_energy(const WindowState& w, std::span<const ImuFactor> factors, const Calibration& calib,
                       double alpha, DenseSystem& sys) {
  for (const auto& f : factors) sys.add_factor(linearize_imu_factor(w, f, calib, alpha));
}

}  // namespace rsvio
