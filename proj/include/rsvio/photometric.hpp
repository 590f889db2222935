#pragma once

// Rolling-shutter photometric residuals. A point hosted in keyframe i is seen
// by the host at its own capture time t_h and by target j at the time t* that
// solves the rolling-shutter constraint t* = capture_time(pi(T_j(t*) X)).
// Jacobians go through t* by implicit differentiation.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "rsvio/camera.hpp"
#include "rsvio/image.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/parallel.hpp"
#include "rsvio/problem.hpp"
#include "rsvio/state.hpp"

namespace rsvio {

inline constexpr int kPatternSize = 8;
inline constexpr std::array<std::array<int, 2>, kPatternSize> kPattern = {
    {{0, -2}, {-1, -1}, {1, -1}, {-2, 0}, {0, 0}, {2, 0}, {-1, 1}, {0, 2}}};
inline constexpr int kPatternRadius = 2;

using PatternVec = Eigen::Matrix<double, kPatternSize, 1>;
using PatternJac = Eigen::Matrix<double, kPatternSize, layout::kPhoto>;

struct PhotometricOptions {
  double huber = 9.0;
  /// Gradient-dependent weight c^2 / (c^2 + |grad I|^2).
  double gradient_c2 = 2500.0;
  int rs_max_iterations = 5;
  double rs_tolerance = 1e-3;  ///< rows
  /// Observations above this weighted energy are flagged as outliers.
  double outlier_energy = std::numeric_limits<double>::infinity();
};

enum class ObsStatus { Active, Outlier, OutOfBounds };

struct TrackedPoint {
  int64_t host_id = 0;
  Vec2 pixel = Vec2::Zero();  ///< undistorted host pixel
  double inv_depth = 1.0;
  double host_time = 0.0;     ///< rows; capture time of the host pixel
  PatternVec host_values = PatternVec::Zero();
  /// Observations excluded from the energy, by target keyframe id.
  std::vector<std::pair<int64_t, ObsStatus>> status;

  ObsStatus status_for(int64_t target) const {
    for (const auto& [id, s] : status)
      if (id == target) return s;
    return ObsStatus::Active;
  }

  void set_status(int64_t target, ObsStatus s) {
    for (auto& [id, old] : status)
      if (id == target) {
        old = s;
        return;
      }
    status.emplace_back(target, s);
  }
};

/// T_i(t) = exp(xi_i t) T_i^0.
inline Pose3 pose_at_time(const KeyframeState& kf, double t) { return exp_se3(kf.twist, t) * kf.pose; }

/// Builds a point on the host image. Host intensities are taken at integer
/// pattern offsets from a pixel with integer coordinates.
template <SampledImage Img>
std::optional<TrackedPoint> make_tracked_point(int64_t host_id, const Vec2& pixel, double inv_depth,
                                               const Img& host_image, const CameraModel& cam, bool rs_active) {
  if (!(inv_depth > 0.0)) return std::nullopt;
  TrackedPoint p;
  p.host_id = host_id;
  p.pixel = pixel;
  p.inv_depth = inv_depth;
  if (rs_active) {
    const auto t = cam.try_capture_time(pixel);
    if (!t) return std::nullopt;
    p.host_time = *t;
  }
  for (int k = 0; k < kPatternSize; ++k) {
    double v;
    Vec2 g;
    if (!host_image.sample(pixel + Vec2(kPattern[k][0], kPattern[k][1]), v, g)) return std::nullopt;
    p.host_values(k) = v;
  }
  return p;
}

struct RsProjection {
  Vec2 pixel;
  double time = 0.0;  ///< rows
  int iterations = 0;
};

/// Solves u = pi(exp(xi t) Y), t = capture_time(u) for a point Y given in the
/// target camera frame at t = 0. Without rolling-shutter modelling t = 0.
inline std::optional<RsProjection> solve_rs(const Vec3& Y, const Vec6& xi, const CameraModel& cam, bool rs_active,
                                            int max_iterations, double tolerance) {
  const auto u0 = cam.try_project(Y);
  if (!u0) return std::nullopt;
  if (!rs_active) return RsProjection{*u0, 0.0, 0};
  auto t = cam.try_capture_time(*u0);
  if (!t) return std::nullopt;
  for (int it = 1; it <= max_iterations; ++it) {
    const auto u = cam.try_project(exp_se3(xi, *t) * Y);
    if (!u) return std::nullopt;
    const auto tn = cam.try_capture_time(*u);
    if (!tn) return std::nullopt;
    const double step = std::abs(*tn - *t);
    t = tn;
    if (step < tolerance) {
      const auto uf = cam.try_project(exp_se3(xi, *t) * Y);
      if (!uf) return std::nullopt;
      return RsProjection{*uf, *t, it};
    }
  }
  return std::nullopt;
}

/// Projection of a tracked point's center into a target keyframe.
inline std::optional<RsProjection> project_rs(const TrackedPoint& p, const KeyframeState& host,
                                              const KeyframeState& target, const CameraModel& cam, bool rs_active,
                                              const PhotometricOptions& opt = {}) {
  if (!(p.inv_depth > 0.0)) return std::nullopt;
  const double th = rs_active ? p.host_time : 0.0;
  const Pose3 M = target.pose * pose_at_time(host, th).inverse();
  return solve_rs(M * cam.unproject(p.pixel, p.inv_depth), target.twist, cam, rs_active, opt.rs_max_iterations,
                  opt.rs_tolerance);
}

struct PhotoLinearization {
  ObsStatus status = ObsStatus::OutOfBounds;
  double time = 0.0;
  Vec2 center = Vec2::Zero();
  PatternVec r = PatternVec::Zero();
  PatternVec weight = PatternVec::Zero();  ///< IRLS weight per pattern residual
  double energy = 0.0;
  PatternJac J_host = PatternJac::Zero();    ///< pose, twist, affine of the host
  PatternJac J_target = PatternJac::Zero();  ///< pose, twist, affine of the target
  PatternVec J_depth = PatternVec::Zero();
};

namespace detail {

inline Mat36 point_jacobian(const Vec3& X) {
  Mat36 m;
  m.leftCols<3>().setIdentity();
  m.rightCols<3>() = -hat(X);
  return m;
}

inline double huber_energy(double r, double k) {
  const double a = std::abs(r);
  return a <= k ? r * r : k * (2.0 * a - k);
}

inline double huber_weight(double r, double k) {
  const double a = std::abs(r);
  return a <= k ? 1.0 : k / a;
}

}  // namespace detail

/// Residuals r_k = I_j(u_k) - exp(a_j - a_i) I_i(p_k) - (b_j - b_i) over the
/// pattern and their Jacobians. Every pattern pixel uses the center's t*.
template <SampledImage Img>
PhotoLinearization linearize_observation(const TrackedPoint& p, const KeyframeState& host,
                                         const KeyframeState& target, const CameraModel& cam,
                                         const Img& target_image, const PhotometricOptions& opt, bool rs_active,
                                         bool with_jacobians = true) {
  PhotoLinearization out;
  if (!(p.inv_depth > 0.0)) return out;
  const double th = rs_active ? p.host_time : 0.0;
  const Pose3 A = exp_se3(host.twist, th);
  const Pose3 T_rel = target.pose * host.pose.inverse();
  const Pose3 A_inv = A.inverse();
  const Pose3 M = T_rel * A_inv;
  const double d = p.inv_depth;

  const auto proj = solve_rs(M * cam.unproject(p.pixel, d), target.twist, cam, rs_active, opt.rs_max_iterations,
                             opt.rs_tolerance);
  if (!proj) return out;
  const double t = proj->time;
  out.time = t;
  out.center = proj->pixel;
  const Pose3 B = exp_se3(target.twist, t);
  const Pose3 BM = B * M;
  const Vec3 rho = target.twist.head<3>(), omega = target.twist.tail<3>();

  // Blocks of dX/dtheta in the order host pose, host twist, target pose,
  // target twist, inverse depth.
  using Mat3x25 = Eigen::Matrix<double, 3, 25>;
  const Mat3& R_B = B.rotation().matrix();
  const Mat3 R_BR = R_B * T_rel.rotation().matrix();
  const Mat3 R_BM = BM.rotation().matrix();
  Mat6 Jl_host = Mat6::Zero(), Jl_target = Mat6::Zero();
  if (rs_active && with_jacobians) {
    Jl_host = se3_left_jacobian(host.twist * th) * th;
    Jl_target = se3_left_jacobian(target.twist * t) * t;
  }
  auto dX = [&](const Vec3& Xh, const Vec3& Xt) {
    Mat3x25 J = Mat3x25::Zero();
    J.middleCols<6>(0) = -R_BR * detail::point_jacobian(A_inv * Xh);
    J.middleCols<6>(12) = R_B * detail::point_jacobian(M * Xh);
    if (rs_active) {
      J.middleCols<6>(6) = -R_BM * detail::point_jacobian(Xh) * Jl_host;
      J.middleCols<6>(18) = detail::point_jacobian(Xt) * Jl_target;
    }
    J.col(24) = -R_BM * Xh / d;
    return J;
  };

  // Implicit derivative of t* from the center pixel.
  Eigen::Matrix<double, 1, 25> dt = Eigen::Matrix<double, 1, 25>::Zero();
  if (rs_active && with_jacobians) {
    const Vec3 Xh = cam.unproject(p.pixel, d);
    const Vec3 Xt = BM * Xh;
    Mat23 Jpi;
    cam.try_project(Xt, &Jpi);
    Eigen::RowVector2d cu;
    if (!cam.try_capture_time(proj->pixel, &cu)) return out;
    const Eigen::RowVector3d cX = cu * Jpi;
    const double dG_dt = cX.dot(rho + omega.cross(Xt));
    const double denom = 1.0 - dG_dt;
    if (!(std::abs(denom) > 1e-6)) return out;
    dt = cX * dX(Xh, Xt) / denom;
  }

  const double ea = std::exp(target.aff_a - host.aff_a);
  const double k = opt.huber;
  for (int i = 0; i < kPatternSize; ++i) {
    const Vec2 ph = p.pixel + Vec2(kPattern[i][0], kPattern[i][1]);
    const Vec3 Xh = cam.unproject(ph, d);
    const Vec3 Xt = BM * Xh;
    Mat23 Jpi;
    const auto u = cam.try_project(Xt, with_jacobians ? &Jpi : nullptr);
    if (!u) return out;
    double I;
    Vec2 grad;
    if (!target_image.sample(*u, I, grad)) return out;
    const double host_val = p.host_values(i);
    const double r = I - ea * host_val - (target.aff_b - host.aff_b);
    const double wg = opt.gradient_c2 / (opt.gradient_c2 + grad.squaredNorm());
    out.r(i) = r;
    out.weight(i) = wg * detail::huber_weight(r, k);
    out.energy += wg * detail::huber_energy(r, k);
    if (!with_jacobians) continue;
    Mat3x25 J = dX(Xh, Xt);
    if (rs_active) J += (rho + omega.cross(Xt)) * dt;
    const Eigen::Matrix<double, 1, 25> dr = grad.transpose() * Jpi * J;
    out.J_host.block<1, 12>(i, 0) = dr.segment<12>(0);
    out.J_target.block<1, 12>(i, 0) = dr.segment<12>(12);
    out.J_depth(i) = dr(24);
    out.J_host(i, 12) = ea * host_val;
    out.J_host(i, 13) = 1.0;
    out.J_target(i, 12) = -ea * host_val;
    out.J_target(i, 13) = -1.0;
  }
  out.status = out.energy > opt.outlier_energy ? ObsStatus::Outlier : ObsStatus::Active;
  return out;
}

/// Photometric part of the normal equations with the inverse depths kept
/// separate so the caller can eliminate them.
struct PointBlock {
  double Hdd = 0.0;
  double gd = 0.0;
  Eigen::VectorXd Hfd;  ///< coupling between frame variables and the depth
  double energy = 0.0;
  int num_active = 0;
  /// Observation status of every (point, target) pair seen in this pass.
  std::vector<std::pair<int64_t, ObsStatus>> observed;
};

struct PhotoSystem {
  DenseSystem frames;
  std::vector<PointBlock> points;
};

inline constexpr size_t kPointChunk = 32;

/// Sum of E_pj over points and all other keyframes of the window. Points
/// whose host is not in the window are ignored. Observations flagged as
/// outliers in the point contribute nothing.
template <SampledImage Img>
PhotoSystem photometric_energy(const WindowState& w, std::span<const TrackedPoint> points,
                               std::span<const Img* const> images, const CameraModel& cam,
                               const PhotometricOptions& opt, bool rs_active, int workers = 1,
                               bool with_jacobians = true) {
  const int n = w.dim();
  const int nf = static_cast<int>(w.frames.size());
  struct Chunk {
    DenseSystem sys;
  };
  PhotoSystem out;
  out.points.resize(points.size());
  auto chunks = parallel_chunks<Chunk>(points.size(), kPointChunk, workers, Chunk{DenseSystem(with_jacobians ? n : 0)},
                                       [&](size_t begin, size_t end, Chunk& c) {
    for (size_t pi = begin; pi < end; ++pi) {
      const auto& p = points[pi];
      auto& pb = out.points[pi];
      if (with_jacobians) pb.Hfd = Eigen::VectorXd::Zero(n);
      const int hs = w.slot_of(p.host_id);
      if (hs < 0) continue;
      for (int ts = 0; ts < nf; ++ts) {
        if (ts == hs) continue;
        const int64_t tid = w.frames[ts].id;
        if (p.status_for(tid) == ObsStatus::Outlier) continue;
        const auto lin = linearize_observation(p, w.frames[hs], w.frames[ts], cam, *images[ts], opt, rs_active,
                                               with_jacobians);
        pb.observed.emplace_back(tid, lin.status);
        if (lin.status != ObsStatus::Active) continue;
        ++pb.num_active;
        pb.energy += lin.energy;
        c.sys.energy += lin.energy;
        if (!with_jacobians) continue;
        const int oh = layout::frame_offset(hs), ot = layout::frame_offset(ts);
        const PatternVec wr = lin.weight.cwiseProduct(lin.r);
        const PatternJac WJh = lin.weight.asDiagonal() * lin.J_host;
        const PatternJac WJt = lin.weight.asDiagonal() * lin.J_target;
        const PatternVec WJd = lin.weight.cwiseProduct(lin.J_depth);
        constexpr int P = layout::kPhoto;
        c.sys.g.segment(oh, P) += lin.J_host.transpose() * wr;
        c.sys.g.segment(ot, P) += lin.J_target.transpose() * wr;
        c.sys.H.block(oh, oh, P, P) += lin.J_host.transpose() * WJh;
        c.sys.H.block(ot, ot, P, P) += lin.J_target.transpose() * WJt;
        const Eigen::Matrix<double, P, P> Hht = lin.J_host.transpose() * WJt;
        c.sys.H.block(oh, ot, P, P) += Hht;
        c.sys.H.block(ot, oh, P, P) += Hht.transpose();
        pb.Hdd += lin.J_depth.dot(WJd);
        pb.gd += lin.J_depth.dot(wr);
        pb.Hfd.segment(oh, P) += lin.J_host.transpose() * WJd;
        pb.Hfd.segment(ot, P) += lin.J_target.transpose() * WJd;
      }
    }
  });
  out.frames = DenseSystem(with_jacobians ? n : 0);
  for (const auto& c : chunks) out.frames += c.sys;
  return out;
}

}  // namespace rsvio
