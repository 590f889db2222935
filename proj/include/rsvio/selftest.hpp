#pragma once

// Oracle suites shared by the `selftest` command and the acceptance binary.
// Every check compares library output against an independent reference:
// power-series exponentials, central finite differences, simulator ground
// truth, dense batch solves or brute-force minimizers.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "rsvio/eval.hpp"
#include "rsvio/imu_preint.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/marginalization.hpp"
#include "rsvio/photometric.hpp"
#include "rsvio/problem.hpp"
#include "rsvio/simulator.hpp"
#include "rsvio/twist_prior.hpp"

namespace rsvio::selftest {

struct Check {
  std::string name;
  double value = 0.0;      ///< worst observed error (or the measured quantity)
  double tolerance = 0.0;
  bool passed = false;
};

struct SuiteResult {
  std::string name;
  std::vector<Check> checks;
  double seconds = 0.0;
  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
  }
};

namespace oracle {

inline Eigen::MatrixXd expm_series(const Eigen::MatrixXd& a, int terms) {
  Eigen::MatrixXd result = Eigen::MatrixXd::Identity(a.rows(), a.cols());
  Eigen::MatrixXd term = result;
  for (int k = 1; k < terms; ++k) {
    term = term * a / static_cast<double>(k);
    result += term;
  }
  return result;
}

inline Mat4 expm_twist(const Vec6& xi, double t) {
  Mat4 m = Mat4::Zero();
  m.topLeftCorner<3, 3>() << 0, -xi(5), xi(4), xi(5), 0, -xi(3), -xi(4), xi(3), 0;
  m.topRightCorner<3, 1>() = xi.head<3>();
  return expm_series(m * t, 40);
}

inline Mat3 angle_axis(const Vec3& w) {
  const double t = w.norm();
  if (t == 0.0) return Mat3::Identity();
  return Eigen::AngleAxisd(t, w / t).toRotationMatrix();
}

template <class Rng>
Vec6 random_twist(Rng& rng, double trans_scale, double max_angle) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Vec6 xi;
  for (int i = 0; i < 3; ++i) xi(i) = trans_scale * n(rng);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  xi.tail<3>() = axis * max_angle * u(rng);
  return xi;
}

template <class Rng>
Pose3 random_pose(Rng& rng, double max_angle, double trans_scale) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const Vec3 axis = Vec3(n(rng), n(rng), n(rng)).normalized();
  return Pose3(angle_axis(axis * max_angle * u(rng)), Vec3(trans_scale * n(rng), trans_scale * n(rng), trans_scale * n(rng)));
}

inline Eigen::MatrixXd numeric_jacobian(const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& x, double h) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd J(f0.size(), x.size());
  for (int k = 0; k < x.size(); ++k) {
    Eigen::VectorXd xp = x, xm = x;
    xp(k) += h;
    xm(k) -= h;
    J.col(k) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return J;
}

/// max |A - B| relative to the largest entry of the reference.
inline double relative_error(const Eigen::MatrixXd& analytic, const Eigen::MatrixXd& numeric) {
  const double scale = std::max(1e-12, numeric.cwiseAbs().maxCoeff());
  return (analytic - numeric).cwiseAbs().maxCoeff() / scale;
}

/// Smooth image with exact gradients.
struct AnalyticImage {
  int w = 320, h = 256;
  int width() const { return w; }
  int height() const { return h; }
  bool sample(const Vec2& u, double& v, Vec2& g) const {
    if (!(u.x() >= 1 && u.y() >= 1 && u.x() < w - 2 && u.y() < h - 2)) return false;
    const double x = u.x(), y = u.y();
    const double a = 0.11 * x + 0.05 * y + 0.7, b = 0.07 * y - 0.03 * x, c = 0.13 * (x + y);
    v = 128 + 40 * std::sin(a) + 30 * std::cos(b) + 20 * std::sin(c);
    g.x() = 40 * 0.11 * std::cos(a) + 30 * 0.03 * std::sin(b) + 20 * 0.13 * std::cos(c);
    g.y() = 40 * 0.05 * std::cos(a) - 30 * 0.07 * std::sin(b) + 20 * 0.13 * std::cos(c);
    return true;
  }
};

}  // namespace oracle

namespace detail {

inline Check upper(std::string name, double value, double tol) {
  return {std::move(name), value, tol, std::isfinite(value) && value <= tol};
}

template <class F>
SuiteResult timed(std::string name, F&& body) {
  const auto t0 = std::chrono::steady_clock::now();
  SuiteResult r{std::move(name), body(), 0.0};
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

inline std::vector<ImuSample> random_imu_stream(std::mt19937& rng, int n, double dt) {
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<ImuSample> out;
  Vec3 w(0.3, -0.2, 0.5), a(0.4, 0.1, 9.6);
  for (int k = 0; k < n; ++k) {
    w += 0.05 * Vec3(nd(rng), nd(rng), nd(rng));
    a += 0.1 * Vec3(nd(rng), nd(rng), nd(rng));
    out.push_back({k * dt, w, a});
  }
  return out;
}

inline Eigen::MatrixXd random_matrix(std::mt19937& rng, int r, int c) {
  std::normal_distribution<double> nd(0, 1);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r * c; ++i) m.data()[i] = nd(rng);
  return m;
}

}  // namespace detail

/// Exponential/logarithm round trips, the adjoint identity and the
/// equivalence of the two twist transport paths.
inline SuiteResult lie_suite() {
  return detail::timed("lie", [] {
    std::vector<Check> out;
    std::mt19937 rng(11);
    double roundtrip = 0.0, series = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Pose3 T = oracle::random_pose(rng, std::numbers::pi - 1e-3, 5.0);
      roundtrip = std::max(roundtrip, (exp_se3(log_se3(T)).matrix() - T.matrix()).cwiseAbs().maxCoeff());
      const Vec6 xi = oracle::random_twist(rng, 1.0, 2.5);
      series = std::max(series, (exp_se3(xi).matrix() - oracle::expm_twist(xi, 1.0)).cwiseAbs().maxCoeff());
    }
    out.push_back(detail::upper("exp(log(T)) = T, 1000 poses", roundtrip, 1e-8));
    out.push_back(detail::upper("exp matches power series, 1000 twists", series, 1e-8));

    double adj = 0.0;
    for (int i = 0; i < 1000; ++i) {
      const Pose3 T = oracle::random_pose(rng, 3.0, 5.0);
      Vec6 d = oracle::random_twist(rng, 1.0, 1.0);
      d *= 0.1 / d.norm();
      adj = std::max(adj, ((T * exp_se3(d)).matrix() - (exp_se3(adjoint(T) * d) * T).matrix()).cwiseAbs().maxCoeff());
    }
    out.push_back(detail::upper("T exp(d) = exp(Adj(T) d) T, 1000 cases", adj, 1e-10));

    double path = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const Calibration calib(oracle::random_pose(rng, 3.0, 0.2), CameraModel());
      const Pose3 T_WmI = oracle::random_pose(rng, 3.0, 2.0);
      const Vec6 xi_imu = oracle::random_twist(rng, 1.0, 3.0);
      const Vec6 xi_cam = camera_twist(xi_imu, calib);
      const Mat4 T_CmWm = calib.T_CmI.matrix() * T_WmI.matrix().inverse();
      for (double t : {0.0, 0.01, 0.025, 0.05, 0.075, 0.1}) {
        const Mat4 cam_side = oracle::expm_twist(xi_cam, t) * T_CmWm;
        const Mat4 imu_side = calib.T_CmI.matrix() * (T_WmI.matrix() * oracle::expm_twist(xi_imu, t)).inverse();
        path = std::max(path, (cam_side - imu_side).cwiseAbs().maxCoeff());
      }
    }
    out.push_back(detail::upper("camera twist path equivalence, 200 rigs", path, 1e-10));
    return out;
  });
}

namespace detail {

inline WindowState random_twist_window(std::mt19937& rng, Calibration& calib, double td) {
  std::normal_distribution<double> nd(0, 1);
  std::uniform_real_distribution<double> us(0.3, 3.0);
  calib = Calibration(oracle::random_pose(rng, 3.0, 0.1), CameraModel(400, 400, 160, 128, {}, 320, 256, td));
  WindowState w;
  w.sg.T_WmWf = ScaledRot(us(rng), oracle::random_pose(rng, 3.0, 1.0).rotation());
  for (int k = 0; k < 2; ++k) {
    KeyframeState kf;
    kf.id = 10 + k;
    kf.pose = oracle::random_pose(rng, 3.0, 1.0);
    kf.twist = oracle::random_twist(rng, 1e-4, 1e-4);
    kf.velocity = Vec3(nd(rng), nd(rng), nd(rng));
    kf.bias << 0.05 * nd(rng), 0.05 * nd(rng), 0.05 * nd(rng), 0.01 * nd(rng), 0.01 * nd(rng), 0.01 * nd(rng);
    w.frames.push_back(kf);
  }
  return w;
}

inline KeyframeState perturb_photo(const KeyframeState& kf, const Eigen::VectorXd& d) {
  Eigen::Matrix<double, layout::kFrame, 1> full = Eigen::Matrix<double, layout::kFrame, 1>::Zero();
  full.head<layout::kPhoto>() = d;
  return boxplus(kf, full);
}

inline double photometric_jacobian_error(std::mt19937& rng) {
  const CameraModel cam(300, 310, 158.3, 129.1, RadTan{-0.08, 0.01, 1e-3, -5e-4}, 320, 256, 117.88e-6);
  const oracle::AnalyticImage img;
  PhotometricOptions opt;
  opt.rs_max_iterations = 100;
  opt.rs_tolerance = 1e-13;
  const double td = cam.row_time_td();
  std::uniform_real_distribution<double> ux(40, 280), uy(40, 216), ud(0.3, 1.5), ua(-0.2, 0.2);
  TrackedPoint p;
  KeyframeState host, target;
  while (true) {
    host.id = 0;
    target.id = 1;
    host.pose = oracle::random_pose(rng, 3.0, 1.0);
    target.pose = oracle::random_pose(rng, 0.08, 0.08) * host.pose;
    host.twist = oracle::random_twist(rng, td, 2.0 * td);
    target.twist = oracle::random_twist(rng, td, 2.0 * td);
    host.aff_a = ua(rng);
    host.aff_b = 10 * ua(rng);
    target.aff_a = ua(rng);
    target.aff_b = 10 * ua(rng);
    auto cand = make_tracked_point(0, Vec2(std::round(ux(rng)), std::round(uy(rng))), ud(rng), img, cam, true);
    if (!cand) continue;
    p = *cand;
    if (linearize_observation(p, host, target, cam, img, opt, true).status == ObsStatus::Active) break;
  }
  const auto lin = linearize_observation(p, host, target, cam, img, opt, true);
  bool active = true;
  auto residual = [&](const TrackedPoint& q, const KeyframeState& h, const KeyframeState& t) {
    const auto l = linearize_observation(q, h, t, cam, img, opt, true, false);
    active &= l.status == ObsStatus::Active;
    return Eigen::VectorXd(l.r);
  };
  auto fh = [&](const Eigen::VectorXd& d) { return residual(p, perturb_photo(host, d), target); };
  auto ft = [&](const Eigen::VectorXd& d) { return residual(p, host, perturb_photo(target, d)); };
  auto twist_only = [](auto f) {
    return [f](const Eigen::VectorXd& d) {
      Eigen::VectorXd full = Eigen::VectorXd::Zero(layout::kPhoto);
      full.segment<6>(6) = d;
      return f(full);
    };
  };
  const double h = 1e-5;
  const Eigen::VectorXd z = Eigen::VectorXd::Zero(layout::kPhoto);
  Eigen::MatrixXd Jh = oracle::numeric_jacobian(fh, z, h);
  Eigen::MatrixXd Jt = oracle::numeric_jacobian(ft, z, h);
  // Twists act per row, so their natural step is smaller by the row time.
  Jh.middleCols<6>(6) = oracle::numeric_jacobian(twist_only(fh), Eigen::VectorXd::Zero(6), h * td);
  Jt.middleCols<6>(6) = oracle::numeric_jacobian(twist_only(ft), Eigen::VectorXd::Zero(6), h * td);
  const Eigen::MatrixXd Jd = oracle::numeric_jacobian(
      [&](const Eigen::VectorXd& d) {
        TrackedPoint q = p;
        q.inv_depth += d(0);
        return residual(q, host, target);
      },
      Eigen::VectorXd::Zero(1), h);
  if (!active) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (int b : {0, 6, 12}) {
    const int n = b == 12 ? 2 : 6;
    worst = std::max(worst, oracle::relative_error(lin.J_host.middleCols(b, n), Jh.middleCols(b, n)));
    worst = std::max(worst, oracle::relative_error(lin.J_target.middleCols(b, n), Jt.middleCols(b, n)));
  }
  return std::max(worst, oracle::relative_error(lin.J_depth, Jd));
}

inline MetricImuState perturb_imu(const MetricImuState& s, const Eigen::VectorXd& d) {
  MetricImuState o = s;
  o.R = s.R * Rot3::exp(d.segment<3>(0));
  o.p += d.segment<3>(3);
  o.v += d.segment<3>(6);
  o.b += d.segment<6>(9);
  return o;
}

}  // namespace detail

/// Analytic Jacobians against central finite differences at 100 random
/// states each.
inline SuiteResult jacobian_suite() {
  return detail::timed("jacobians", [] {
    std::vector<Check> out;
    std::mt19937 rng(33);
    double photo = 0.0;
    for (int trial = 0; trial < 100; ++trial) photo = std::max(photo, detail::photometric_jacobian_error(rng));
    out.push_back(detail::upper("photometric through the RS fixed point", photo, 1e-4));

    const Vec3 g(0, 0, -9.81);
    std::normal_distribution<double> nd(0, 1);
    const auto samples = detail::random_imu_stream(rng, 60, 0.005);
    const auto pre = preintegrate(samples, 0.0, 0.25, Bias::Constant(0.001));
    double imu = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      auto rv = [&](double s) { return Vec3(s * nd(rng), s * nd(rng), s * nd(rng)); };
      MetricImuState si{Rot3::exp(rv(1.0)), rv(2.0), rv(1.0), (Bias() << rv(0.05), rv(0.005)).finished()};
      const auto pred = predict_state(si, pre, g);
      MetricImuState sj{pred.R * Rot3::exp(rv(0.05)), pred.p + rv(0.05), pred.v + rv(0.05),
                        si.b + (Bias() << rv(0.01), rv(0.001)).finished()};
      const auto lin = imu_residuals(si, sj, pre, g);
      const Eigen::VectorXd z = Eigen::VectorXd::Zero(15);
      imu = std::max(imu, oracle::relative_error(
                              lin.J_i, oracle::numeric_jacobian(
                                           [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
                                             return imu_residuals(detail::perturb_imu(si, d), sj, pre, g).r;
                                           },
                                           z, 1e-6)));
      imu = std::max(imu, oracle::relative_error(
                              lin.J_j, oracle::numeric_jacobian(
                                           [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
                                             return imu_residuals(si, detail::perturb_imu(sj, d), pre, g).r;
                                           },
                                           z, 1e-6)));
    }
    out.push_back(detail::upper("IMU residuals", imu, 1e-4));

    double imu_window = 0.0, twist = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      Calibration calib;
      WindowState w = detail::random_twist_window(rng, calib, 3e-5);
      const ImuFactor fac{10, 11, preintegrate(samples, 0.0, 0.25, w.frames[0].bias)};
      const auto pred = predict_state(metric_state(w.frames[0], w.sg, calib), fac.preint, calib.gravity);
      w.frames[1].pose = camera_pose_from_metric(Pose3(pred.R, pred.p + Vec3(0.01 * nd(rng), 0.01 * nd(rng), 0.0)), w.sg, calib);
      w.frames[1].velocity = pred.v + Vec3(0.01 * nd(rng), 0.0, 0.01 * nd(rng));
      const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(w.dim());
      const double alpha = 1e-6;
      const auto li = linearize_imu_factor(w, fac, calib, alpha);
      imu_window = std::max(imu_window, oracle::relative_error(
                                            li.J, oracle::numeric_jacobian(
                                                      [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
                                                        return linearize_imu_factor(boxplus(w, d), fac, calib, alpha).r;
                                                      },
                                                      x0, 1e-6)));
      const TwistPriorTerm term{11, Vec3(0.4, -0.2, 0.9)};
      const auto lt = linearize_twist_factor(w, term, calib, {}, 1.0);
      twist = std::max(twist, oracle::relative_error(
                                  lt.J, oracle::numeric_jacobian(
                                            [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
                                              return linearize_twist_factor(boxplus(w, d), term, calib, {}, 1.0).r;
                                            },
                                            x0, 1e-6)));
    }
    out.push_back(detail::upper("IMU factor on window variables incl. scale", imu_window, 1e-4));
    out.push_back(detail::upper("twist energy incl. scale", twist, 1e-4));
    return out;
  });
}

/// Zero-noise preintegration against the simulator and first-order bias
/// correction against re-integration.
inline SuiteResult preintegration_suite() {
  return detail::timed("preintegration", [] {
    std::vector<Check> out;
    const Vec3 g(0, 0, -9.81);
    TrajectorySpec spec;
    spec.start_pose = Pose3(Rot3::exp(Vec3(0.0, 0.0, 0.3)), Vec3(0.2, -0.1, 0.0));
    spec.segments.push_back(ConstantTwistSegment{0.2, std::nullopt});
    SmoothSegment s;
    s.duration = 2.0;
    s.amplitude << 0.4, 0.3, 0.15, 0.3, 0.2, 0.5;
    s.frequency << 0.5, 0.7, 1.0, 0.6, 0.8, 0.4;
    spec.segments.push_back(s);
    const SampledTrajectory traj(Trajectory(spec), 200.0);
    const auto imu = synthesize_imu(traj, {}, g);
    double worst = 0.0;
    for (double ti = 0.0; ti + 0.25 < 2.1; ti += 0.15) {
      const double tj = ti + 0.25;
      const auto pre = preintegrate(imu, ti, tj, Bias::Zero());
      const auto si = traj.state(ti), sj = traj.state(tj);
      const auto pred = predict_state({si.R, si.p, si.v, Bias::Zero()}, pre, g);
      worst = std::max({worst, (pred.p - sj.p).norm(), (pred.v - sj.v).norm(), (pred.R.inverse() * sj.R).log().norm()});
    }
    out.push_back(detail::upper("zero-noise integration vs trajectory, per 0.25 s", worst, 1e-6));

    std::mt19937 rng(6);
    const auto samples = detail::random_imu_stream(rng, 60, 0.005);
    const Vec6 dir = (Vec6() << 0.3, -0.5, 0.2, 0.6, -0.4, 0.7).finished().normalized();
    std::vector<double> errs;
    for (double mag : {1e-2, 1e-3, 1e-4}) {
      const Bias db = dir * mag;
      const auto base = preintegrate(samples, 0.0, 0.25, Bias::Zero());
      const auto full = preintegrate(samples, 0.0, 0.25, db);
      const auto corr = base.correct_bias(db);
      errs.push_back(std::max({(corr.dR.inverse() * full.delta_R()).log().norm(), (corr.dv - full.delta_v()).norm(),
                               (corr.dp - full.delta_p()).norm()}));
    }
    // Quadratic shrinkage: each tenfold reduction of the bias step cuts the
    // error by about 100.
    const double worst_order = std::min(std::log10(errs[0] / errs[1]), std::log10(errs[1] / errs[2]));
    out.push_back({"bias-correction error order across 1e-2, 1e-3, 1e-4", worst_order, 1.8, worst_order >= 1.8});
    return out;
  });
}

/// Sliding-window Schur priors against full batch solves and the exact prior
/// switch threshold.
inline SuiteResult marginalization_suite() {
  return detail::timed("marginalization", [] {
    std::vector<Check> out;
    std::mt19937 rng(42);
    struct Factor {
      std::vector<int> vars;
      Eigen::MatrixXd J;
      Eigen::VectorXd z;
      Eigen::MatrixXd W;
    };
    auto spd = [&] {
      const Eigen::MatrixXd a = detail::random_matrix(rng, 2, 2);
      return Eigen::MatrixXd(a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(2, 2));
    };
    auto linearize = [](const Factor& f, const Eigen::VectorXd& x, const std::vector<int>& index) {
      const int n = static_cast<int>(x.size());
      Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2, n);
      for (size_t k = 0; k < f.vars.size(); ++k) J.middleCols(index[f.vars[k]], 2) = f.J.middleCols(2 * k, 2);
      DenseSystem s(n);
      s.add_factor(J * x - f.z, f.W, J);
      return s;
    };
    double worst_mean = 0.0, worst_cov = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const int n = 25;  // 50 scalar variables
      std::vector<Factor> factors;
      factors.push_back({{0}, Eigen::MatrixXd::Identity(2, 2), detail::random_matrix(rng, 2, 1), spd()});
      for (int i = 0; i + 1 < n; ++i) {
        Eigen::MatrixXd J(2, 4);
        J << detail::random_matrix(rng, 2, 2), Eigen::MatrixXd::Identity(2, 2);
        factors.push_back({{i, i + 1}, J, detail::random_matrix(rng, 2, 1), spd()});
        factors.push_back({{i + 1}, detail::random_matrix(rng, 2, 2), detail::random_matrix(rng, 2, 1), spd()});
        if (i + 2 < n) factors.push_back({{i, i + 2}, detail::random_matrix(rng, 2, 4), detail::random_matrix(rng, 2, 1), spd()});
      }
      std::vector<int> identity(n);
      for (int i = 0; i < n; ++i) identity[i] = 2 * i;
      DenseSystem batch(2 * n);
      for (const auto& f : factors) batch += linearize(f, Eigen::VectorXd::Zero(2 * n), identity);
      const Eigen::VectorXd x_batch = -batch.H.ldlt().solve(batch.g);
      const Eigen::MatrixXd cov_batch = batch.H.inverse();

      const int keep = 5;
      int first = 0;
      QuadraticPrior prior(0);
      Eigen::VectorXd lin(0);
      std::vector<bool> used(factors.size(), false);
      for (int newest = 0; newest < n; ++newest) {
        prior.insert(prior.dim(), 2);
        lin.conservativeResize(lin.size() + 2);
        lin.tail(2) = detail::random_matrix(rng, 2, 1);
        if (newest - first + 1 <= keep) continue;
        std::vector<int> index(n, -1);
        for (int v = first; v <= newest; ++v) index[v] = 2 * (v - first);
        const Eigen::VectorXd x_eval = lin + detail::random_matrix(rng, static_cast<int>(lin.size()), 1);
        for (size_t k = 0; k < factors.size(); ++k) {
          const auto& f = factors[k];
          if (used[k]) continue;
          const bool touches = std::find(f.vars.begin(), f.vars.end(), first) != f.vars.end();
          const bool inside = std::all_of(f.vars.begin(), f.vars.end(), [&](int v) { return v <= newest; });
          if (touches && inside) {
            prior.add(linearize(f, x_eval, index), x_eval - lin);
            used[k] = true;
          }
        }
        prior.marginalize({0, 1});
        lin = lin.tail(lin.size() - 2).eval();
        ++first;
      }
      std::vector<int> index(n, -1);
      for (int v = first; v < n; ++v) index[v] = 2 * (v - first);
      DenseSystem rest(static_cast<int>(lin.size()));
      for (size_t k = 0; k < factors.size(); ++k)
        if (!used[k]) rest += linearize(factors[k], lin, index);
      prior.add_to(rest, Eigen::VectorXd::Zero(lin.size()));
      const Eigen::VectorXd x_window = lin - rest.H.ldlt().solve(rest.g);
      const Eigen::MatrixXd cov_window = rest.H.inverse();
      worst_mean = std::max(worst_mean, (x_window - x_batch.tail(2 * keep)).cwiseAbs().maxCoeff());
      worst_cov = std::max(worst_cov, (cov_window - cov_batch.bottomRightCorner(2 * keep, 2 * keep)).cwiseAbs().maxCoeff());
    }
    out.push_back(detail::upper("window mean vs batch, 10 chains of 50 variables", worst_mean, 1e-8));
    out.push_back(detail::upper("window covariance vs batch", worst_cov, 1e-8));

    int wrong = 0;
    for (const auto& [ratio, expected] :
         {std::pair{1.0, false}, std::pair{1.2, true}, std::pair{std::exp(0.1 - 1e-9), false},
          std::pair{std::exp(0.1 + 1e-9), true}, std::pair{std::exp(-0.1 + 1e-9), false},
          std::pair{std::exp(-0.1 - 1e-9), true}}) {
      WindowState w;
      w.sg.T_WmWf = ScaledRot(1.0, Rot3());
      for (int k = 0; k < 2; ++k) {
        KeyframeState kf;
        kf.id = k;
        w.frames.push_back(kf);
      }
      DualPrior p;
      p.add_frame();
      p.add_frame();
      DenseSystem s(w.dim());
      s.H.setIdentity();
      p.add_inertial(s, w);
      w.sg.T_WmWf = ScaledRot(ratio, Rot3());
      if (p.maybe_switch(w, 0.1) != expected) ++wrong;
    }
    out.push_back(detail::upper("prior switch exactly at |log(s/s_lin)| > 0.1, wrong decisions", wrong, 0));
    return out;
  });
}

/// ATE invariances and the alignment against a brute-force minimizer.
inline SuiteResult ate_suite() {
  return detail::timed("ate", [] {
    std::vector<Check> out;
    std::mt19937_64 rng(6);
    std::normal_distribution<double> unit(0.0, 1.0);
    auto cloud = [&](int n, double s) {
      std::vector<Vec3> p;
      for (int i = 0; i < n; ++i) p.emplace_back(s * unit(rng), s * unit(rng), 0.3 * s * unit(rng));
      return p;
    };
    auto traj = [](const std::vector<Vec3>& p) {
      std::vector<TimedPose> o;
      for (size_t i = 0; i < p.size(); ++i) o.push_back({0.05 * i, Pose3(Rot3(), p[i])});
      return o;
    };
    auto moved = [](const Pose3& T, std::vector<Vec3> p) {
      for (auto& x : p) x = T * x;
      return p;
    };
    const auto gt = cloud(200, 3.0);
    auto est = gt;
    for (auto& p : est) p += 0.02 * Vec3(unit(rng), unit(rng), unit(rng));
    const double base = ate(traj(est), traj(gt)).e_ate;
    double invariance = 0.0;
    for (int k = 0; k < 20; ++k) {
      const Pose3 T = oracle::random_pose(rng, 3.1, 20.0);
      invariance = std::max(invariance, std::abs(ate(traj(moved(T, est)), traj(gt)).e_ate - base));
    }
    out.push_back(detail::upper("e_ate invariant under rigid motion of the estimate", invariance, 1e-10));
    std::vector<Vec3> scaled;
    for (const auto& p : gt) scaled.push_back(2.0 * p);
    const double sens = ate(traj(scaled), traj(gt)).e_ate;
    out.push_back({"e_ate of a 2x scaled estimate (must be > 0)", sens, 0.0, sens > 0.0});

    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const auto g2 = cloud(40, 2.0);
      auto e2 = moved(oracle::random_pose(rng, 2.5, 3.0), g2);
      for (auto& p : e2) p += 0.05 * Vec3(unit(rng), unit(rng), unit(rng));
      auto residual = [&](const Eigen::VectorXd& x) {
        const Mat3 R = oracle::angle_axis(x.head<3>());
        Eigen::VectorXd r(3 * e2.size());
        for (size_t i = 0; i < e2.size(); ++i) r.segment<3>(3 * i) = R * e2[i] + x.tail<3>() - g2[i];
        return r;
      };
      // Best seed of a coarse axis-angle grid, then Gauss-Newton with
      // finite-difference Jacobians.
      Eigen::VectorXd x = Eigen::VectorXd::Zero(6);
      double best = 1e300;
      for (int a = 0; a < 12; ++a)
        for (int b = 0; b < 6; ++b)
          for (double ang : {0.5, 1.5, 2.5}) {
            const double th = 2 * std::numbers::pi * a / 12, ph = std::numbers::pi * (b + 0.5) / 6;
            Eigen::VectorXd s = Eigen::VectorXd::Zero(6);
            s.head<3>() = ang * Vec3(std::sin(ph) * std::cos(th), std::sin(ph) * std::sin(th), std::cos(ph));
            Vec3 c = Vec3::Zero();
            for (size_t i = 0; i < e2.size(); ++i) c += (g2[i] - oracle::angle_axis(s.head<3>()) * e2[i]) / e2.size();
            s.tail<3>() = c;
            const double e = residual(s).squaredNorm();
            if (e < best) {
              best = e;
              x = s;
            }
          }
      for (int it = 0; it < 100; ++it) {
        const Eigen::MatrixXd J = oracle::numeric_jacobian(residual, x, 1e-7);
        const Eigen::VectorXd dx = (J.transpose() * J).ldlt().solve(-J.transpose() * residual(x));
        x += dx;
        if (dx.norm() < 1e-14) break;
      }
      const Pose3 T = align_se3(e2, g2);
      worst = std::max({worst, (T.rotation().matrix() - oracle::angle_axis(x.head<3>())).cwiseAbs().maxCoeff(),
                        (T.translation() - x.tail<3>()).norm()});
    }
    out.push_back(detail::upper("alignment vs brute-force minimizer, 20 cases", worst, 1e-8));
    return out;
  });
}

inline std::vector<SuiteResult> run_all() {
  return {lie_suite(), jacobian_suite(), preintegration_suite(), marginalization_suite(), ate_suite()};
}

}  // namespace rsvio::selftest
