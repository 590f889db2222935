#pragma once

// Sliding-window optimization of E = E_ph + alpha E_imu + beta E_twist,
// keyframe management, marginalization and the odometry driver.

#include <yaml-cpp/yaml.h>

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "rsvio/camera.hpp"
#include "rsvio/dataset_io.hpp"
#include "rsvio/errors.hpp"
#include "rsvio/image.hpp"
#include "rsvio/imu_preint.hpp"
#include "rsvio/marginalization.hpp"
#include "rsvio/parallel.hpp"
#include "rsvio/photometric.hpp"
#include "rsvio/problem.hpp"
#include "rsvio/state.hpp"
#include "rsvio/twist_prior.hpp"

namespace rsvio {

enum class ShutterMode {
  RollingShutter,        ///< twists and per-pixel capture times are modelled
  GlobalShutterAssumed,  ///< twists frozen at zero, t = 0 for every pixel
};

inline std::string to_string(ShutterMode m) { return m == ShutterMode::RollingShutter ? "rs" : "gs-assume"; }

inline ShutterMode parse_shutter_mode(const std::string& s) {
  if (s == "rs") return ShutterMode::RollingShutter;
  if (s == "gs-assume") return ShutterMode::GlobalShutterAssumed;
  throw DataError("unknown mode '" + s + "' (expected rs or gs-assume)");
}

struct SolverConfig {
  // Energy balance.
  double alpha = 1.0;
  double beta = 1.0;
  TwistWeights twist;
  ImuNoise imu_noise;
  PhotometricOptions photo{9.0, 2500.0, 5, 1e-3, 1200.0};

  // Window.
  int max_keyframes = 7;
  int point_budget = 2000;
  int candidates_per_keyframe = 600;

  // Damped Gauss-Newton.
  int max_iterations = 6;
  double lm_lambda_init = 1e-4;
  double lm_lambda_up = 4.0;
  double lm_lambda_down = 0.5;
  double lm_lambda_min = 1e-8;
  double lm_lambda_max = 1e6;
  double step_tolerance = 1e-9;
  double scale_switch_threshold = 0.1;  ///< in log scale

  // Gauge anchors and weak priors.
  double first_pose_weight = 1e8;
  double yaw_weight = 1e8;
  double affine_weight_a = 1e6;
  double affine_weight_b = 1e2;
  double bias_sigma_accel = 0.2;   ///< m/s^2
  double bias_sigma_gyro = 0.02;   ///< rad/s
  int gravity_init_samples = 40;

  // Keyframe decision. Flow thresholds are fractions of (width + height).
  double kf_flow_t = 0.02;
  double kf_flow_rt = 0.04;
  double kf_brightness = 2.0;
  double kf_max_interval = 0.5;  ///< s

  // Point selection and activation.
  double min_gradient = 8.0;  ///< intensity units per pixel
  double min_depth = 0.25;    ///< m, assuming unit scale
  double max_depth = 30.0;
  double initial_depth = 3.0;
  double trace_quality = 2.0;
  double activation_rel_width = 0.4;

  uint64_t seed = 1;
  int workers = 1;
  ShutterMode mode = ShutterMode::RollingShutter;
};

using ConfigField = std::variant<double*, int*, uint64_t*, ShutterMode*>;

/// Every configurable field by its file key.
inline std::vector<std::pair<std::string, ConfigField>> config_fields(SolverConfig& c) {
  return {
      {"alpha", &c.alpha},
      {"beta", &c.beta},
      {"twist_weight_translation", &c.twist.translation},
      {"twist_weight_rotation", &c.twist.rotation},
      {"imu_gyro_noise", &c.imu_noise.gyro_noise},
      {"imu_accel_noise", &c.imu_noise.accel_noise},
      {"imu_gyro_random_walk", &c.imu_noise.gyro_random_walk},
      {"imu_accel_random_walk", &c.imu_noise.accel_random_walk},
      {"huber", &c.photo.huber},
      {"gradient_c2", &c.photo.gradient_c2},
      {"rs_max_iterations", &c.photo.rs_max_iterations},
      {"rs_tolerance", &c.photo.rs_tolerance},
      {"outlier_energy", &c.photo.outlier_energy},
      {"max_keyframes", &c.max_keyframes},
      {"point_budget", &c.point_budget},
      {"candidates_per_keyframe", &c.candidates_per_keyframe},
      {"max_iterations", &c.max_iterations},
      {"lm_lambda_init", &c.lm_lambda_init},
      {"lm_lambda_up", &c.lm_lambda_up},
      {"lm_lambda_down", &c.lm_lambda_down},
      {"lm_lambda_min", &c.lm_lambda_min},
      {"lm_lambda_max", &c.lm_lambda_max},
      {"step_tolerance", &c.step_tolerance},
      {"scale_switch_threshold", &c.scale_switch_threshold},
      {"first_pose_weight", &c.first_pose_weight},
      {"yaw_weight", &c.yaw_weight},
      {"affine_weight_a", &c.affine_weight_a},
      {"affine_weight_b", &c.affine_weight_b},
      {"bias_sigma_accel", &c.bias_sigma_accel},
      {"bias_sigma_gyro", &c.bias_sigma_gyro},
      {"gravity_init_samples", &c.gravity_init_samples},
      {"kf_flow_t", &c.kf_flow_t},
      {"kf_flow_rt", &c.kf_flow_rt},
      {"kf_brightness", &c.kf_brightness},
      {"kf_max_interval", &c.kf_max_interval},
      {"min_gradient", &c.min_gradient},
      {"min_depth", &c.min_depth},
      {"max_depth", &c.max_depth},
      {"initial_depth", &c.initial_depth},
      {"trace_quality", &c.trace_quality},
      {"activation_rel_width", &c.activation_rel_width},
      {"seed", &c.seed},
      {"workers", &c.workers},
      {"mode", &c.mode},
  };
}

/// Throws DataError on values outside their valid range.
inline void validate(const SolverConfig& c) {
  auto req = [](bool ok, const char* what) {
    if (!ok) throw DataError(std::string("config: ") + what);
  };
  req(c.alpha >= 0.0 && c.beta >= 0.0, "alpha and beta must be >= 0");
  req(c.max_keyframes >= 3, "max_keyframes must be >= 3");
  req(c.point_budget >= 0 && c.candidates_per_keyframe >= 0, "point counts must be >= 0");
  req(c.max_iterations >= 0, "max_iterations must be >= 0");
  req(c.lm_lambda_init >= 0.0 && c.lm_lambda_up > 1.0 && c.lm_lambda_down > 0.0 && c.lm_lambda_down < 1.0,
      "invalid damping schedule");
  req(c.scale_switch_threshold > 0.0, "scale_switch_threshold must be > 0");
  req(c.twist.translation >= 0.0 && c.twist.rotation >= 0.0, "twist weights must be >= 0");
  req(c.photo.huber > 0.0 && c.photo.gradient_c2 > 0.0, "photometric weights must be > 0");
  req(c.min_depth > 0.0 && c.max_depth > c.min_depth && c.initial_depth > 0.0, "invalid depth range");
  req(c.kf_flow_t > 0.0 && c.kf_flow_rt > 0.0 && c.kf_max_interval > 0.0, "invalid keyframe thresholds");
  req(c.bias_sigma_accel > 0.0 && c.bias_sigma_gyro > 0.0, "bias sigmas must be > 0");
  req(c.gravity_init_samples >= 1, "gravity_init_samples must be >= 1");
  req(c.workers >= 1, "workers must be >= 1");
}

/// Sets one field from its text value.
inline void set_config_value(SolverConfig& c, const std::string& key, const std::string& value) {
  for (auto& [name, field] : config_fields(c)) {
    if (name != key) continue;
    const std::string ctx = "config key '" + key + "'";
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ShutterMode>) {
            *p = parse_shutter_mode(value);
          } else if constexpr (std::is_same_v<T, double>) {
            *p = detail::parse_double(value, ctx);
          } else {
            const int64_t v = detail::parse_int64(value, ctx);
            if (v < 0 && std::is_same_v<T, uint64_t>) throw DataError(ctx + ": must be >= 0");
            *p = static_cast<T>(v);
          }
        },
        field);
    return;
  }
  throw DataError("config: unknown key '" + key + "'");
}

inline std::string config_value(SolverConfig& c, const std::string& key) {
  for (auto& [name, field] : config_fields(c)) {
    if (name != key) continue;
    return std::visit(
        [](auto* p) -> std::string {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ShutterMode>) {
            return to_string(*p);
          } else if constexpr (std::is_same_v<T, double>) {
            return detail::format_number(*p);
          } else {
            return std::to_string(*p);
          }
        },
        field);
  }
  throw DataError("config: unknown key '" + key + "'");
}

/// Reads a flat YAML mapping of config keys; unspecified keys keep defaults.
inline SolverConfig solver_config_from_yaml(const YAML::Node& n, const std::string& where) {
  SolverConfig c;
  if (!n || n.IsNull()) return c;
  if (!n.IsMap()) throw DataError(where + ": solver config must be a mapping");
  for (const auto& kv : n) {
    const auto key = kv.first.as<std::string>();
    if (!kv.second.IsScalar()) throw DataError(where + ": '" + key + "' must be a scalar");
    try {
      set_config_value(c, key, kv.second.as<std::string>());
    } catch (const DataError& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  validate(c);
  return c;
}

inline SolverConfig load_solver_config(const fs::path& path) {
  YAML::Node n;
  try {
    n = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return solver_config_from_yaml(n, path.string());
}

inline std::string solver_config_to_yaml(SolverConfig c) {
  std::string out;
  for (const auto& [name, field] : config_fields(c)) out += name + ": " + config_value(c, name) + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// Window

/// Candidate point whose inverse depth is still searched along the epipolar
/// line.
struct ImmaturePoint {
  TrackedPoint point;  ///< inv_depth holds the current estimate
  double idepth_min = 0.0;
  double idepth_max = 0.0;
  double quality = 0.0;      ///< second-best over best energy of the last trace
  double last_length = 0.0;  ///< epipolar search length of the last trace, px
  int bad_traces = 0;
  bool good = false;
};

struct Window {
  WindowState state;
  std::vector<Image> images;  ///< aligned with state.frames
  std::vector<TrackedPoint> points;
  std::vector<ImmaturePoint> immature;
  std::vector<ImuFactor> imu_factors;
  std::vector<TwistPriorTerm> twist_terms;
  DualPrior prior;
  std::optional<Rot3> yaw_anchor;  ///< R_WmWf whose yaw is held fixed

  int size() const { return static_cast<int>(state.frames.size()); }
};

/// Context shared by the window operations.
struct Problem {
  const Calibration& calib;
  const SolverConfig& cfg;
  bool rs_active = true;
};

inline bool rs_active_for(const SolverConfig& cfg, const CameraModel& cam) {
  return cfg.mode == ShutterMode::RollingShutter && cam.row_time_td() > 0.0;
}

/// Appends a keyframe and its image; the priors grow a zero block.
inline void push_keyframe(Window& w, const KeyframeState& kf, Image image) {
  w.state.frames.push_back(kf);
  w.images.push_back(std::move(image));
  w.prior.add_frame();
}

/// Indices of the window vector that the optimizer may change.
inline std::vector<int> free_indices(const Window& w, const Problem& pb) {
  std::vector<int> idx;
  for (int i = 0; i < layout::kGlobal; ++i) idx.push_back(i);
  for (int k = 0; k < w.size(); ++k) {
    const int o = layout::frame_offset(k);
    for (int i = 0; i < layout::kFrame; ++i) {
      const bool twist = i >= layout::kTwist && i < layout::kTwist + 6;
      if (twist && !pb.rs_active) continue;
      idx.push_back(o + i);
    }
  }
  return idx;
}

/// Yaw anchor on R_WmWf and affine regularization, accumulated into sys.
inline void add_gauge_terms(const Window& w, const WindowState& x, const Problem& pb, DenseSystem& sys) {
  const int n = x.dim();
  if (w.yaw_anchor && pb.cfg.yaw_weight > 0.0) {
    const Vec3 th = (x.sg.rotation() * w.yaw_anchor->inverse()).log();
    Eigen::MatrixXd J = Eigen::MatrixXd::Zero(1, n);
    J.block<1, 3>(0, layout::kGravity) = so3_left_jacobian_inverse(th).row(2);
    Eigen::VectorXd r(1);
    r(0) = th.z();
    sys.add_factor(r, Eigen::MatrixXd::Constant(1, 1, pb.cfg.yaw_weight), J);
  }
  for (int k = 0; k < static_cast<int>(x.frames.size()); ++k) {
    const int o = layout::frame_offset(k) + layout::kAffine;
    const auto& f = x.frames[k];
    sys.energy += pb.cfg.affine_weight_a * f.aff_a * f.aff_a + pb.cfg.affine_weight_b * f.aff_b * f.aff_b;
    sys.g(o) += pb.cfg.affine_weight_a * f.aff_a;
    sys.g(o + 1) += pb.cfg.affine_weight_b * f.aff_b;
    sys.H(o, o) += pb.cfg.affine_weight_a;
    sys.H(o + 1, o + 1) += pb.cfg.affine_weight_b;
  }
}

struct WindowSystem {
  DenseSystem frames;              ///< all terms except the depth blocks
  std::vector<PointBlock> points;  ///< photometric depth blocks
  double energy = 0.0;
};

/// Total energy at state x with the given point depths. Without Jacobians
/// only the energy is filled.
inline WindowSystem evaluate_window(const Window& w, const WindowState& x, std::span<const TrackedPoint> points,
                                    const Problem& pb, bool with_jacobians) {
  std::vector<const Image*> imgs;
  for (const auto& im : w.images) imgs.push_back(&im);
  auto photo = photometric_energy<Image>(x, points, imgs, pb.calib.camera, pb.cfg.photo, pb.rs_active,
                                         pb.cfg.workers, with_jacobians);
  WindowSystem out;
  DenseSystem other(x.dim());
  imu_energy(x, w.imu_factors, pb.calib, pb.cfg.alpha, other);
  if (pb.rs_active) twist_energy(x, w.twist_terms, pb.calib, pb.cfg.twist, pb.cfg.beta, other);
  w.prior.primary().add_to(other, x);
  add_gauge_terms(w, x, pb, other);
  if (with_jacobians) {
    out.frames = std::move(photo.frames);
    out.frames += other;
  } else {
    out.frames = DenseSystem(0);
    out.frames.energy = photo.frames.energy + other.energy;
  }
  out.points = std::move(photo.points);
  out.energy = out.frames.energy;
  return out;
}

/// Re-classifies every observation as active, outlier or out of bounds at
/// the current state. Returns the number of outlier observations.
inline int update_observation_status(Window& w, const Problem& pb) {
  int outliers = 0;
  for (auto& p : w.points) {
    const int hs = w.state.slot_of(p.host_id);
    if (hs < 0) continue;
    p.status.clear();
    for (int ts = 0; ts < w.size(); ++ts) {
      if (ts == hs) continue;
      const auto lin = linearize_observation(p, w.state.frames[hs], w.state.frames[ts], pb.calib.camera,
                                             w.images[ts], pb.cfg.photo, pb.rs_active, false);
      if (lin.status != ObsStatus::Active) p.set_status(w.state.frames[ts].id, lin.status);
      if (lin.status == ObsStatus::Outlier) ++outliers;
    }
  }
  return outliers;
}

struct OptimizeReport {
  int iterations = 0;  ///< attempted steps
  int accepted = 0;
  double initial_energy = 0.0;
  double final_energy = 0.0;
  std::vector<double> energies;  ///< after each accepted step, starting with the initial energy
  bool converged = false;
  int outliers = 0;
};

/// Reduced camera system after eliminating the inverse depths with damping
/// lambda on the depth blocks.
inline void reduce_points(const WindowSystem& s, double lambda, Eigen::MatrixXd& H, Eigen::VectorXd& g) {
  H = s.frames.H;
  g = s.frames.g;
  for (const auto& p : s.points) {
    if (p.num_active == 0 || !(p.Hdd > 0.0)) continue;
    const double inv = 1.0 / (p.Hdd * (1.0 + lambda));
    H.noalias() -= inv * p.Hfd * p.Hfd.transpose();
    g.noalias() -= (inv * p.gd) * p.Hfd;
  }
}

/// Damped Gauss-Newton on all free window variables and the point depths.
/// Steps are accepted only if they lower the total energy.
inline OptimizeReport optimize_window(Window& w, const Problem& pb, int max_iterations = -1) {
  const auto& cfg = pb.cfg;
  if (max_iterations < 0) max_iterations = cfg.max_iterations;
  OptimizeReport rep;
  rep.outliers = update_observation_status(w, pb);
  const std::vector<int> F = free_indices(w, pb);
  WindowSystem cur = evaluate_window(w, w.state, w.points, pb, true);
  if (!std::isfinite(cur.energy)) throw DivergenceError("optimize: non-finite energy at the initial state");
  rep.initial_energy = cur.energy;
  rep.energies.push_back(cur.energy);
  double lambda = cfg.lm_lambda_init;
  int failures = 0;
  for (int it = 0; it < max_iterations; ++it) {
    ++rep.iterations;
    Eigen::MatrixXd H;
    Eigen::VectorXd g;
    reduce_points(cur, lambda, H, g);
    // Variables without information stay where they are.
    std::vector<int> act;
    for (int i : F)
      if (H(i, i) > 0.0) act.push_back(i);
    const int m = static_cast<int>(act.size());
    Eigen::MatrixXd A(m, m);
    Eigen::VectorXd b(m);
    for (int i = 0; i < m; ++i) {
      b(i) = -g(act[i]);
      for (int j = 0; j < m; ++j) A(i, j) = H(act[i], act[j]);
      A(i, i) *= 1.0 + lambda;
    }
    Eigen::VectorXd dF = Eigen::VectorXd::Zero(m);
    if (m > 0) {
      Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
      if (ldlt.info() == Eigen::Success) dF = ldlt.solve(b);
    }
    if (!dF.allFinite() || (m > 0 && dF.isZero(0.0) && !b.isZero(0.0))) {
      lambda = std::max(lambda * cfg.lm_lambda_up, 1e-6);
      if (lambda > cfg.lm_lambda_max) {
        throw DivergenceError("optimize: reduced system indefinite at maximum damping");
      }
      continue;
    }
    Eigen::VectorXd dx = Eigen::VectorXd::Zero(w.state.dim());
    for (int i = 0; i < m; ++i) dx(act[i]) = dF(i);
    std::vector<TrackedPoint> cand_points = w.points;
    for (size_t i = 0; i < w.points.size(); ++i) {
      const auto& p = cur.points[i];
      if (p.num_active == 0 || !(p.Hdd > 0.0)) continue;
      const double dd = -(p.gd + p.Hfd.dot(dx)) / (p.Hdd * (1.0 + lambda));
      double d = cand_points[i].inv_depth + dd;
      if (!(d > 0.0)) d = 0.5 * cand_points[i].inv_depth;
      cand_points[i].inv_depth = d;
    }
    const WindowState cand = boxplus(w.state, dx);
    const double e_new = evaluate_window(w, cand, cand_points, pb, false).energy;
    const double required = 1e-10 * std::abs(cur.energy) + 1e-12;
    if (std::isfinite(e_new) && e_new < cur.energy - required) {
      w.state = cand;
      w.points = std::move(cand_points);
      cur = evaluate_window(w, w.state, w.points, pb, true);
      ++rep.accepted;
      rep.energies.push_back(cur.energy);
      lambda = std::max(lambda * cfg.lm_lambda_down, cfg.lm_lambda_min);
      failures = 0;
      if (dx.lpNorm<Eigen::Infinity>() < cfg.step_tolerance) {
        rep.converged = true;
        break;
      }
    } else {
      if (!std::isfinite(e_new) && ++failures > 20) throw DivergenceError("optimize: non-finite energy");
      if (dx.lpNorm<Eigen::Infinity>() < cfg.step_tolerance) {
        rep.converged = true;
        break;
      }
      lambda = std::max(lambda * cfg.lm_lambda_up, 1e-6);
      if (lambda > cfg.lm_lambda_max) {
        rep.converged = true;
        break;
      }
    }
  }
  rep.final_energy = cur.energy;
  for (const auto& f : w.state.frames)
    if (!f.pose.matrix().allFinite() || !f.velocity.allFinite() || !f.bias.allFinite() || !f.twist.allFinite())
      throw DivergenceError("optimize: non-finite state");
  if (!(w.state.sg.scale() > 1e-6 && w.state.sg.scale() < 1e6)) throw DivergenceError("optimize: scale exploded");
  return rep;
}

/// Gauge prior on the first keyframe pose and a weak prior on its biases.
/// The window must hold exactly one keyframe.
inline void add_initial_priors(Window& w, const SolverConfig& cfg) {
  if (w.size() != 1) throw DomainError("add_initial_priors: expects a single keyframe");
  const int n = w.state.dim();
  const int o = layout::frame_offset(0);
  DenseSystem anchor(n);
  anchor.H.block<6, 6>(o + layout::kPose, o + layout::kPose) = cfg.first_pose_weight * Mat6::Identity();
  w.prior.add_visual(anchor, w.state);
  DenseSystem bias(n);
  bias.H.block<3, 3>(o + layout::kBiasAccel, o + layout::kBiasAccel) =
      Mat3::Identity() / (cfg.bias_sigma_accel * cfg.bias_sigma_accel);
  bias.H.block<3, 3>(o + layout::kBiasGyro, o + layout::kBiasGyro) =
      Mat3::Identity() / (cfg.bias_sigma_gyro * cfg.bias_sigma_gyro);
  w.prior.add_inertial(bias, w.state);
}

// ---------------------------------------------------------------------------
// Marginalization

/// Photometric system of the given points at the current state with their
/// inverse depths Schur-eliminated.
inline DenseSystem schur_points(const Window& w, std::span<const TrackedPoint> points, const Problem& pb) {
  std::vector<const Image*> imgs;
  for (const auto& im : w.images) imgs.push_back(&im);
  auto photo = photometric_energy<Image>(w.state, points, imgs, pb.calib.camera, pb.cfg.photo, pb.rs_active,
                                         pb.cfg.workers, true);
  DenseSystem s = std::move(photo.frames);
  for (const auto& p : photo.points) {
    if (p.num_active == 0 || !(p.Hdd > 0.0)) continue;
    const double inv = 1.0 / p.Hdd;
    s.H.noalias() -= inv * p.Hfd * p.Hfd.transpose();
    s.g.noalias() -= (inv * p.gd) * p.Hfd;
    s.energy -= inv * p.gd * p.gd;
  }
  s.H = 0.5 * (s.H + s.H.transpose());
  return s;
}

/// Moves the selected points into the visual part of the priors.
inline void marginalize_points(Window& w, const std::vector<size_t>& which, const Problem& pb) {
  if (which.empty()) return;
  std::vector<TrackedPoint> sel, keep;
  std::vector<bool> mark(w.points.size(), false);
  for (size_t i : which) mark[i] = true;
  for (size_t i = 0; i < w.points.size(); ++i) (mark[i] ? sel : keep).push_back(w.points[i]);
  w.prior.add_visual(schur_points(w, sel, pb), w.state);
  w.points = std::move(keep);
}

/// Eliminates keyframe `slot`: points it hosts are marginalized, other
/// observations into it are dropped, and its inertial and twist factors
/// enter the priors before its block is Schur-complemented out.
inline void marginalize_keyframe(Window& w, int slot, const Problem& pb) {
  if (slot < 0 || slot >= w.size()) throw DomainError("marginalize_keyframe: slot outside the window");
  const int64_t id = w.state.frames[slot].id;
  const int n = w.state.dim();

  std::vector<size_t> hosted;
  for (size_t i = 0; i < w.points.size(); ++i)
    if (w.points[i].host_id == id) hosted.push_back(i);
  std::vector<TrackedPoint> sel;
  for (size_t i : hosted) sel.push_back(w.points[i]);
  DenseSystem vis = sel.empty() ? DenseSystem(n) : schur_points(w, sel, pb);
  {
    // The keyframe's affine regularizer goes with it.
    const int o = layout::frame_offset(slot) + layout::kAffine;
    const auto& f = w.state.frames[slot];
    const double wa = pb.cfg.affine_weight_a, wb = pb.cfg.affine_weight_b;
    vis.energy += wa * f.aff_a * f.aff_a + wb * f.aff_b * f.aff_b;
    vis.g(o) += wa * f.aff_a;
    vis.g(o + 1) += wb * f.aff_b;
    vis.H(o, o) += wa;
    vis.H(o + 1, o + 1) += wb;
  }
  w.prior.add_visual(vis, w.state);

  DenseSystem inert(n);
  std::vector<ImuFactor> imu_keep;
  for (auto& f : w.imu_factors) {
    if (f.from_id == id || f.to_id == id) {
      inert.add_factor(linearize_imu_factor(w.state, f, pb.calib, pb.cfg.alpha));
    } else {
      imu_keep.push_back(std::move(f));
    }
  }
  std::vector<TwistPriorTerm> twist_keep;
  for (const auto& t : w.twist_terms) {
    if (t.keyframe_id == id) {
      if (pb.rs_active)
        inert.add_factor(linearize_twist_factor(w.state, t, pb.calib, pb.cfg.twist, pb.cfg.beta));
    } else {
      twist_keep.push_back(t);
    }
  }
  w.prior.add_inertial(inert, w.state);
  w.imu_factors = std::move(imu_keep);
  w.twist_terms = std::move(twist_keep);

  w.prior.marginalize_frame(slot);
  w.state.frames.erase(w.state.frames.begin() + slot);
  w.images.erase(w.images.begin() + slot);
  std::vector<TrackedPoint> keep;
  for (size_t i = 0, h = 0; i < w.points.size(); ++i) {
    if (h < hosted.size() && hosted[h] == i) {
      ++h;
      continue;
    }
    auto p = std::move(w.points[i]);
    std::erase_if(p.status, [&](const auto& s) { return s.first == id; });
    keep.push_back(std::move(p));
  }
  w.points = std::move(keep);
  std::erase_if(w.immature, [&](const ImmaturePoint& ip) { return ip.point.host_id == id; });
}

/// Replaces the primary prior by the secondary once the scale has moved
/// further than the threshold from the primary's linearization point.
inline bool maybe_switch_prior(Window& w, const SolverConfig& cfg) {
  return w.prior.maybe_switch(w.state, cfg.scale_switch_threshold);
}

/// Keyframe to drop: far from the newest keyframe and close to the others.
/// The two newest keyframes are never chosen.
inline int choose_keyframe_to_drop(const Window& w) {
  const int n = w.size();
  if (n < 3) throw DomainError("choose_keyframe_to_drop: window too small");
  auto dist = [&](int i, int j) {
    return (w.state.frames[i].pose * w.state.frames[j].pose.inverse()).translation().norm();
  };
  int best = 0;
  double best_score = -1.0;
  for (int i = 0; i + 2 < n; ++i) {
    double sum = 0.0;
    for (int j = 0; j + 1 < n; ++j)
      if (j != i) sum += 1.0 / (1e-5 + dist(i, j));
    const double score = std::sqrt(dist(i, n - 1)) * sum;
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// Tracking

struct FramePrediction {
  KeyframeState state;  ///< id is left at zero
  double flow_t = 0.0;   ///< RMS flow from translation alone, px
  double flow_rt = 0.0;  ///< RMS flow from the full motion, px
  double brightness = 0.0;  ///< |log| of the mean intensity ratio
  int flow_points = 0;
  double score = 0.0;
  bool keyframe = false;
};

inline double mean_intensity(const Image& im) {
  double s = 0.0;
  for (float v : im.data()) s += v;
  return s / std::max<size_t>(1, im.data().size());
}

/// Initializes a frame at time t from the newest keyframe by IMU prediction,
/// with the twist from the IMU prior, and decides whether it becomes a
/// keyframe. Throws DataError if the IMU does not cover the interval.
inline FramePrediction track_frame(const Window& w, double t, const Image& image, std::span<const ImuSample> imu,
                                   const Problem& pb) {
  if (w.size() == 0) throw DomainError("track_frame: empty window");
  const auto& last = w.state.frames.back();
  if (!(t > last.timestamp)) throw DataError("track_frame: frame time not after the newest keyframe");
  const auto& sg = w.state.sg;
  const auto pre = preintegrate(imu, last.timestamp, t, last.bias, pb.cfg.imu_noise);
  const auto ps = predict_state(metric_state(last, sg, pb.calib), pre, pb.calib.gravity);

  FramePrediction out;
  auto& kf = out.state;
  kf.timestamp = t;
  kf.pose = camera_pose_from_metric(Pose3(ps.R, ps.p), sg, pb.calib);
  kf.velocity = ps.v;
  kf.bias = last.bias;
  kf.aff_a = last.aff_a;
  kf.aff_b = last.aff_b;
  if (pb.rs_active) {
    kf.twist = prior_twist(camera_twist(imu_twist(kf, sg, pb.calib, interpolate_gyro(imu, t)), pb.calib),
                           sg.scale(), pb.calib.camera.row_time_td());
  }

  // Flow of the window's points between the newest keyframe and this frame.
  const auto& cam = pb.calib.camera;
  const Pose3 T_rel = kf.pose * last.pose.inverse();
  double sum_t = 0.0, sum_rt = 0.0;
  auto accumulate = [&](const TrackedPoint& p) {
    const int hs = w.state.slot_of(p.host_id);
    if (hs < 0 || !(p.inv_depth > 0.0)) return;
    const Vec3 X = last.pose * w.state.frames[hs].pose.inverse() * cam.unproject(p.pixel, p.inv_depth);
    const auto u0 = cam.try_project(X);
    const auto ut = cam.try_project(X + T_rel.translation());
    const auto urt = cam.try_project(T_rel * X);
    if (!u0 || !ut || !urt || !cam.in_image(*u0)) return;
    sum_t += (*ut - *u0).squaredNorm();
    sum_rt += (*urt - *u0).squaredNorm();
    ++out.flow_points;
  };
  if (w.points.size() >= 10) {
    for (const auto& p : w.points) accumulate(p);
  } else {
    for (const auto& ip : w.immature) accumulate(ip.point);
  }
  if (out.flow_points > 0) {
    out.flow_t = std::sqrt(sum_t / out.flow_points);
    out.flow_rt = std::sqrt(sum_rt / out.flow_points);
  }
  const double m_new = mean_intensity(image), m_last = mean_intensity(w.images.back());
  if (m_new > 0.0 && m_last > 0.0) out.brightness = std::abs(std::log(m_new / m_last));
  const double wh = cam.width() + cam.height();
  out.score = out.flow_t / (pb.cfg.kf_flow_t * wh) + out.flow_rt / (pb.cfg.kf_flow_rt * wh) +
              pb.cfg.kf_brightness * out.brightness;
  out.keyframe = out.score > 1.0 || t - last.timestamp >= pb.cfg.kf_max_interval - 1e-9;
  return out;
}

// ---------------------------------------------------------------------------
// Points

/// Up to `count` pixels, one per grid cell, drawn with probability
/// proportional to the gradient magnitude among pixels above min_gradient.
inline std::vector<Vec2> select_candidates(const Image& im, int count, double min_gradient, std::mt19937_64& rng,
                                           int margin = kPatternRadius + 3) {
  std::vector<Vec2> out;
  if (count <= 0) return out;
  const int W = im.width(), H = im.height();
  const int cell = std::max(4, static_cast<int>(std::sqrt(double(W - 2 * margin) * (H - 2 * margin) / count)));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  const double g2min = min_gradient * min_gradient;
  for (int cy = margin; cy < H - margin; cy += cell) {
    for (int cx = margin; cx < W - margin; cx += cell) {
      double total = 0.0;
      std::vector<std::pair<int, int>> pix;
      std::vector<double> wts;
      for (int y = cy; y < std::min(cy + cell, H - margin); ++y)
        for (int x = cx; x < std::min(cx + cell, W - margin); ++x) {
          const double g2 = im.gradient_norm2(x, y);
          if (g2 < g2min) continue;
          pix.emplace_back(x, y);
          wts.push_back(std::sqrt(g2));
          total += wts.back();
        }
      if (pix.empty()) continue;
      double r = uni(rng) * total;
      size_t k = 0;
      for (; k + 1 < pix.size(); ++k) {
        r -= wts[k];
        if (r < 0.0) break;
      }
      out.emplace_back(pix[k].first, pix[k].second);
    }
  }
  return out;
}

/// Creates immature points on the newest keyframe.
inline void add_candidates(Window& w, const Problem& pb, std::mt19937_64& rng) {
  const int s = w.size() - 1;
  const auto& kf = w.state.frames[s];
  const auto px = select_candidates(w.images[s], pb.cfg.candidates_per_keyframe, pb.cfg.min_gradient, rng);
  for (const auto& u : px) {
    auto p = make_tracked_point(kf.id, u, 1.0 / pb.cfg.initial_depth, w.images[s], pb.calib.camera, pb.rs_active);
    if (!p) continue;
    ImmaturePoint ip;
    ip.point = std::move(*p);
    ip.idepth_min = w.state.sg.scale() / pb.cfg.max_depth;
    ip.idepth_max = w.state.sg.scale() / pb.cfg.min_depth;
    w.immature.push_back(std::move(ip));
  }
}

enum class TraceResult { Good, NoBaseline, Bad, OutOfBounds };

/// Searches the inverse-depth interval of an immature point along its
/// epipolar curve in the target keyframe and narrows the interval to two
/// pixels around the best match.
inline TraceResult trace_point(ImmaturePoint& ip, const KeyframeState& host, const KeyframeState& target,
                               const Image& target_image, const Problem& pb) {
  const auto& cam = pb.calib.camera;
  auto project = [&](double d) {
    TrackedPoint p = ip.point;
    p.inv_depth = d;
    return project_rs(p, host, target, cam, pb.rs_active, pb.cfg.photo);
  };
  double lo = ip.idepth_min, hi = ip.idepth_max;
  auto u_lo = project(lo);
  if (!u_lo || !cam.in_image(u_lo->pixel)) return TraceResult::OutOfBounds;
  auto u_hi = project(hi);
  for (int k = 0; k < 20 && (!u_hi || !cam.in_image(u_hi->pixel)); ++k) {
    hi = lo + 0.5 * (hi - lo);
    u_hi = project(hi);
  }
  if (!u_hi || !cam.in_image(u_hi->pixel)) return TraceResult::OutOfBounds;
  const double L = (u_hi->pixel - u_lo->pixel).norm();
  if (L < 1.5) {
    ip.last_length = L;
    return TraceResult::NoBaseline;
  }
  const int n = std::clamp(static_cast<int>(std::ceil(L / 0.7)) + 1, 5, 400);
  auto energy_at = [&](double d) {
    TrackedPoint p = ip.point;
    p.inv_depth = d;
    const auto lin = linearize_observation(p, host, target, cam, target_image, pb.cfg.photo, pb.rs_active, false);
    return lin.status == ObsStatus::OutOfBounds ? std::numeric_limits<double>::infinity() : lin.energy;
  };
  std::vector<double> e(n), ds(n);
  int best = -1;
  for (int k = 0; k < n; ++k) {
    ds[k] = lo + (hi - lo) * k / (n - 1);
    e[k] = energy_at(ds[k]);
    if (best < 0 || e[k] < e[best]) best = k;
  }
  if (best < 0 || !std::isfinite(e[best])) return TraceResult::OutOfBounds;
  const double px_per_sample = L / (n - 1);
  const int excl = static_cast<int>(std::ceil(2.0 / px_per_sample));
  double second = std::numeric_limits<double>::infinity();
  for (int k = 0; k < n; ++k)
    if (std::abs(k - best) > excl) second = std::min(second, e[k]);

  // Gauss-Newton refinement of the inverse depth.
  const double step = (hi - lo) / (n - 1);
  double d = ds[best], eb = e[best];
  for (int it = 0; it < 3; ++it) {
    TrackedPoint p = ip.point;
    p.inv_depth = d;
    const auto lin = linearize_observation(p, host, target, cam, target_image, pb.cfg.photo, pb.rs_active, true);
    if (lin.status == ObsStatus::OutOfBounds) break;
    const double H = lin.J_depth.dot(lin.weight.cwiseProduct(lin.J_depth));
    const double g = lin.J_depth.dot(lin.weight.cwiseProduct(lin.r));
    if (!(H > 0.0)) break;
    const double dn = std::clamp(d - g / H, ds[best] - step, ds[best] + step);
    const double en = energy_at(dn);
    if (!(en < eb)) break;
    d = dn;
    eb = en;
  }
  ip.last_length = L;
  ip.quality = eb > 0.0 ? second / eb : std::numeric_limits<double>::infinity();
  if (!(eb < pb.cfg.photo.outlier_energy) || ip.quality < pb.cfg.trace_quality) {
    ++ip.bad_traces;
    ip.good = false;
    return TraceResult::Bad;
  }
  const double per_px = (hi - lo) / L;
  ip.point.inv_depth = d;
  ip.idepth_min = std::max(1e-9, d - 2.0 * per_px);
  ip.idepth_max = d + 2.0 * per_px;
  ip.good = true;
  ip.bad_traces = 0;
  return TraceResult::Good;
}

/// Traces every immature point into the newest keyframe; drops points that
/// left the image or failed twice.
inline void trace_immature(Window& w, const Problem& pb) {
  const int s = w.size() - 1;
  const auto& target = w.state.frames[s];
  std::vector<ImmaturePoint> keep;
  for (auto& ip : w.immature) {
    const int hs = w.state.slot_of(ip.point.host_id);
    if (hs < 0) continue;
    if (hs == s) {
      keep.push_back(std::move(ip));
      continue;
    }
    const auto r = trace_point(ip, w.state.frames[hs], target, w.images[s], pb);
    if (r == TraceResult::OutOfBounds || ip.bad_traces >= 2) continue;
    keep.push_back(std::move(ip));
  }
  w.immature = std::move(keep);
}

/// Promotes well-localized immature points while the budget allows, at most
/// one point per cell of an occupancy grid over the newest keyframe.
inline int activate_points(Window& w, const Problem& pb) {
  const int s = w.size() - 1;
  const auto& cam = pb.calib.camera;
  const auto& newest = w.state.frames[s];
  const int budget = pb.cfg.point_budget;
  if (static_cast<int>(w.points.size()) >= budget) return 0;
  const double cell = std::max(3.0, std::sqrt(double(cam.width()) * cam.height() / std::max(1, budget)));
  const int gw = static_cast<int>(std::ceil(cam.width() / cell)), gh = static_cast<int>(std::ceil(cam.height() / cell));
  std::vector<char> occ(static_cast<size_t>(gw) * gh, 0);
  auto cell_of = [&](const Vec2& u) -> int {
    if (!cam.in_image(u)) return -1;
    return static_cast<int>(u.y() / cell) * gw + static_cast<int>(u.x() / cell);
  };
  for (const auto& p : w.points) {
    const int hs = w.state.slot_of(p.host_id);
    if (hs < 0) continue;
    const auto u = hs == s ? std::optional<RsProjection>(RsProjection{p.pixel, 0.0, 0})
                           : project_rs(p, w.state.frames[hs], newest, cam, pb.rs_active, pb.cfg.photo);
    if (!u) continue;
    const int c = cell_of(u->pixel);
    if (c >= 0) occ[c] = 1;
  }
  int added = 0;
  std::vector<ImmaturePoint> keep;
  for (auto& ip : w.immature) {
    const int hs = w.state.slot_of(ip.point.host_id);
    const double mid = 0.5 * (ip.idepth_min + ip.idepth_max);
    const bool ready = hs >= 0 && hs != s && ip.good &&
                       ip.idepth_max - ip.idepth_min < pb.cfg.activation_rel_width * mid &&
                       static_cast<int>(w.points.size()) < budget;
    if (!ready) {
      keep.push_back(std::move(ip));
      continue;
    }
    const auto u = project_rs(ip.point, w.state.frames[hs], newest, cam, pb.rs_active, pb.cfg.photo);
    const int c = u ? cell_of(u->pixel) : -1;
    if (c < 0 || occ[c]) {
      keep.push_back(std::move(ip));
      continue;
    }
    occ[c] = 1;
    w.points.push_back(ip.point);
    ++added;
  }
  w.immature = std::move(keep);
  return added;
}

/// After optimization: drops points without any active observation and
/// marginalizes points that are no longer visible in the newest keyframe.
inline void retire_points(Window& w, const Problem& pb) {
  const int s = w.size() - 1;
  const int64_t newest = w.state.frames[s].id;
  std::vector<TrackedPoint> alive;
  std::vector<size_t> to_marg;
  std::vector<TrackedPoint> pts;
  for (auto& p : w.points) {
    const int hs = w.state.slot_of(p.host_id);
    if (hs < 0 || !(p.inv_depth > 0.0)) continue;
    int active = 0;
    for (int ts = 0; ts < w.size(); ++ts)
      if (ts != hs && p.status_for(w.state.frames[ts].id) == ObsStatus::Active) ++active;
    if (active == 0) continue;
    pts.push_back(std::move(p));
  }
  w.points = std::move(pts);
  update_observation_status(w, pb);
  for (size_t i = 0; i < w.points.size(); ++i) {
    const auto& p = w.points[i];
    if (p.host_id == newest) continue;
    if (p.status_for(newest) != ObsStatus::Active) to_marg.push_back(i);
  }
  marginalize_points(w, to_marg, pb);
}

// ---------------------------------------------------------------------------
// Odometry driver

struct KeyframeRecord {
  int64_t id = 0;
  double t = 0.0;
  Pose3 T_WI;  ///< metric IMU pose
  Vec3 velocity = Vec3::Zero();
  Bias bias = Bias::Zero();
  double scale = 1.0;
  int points = 0;
};

struct OdometryStats {
  int frames = 0;
  int skipped = 0;
  int keyframes = 0;
  int prior_switches = 0;
  int max_points = 0;
  int optimizer_iterations = 0;
};

/// Rotation taking unit vector a onto unit vector b.
inline Rot3 rotation_between(const Vec3& a, const Vec3& b) {
  return Rot3(Eigen::Quaterniond::FromTwoVectors(a, b).toRotationMatrix());
}

class Odometry {
 public:
  Odometry(const Calibration& calib, const SolverConfig& cfg, std::vector<ImuSample> imu)
      : calib_(calib), cfg_(cfg), imu_(std::move(imu)), rng_(cfg.seed) {
    validate(cfg_);
    if (imu_.empty()) throw DataError("odometry: empty IMU stream");
    rs_ = rs_active_for(cfg_, calib_.camera);
  }

  const Window& window() const { return w_; }
  const OdometryStats& stats() const { return stats_; }
  const std::vector<std::string>& diagnostics() const { return diag_; }
  bool rs_active() const { return rs_; }
  Problem problem() const { return {calib_, cfg_, rs_}; }

  /// Processes one frame; returns true if it became a keyframe.
  bool add_frame(double t, Image image) {
    ++stats_.frames;
    if (w_.size() == 0) {
      initialize(t, std::move(image));
      return true;
    }
    const Problem pb = problem();
    FramePrediction pred;
    try {
      pred = track_frame(w_, t, image, imu_, pb);
    } catch (const DataError& e) {
      ++stats_.skipped;
      diag_.push_back("frame at t=" + detail::format_number(t) + " skipped: " + e.what());
      return false;
    }
    if (!pred.keyframe) return false;
    add_keyframe(pred.state, std::move(image));
    return true;
  }

  /// Final estimates of all keyframes, ordered by time.
  std::vector<KeyframeRecord> finish() {
    auto out = records_;
    for (int k = 0; k < w_.size(); ++k) out.push_back(record(k));
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.t < b.t; });
    return out;
  }

 private:
  KeyframeRecord record(int slot) const {
    const auto& kf = w_.state.frames[slot];
    KeyframeRecord r;
    r.id = kf.id;
    r.t = kf.timestamp;
    r.T_WI = imu_pose_metric(kf, w_.state.sg, calib_);
    r.velocity = kf.velocity;
    r.bias = kf.bias;
    r.scale = w_.state.sg.scale();
    r.points = static_cast<int>(w_.points.size());
    return r;
  }

  void initialize(double t, Image image) {
    const int n = std::min<int>(cfg_.gravity_init_samples, static_cast<int>(imu_.size()));
    Vec3 a = Vec3::Zero();
    for (int i = 0; i < n; ++i) a += imu_[i].accel;
    if (!(a.norm() > 1e-6)) throw DataError("odometry: cannot initialize gravity from a zero accelerometer mean");
    const Rot3 R_WI = rotation_between(a.normalized(), -calib_.gravity.normalized());
    w_.state.sg = ScaleGravity{ScaledRot(1.0, Rot3(R_WI.matrix() * calib_.T_CmI.rotation().matrix().transpose()))};
    w_.yaw_anchor = w_.state.sg.rotation();
    KeyframeState kf;
    kf.id = next_id_++;
    kf.timestamp = t;
    if (rs_) {
      kf.twist = prior_twist(camera_twist(imu_twist(kf, w_.state.sg, calib_, interpolate_gyro(imu_, t)), calib_),
                             1.0, calib_.camera.row_time_td());
    }
    push_keyframe(w_, kf, std::move(image));
    add_initial_priors(w_, cfg_);
    if (rs_) w_.twist_terms.push_back({kf.id, interpolate_gyro(imu_, t)});
    add_candidates(w_, problem(), rng_);
    ++stats_.keyframes;
  }

  void add_keyframe(KeyframeState kf, Image image) {
    const Problem pb = problem();
    const auto& last = w_.state.frames.back();
    kf.id = next_id_++;
    ImuFactor f{last.id, kf.id, preintegrate(imu_, last.timestamp, kf.timestamp, last.bias, cfg_.imu_noise)};
    push_keyframe(w_, kf, std::move(image));
    w_.imu_factors.push_back(std::move(f));
    if (rs_) w_.twist_terms.push_back({kf.id, interpolate_gyro(imu_, kf.timestamp)});
    ++stats_.keyframes;

    trace_immature(w_, pb);
    activate_points(w_, pb);
    for (auto& fac : w_.imu_factors) {
      const auto& from = w_.state.frames[w_.state.slot_of(fac.from_id)];
      if (fac.preint.requires_reintegration(from.bias)) fac.preint.reintegrate(from.bias);
    }
    const auto rep = optimize_window(w_, pb);
    stats_.optimizer_iterations += rep.iterations;
    retire_points(w_, pb);
    stats_.max_points = std::max<int>(stats_.max_points, static_cast<int>(w_.points.size()));
    while (w_.size() > cfg_.max_keyframes) {
      const int slot = choose_keyframe_to_drop(w_);
      records_.push_back(record(slot));
      marginalize_keyframe(w_, slot, pb);
    }
    if (maybe_switch_prior(w_, cfg_)) ++stats_.prior_switches;
    add_candidates(w_, pb, rng_);
  }

  Calibration calib_;
  SolverConfig cfg_;
  std::vector<ImuSample> imu_;
  std::mt19937_64 rng_;
  bool rs_ = true;
  Window w_;
  int64_t next_id_ = 0;
  std::vector<KeyframeRecord> records_;
  std::vector<std::string> diag_;
  OdometryStats stats_;
};

struct OdometryResult {
  std::vector<KeyframeRecord> keyframes;
  OdometryStats stats;
  std::vector<std::string> diagnostics;
  bool diverged = false;
  std::string failure;
  double final_scale = 1.0;

  std::vector<TimedPose> trajectory() const {
    std::vector<TimedPose> out;
    for (const auto& k : keyframes) out.push_back({k.t, k.T_WI});
    return out;
  }
};

/// Runs the full pipeline over one image stream of a dataset. Divergence
/// ends the run early with the keyframes estimated so far.
inline OdometryResult run_odometry(const DatasetIndex& d, const SolverConfig& cfg, const std::string& stream,
                                   const std::function<void(int, int)>& progress = {}) {
  const Calibration calib = d.calibration(stream);
  const auto images = d.stream(stream);
  if (images.empty()) throw DataError("dataset: no images in stream '" + stream + "'");
  Odometry odo(calib, cfg, d.imu);
  OdometryResult res;
  try {
    for (size_t i = 0; i < images.size(); ++i) {
      odo.add_frame(images[i].t, load_dataset_image(d, images[i]));
      if (progress) progress(static_cast<int>(i + 1), static_cast<int>(images.size()));
    }
  } catch (const DivergenceError& e) {
    res.diverged = true;
    res.failure = e.what();
  }
  res.keyframes = odo.finish();
  res.stats = odo.stats();
  res.diagnostics = odo.diagnostics();
  if (odo.window().size() > 0) res.final_scale = odo.window().state.sg.scale();
  return res;
}

/// Per-keyframe state log: id, time, velocity, biases and scale.
inline void write_keyframe_log(const fs::path& path, const std::vector<KeyframeRecord>& kfs, int64_t epoch_ns) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << "# id,timestamp_s,vx,vy,vz,bax,bay,baz,bgx,bgy,bgz,scale,points\n";
  for (const auto& k : kfs) {
    const int64_t ns = epoch_ns + static_cast<int64_t>(std::llround(k.t * 1e9));
    f << k.id << ',' << detail::format_seconds_ns(ns);
    for (int i = 0; i < 3; ++i) f << ',' << detail::format_number(k.velocity(i));
    for (int i = 0; i < 6; ++i) f << ',' << detail::format_number(k.bias(i));
    f << ',' << detail::format_number(k.scale) << ',' << k.points << '\n';
  }
}

}  // namespace rsvio
