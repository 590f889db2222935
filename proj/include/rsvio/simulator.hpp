#pragma once

// Synthetic rolling-shutter camera + IMU data: analytic trajectories, a
// textured planar scene rendered by per-pixel ray casting at each pixel's
// own capture time, and IMU synthesis.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <set>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "rsvio/camera.hpp"
#include "rsvio/dataset_io.hpp"
#include "rsvio/errors.hpp"
#include "rsvio/image.hpp"
#include "rsvio/imu_preint.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/parallel.hpp"
#include "rsvio/state.hpp"
#include "rsvio/twist_prior.hpp"

namespace rsvio {

/// Kinematic state of the IMU body in the metric world W_m.
struct TrajectoryState {
  Rot3 R;                        ///< R_WmI
  Vec3 p = Vec3::Zero();         ///< position, m
  Vec3 v = Vec3::Zero();         ///< world velocity, m/s
  Vec3 a = Vec3::Zero();         ///< world acceleration, m/s^2
  Vec3 omega = Vec3::Zero();     ///< body angular velocity, rad/s

  Pose3 pose() const { return Pose3(R, p); }
  /// Body twist (R^T v, omega).
  Vec6 body_twist() const {
    Vec6 xi;
    xi << R.matrix().transpose() * v, omega;
    return xi;
  }
};

/// T(tau) = T_start exp(xi tau) with xi the body twist. Without an explicit
/// twist the incoming twist is held.
struct ConstantTwistSegment {
  double duration = 1.0;
  std::optional<Vec6> twist;
};

/// Position p_s + v_s tau + A_t (1 - cos 2 pi f_t tau) and rotation
/// R_s Exp(w_s tau + A_r (1 - cos 2 pi f_r tau)). Frequencies are rounded to
/// whole periods of the segment so the incoming twist is restored at its end.
struct SmoothSegment {
  double duration = 1.0;
  Vec6 amplitude = Vec6::Zero();  ///< translation (m), rotation (rad)
  Vec6 frequency = Vec6::Zero();  ///< Hz
};

using Segment = std::variant<ConstantTwistSegment, SmoothSegment>;

struct TrajectorySpec {
  Pose3 start_pose;                  ///< T_WmI at t = 0
  Vec6 start_twist = Vec6::Zero();   ///< incoming body twist
  std::vector<Segment> segments;
};

/// Analytic C1 trajectory built from segments.
class Trajectory {
 public:
  Trajectory() = default;
  explicit Trajectory(const TrajectorySpec& spec) {
    if (spec.segments.empty()) throw DataError("trajectory: no segments");
    TrajectoryState s;
    s.R = spec.start_pose.rotation();
    s.p = spec.start_pose.translation();
    s.v = s.R.matrix() * spec.start_twist.head<3>();
    s.omega = spec.start_twist.tail<3>();
    double t0 = 0.0;
    for (const auto& seg : spec.segments) {
      Piece pc;
      pc.t0 = t0;
      pc.start = s;
      if (const auto* c = std::get_if<ConstantTwistSegment>(&seg)) {
        if (!(c->duration > 0.0)) throw DataError("trajectory: segment duration must be positive");
        pc.duration = c->duration;
        pc.constant = true;
        const Vec6 incoming = s.body_twist();
        if (c->twist && ((*c->twist - incoming).norm() > 1e-9))
          throw DataError("trajectory: constant-twist segment does not continue the incoming twist (C1)");
        pc.twist = c->twist ? *c->twist : incoming;
      } else {
        const auto& m = std::get<SmoothSegment>(seg);
        if (!(m.duration > 0.0)) throw DataError("trajectory: segment duration must be positive");
        pc.duration = m.duration;
        pc.amplitude = m.amplitude;
        for (int i = 0; i < 6; ++i) {
          const double periods = std::round(m.frequency(i) * m.duration);
          pc.frequency(i) = (m.frequency(i) > 0.0 ? std::max(1.0, periods) : 0.0) / m.duration;
        }
      }
      pieces_.push_back(pc);
      t0 += pc.duration;
      s = eval(pieces_.back(), pc.duration);
    }
    duration_ = t0;
  }

  double duration() const { return duration_; }

  TrajectoryState state(double t) const {
    if (pieces_.empty()) throw DomainError("trajectory: empty");
    size_t k = 0;
    while (k + 1 < pieces_.size() && t >= pieces_[k + 1].t0) ++k;
    return eval(pieces_[k], t - pieces_[k].t0);
  }

  Pose3 pose(double t) const { return state(t).pose(); }

 private:
  struct Piece {
    double t0 = 0.0, duration = 0.0;
    bool constant = false;
    TrajectoryState start;
    Vec6 twist = Vec6::Zero();
    Vec6 amplitude = Vec6::Zero(), frequency = Vec6::Zero();
  };

  static TrajectoryState eval(const Piece& pc, double tau) {
    TrajectoryState out;
    if (pc.constant) {
      const Vec3 rho = pc.twist.head<3>(), w = pc.twist.tail<3>();
      const Pose3 T = pc.start.pose() * exp_se3(pc.twist, tau);
      out.R = T.rotation();
      out.p = T.translation();
      out.v = out.R.matrix() * rho;
      out.a = out.R.matrix() * w.cross(rho);
      out.omega = w;
      return out;
    }
    const double two_pi = 2.0 * std::numbers::pi;
    Vec3 dp = pc.start.v * tau, vel = pc.start.v, acc = Vec3::Zero();
    Vec3 theta = pc.start.omega * tau, theta_dot = pc.start.omega;
    for (int i = 0; i < 3; ++i) {
      const double wt = two_pi * pc.frequency(i), wr = two_pi * pc.frequency(3 + i);
      const double At = pc.amplitude(i), Ar = pc.amplitude(3 + i);
      dp(i) += At * (1.0 - std::cos(wt * tau));
      vel(i) += At * wt * std::sin(wt * tau);
      acc(i) += At * wt * wt * std::cos(wt * tau);
      theta(i) += Ar * (1.0 - std::cos(wr * tau));
      theta_dot(i) += Ar * wr * std::sin(wr * tau);
    }
    out.R = pc.start.R * Rot3::exp(theta);
    out.p = pc.start.p + dp;
    out.v = vel;
    out.a = acc;
    out.omega = so3_right_jacobian(theta) * theta_dot;
    return out;
  }

  std::vector<Piece> pieces_;
  double duration_ = 0.0;
};

/// Trajectory resampled at the IMU rate so that zero-order-hold
/// preintegration reproduces it exactly: between samples the body rotates
/// at constant rate and the world acceleration is constant.
class SampledTrajectory {
 public:
  SampledTrajectory() = default;
  SampledTrajectory(const Trajectory& design, double rate_hz) : dt_(1.0 / rate_hz) {
    if (!(rate_hz > 0.0)) throw DataError("sampled trajectory: rate must be positive");
    const int n = static_cast<int>(std::floor(design.duration() * rate_hz + 1e-9)) + 1;
    for (int k = 0; k < n; ++k) design_.push_back(design.state(k * dt_));
    knots_.resize(n);
    knots_[0] = design_[0];
    for (int k = 0; k < n; ++k) {
      auto& s = knots_[k];
      s.R = design_[k].R;
      s.v = design_[k].v;
      if (k > 0) {
        const auto& prev = knots_[k - 1];
        s.p = prev.p + 0.5 * (prev.v + s.v) * dt_;
      }
      if (k + 1 < n) {
        s.omega = (design_[k].R.inverse() * design_[k + 1].R).log() / dt_;
        s.a = (design_[k + 1].v - design_[k].v) / dt_;
      } else {
        s.omega = design_[k].omega;
        s.a = design_[k].a;
      }
    }
  }

  double duration() const { return (knots_.size() - 1) * dt_; }
  double sample_period() const { return dt_; }
  size_t num_samples() const { return knots_.size(); }
  double sample_time(size_t k) const { return k * dt_; }

  TrajectoryState state(double t) const {
    if (knots_.empty()) throw DomainError("sampled trajectory: empty");
    const double kf = std::floor(t / dt_ + 1e-9);
    const size_t k = static_cast<size_t>(std::clamp(kf, 0.0, static_cast<double>(knots_.size() - 1)));
    const auto& s = knots_[k];
    const double tau = t - k * dt_;
    TrajectoryState out;
    out.R = s.R * Rot3::exp(s.omega * tau);
    out.v = s.v + s.a * tau;
    out.p = s.p + s.v * tau + 0.5 * s.a * tau * tau;
    out.a = s.a;
    out.omega = s.omega;
    return out;
  }

  Pose3 pose(double t) const { return state(t).pose(); }

 private:
  double dt_ = 0.0;
  std::vector<TrajectoryState> design_;
  std::vector<TrajectoryState> knots_;
};

template <class T>
concept TrajectoryLike = requires(const T& tr, double t) {
  { tr.state(t) } -> std::same_as<TrajectoryState>;
  { tr.duration() } -> std::convertible_to<double>;
};

struct ImuSynthesisSpec {
  double rate_hz = 200.0;
  ImuNoise noise;
  bool add_noise = false;
  Bias initial_bias = Bias::Zero();
  bool bias_random_walk = false;
  uint64_t seed = 1;
};

/// Samples omega = body angular velocity and a = R^T (p'' - g) (+ bias and
/// noise) at k / rate for every k / rate < duration.
template <TrajectoryLike Traj>
std::vector<ImuSample> synthesize_imu(const Traj& traj, const ImuSynthesisSpec& spec, const Vec3& g) {
  const double dt = 1.0 / spec.rate_hz;
  const int n = static_cast<int>(std::ceil(traj.duration() * spec.rate_hz - 1e-9));
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  auto gauss3 = [&] { return Vec3(nd(rng), nd(rng), nd(rng)); };
  Bias bias = spec.initial_bias;
  std::vector<ImuSample> out;
  out.reserve(n);
  for (int k = 0; k < n; ++k) {
    const double t = k * dt;
    const auto s = traj.state(t);
    ImuSample m;
    m.timestamp = t;
    m.gyro = s.omega + gyro_bias(bias);
    m.accel = s.R.matrix().transpose() * (s.a - g) + accel_bias(bias);
    if (spec.add_noise) {
      m.gyro += spec.noise.gyro_noise / std::sqrt(dt) * gauss3();
      m.accel += spec.noise.accel_noise / std::sqrt(dt) * gauss3();
    }
    if (spec.bias_random_walk) {
      bias.head<3>() += spec.noise.accel_random_walk * std::sqrt(dt) * gauss3();
      bias.tail<3>() += spec.noise.gyro_random_walk * std::sqrt(dt) * gauss3();
    }
    out.push_back(m);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scene

enum class TextureKind { ValueNoise, Ramp };

struct Plane {
  Vec3 center = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Vec3 axis_u = Vec3::UnitX();    ///< in-plane texture axis
  Vec2 half_extent = Vec2(1, 1);  ///< along axis_u and normal x axis_u, m
  TextureKind texture = TextureKind::ValueNoise;
  uint64_t seed = 1;
  double cell = 0.4;       ///< coarsest noise cell, m; ramp width for Ramp
  double contrast = 180.0; ///< intensity units
};

struct SceneSpec {
  std::vector<Plane> planes;
  double ambient = 128.0;
};

namespace detail {

inline uint64_t mix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline double lattice(uint64_t seed, int64_t i, int64_t j) {
  const uint64_t h = mix64(seed ^ mix64(static_cast<uint64_t>(i) * 0x632be59bd9b4e019ULL ^
                                        mix64(static_cast<uint64_t>(j))));
  return (h >> 11) * (1.0 / 9007199254740992.0);
}

inline double fade(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

inline double value_noise(uint64_t seed, double x, double y) {
  const double fx = std::floor(x), fy = std::floor(y);
  const auto i = static_cast<int64_t>(fx), j = static_cast<int64_t>(fy);
  const double u = fade(x - fx), v = fade(y - fy);
  const double a = lattice(seed, i, j), b = lattice(seed, i + 1, j);
  const double c = lattice(seed, i, j + 1), d = lattice(seed, i + 1, j + 1);
  return (a + (b - a) * u) * (1 - v) + (c + (d - c) * u) * v;
}

}  // namespace detail

/// Texture intensity offset in [-contrast/2, contrast/2] at plane coords.
inline double texture_value(const Plane& pl, double x, double y) {
  if (pl.texture == TextureKind::Ramp) {
    return pl.contrast * (std::clamp(x / pl.cell + 0.5, 0.0, 1.0) - 0.5);
  }
  double v = 0.0, wsum = 0.0, cell = pl.cell, w = 0.5;
  for (int o = 0; o < 3; ++o) {
    v += w * detail::value_noise(pl.seed + 7919 * o, x / cell, y / cell);
    wsum += w;
    cell *= 0.5;
    w *= 0.6;
  }
  return pl.contrast * (v / wsum - 0.5) * 2.0;
}

/// Closed box room centred at the origin, every wall textured.
inline SceneSpec box_room(const Vec3& half_size, uint64_t seed, double cell = 0.4, double contrast = 180.0) {
  SceneSpec s;
  for (int axis = 0; axis < 3; ++axis)
    for (int side : {-1, 1}) {
      Plane p;
      p.normal = Vec3::Zero();
      p.normal(axis) = -side;  // facing inward
      p.center = Vec3::Zero();
      p.center(axis) = side * half_size(axis);
      const int ua = (axis + 1) % 3, va = (axis + 2) % 3;
      p.axis_u = Vec3::Zero();
      p.axis_u(ua) = 1.0;
      p.half_extent = Vec2(half_size(ua), half_size(va));
      p.seed = detail::mix64(seed * 31 + axis * 2 + (side > 0));
      p.cell = cell;
      p.contrast = contrast;
      s.planes.push_back(p);
    }
  return s;
}

struct RayHit {
  double distance;
  double intensity;
};

inline std::optional<RayHit> cast_ray(const SceneSpec& scene, const Vec3& origin, const Vec3& dir) {
  std::optional<RayHit> best;
  for (const auto& pl : scene.planes) {
    const double denom = pl.normal.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    const double lambda = pl.normal.dot(pl.center - origin) / denom;
    if (!(lambda > 1e-9)) continue;
    if (best && lambda >= best->distance) continue;
    const Vec3 q = origin + lambda * dir - pl.center;
    const Vec3 axis_v = pl.normal.cross(pl.axis_u);
    const double x = q.dot(pl.axis_u), y = q.dot(axis_v);
    if (std::abs(x) > pl.half_extent.x() || std::abs(y) > pl.half_extent.y()) continue;
    best = RayHit{lambda, scene.ambient + texture_value(pl, x, y)};
  }
  return best;
}

struct RenderedImage {
  Image image;
  std::vector<float> depth;  ///< camera-frame z per undistorted pixel; 0 on miss
  int misses = 0;
};

/// Renders the undistorted image of a frame whose middle row is captured at
/// frame_time. Each pixel uses the camera pose at its own capture time.
template <TrajectoryLike Traj>
RenderedImage render_rs_image(const SceneSpec& scene, const Traj& traj, const CameraModel& cam, const Pose3& T_CmI,
                              double frame_time, int workers = 1) {
  const int w = cam.width(), h = cam.height();
  std::vector<float> img(static_cast<size_t>(w) * h, static_cast<float>(scene.ambient));
  std::vector<float> depth(static_cast<size_t>(w) * h, 0.0f);
  const Pose3 T_IC = T_CmI.inverse();
  auto chunk = parallel_chunks<int>(h, 8, workers, 0, [&](size_t y0, size_t y1, int& misses) {
    for (size_t y = y0; y < y1; ++y)
      for (int x = 0; x < w; ++x) {
        const Vec2 u(x, static_cast<double>(y));
        const auto tr = cam.try_capture_time(u);
        if (!tr) {
          ++misses;
          continue;
        }
        const double t = frame_time + *tr * cam.row_time_td();
        const Pose3 T_WC = traj.pose(t) * T_IC;
        const Vec3 ray_c = cam.ray(u);
        const auto hit = cast_ray(scene, T_WC.translation(), T_WC.rotation() * ray_c.normalized());
        if (!hit) {
          ++misses;
          continue;
        }
        const size_t i = y * w + x;
        img[i] = static_cast<float>(std::clamp(hit->intensity, 0.0, 255.0));
        depth[i] = static_cast<float>(hit->distance / ray_c.norm());
      }
  });
  RenderedImage out;
  for (int m : chunk) out.misses += m;
  if (out.misses > w * h / 100) throw DomainError("render: camera view leaves the scene");
  out.image = Image(w, h, std::move(img));
  out.depth = std::move(depth);
  return out;
}

/// Exact capture time (seconds) at which a world point is imaged: the root of
/// capture_time(pi(T_CW(t) X)) * t_d + frame_time - t, by bisection over the
/// frame's readout interval.
template <TrajectoryLike Traj>
std::optional<double> ground_truth_capture_time(const Traj& traj, const CameraModel& cam, const Pose3& T_CmI,
                                                double frame_time, const Vec3& X_world) {
  const double td = cam.row_time_td();
  auto f = [&](double t) -> std::optional<double> {
    const Pose3 T_CW = T_CmI * traj.pose(t).inverse();
    const auto u = cam.try_project(T_CW * X_world);
    if (!u) return std::nullopt;
    const auto r = cam.try_capture_time(*u);
    if (!r) return std::nullopt;
    return frame_time + *r * td - t;
  };
  if (td == 0.0) return frame_time;
  const double half = 0.75 * cam.height() * td;
  double a = frame_time - half, b = frame_time + half;
  auto fa = f(a), fb = f(b);
  if (!fa || !fb || (*fa > 0) == (*fb > 0)) return std::nullopt;
  for (int it = 0; it < 200 && b - a > 1e-15; ++it) {
    const double m = 0.5 * (a + b);
    const auto fm = f(m);
    if (!fm) return std::nullopt;
    if ((*fm > 0) == (*fa > 0)) {
      a = m;
      fa = fm;
    } else {
      b = m;
    }
  }
  return 0.5 * (a + b);
}

/// Keyframe state implied by the trajectory at time t under scale/gravity sg.
/// The twist is the per-row camera twist of the instantaneous body twist.
template <TrajectoryLike Traj>
KeyframeState ground_truth_keyframe(const Traj& traj, const ScaleGravity& sg, const Calibration& calib, int64_t id,
                                    double t, const Bias& bias = Bias::Zero()) {
  const auto s = traj.state(t);
  KeyframeState kf;
  kf.id = id;
  kf.timestamp = t;
  kf.pose = camera_pose_from_metric(s.pose(), sg, calib);
  kf.velocity = s.v;
  kf.bias = bias;
  kf.twist = prior_twist(camera_twist(s.body_twist(), calib), sg.scale(), calib.camera.row_time_td());
  return kf;
}

// ---------------------------------------------------------------------------
// Simulation spec and export

enum class ImuSampling { Consistent, Instantaneous };

struct SimulationSpec {
  CameraModel camera;                     ///< rolling-shutter camera
  std::vector<std::string> streams = {"RS"};
  double camera_rate_hz = 20.0;
  double duration = 2.0;                  ///< images and IMU cover [0, duration)
  ImuSynthesisSpec imu;
  ImuSampling sampling = ImuSampling::Consistent;
  Pose3 T_CmI;
  Vec3 gravity = Vec3(0, 0, -9.81);
  SceneSpec scene;
  TrajectorySpec trajectory;
  int64_t epoch_ns = 1600000000000000000LL;
  double image_noise = 0.0;               ///< intensity std-dev
  uint64_t image_seed = 1;
  int workers = 1;
};

namespace detail {

inline void check_keys(const YAML::Node& n, const std::set<std::string>& allowed, const std::string& where) {
  if (!n.IsMap()) throw DataError(where + ": expected a map");
  for (const auto& kv : n) {
    const auto k = kv.first.as<std::string>();
    if (!allowed.count(k)) throw DataError(where + ": unknown key '" + k + "'");
  }
}

inline Eigen::VectorXd yaml_vec(const YAML::Node& n, int size, const std::string& where) {
  if (!n.IsSequence() || static_cast<int>(n.size()) != size)
    throw DataError(where + ": expected a list of " + std::to_string(size) + " numbers");
  Eigen::VectorXd v(size);
  try {
    for (int i = 0; i < size; ++i) v(i) = n[i].as<double>();
  } catch (const YAML::Exception&) {
    throw DataError(where + ": entries must be numbers");
  }
  return v;
}

template <class T>
T yaml_get(const YAML::Node& n, const char* key, T fallback, const std::string& where) {
  if (!n[key]) return fallback;
  try {
    return n[key].as<T>();
  } catch (const YAML::Exception&) {
    throw DataError(where + ": bad value for '" + key + "'");
  }
}

inline TrajectorySpec trajectory_from_yaml(const YAML::Node& n, const std::string& where) {
  check_keys(n, {"start_position", "start_rotation_vector", "start_twist", "segments"}, where);
  TrajectorySpec t;
  Vec3 p = Vec3::Zero(), r = Vec3::Zero();
  if (n["start_position"]) p = yaml_vec(n["start_position"], 3, where + ".start_position");
  if (n["start_rotation_vector"]) r = yaml_vec(n["start_rotation_vector"], 3, where + ".start_rotation_vector");
  t.start_pose = Pose3(Rot3::exp(r), p);
  if (n["start_twist"]) t.start_twist = yaml_vec(n["start_twist"], 6, where + ".start_twist");
  if (!n["segments"] || !n["segments"].IsSequence()) throw DataError(where + ": 'segments' list required");
  for (size_t i = 0; i < n["segments"].size(); ++i) {
    const auto s = n["segments"][i];
    const std::string w = where + ".segments[" + std::to_string(i) + "]";
    const auto type = yaml_get<std::string>(s, "type", "", w);
    if (type == "constant_twist") {
      check_keys(s, {"type", "duration", "twist"}, w);
      ConstantTwistSegment c;
      c.duration = yaml_get<double>(s, "duration", 0.0, w);
      if (s["twist"]) c.twist = Vec6(yaml_vec(s["twist"], 6, w + ".twist"));
      t.segments.push_back(c);
    } else if (type == "smooth") {
      check_keys(s, {"type", "duration", "amplitude", "frequency"}, w);
      SmoothSegment m;
      m.duration = yaml_get<double>(s, "duration", 0.0, w);
      m.amplitude = yaml_vec(s["amplitude"], 6, w + ".amplitude");
      m.frequency = yaml_vec(s["frequency"], 6, w + ".frequency");
      t.segments.push_back(m);
    } else {
      throw DataError(w + ": type must be constant_twist or smooth");
    }
  }
  return t;
}

}  // namespace detail

inline SimulationSpec simulation_spec_from_yaml(const YAML::Node& n, const std::string& where) {
  using namespace detail;
  check_keys(n,
             {"camera", "streams", "camera_rate_hz", "duration", "imu", "imu_sampling", "T_cam_imu", "gravity_m_s2",
              "scene", "trajectory", "epoch_ns", "image_noise", "image_seed", "workers"},
             where);
  SimulationSpec s;
  if (!n["camera"]) throw DataError(where + ": 'camera' required");
  s.camera = camera_from_yaml(n["camera"], where + ".camera");
  if (n["streams"]) {
    s.streams.clear();
    for (const auto& v : n["streams"]) {
      const auto tag = v.as<std::string>();
      if (tag != "RS" && tag != "GS") throw DataError(where + ".streams: entries must be RS or GS");
      s.streams.push_back(tag);
    }
    if (s.streams.empty()) throw DataError(where + ".streams: empty");
  }
  s.camera_rate_hz = yaml_get<double>(n, "camera_rate_hz", s.camera_rate_hz, where);
  s.duration = yaml_get<double>(n, "duration", s.duration, where);
  if (!(s.camera_rate_hz > 0.0) || !(s.duration > 0.0)) throw DataError(where + ": rates and duration must be positive");
  if (n["imu"]) {
    const auto m = n["imu"];
    const std::string w = where + ".imu";
    check_keys(m,
               {"rate_hz", "gyro_noise", "accel_noise", "gyro_random_walk", "accel_random_walk", "add_noise",
                "initial_bias", "bias_random_walk", "seed"},
               w);
    s.imu.rate_hz = yaml_get<double>(m, "rate_hz", s.imu.rate_hz, w);
    s.imu.noise.gyro_noise = yaml_get<double>(m, "gyro_noise", s.imu.noise.gyro_noise, w);
    s.imu.noise.accel_noise = yaml_get<double>(m, "accel_noise", s.imu.noise.accel_noise, w);
    s.imu.noise.gyro_random_walk = yaml_get<double>(m, "gyro_random_walk", s.imu.noise.gyro_random_walk, w);
    s.imu.noise.accel_random_walk = yaml_get<double>(m, "accel_random_walk", s.imu.noise.accel_random_walk, w);
    s.imu.add_noise = yaml_get<bool>(m, "add_noise", s.imu.add_noise, w);
    s.imu.bias_random_walk = yaml_get<bool>(m, "bias_random_walk", s.imu.bias_random_walk, w);
    s.imu.seed = yaml_get<uint64_t>(m, "seed", s.imu.seed, w);
    if (m["initial_bias"]) s.imu.initial_bias = yaml_vec(m["initial_bias"], 6, w + ".initial_bias");
    if (!(s.imu.rate_hz > 0.0)) throw DataError(w + ": rate_hz must be positive");
  }
  const auto sampling = yaml_get<std::string>(n, "imu_sampling", "consistent", where);
  if (sampling == "consistent") {
    s.sampling = ImuSampling::Consistent;
  } else if (sampling == "instantaneous") {
    s.sampling = ImuSampling::Instantaneous;
  } else {
    throw DataError(where + ": imu_sampling must be consistent or instantaneous");
  }
  if (n["T_cam_imu"]) {
    const Eigen::VectorXd v = yaml_vec(n["T_cam_imu"], 16, where + ".T_cam_imu");
    Mat4 M;
    for (int k = 0; k < 16; ++k) M(k / 4, k % 4) = v(k);
    const Mat3 R = M.topLeftCorner<3, 3>();
    if (!(R.transpose() * R).isApprox(Mat3::Identity(), 1e-6) || R.determinant() < 0)
      throw DataError(where + ".T_cam_imu: rotation is not orthonormal");
    s.T_CmI = Pose3::from_matrix(M);
  }
  if (n["gravity_m_s2"]) s.gravity = yaml_vec(n["gravity_m_s2"], 3, where + ".gravity_m_s2");
  if (!n["scene"]) throw DataError(where + ": 'scene' required");
  {
    const auto sc = n["scene"];
    const std::string w = where + ".scene";
    check_keys(sc, {"type", "half_size", "seed", "cell", "contrast", "ambient"}, w);
    if (yaml_get<std::string>(sc, "type", "box_room", w) != "box_room") throw DataError(w + ": type must be box_room");
    const Vec3 half = sc["half_size"] ? Vec3(yaml_vec(sc["half_size"], 3, w + ".half_size")) : Vec3(4, 4, 2.5);
    s.scene = box_room(half, yaml_get<uint64_t>(sc, "seed", 1, w), yaml_get<double>(sc, "cell", 0.4, w),
                       yaml_get<double>(sc, "contrast", 180.0, w));
    s.scene.ambient = yaml_get<double>(sc, "ambient", 128.0, w);
  }
  if (!n["trajectory"]) throw DataError(where + ": 'trajectory' required");
  s.trajectory = trajectory_from_yaml(n["trajectory"], where + ".trajectory");
  s.epoch_ns = yaml_get<int64_t>(n, "epoch_ns", s.epoch_ns, where);
  s.image_noise = yaml_get<double>(n, "image_noise", 0.0, where);
  s.image_seed = yaml_get<uint64_t>(n, "image_seed", 1, where);
  s.workers = yaml_get<int>(n, "workers", 1, where);
  return s;
}

inline SimulationSpec load_simulation_spec(const fs::path& path) {
  YAML::Node n;
  try {
    n = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  return simulation_spec_from_yaml(n, path.string());
}

struct ExportSummary {
  int images_per_stream = 0;
  int imu_samples = 0;
  int ground_truth_poses = 0;
};

namespace detail {

template <TrajectoryLike Traj>
ExportSummary export_with(const SimulationSpec& spec, const Traj& traj, const fs::path& out) {
  if (traj.duration() + 1e-9 < spec.duration) throw DataError("simulate: trajectory shorter than duration");
  fs::create_directories(out);
  ExportSummary sum;
  // IMU and ground truth at the IMU rate.
  auto imu = synthesize_imu(traj, spec.imu, spec.gravity);
  imu.erase(std::remove_if(imu.begin(), imu.end(), [&](const ImuSample& m) { return m.timestamp >= spec.duration - 1e-12; }),
            imu.end());
  write_imu_csv(out / "imu.csv", imu, spec.epoch_ns);
  std::vector<TimedPose> gt;
  for (const auto& m : imu) gt.push_back({m.timestamp, traj.pose(m.timestamp)});
  write_trajectory(out / "groundtruth.txt", gt, spec.epoch_ns);
  write_extrinsics(out / "extrinsics.yaml", spec.T_CmI, spec.gravity);
  sum.imu_samples = static_cast<int>(imu.size());
  sum.ground_truth_poses = static_cast<int>(gt.size());

  std::vector<ImageEntry> manifest;
  std::mt19937_64 rng(spec.image_seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  const int n = static_cast<int>(std::ceil(spec.duration * spec.camera_rate_hz - 1e-9));
  for (const auto& tag : spec.streams) {
    const CameraModel cam = tag == "GS" ? spec.camera.with_row_time(0.0) : spec.camera;
    save_camera(out / camera_file_name(tag), cam);
    std::string lower = tag;
    std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
    fs::create_directories(out / "images" / lower);
  }
  for (int k = 0; k < n; ++k) {
    const int64_t ns = static_cast<int64_t>(std::llround(k * 1e9 / spec.camera_rate_hz));
    const double t = ns * 1e-9;
    for (const auto& tag : spec.streams) {
      const CameraModel cam = tag == "GS" ? spec.camera.with_row_time(0.0) : spec.camera;
      auto r = render_rs_image(spec.scene, traj, cam, spec.T_CmI, t, spec.workers);
      Image img = std::move(r.image);
      if (spec.image_noise > 0.0) {
        std::vector<float> d = img.data();
        for (auto& v : d) v = static_cast<float>(v + spec.image_noise * nd(rng));
        img = Image(img.width(), img.height(), std::move(d));
      }
      std::string lower = tag;
      std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
      char name[32];
      std::snprintf(name, sizeof name, "%06d.png", k);
      const std::string rel = "images/" + lower + "/" + name;
      save_png16(out / rel, img);
      manifest.push_back({spec.epoch_ns + ns, t, rel, tag});
    }
  }
  write_image_manifest(out / "images.csv", manifest);
  sum.images_per_stream = n;
  return sum;
}

}  // namespace detail

/// Renders and writes a dataset directory (see docs/formats.md).
inline ExportSummary export_dataset(const SimulationSpec& spec, const fs::path& out) {
  const Trajectory design(spec.trajectory);
  if (spec.sampling == ImuSampling::Consistent) {
    return detail::export_with(spec, SampledTrajectory(design, spec.imu.rate_hz), out);
  }
  return detail::export_with(spec, design, out);
}

}  // namespace rsvio
