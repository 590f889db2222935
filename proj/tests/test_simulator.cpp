#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "rsvio/photometric.hpp"
#include "rsvio/simulator.hpp"
#include "rsvio/twist_prior.hpp"
#include "sim_fixtures.hpp"
#include "test_oracles.hpp"

using namespace rsvio;

namespace {

const Vec3 kG(0, 0, -9.81);

TEST(Trajectory, StationaryImuReadsGravityOnly) {
  TrajectorySpec spec;
  spec.start_pose = Pose3(Rot3::exp(Vec3(0.1, -0.2, 0.7)), Vec3(1, 2, 3));
  spec.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const Trajectory traj(spec);
  const auto imu = synthesize_imu(traj, {}, kG);
  ASSERT_EQ(imu.size(), 200u);
  const Vec3 expected = spec.start_pose.rotation().matrix().transpose() * Vec3(0, 0, 9.81);
  for (const auto& m : imu) {
    EXPECT_LT(m.gyro.norm(), 1e-15);
    EXPECT_LT((m.accel - expected).norm(), 1e-12);
  }
}

TEST(Trajectory, ConstantRotationGyroIsExact) {
  TrajectorySpec spec;
  spec.start_twist << 0, 0, 0, 0.3, -0.2, 1.1;
  spec.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const Trajectory traj(spec);
  for (const auto& m : synthesize_imu(traj, {}, kG)) EXPECT_LT((m.gyro - spec.start_twist.tail<3>()).norm(), 1e-14);
  const SampledTrajectory sampled(traj, 200.0);
  for (const auto& m : synthesize_imu(sampled, {}, kG))
    EXPECT_LT((m.gyro - spec.start_twist.tail<3>()).norm(), 1e-12);
}

TEST(Trajectory, SpecificForceMatchesSecondDerivative) {
  const Trajectory traj(fixture::smooth_spec());
  const double h = 1e-4;
  for (double t = 0.3; t < 2.1; t += 0.137) {
    const auto s = traj.state(t);
    const Vec3 p_dd = (traj.state(t + h).p - 2.0 * s.p + traj.state(t - h).p) / (h * h);
    const Vec3 f = s.R.matrix().transpose() * (s.a - kG);
    EXPECT_LT((s.R.matrix() * f + kG - p_dd).norm(), 1e-6) << t;
    const Vec3 w_fd = (traj.state(t - h).R.inverse() * traj.state(t + h).R).log() / (2.0 * h);
    EXPECT_LT((w_fd - s.omega).norm(), 1e-6) << t;
    const Vec3 v_fd = (traj.state(t + h).p - traj.state(t - h).p) / (2.0 * h);
    EXPECT_LT((v_fd - s.v).norm(), 1e-6) << t;
  }
}

TEST(Trajectory, SegmentJointsAreC1) {
  TrajectorySpec spec = fixture::smooth_spec(0.3, 1.0);
  spec.segments.push_back(ConstantTwistSegment{0.5, std::nullopt});
  const Trajectory traj(spec);
  for (double tj : {0.3, 1.3}) {
    const auto a = traj.state(tj - 1e-9), b = traj.state(tj + 1e-9);
    EXPECT_LT((a.p - b.p).norm(), 1e-7);
    EXPECT_LT((a.v - b.v).norm(), 1e-6);
    EXPECT_LT((a.omega - b.omega).norm(), 1e-6);
    EXPECT_LT((a.R.inverse() * b.R).log().norm(), 1e-7);
  }
}

TEST(Trajectory, MismatchedConstantTwistIsRejected) {
  TrajectorySpec spec;
  Vec6 xi;
  xi << 1, 0, 0, 0, 0, 0;
  spec.segments.push_back(ConstantTwistSegment{1.0, xi});
  EXPECT_THROW(Trajectory{spec}, DataError);
  spec.start_twist = xi;
  EXPECT_NO_THROW(Trajectory{spec});
  spec.segments.push_back(SmoothSegment{-1.0, Vec6::Zero(), Vec6::Zero()});
  EXPECT_THROW(Trajectory{spec}, DataError);
}

TEST(Trajectory, ConsistentImuReproducesTrajectory) {
  const Trajectory design(fixture::smooth_spec(0.2, 2.0));
  const SampledTrajectory traj(design, 200.0);
  const auto imu = synthesize_imu(traj, {}, kG);
  for (double ti : {0.0, 0.5, 1.25, 1.9}) {
    const double tj = ti + 0.25;
    const auto pre = preintegrate(imu, ti, tj, Bias::Zero());
    const auto si = traj.state(ti), sj = traj.state(tj);
    const auto pred = predict_state({si.R, si.p, si.v, Bias::Zero()}, pre, kG);
    EXPECT_LT((pred.p - sj.p).norm(), 1e-6) << ti;
    EXPECT_LT((pred.v - sj.v).norm(), 1e-6) << ti;
    EXPECT_LT((pred.R.inverse() * sj.R).log().norm(), 1e-6) << ti;
  }
  // The resampled trajectory stays close to the design.
  for (double t = 0.0; t < 2.2; t += 0.0173) EXPECT_LT((traj.state(t).p - design.state(t).p).norm(), 1e-4);
}

TEST(Trajectory, NoiseAndBiasAreApplied) {
  const Trajectory traj(fixture::smooth_spec());
  ImuSynthesisSpec spec;
  spec.initial_bias << 0.1, -0.2, 0.05, 0.01, 0.02, -0.03;
  const auto clean = synthesize_imu(traj, {}, kG);
  const auto biased = synthesize_imu(traj, spec, kG);
  for (size_t k = 0; k < clean.size(); ++k) {
    EXPECT_LT((biased[k].accel - clean[k].accel - spec.initial_bias.head<3>()).norm(), 1e-12);
    EXPECT_LT((biased[k].gyro - clean[k].gyro - spec.initial_bias.tail<3>()).norm(), 1e-12);
  }
  spec.initial_bias.setZero();
  spec.add_noise = true;
  const auto noisy = synthesize_imu(traj, spec, kG);
  double sum2 = 0.0;
  for (size_t k = 0; k < clean.size(); ++k) sum2 += (noisy[k].gyro - clean[k].gyro).squaredNorm();
  const double sigma = std::sqrt(sum2 / (3.0 * clean.size()));
  const double expected = spec.noise.gyro_noise * std::sqrt(200.0);
  EXPECT_NEAR(sigma / expected, 1.0, 0.1);
}

TEST(Render, StaticRollingShutterEqualsGlobalShutter) {
  TrajectorySpec spec;
  spec.start_pose = Pose3(Rot3::exp(Vec3(0.0, 0.1, 0.4)), Vec3(0.3, 0.2, 0.1));
  spec.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const Trajectory traj(spec);
  const auto calib = fixture::calibration();
  const auto rs = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, 0.5);
  const auto gs = render_rs_image(fixture::room(), traj, calib.camera.with_row_time(0.0), calib.T_CmI, 0.5);
  EXPECT_EQ(rs.image.data(), gs.image.data());
  EXPECT_EQ(rs.misses, 0);
}

TEST(Render, ZeroRowTimeMatchesMidRowPose) {
  const Trajectory traj(fixture::constant_twist_spec());
  const auto calib = fixture::calibration(0.0);
  TrajectorySpec frozen;
  frozen.start_pose = traj.pose(0.4);
  frozen.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const auto a = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, 0.4);
  const auto b = render_rs_image(fixture::room(), Trajectory(frozen), calib.camera, calib.T_CmI, 0.0);
  EXPECT_EQ(a.image.data(), b.image.data());
}

TEST(Render, VerticalEdgeSlantMatchesClosedForm) {
  SceneSpec scene;
  Plane edge;
  edge.center = Vec3(0, 0, 2.0);
  edge.normal = Vec3(0, 0, -1);
  edge.axis_u = Vec3(1, 0, 0);
  edge.half_extent = Vec2(50, 50);
  edge.texture = TextureKind::Ramp;
  edge.cell = 0.4;
  scene.planes.push_back(edge);
  const double vx = 1.0, z = 2.0, td = 117.88e-6;
  TrajectorySpec spec;
  spec.start_twist << vx, 0, 0, 0, 0, 0;
  spec.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const Trajectory traj(spec);
  const CameraModel cam(260, 260, 159.5, 127.5, RadTan{}, 320, 256, td, 1);
  const auto r = render_rs_image(scene, traj, cam, Pose3(), 0.5);
  // Edge centre per row: where the ramp crosses the ambient level.
  std::vector<double> ys, xs;
  for (int y = 20; y < 236; ++y)
    for (int x = 0; x + 1 < 320; ++x) {
      const double a = r.image.at(x, y) - scene.ambient, b = r.image.at(x + 1, y) - scene.ambient;
      if (a < 0 && b >= 0) {
        ys.push_back(y);
        xs.push_back(x + a / (a - b));
        break;
      }
    }
  ASSERT_GT(ys.size(), 200u);
  const double n = ys.size();
  double my = 0, mx = 0;
  for (size_t i = 0; i < ys.size(); ++i) {
    my += ys[i] / n;
    mx += xs[i] / n;
  }
  double sxy = 0, syy = 0;
  for (size_t i = 0; i < ys.size(); ++i) {
    sxy += (ys[i] - my) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  const double slope = sxy / syy;
  EXPECT_NEAR(std::abs(slope), vx * 260.0 / z * td, 1e-6);
  EXPECT_LT(slope, 0.0);
}

TEST(Render, GoldenHashes) {
  const auto calib = fixture::calibration();
  const Trajectory traj(fixture::constant_twist_spec());
  const auto rs = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, 0.5);
  const auto gs = render_rs_image(fixture::room(), traj, calib.camera.with_row_time(0.0), calib.T_CmI, 0.5);
  EXPECT_NE(fixture::fnv1a(rs.image.data()), fixture::fnv1a(gs.image.data()));
  EXPECT_EQ(fixture::fnv1a(rs.image.data()), 14725658775409869227ULL) << "rs";
  EXPECT_EQ(fixture::fnv1a(gs.image.data()), 8464800445257540317ULL) << "gs";
}

TEST(Render, WorkerCountDoesNotChangeImage) {
  const auto calib = fixture::calibration();
  const Trajectory traj(fixture::constant_twist_spec());
  const auto a = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, 0.5, 1);
  const auto b = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, 0.5, 3);
  EXPECT_EQ(a.image.data(), b.image.data());
  EXPECT_EQ(a.depth, b.depth);
}

TEST(Render, LeavingTheSceneIsAnError) {
  TrajectorySpec spec;
  spec.start_pose = Pose3(Rot3(), Vec3(10, 0, 0));
  spec.segments.push_back(ConstantTwistSegment{1.0, std::nullopt});
  const auto calib = fixture::calibration();
  EXPECT_THROW(render_rs_image(fixture::room(), Trajectory(spec), calib.camera, calib.T_CmI, 0.0), DomainError);
}

struct ConstantTwistRig {
  Calibration calib = fixture::calibration();
  Trajectory traj{fixture::constant_twist_spec()};
  ScaleGravity sg{ScaledRot(1.0, Rot3())};
  double t_host = 0.40, t_target = 0.45;
  RenderedImage host = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, t_host);
  RenderedImage target = render_rs_image(fixture::room(), traj, calib.camera, calib.T_CmI, t_target);
  KeyframeState kf_host = ground_truth_keyframe(traj, sg, calib, 0, t_host);
  KeyframeState kf_target = ground_truth_keyframe(traj, sg, calib, 1, t_target);

  std::vector<TrackedPoint> points(int n, uint64_t seed) const {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> ux(8, 311), uy(8, 247);
    std::vector<TrackedPoint> out;
    while (static_cast<int>(out.size()) < n) {
      const Vec2 px(ux(rng), uy(rng));
      if (host.image.gradient_norm2(px.x(), px.y()) < 25.0) continue;
      const double z = host.depth[static_cast<size_t>(px.y()) * 320 + static_cast<size_t>(px.x())];
      auto p = make_tracked_point(0, px, 1.0 / z, host.image, calib.camera, true);
      if (p) out.push_back(*p);
    }
    return out;
  }
};

TEST(RenderModel, SolvedCaptureTimeMatchesGroundTruthRow) {
  const ConstantTwistRig rig;
  PhotometricOptions opt;
  opt.rs_max_iterations = 100;
  opt.rs_tolerance = 1e-12;
  const double td = rig.calib.camera.row_time_td();
  int checked = 0;
  for (const auto& p : rig.points(300, 5)) {
    const auto proj = project_rs(p, rig.kf_host, rig.kf_target, rig.calib.camera, true, opt);
    if (!proj || !rig.calib.camera.in_image(proj->pixel, 2.0)) continue;
    // World point from the host pixel's own capture time.
    const double th = rig.t_host + p.host_time * td;
    const Pose3 T_WC = rig.traj.pose(th) * rig.calib.T_CmI.inverse();
    const Vec3 X = T_WC * rig.calib.camera.unproject(p.pixel, p.inv_depth);
    const auto t_gt = ground_truth_capture_time(rig.traj, rig.calib.camera, rig.calib.T_CmI, rig.t_target, X);
    ASSERT_TRUE(t_gt.has_value());
    EXPECT_NEAR(proj->time, (*t_gt - rig.t_target) / td, 1e-3);
    ++checked;
  }
  EXPECT_GT(checked, 200);
}

TEST(RenderModel, PriorTwistMatchesGroundTruthCameraTwist) {
  const ConstantTwistRig rig;
  for (double t : {0.1, 0.45, 0.8}) {
    const auto s = rig.traj.state(t);
    const KeyframeState kf = ground_truth_keyframe(rig.traj, rig.sg, rig.calib, 0, t);
    const Vec6 prior = prior_twist(camera_twist(imu_twist(kf, rig.sg, rig.calib, s.omega), rig.calib), 1.0,
                                   rig.calib.camera.row_time_td());
    // Camera twist from two camera poses on the constant-twist segment.
    const double dt = 0.05;
    const Pose3 T0 = rig.calib.T_CmI * rig.traj.pose(t).inverse();
    const Pose3 T1 = rig.calib.T_CmI * rig.traj.pose(t + dt).inverse();
    const Vec6 per_second = log_se3(T1 * T0.inverse()) / dt;
    EXPECT_LT((prior / rig.calib.camera.row_time_td() - per_second).norm(), 1e-6);
  }
}

TEST(RenderModel, TwistEnergyVanishesOnGroundTruth) {
  const ConstantTwistRig rig;
  WindowState w{rig.sg, {rig.kf_host, rig.kf_target}};
  std::vector<TwistPriorTerm> terms = {{0, rig.traj.state(rig.t_host).omega}, {1, rig.traj.state(rig.t_target).omega}};
  DenseSystem sys(w.dim());
  twist_energy(w, terms, rig.calib, {}, 1.0, sys);
  EXPECT_LT(sys.energy, 1e-12);
}

TEST(RenderModel, DepthPerturbationRaisesPhotometricEnergy) {
  const ConstantTwistRig rig;
  WindowState w{rig.sg, {rig.kf_host, rig.kf_target}};
  const std::vector<const Image*> images = {&rig.host.image, &rig.target.image};
  auto pts = rig.points(300, 9);
  auto energy = [&](const std::vector<TrackedPoint>& p) {
    return photometric_energy<Image>(w, p, images, rig.calib.camera, {}, true, 1, false).frames.energy;
  };
  const double e0 = energy(pts);
  EXPECT_LT(e0 / pts.size(), 8.0 * 4.0);  // mean |r| below 2 per pattern pixel
  auto scaled = [&](double f) {
    auto q = pts;
    for (auto& p : q) p.inv_depth *= f;
    return energy(q);
  };
  double prev_lo = e0, prev_hi = e0;
  for (double d : {0.05, 0.1, 0.2}) {
    const double lo = scaled(1.0 - d), hi = scaled(1.0 + d);
    EXPECT_GT(lo, prev_lo) << d;
    EXPECT_GT(hi, prev_hi) << d;
    prev_lo = lo;
    prev_hi = hi;
  }
}

}  // namespace
