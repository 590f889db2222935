#include <gtest/gtest.h>

#include <random>

#include "rsvio/imu_preint.hpp"
#include "test_oracles.hpp"

using namespace rsvio;

namespace {

std::vector<ImuSample> random_stream(std::mt19937& rng, int n, double dt) {
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

struct Fixture {
  Calibration calib;
  WindowState w;
  std::vector<ImuFactor> factors;
};

// Two keyframes whose second state is the IMU prediction from the first,
// optionally offset in metric position.
Fixture consistent_window(std::mt19937& rng, const Vec3& metric_offset = Vec3::Zero()) {
  std::normal_distribution<double> nd(0, 1);
  Fixture f;
  f.calib = Calibration(oracle::random_pose(rng, 3.0, 0.1), CameraModel());
  f.w.sg.T_WmWf = ScaledRot(1.7, oracle::random_pose(rng, 3.0, 1.0).rotation());
  const auto samples = random_stream(rng, 60, 0.005);
  Bias b;
  b << 0.02, -0.01, 0.03, 0.002, -0.001, 0.003;
  ImuFactor fac{0, 1, preintegrate(samples, 0.0, 0.25, b)};
  KeyframeState ki;
  ki.id = 0;
  ki.pose = oracle::random_pose(rng, 3.0, 1.0);
  ki.velocity = Vec3(nd(rng), nd(rng), nd(rng));
  ki.bias = b;
  const auto pred = predict_state(metric_state(ki, f.w.sg, f.calib), fac.preint, f.calib.gravity);
  KeyframeState kj;
  kj.id = 1;
  kj.pose = camera_pose_from_metric(Pose3(pred.R, pred.p + metric_offset), f.w.sg, f.calib);
  kj.velocity = pred.v;
  kj.bias = b;
  f.w.frames = {ki, kj};
  f.factors.push_back(std::move(fac));
  return f;
}

TEST(WindowState, BoxplusBoxminusRoundTrip) {
  std::mt19937 rng(20);
  Fixture f = consistent_window(rng);
  std::normal_distribution<double> nd(0, 0.1);
  Eigen::VectorXd d(f.w.dim());
  for (int i = 0; i < d.size(); ++i) d(i) = nd(rng);
  const WindowState v = boxplus(f.w, d);
  EXPECT_LT((boxminus(v.sg, f.w.sg) - d.head<4>()).norm(), 1e-12);
  for (int k = 0; k < 2; ++k)
    EXPECT_LT((boxminus(v.frames[k], f.w.frames[k]) - d.segment<layout::kFrame>(layout::frame_offset(k))).norm(),
              1e-12);
}

TEST(ImuEnergy, ZeroAtPrediction) {
  std::mt19937 rng(21);
  const Fixture f = consistent_window(rng);
  DenseSystem sys(f.w.dim());
  imu_energy(f.w, f.factors, f.calib, 1.0, sys);
  EXPECT_LT(sys.energy, 1e-12);
}

TEST(ImuEnergy, QuadraticInResidual) {
  std::mt19937 rng_a(22), rng_b(22);
  const Fixture a = consistent_window(rng_a, Vec3(1e-3, -2e-3, 0.5e-3));
  const Fixture b = consistent_window(rng_b, Vec3(2e-3, -4e-3, 1e-3));
  DenseSystem sa(a.w.dim()), sb(b.w.dim());
  imu_energy(a.w, a.factors, a.calib, 1.0, sa);
  imu_energy(b.w, b.factors, b.calib, 1.0, sb);
  EXPECT_GT(sa.energy, 0.0);
  EXPECT_NEAR(sb.energy / sa.energy, 4.0, 1e-6);
}

TEST(ImuEnergy, GradientMatchesFiniteDifferencesIncludingScale) {
  std::mt19937 rng(23);
  std::normal_distribution<double> nd(0, 1);
  for (int trial = 0; trial < 100; ++trial) {
    Fixture f = consistent_window(rng, Vec3(0.01 * nd(rng), 0.01 * nd(rng), 0.01 * nd(rng)));
    f.w.frames[1].velocity += Vec3(0.01 * nd(rng), 0.01 * nd(rng), 0.01 * nd(rng));
    f.w.frames[1].bias(4) += 0.001;
    // Keep the weights well scaled so the finite differences are informative.
    const double alpha = 1e-6;
    const auto lin = linearize_imu_factor(f.w, f.factors[0], f.calib, alpha);
    auto rf = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      return linearize_imu_factor(boxplus(f.w, d), f.factors[0], f.calib, alpha).r;
    };
    const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(f.w.dim());
    ASSERT_LT(oracle::relative_error(lin.J, oracle::numeric_jacobian(rf, x0, 1e-6)), 1e-4) << trial;
    auto ef = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      DenseSystem s(f.w.dim());
      imu_energy(boxplus(f.w, d), f.factors, f.calib, alpha, s);
      return Eigen::VectorXd::Constant(1, s.energy);
    };
    DenseSystem sys(f.w.dim());
    imu_energy(f.w, f.factors, f.calib, alpha, sys);
    const Eigen::MatrixXd grad = oracle::numeric_jacobian(ef, x0, 1e-6);
    ASSERT_LT(oracle::relative_error(2.0 * sys.g.transpose(), grad), 1e-4) << trial;
    ASSERT_GT(std::abs(sys.g(layout::kLogScale)), 0.0);
  }
}

TEST(ImuEnergy, RejectsFactorOutsideWindow) {
  std::mt19937 rng(24);
  Fixture f = consistent_window(rng);
  f.factors[0].to_id = 7;
  DenseSystem sys(f.w.dim());
  EXPECT_THROW(imu_energy(f.w, f.factors, f.calib, 1.0, sys), DomainError);
}

}  // namespace
