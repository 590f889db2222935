#include <gtest/gtest.h>

#include <random>

#include "rsvio/twist_prior.hpp"
#include "test_oracles.hpp"

using namespace rsvio;

namespace {

Mat4 twist_matrix(const Vec6& xi) {
  Mat4 m = Mat4::Zero();
  m.topLeftCorner<3, 3>() << 0, -xi(5), xi(4), xi(5), 0, -xi(3), -xi(4), xi(3), 0;
  m.topRightCorner<3, 1>() = xi.head<3>();
  return m;
}

Mat4 expm(const Vec6& xi, double t) { return oracle::expm_series(twist_matrix(xi) * t, 40); }

WindowState random_window(std::mt19937& rng, Calibration& calib, double td) {
  std::normal_distribution<double> nd(0, 1);
  std::uniform_real_distribution<double> us(0.3, 3.0);
  calib = Calibration(oracle::random_pose(rng, 3.0, 0.1),
                      CameraModel(400, 400, 160, 128, {}, 320, 256, td));
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

TEST(ImuTwist, ZeroVelocityAndBiasCancelledGyro) {
  KeyframeState kf;
  kf.bias.tail<3>() = Vec3(0.01, -0.02, 0.03);
  const Calibration calib{Pose3(), CameraModel()};
  EXPECT_EQ(imu_twist(kf, ScaleGravity{}, calib, Vec3(0.01, -0.02, 0.03)), Vec6::Zero());
}

TEST(ImuTwist, IdentityRotations) {
  KeyframeState kf;
  kf.velocity = Vec3(1, 0, 0);
  const Calibration calib{Pose3(), CameraModel()};
  Vec6 expected;
  expected << 1, 0, 0, 0, 0, 0.5;
  EXPECT_LT((imu_twist(kf, ScaleGravity{}, calib, Vec3(0, 0, 0.5)) - expected).norm(), 1e-15);
}

TEST(ImuTwist, TranslationMatchesChainRotation) {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    Calibration calib;
    const WindowState w = random_window(rng, calib, 1e-4);
    const auto& kf = w.frames[0];
    Mat4 s_cm_cf = Mat4::Identity();
    s_cm_cf.topLeftCorner<3, 3>() *= w.sg.scale();
    const Mat4 T_WmI =
        w.sg.T_WmWf.matrix() * kf.pose.matrix().inverse() * s_cm_cf.inverse() * calib.T_CmI.matrix();
    const Mat3 R_WmI = T_WmI.topLeftCorner<3, 3>();
    const Vec6 xi = imu_twist(kf, w.sg, calib, Vec3::Zero());
    ASSERT_LT((xi.head<3>() - R_WmI.transpose() * kf.velocity).norm(), 1e-12);
  }
}

TEST(CameraTwist, IdentityExtrinsicNegates) {
  Vec6 xi;
  xi << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(camera_twist(xi, Calibration(Pose3(), CameraModel())), -xi);
}

TEST(CameraTwist, PureRotationExtrinsic) {
  const Rot3 R = rot_axis(Vec3(1, 1, 0), 0.7);
  Vec6 xi;
  xi << 0.3, -0.2, 0.1, 0.05, 0.4, -0.6;
  const Vec6 c = camera_twist(xi, Calibration(Pose3(R, Vec3::Zero()), CameraModel()));
  EXPECT_LT((c.head<3>() + R.matrix() * xi.head<3>()).norm(), 1e-15);
  EXPECT_LT((c.tail<3>() + R.matrix() * xi.tail<3>()).norm(), 1e-15);
}

TEST(CameraTwist, PathEquivalence) {
  std::mt19937 rng(12);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const Calibration calib(oracle::random_pose(rng, 3.0, 0.2), CameraModel());
    const Pose3 T_WmI = oracle::random_pose(rng, 3.0, 2.0);
    const Vec6 xi_imu = oracle::random_twist(rng, 1.0, 3.0);
    const Vec6 xi_cam = camera_twist(xi_imu, calib);
    const Mat4 T_CmWm = calib.T_CmI.matrix() * T_WmI.matrix().inverse();
    for (double t : {0.0, 0.01, 0.025, 0.05, 0.075, 0.1}) {
      const Mat4 cam_side = expm(xi_cam, t) * T_CmWm;
      const Mat4 imu_side = calib.T_CmI.matrix() * (T_WmI.matrix() * expm(xi_imu, t)).inverse();
      worst = std::max(worst, (cam_side - imu_side).cwiseAbs().maxCoeff());
    }
  }
  EXPECT_LT(worst, 1e-10);
}

TEST(PriorTwist, UnitScaleAndRowTimeIsIdentity) {
  Vec6 xi;
  xi << 1, 2, 3, 4, 5, 6;
  EXPECT_EQ(prior_twist(xi, 1.0, 1.0), xi);
}

TEST(PriorTwist, RowTimeFromPaperRig) {
  Vec6 xi;
  xi << 1, 2, 3, 4, 5, 6;
  const double td = 29.47e-6;
  const Vec6 p = prior_twist(xi, 2.0, td);
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(p(i), xi(i) / 2.0 * td);
  for (int i = 3; i < 6; ++i) EXPECT_DOUBLE_EQ(p(i), xi(i) * td);
  EXPECT_THROW(prior_twist(xi, 0.0, td), DomainError);
}

TEST(TwistEnergy, ZeroWhenTwistMatchesPrior) {
  std::mt19937 rng(13);
  Calibration calib;
  WindowState w = random_window(rng, calib, 2e-5);
  std::vector<TwistPriorTerm> terms = {{10, Vec3(0.1, 0.2, -0.3)}, {11, Vec3(-0.5, 0.1, 0.0)}};
  for (size_t k = 0; k < 2; ++k)
    w.frames[k].twist = prior_twist(camera_twist(imu_twist(w.frames[k], w.sg, calib, terms[k].omega), calib),
                                    w.sg.scale(), 2e-5);
  DenseSystem sys(w.dim());
  twist_energy(w, terms, calib, {}, 1.0, sys);
  EXPECT_LT(sys.energy, 1e-20);
}

TEST(TwistEnergy, QuadraticFormWithUnitWeight) {
  std::mt19937 rng(14);
  Calibration calib;
  const double td = 3e-5;
  WindowState w = random_window(rng, calib, td);
  w.frames.resize(1);
  const TwistPriorTerm term{10, Vec3(0.3, 0.0, 0.1)};
  const double eps = 1e-3;
  w.frames[0].twist = prior_twist(camera_twist(imu_twist(w.frames[0], w.sg, calib, term.omega), calib),
                                  w.sg.scale(), td);
  w.frames[0].twist(0) -= eps;
  DenseSystem sys(w.dim());
  twist_energy(w, std::span(&term, 1), calib, {td * td, td * td}, 1.0, sys);
  EXPECT_NEAR(sys.energy, eps * eps, 1e-15);
}

TEST(TwistEnergy, JacobianMatchesFiniteDifferences) {
  std::mt19937 rng(15);
  for (int trial = 0; trial < 100; ++trial) {
    Calibration calib;
    const WindowState w = random_window(rng, calib, 3e-5);
    const TwistPriorTerm term{11, Vec3(0.4, -0.2, 0.9)};
    const auto lin = linearize_twist_factor(w, term, calib, {}, 1.0);
    auto f = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      return linearize_twist_factor(boxplus(w, d), term, calib, {}, 1.0).r;
    };
    const auto Jn = oracle::numeric_jacobian(f, Eigen::VectorXd::Zero(w.dim()), 1e-6);
    ASSERT_LT(oracle::relative_error(lin.J, Jn), 1e-4) << "trial " << trial;
    // Energy gradient: dE/dx = 2 J^T W r.
    auto e = [&](const Eigen::VectorXd& d) -> Eigen::VectorXd {
      const auto l = linearize_twist_factor(boxplus(w, d), term, calib, {}, 1.0);
      return Eigen::VectorXd::Constant(1, l.r.dot(l.W * l.r));
    };
    const Eigen::MatrixXd grad = oracle::numeric_jacobian(e, Eigen::VectorXd::Zero(w.dim()), 1e-6);
    DenseSystem sys(w.dim());
    sys.add_factor(lin);
    ASSERT_LT(oracle::relative_error(2.0 * sys.g.transpose(), grad), 1e-4) << "trial " << trial;
  }
}

TEST(TwistEnergy, MetricResidualInvariantUnderScaleGauge) {
  std::mt19937 rng(16);
  Calibration calib;
  const WindowState w = random_window(rng, calib, 3e-5);
  const TwistPriorTerm term{10, Vec3(0.2, 0.1, -0.4)};
  const double lambda = 2.5;
  WindowState v = w;
  v.sg.T_WmWf = ScaledRot(w.sg.scale() * lambda, w.sg.rotation());
  for (auto& kf : v.frames) {
    kf.pose = Pose3(kf.pose.rotation(), kf.pose.translation() / lambda);
    kf.twist.head<3>() /= lambda;
  }
  const Vec6 r0 = linearize_twist_factor(w, term, calib, {}, 1.0).r;
  const Vec6 r1 = linearize_twist_factor(v, term, calib, {}, 1.0).r;
  EXPECT_LT((w.sg.scale() * r0.head<3>() - v.sg.scale() * r1.head<3>()).norm(), 1e-15);
  EXPECT_LT((r0.tail<3>() - r1.tail<3>()).norm(), 1e-15);
}

TEST(TwistEnergy, RejectsGlobalShutterAndUnknownKeyframe) {
  std::mt19937 rng(17);
  Calibration calib;
  const WindowState w = random_window(rng, calib, 0.0);
  EXPECT_THROW(linearize_twist_factor(w, {10, Vec3::Zero()}, calib, {}, 1.0), DomainError);
  Calibration rs;
  const WindowState w2 = random_window(rng, rs, 1e-5);
  EXPECT_THROW(linearize_twist_factor(w2, {99, Vec3::Zero()}, rs, {}, 1.0), DomainError);
}

}  // namespace
