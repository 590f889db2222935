#include <gtest/gtest.h>

#include <random>

#include "rsvio/marginalization.hpp"
#include "test_oracles.hpp"

using namespace rsvio;

namespace {

Eigen::MatrixXd random_matrix(std::mt19937& rng, int r, int c) {
  std::normal_distribution<double> nd(0, 1);
  Eigen::MatrixXd m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = nd(rng);
  return m;
}

TEST(Schur, MatchesDenseInverseBlock) {
  std::mt19937 rng(40);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::MatrixXd A = random_matrix(rng, 40, 20);
    const Eigen::MatrixXd H = A.transpose() * A + Eigen::MatrixXd::Identity(20, 20);
    const Eigen::VectorXd b = random_matrix(rng, 20, 1);
    std::vector<int> keep, marg;
    for (int i = 0; i < 20; ++i) (i % 3 == 0 ? marg : keep).push_back(i);
    const auto s = schur_complement(H, b, 1.5, keep, marg);
    EXPECT_FALSE(s.pseudo_inverse);
    const Eigen::MatrixXd cov = H.inverse();
    const Eigen::VectorXd mean = -H.ldlt().solve(b);
    Eigen::MatrixXd cov_kk(keep.size(), keep.size());
    Eigen::VectorXd mean_k(keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
      mean_k(i) = mean(keep[i]);
      for (size_t j = 0; j < keep.size(); ++j) cov_kk(i, j) = cov(keep[i], keep[j]);
    }
    EXPECT_LT((s.H.inverse() - cov_kk).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((-s.H.ldlt().solve(s.b) - mean_k).cwiseAbs().maxCoeff(), 1e-10);
    // Minimum energy is preserved.
    EXPECT_NEAR(s.c - s.b.dot(s.H.ldlt().solve(s.b)), 1.5 - b.dot(H.ldlt().solve(b)), 1e-9);
  }
}

TEST(Schur, SingularBlockUsesPseudoInverse) {
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(4, 4);
  H(2, 2) = 0.0;
  Eigen::VectorXd b = Eigen::VectorXd::Ones(4);
  b(2) = 0.0;
  const auto s = schur_complement(H, b, 0.0, {0, 1}, {2, 3});
  EXPECT_TRUE(s.pseudo_inverse);
  EXPECT_LT((s.H - Eigen::MatrixXd::Identity(2, 2)).norm(), 1e-15);
  EXPECT_NEAR(s.c, -1.0, 1e-15);
}

TEST(QuadraticPrior, UnconstrainedVariableLeavesPriorUnchanged) {
  std::mt19937 rng(41);
  const Eigen::MatrixXd A = random_matrix(rng, 10, 5);
  QuadraticPrior q(6);
  DenseSystem s(6);
  s.H.topLeftCorner(5, 5) = A.transpose() * A;
  s.g.head(5) = random_matrix(rng, 5, 1);
  s.energy = 3.0;
  q.add(s, Eigen::VectorXd::Zero(6));
  const Eigen::MatrixXd H0 = q.H().topLeftCorner(5, 5);
  const Eigen::VectorXd b0 = q.b().head(5);
  q.marginalize({5});
  EXPECT_EQ(q.dim(), 5);
  EXPECT_LT((q.H() - H0).norm(), 1e-15);
  EXPECT_LT((q.b() - b0).norm(), 1e-15);
  EXPECT_EQ(q.c(), 3.0);
}

// Linear-Gaussian chain with variables of dimension 2: motion factors between
// consecutive variables, skip factors two steps apart, direct observations
// and an anchor on the first variable.
struct LinearFactorSpec {
  std::vector<int> vars;
  Eigen::MatrixXd J;  // 2 x (2 * vars.size())
  Eigen::VectorXd z;
  Eigen::MatrixXd W;
};

std::vector<LinearFactorSpec> random_chain(std::mt19937& rng, int n) {
  std::vector<LinearFactorSpec> f;
  auto spd = [&]() {
    const Eigen::MatrixXd a = random_matrix(rng, 2, 2);
    return Eigen::MatrixXd(a * a.transpose() + 0.5 * Eigen::MatrixXd::Identity(2, 2));
  };
  f.push_back({{0}, Eigen::MatrixXd::Identity(2, 2), random_matrix(rng, 2, 1), spd()});
  for (int i = 0; i + 1 < n; ++i) {
    Eigen::MatrixXd J(2, 4);
    J << random_matrix(rng, 2, 2), Eigen::MatrixXd::Identity(2, 2);
    f.push_back({{i, i + 1}, J, random_matrix(rng, 2, 1), spd()});
    f.push_back({{i + 1}, random_matrix(rng, 2, 2), random_matrix(rng, 2, 1), spd()});
    if (i + 2 < n) {
      Eigen::MatrixXd K(2, 4);
      K << random_matrix(rng, 2, 2), random_matrix(rng, 2, 2);
      f.push_back({{i, i + 2}, K, random_matrix(rng, 2, 1), spd()});
    }
  }
  return f;
}

// Dense system of one factor over a flat vector, linearized at x.
DenseSystem linearize(const LinearFactorSpec& f, const Eigen::VectorXd& x, const std::vector<int>& index) {
  const int n = static_cast<int>(x.size());
  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(2, n);
  for (size_t k = 0; k < f.vars.size(); ++k) J.middleCols(index[f.vars[k]], 2) = f.J.middleCols(2 * k, 2);
  DenseSystem s(n);
  s.add_factor(J * x - f.z, f.W, J);
  return s;
}

TEST(QuadraticPrior, SequentialMarginalizationReproducesBatchSolution) {
  std::mt19937 rng(42);
  for (int trial = 0; trial < 10; ++trial) {
    const int n = 25;  // 50 scalar variables
    const auto factors = random_chain(rng, n);
    std::vector<int> identity(n);
    for (int i = 0; i < n; ++i) identity[i] = 2 * i;

    // Batch solution.
    const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(2 * n);
    DenseSystem batch(2 * n);
    for (const auto& f : factors) batch += linearize(f, x0, identity);
    const Eigen::VectorXd x_batch = -batch.H.ldlt().solve(batch.g);
    const Eigen::MatrixXd cov_batch = batch.H.inverse();

    // Sliding window of 5 variables; each factor is marginalized when its
    // oldest variable leaves. Linearization points are random and differ
    // from the evaluation points.
    const int keep = 5;
    int first = 0;
    QuadraticPrior prior(0);
    Eigen::VectorXd lin(0);
    std::vector<bool> used(factors.size(), false);
    for (int newest = 0; newest < n; ++newest) {
      prior.insert(prior.dim(), 2);
      lin.conservativeResize(lin.size() + 2);
      lin.tail(2) = random_matrix(rng, 2, 1);
      if (newest - first + 1 <= keep) continue;
      // Marginalize variable `first` together with its factors whose
      // variables are all inside the window.
      std::vector<int> index(n, -1);
      for (int v = first; v <= newest; ++v) index[v] = 2 * (v - first);
      const Eigen::VectorXd x_eval = lin + random_matrix(rng, lin.size(), 1);
      for (size_t k = 0; k < factors.size(); ++k) {
        const auto& f = factors[k];
        if (used[k]) continue;
        const bool touches_first = std::find(f.vars.begin(), f.vars.end(), first) != f.vars.end();
        const bool inside = std::all_of(f.vars.begin(), f.vars.end(), [&](int v) { return v <= newest; });
        if (touches_first && inside) {
          prior.add(linearize(f, x_eval, index), x_eval - lin);
          used[k] = true;
        }
      }
      prior.marginalize({0, 1});
      lin = lin.tail(lin.size() - 2).eval();
      ++first;
    }
    // Remaining factors in the window, then solve.
    std::vector<int> index(n, -1);
    for (int v = first; v < n; ++v) index[v] = 2 * (v - first);
    DenseSystem rest(lin.size());
    for (size_t k = 0; k < factors.size(); ++k)
      if (!used[k]) rest += linearize(factors[k], lin, index);
    prior.add_to(rest, Eigen::VectorXd::Zero(lin.size()));
    const Eigen::VectorXd x_window = lin - rest.H.ldlt().solve(rest.g);
    const Eigen::MatrixXd cov_window = rest.H.inverse();
    ASSERT_LT((x_window - x_batch.tail(2 * keep)).cwiseAbs().maxCoeff(), 1e-8) << trial;
    ASSERT_LT((cov_window - cov_batch.bottomRightCorner(2 * keep, 2 * keep)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

WindowState window_with_frames(int n, double scale) {
  WindowState w;
  w.sg.T_WmWf = ScaledRot(scale, Rot3());
  for (int k = 0; k < n; ++k) {
    KeyframeState kf;
    kf.id = k;
    kf.pose = Pose3(Rot3(), Vec3(0.1 * k, 0, 0));
    w.frames.push_back(kf);
  }
  return w;
}

TEST(DualPrior, SwitchThresholdIsExact) {
  for (const auto& [ratio, expected] :
       {std::pair{1.0, false}, std::pair{1.2, true}, std::pair{std::exp(0.1 - 1e-9), false},
        std::pair{std::exp(0.1 + 1e-9), true}, std::pair{std::exp(-0.1 - 1e-9), true}}) {
    WindowState w = window_with_frames(2, 1.0);
    DualPrior p;
    p.add_frame();
    p.add_frame();
    DenseSystem s(w.dim());
    s.H.setIdentity();
    p.add_inertial(s, w);
    w.sg.T_WmWf = ScaledRot(ratio, Rot3());
    EXPECT_EQ(p.maybe_switch(w, 0.1), expected) << ratio;
    EXPECT_EQ(p.num_switches(), expected ? 1 : 0);
  }
}

TEST(DualPrior, SecondaryKeepsVisualAndOnlyNewInertialFactors) {
  std::mt19937 rng(43);
  WindowState w = window_with_frames(3, 1.0);
  DualPrior p;
  for (int k = 0; k < 3; ++k) p.add_frame();
  auto random_system = [&](double e, bool visual = false) {
    Eigen::MatrixXd J = random_matrix(rng, 8, w.dim());
    // Visual factors never touch the scale/gravity block.
    if (visual) J.leftCols(layout::kGlobal).setZero();
    DenseSystem s(w.dim());
    s.add_factor(Eigen::VectorXd::Constant(8, e), Eigen::MatrixXd::Identity(8, 8), J);
    return s;
  };
  p.add_visual(random_system(0.1, true), w);
  p.add_inertial(random_system(0.2), w);
  p.marginalize_frame(0);
  w.frames.erase(w.frames.begin());
  w.sg.T_WmWf = ScaledRot(1.3, Rot3());
  ASSERT_TRUE(p.maybe_switch(w, 0.1));
  // The new primary is the old secondary, which already held the inertial
  // factor; the new secondary is visual only.
  EXPECT_FALSE(p.primary().quadratic().H().topLeftCorner(4, 4).isZero(0.0));
  EXPECT_TRUE(p.secondary().quadratic().H().topLeftCorner(4, 4).isZero(0.0));
  EXPECT_FALSE(p.secondary().global_lin().has_value());
  p.add_frame();
  w.frames.push_back(KeyframeState{});
  w.frames.back().id = 9;
  p.add_inertial(random_system(0.3), w);
  ASSERT_TRUE(p.secondary().global_lin().has_value());
  EXPECT_DOUBLE_EQ(p.secondary().global_lin()->scale(), 1.3);
}

TEST(DualPrior, SwitchingNeverIncreasesPriorEnergy) {
  std::mt19937 rng(44);
  for (int trial = 0; trial < 50; ++trial) {
    WindowState w = window_with_frames(4, 1.0);
    DualPrior p;
    for (int k = 0; k < 4; ++k) p.add_frame();
    std::normal_distribution<double> nd(0, 1);
    auto add = [&](bool visual) {
      const Eigen::MatrixXd J = random_matrix(rng, 12, w.dim());
      DenseSystem s(w.dim());
      s.add_factor(random_matrix(rng, 12, 1), Eigen::MatrixXd::Identity(12, 12), J);
      visual ? p.add_visual(s, w) : p.add_inertial(s, w);
    };
    add(true);
    add(false);
    p.marginalize_frame(0);
    w.frames.erase(w.frames.begin());
    Eigen::VectorXd d(w.dim());
    for (int i = 0; i < d.size(); ++i) d(i) = 0.1 * nd(rng);
    const WindowState x = boxplus(w, d);
    ASSERT_LE(p.secondary().energy(x), p.primary().energy(x) + 1e-9);
  }
}

}  // namespace
