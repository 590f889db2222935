#pragma once

// Variable layout of the sliding window and the dense normal-equation
// accumulator shared by all energy terms.
//
// Global block: (log s, theta) with R_WmWf <- Exp(theta) R_WmWf.
// Per keyframe: pose (rho, phi) as T_CfWf <- exp(d) T_CfWf, twist, affine
// (a, b), velocity, bias (b_a, b_g).

#include <Eigen/Dense>

#include <cmath>
#include <vector>

#include "rsvio/lie.hpp"
#include "rsvio/state.hpp"

namespace rsvio {

namespace layout {
inline constexpr int kGlobal = 4;
inline constexpr int kLogScale = 0;
inline constexpr int kGravity = 1;
inline constexpr int kFrame = 23;
inline constexpr int kPose = 0;
inline constexpr int kTwist = 6;
inline constexpr int kAffine = 12;
inline constexpr int kVelocity = 14;
inline constexpr int kBias = 17;
inline constexpr int kBiasAccel = 17;
inline constexpr int kBiasGyro = 20;
/// Leading per-frame entries touched by the photometric energy.
inline constexpr int kPhoto = 14;

inline constexpr int frame_offset(int slot) { return kGlobal + kFrame * slot; }
inline constexpr int dim(int num_frames) { return kGlobal + kFrame * num_frames; }
}  // namespace layout

struct WindowState {
  ScaleGravity sg;
  std::vector<KeyframeState> frames;

  int dim() const { return layout::dim(static_cast<int>(frames.size())); }

  int slot_of(int64_t id) const {
    for (size_t k = 0; k < frames.size(); ++k)
      if (frames[k].id == id) return static_cast<int>(k);
    return -1;
  }
};

inline KeyframeState boxplus(const KeyframeState& kf, const Eigen::Ref<const Eigen::VectorXd>& d) {
  using namespace layout;
  KeyframeState o = kf;
  o.pose = exp_se3(d.segment<6>(kPose)) * kf.pose;
  o.twist += d.segment<6>(kTwist);
  o.aff_a += d(kAffine);
  o.aff_b += d(kAffine + 1);
  o.velocity += d.segment<3>(kVelocity);
  o.bias += d.segment<6>(kBias);
  return o;
}

inline ScaleGravity boxplus(const ScaleGravity& sg, const Eigen::Ref<const Eigen::VectorXd>& d) {
  return {ScaledRot(sg.scale() * std::exp(d(layout::kLogScale)),
                    Rot3::exp(d.segment<3>(layout::kGravity)) * sg.rotation())};
}

inline WindowState boxplus(const WindowState& w, const Eigen::VectorXd& d) {
  WindowState o;
  o.sg = boxplus(w.sg, d.head<layout::kGlobal>());
  o.frames.reserve(w.frames.size());
  for (size_t k = 0; k < w.frames.size(); ++k)
    o.frames.push_back(boxplus(w.frames[k], d.segment<layout::kFrame>(layout::frame_offset(k))));
  return o;
}

/// a minus b in the tangent space at b, per keyframe block.
inline Eigen::Matrix<double, layout::kFrame, 1> boxminus(const KeyframeState& a, const KeyframeState& b) {
  using namespace layout;
  Eigen::Matrix<double, kFrame, 1> d;
  d.segment<6>(kPose) = log_se3(a.pose * b.pose.inverse());
  d.segment<6>(kTwist) = a.twist - b.twist;
  d(kAffine) = a.aff_a - b.aff_a;
  d(kAffine + 1) = a.aff_b - b.aff_b;
  d.segment<3>(kVelocity) = a.velocity - b.velocity;
  d.segment<6>(kBias) = a.bias - b.bias;
  return d;
}

inline Vec4 boxminus(const ScaleGravity& a, const ScaleGravity& b) {
  Vec4 d;
  d(layout::kLogScale) = std::log(a.scale() / b.scale());
  d.segment<3>(layout::kGravity) = (a.rotation() * b.rotation().inverse()).log();
  return d;
}

/// One linearized factor over the full window vector: r, weight W, J.
struct LinearFactor {
  Eigen::VectorXd r;
  Eigen::MatrixXd W;
  Eigen::MatrixXd J;
};

/// Accumulates E = sum r^T W r, g = sum J^T W r and H = sum J^T W J.
/// A Gauss-Newton step is then delta = -H^-1 g and dE/dx = 2 g.
struct DenseSystem {
  double energy = 0.0;
  Eigen::VectorXd g;
  Eigen::MatrixXd H;

  DenseSystem() = default;
  explicit DenseSystem(int n) : g(Eigen::VectorXd::Zero(n)), H(Eigen::MatrixXd::Zero(n, n)) {}

  int dim() const { return static_cast<int>(g.size()); }

  void add_factor(const Eigen::VectorXd& r, const Eigen::MatrixXd& W, const Eigen::MatrixXd& J) {
    const Eigen::MatrixXd WJ = W * J;
    energy += r.dot(W * r);
    g.noalias() += WJ.transpose() * r;
    H.noalias() += J.transpose() * WJ;
  }

  void add_factor(const LinearFactor& f) { add_factor(f.r, f.W, f.J); }

  DenseSystem& operator+=(const DenseSystem& o) {
    energy += o.energy;
    g += o.g;
    H += o.H;
    return *this;
  }
};

}  // namespace rsvio
