#pragma once

// Gaussian priors left behind by marginalization. A prior is a quadratic
//   E(D) = c + 2 b^T D + D^T H D
// in the tangent offset D = x [-] x_lin from linearization points that are
// frozen once a block enters the prior.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "rsvio/errors.hpp"
#include "rsvio/problem.hpp"

namespace rsvio {

struct SchurResult {
  Eigen::MatrixXd H;
  Eigen::VectorXd b;
  double c = 0.0;
  bool pseudo_inverse = false;
};

/// Inverse of a symmetric PSD block; falls back to the Moore-Penrose inverse
/// when the block is singular.
inline Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& A, bool* used_pinv = nullptr) {
  if (A.size() == 0) return A;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (A + A.transpose()));
  const Eigen::VectorXd ev = es.eigenvalues();
  const double tol = 1e-12 * std::max(1e-300, ev.cwiseAbs().maxCoeff()) * A.rows();
  Eigen::VectorXd inv(ev.size());
  bool singular = false;
  for (int i = 0; i < ev.size(); ++i) {
    if (ev(i) > tol) {
      inv(i) = 1.0 / ev(i);
    } else {
      inv(i) = 0.0;
      singular = true;
    }
  }
  if (used_pinv) *used_pinv = singular;
  return es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
}

/// Eliminates the variables in marg from E = c + 2 b^T x + x^T H x.
inline SchurResult schur_complement(const Eigen::MatrixXd& H, const Eigen::VectorXd& b, double c,
                                    const std::vector<int>& keep, const std::vector<int>& marg) {
  const int nk = static_cast<int>(keep.size()), nm = static_cast<int>(marg.size());
  Eigen::MatrixXd Hkk(nk, nk), Hkm(nk, nm), Hmm(nm, nm);
  Eigen::VectorXd bk(nk), bm(nm);
  for (int i = 0; i < nk; ++i) {
    bk(i) = b(keep[i]);
    for (int j = 0; j < nk; ++j) Hkk(i, j) = H(keep[i], keep[j]);
    for (int j = 0; j < nm; ++j) Hkm(i, j) = H(keep[i], marg[j]);
  }
  for (int i = 0; i < nm; ++i) {
    bm(i) = b(marg[i]);
    for (int j = 0; j < nm; ++j) Hmm(i, j) = H(marg[i], marg[j]);
  }
  SchurResult out;
  const Eigen::MatrixXd Hmm_inv = symmetric_inverse(Hmm, &out.pseudo_inverse);
  const Eigen::MatrixXd K = Hkm * Hmm_inv;
  out.H = Hkk - K * Hkm.transpose();
  out.H = 0.5 * (out.H + out.H.transpose());
  out.b = bk - K * bm;
  out.c = c - bm.dot(Hmm_inv * bm);
  return out;
}

/// Quadratic prior over a flat offset vector.
class QuadraticPrior {
 public:
  QuadraticPrior() = default;
  explicit QuadraticPrior(int n) : H_(Eigen::MatrixXd::Zero(n, n)), b_(Eigen::VectorXd::Zero(n)) {}

  int dim() const { return static_cast<int>(b_.size()); }
  const Eigen::MatrixXd& H() const { return H_; }
  const Eigen::VectorXd& b() const { return b_; }
  double c() const { return c_; }

  /// Adds a quadratic E(x + e) = E0 + 2 g^T e + e^T H e that was linearized
  /// at offset delta from this prior's linearization point.
  void add(const DenseSystem& at_x, const Eigen::VectorXd& delta) {
    const Eigen::VectorXd Hd = at_x.H * delta;
    c_ += at_x.energy - 2.0 * at_x.g.dot(delta) + delta.dot(Hd);
    b_ += at_x.g - Hd;
    H_ += at_x.H;
  }

  double energy(const Eigen::VectorXd& delta) const { return c_ + 2.0 * b_.dot(delta) + delta.dot(H_ * delta); }

  /// Adds this prior's energy, half-gradient and Hessian at offset delta.
  void add_to(DenseSystem& sys, const Eigen::VectorXd& delta) const {
    sys.energy += energy(delta);
    sys.g += b_ + H_ * delta;
    sys.H += H_;
  }

  /// Schur-eliminates the given indices. Returns true if the eliminated
  /// block was singular.
  bool marginalize(std::vector<int> idx) {
    std::sort(idx.begin(), idx.end());
    std::vector<int> keep;
    for (int i = 0; i < dim(); ++i)
      if (!std::binary_search(idx.begin(), idx.end(), i)) keep.push_back(i);
    auto r = schur_complement(H_, b_, c_, keep, idx);
    H_ = std::move(r.H);
    b_ = std::move(r.b);
    c_ = r.c;
    return r.pseudo_inverse;
  }

  /// Inserts count unconstrained variables before index at.
  void insert(int at, int count) {
    const int n = dim();
    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(n + count, n + count);
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n + count);
    auto map = [&](int i) { return i < at ? i : i + count; };
    for (int i = 0; i < n; ++i) {
      b(map(i)) = b_(i);
      for (int j = 0; j < n; ++j) H(map(i), map(j)) = H_(i, j);
    }
    H_ = std::move(H);
    b_ = std::move(b);
  }

  bool block_is_zero(int at, int count) const {
    return H_.middleRows(at, count).isZero(0.0) && b_.segment(at, count).isZero(0.0);
  }

 private:
  Eigen::MatrixXd H_;
  Eigen::VectorXd b_;
  double c_ = 0.0;
};

/// Prior over the window layout with per-block linearization points.
class WindowPrior {
 public:
  WindowPrior() : q_(layout::kGlobal) {}

  const QuadraticPrior& quadratic() const { return q_; }
  int num_frames() const { return static_cast<int>(frame_lin_.size()); }
  const std::optional<ScaleGravity>& global_lin() const { return global_lin_; }
  const std::optional<KeyframeState>& frame_lin(int slot) const { return frame_lin_[slot]; }

  void add_frame() {
    q_.insert(q_.dim(), layout::kFrame);
    frame_lin_.emplace_back();
  }

  /// Freezes the linearization point of every block that does not have one.
  void fix_lin_points(const WindowState& w) {
    check(w);
    if (!global_lin_) global_lin_ = w.sg;
    for (size_t k = 0; k < frame_lin_.size(); ++k)
      if (!frame_lin_[k]) frame_lin_[k] = w.frames[k];
  }

  /// Offset of the current state from the linearization points; zero on
  /// blocks without one.
  Eigen::VectorXd delta(const WindowState& w) const {
    check(w);
    Eigen::VectorXd d = Eigen::VectorXd::Zero(w.dim());
    if (global_lin_) d.head<layout::kGlobal>() = boxminus(w.sg, *global_lin_);
    for (size_t k = 0; k < frame_lin_.size(); ++k)
      if (frame_lin_[k]) d.segment<layout::kFrame>(layout::frame_offset(k)) = boxminus(w.frames[k], *frame_lin_[k]);
    return d;
  }

  /// Adds a quadratic linearized at the current state w.
  void add(const DenseSystem& at_x, const WindowState& w) {
    fix_lin_points(w);
    q_.add(at_x, delta(w));
  }

  void add_to(DenseSystem& sys, const WindowState& w) const { q_.add_to(sys, delta(w)); }
  double energy(const WindowState& w) const { return q_.energy(delta(w)); }

  bool marginalize_frame(int slot) {
    std::vector<int> idx(layout::kFrame);
    for (int i = 0; i < layout::kFrame; ++i) idx[i] = layout::frame_offset(slot) + i;
    const bool pinv = q_.marginalize(idx);
    frame_lin_.erase(frame_lin_.begin() + slot);
    return pinv;
  }

  /// Drops the global linearization point if the prior carries no
  /// information on the global block.
  void release_unconstrained_global() {
    if (q_.block_is_zero(0, layout::kGlobal)) global_lin_.reset();
  }

 private:
  void check(const WindowState& w) const {
    if (static_cast<int>(w.frames.size()) != num_frames())
      throw DomainError("prior does not match the window layout");
  }

  QuadraticPrior q_;
  std::optional<ScaleGravity> global_lin_;
  std::vector<std::optional<KeyframeState>> frame_lin_;
};

/// Primary prior plus a secondary one holding visual factors and only the
/// inertial factors marginalized since it was started. A third, visual-only
/// accumulator seeds each new secondary.
class DualPrior {
 public:
  const WindowPrior& primary() const { return primary_; }
  const WindowPrior& secondary() const { return secondary_; }
  const WindowPrior& visual() const { return visual_; }
  int num_switches() const { return switches_; }

  void add_frame() {
    primary_.add_frame();
    secondary_.add_frame();
    visual_.add_frame();
  }

  void add_visual(const DenseSystem& at_x, const WindowState& w) {
    primary_.add(at_x, w);
    secondary_.add(at_x, w);
    visual_.add(at_x, w);
  }

  void add_inertial(const DenseSystem& at_x, const WindowState& w) {
    primary_.add(at_x, w);
    secondary_.add(at_x, w);
  }

  /// Returns true if any eliminated block was singular.
  bool marginalize_frame(int slot) {
    bool p = primary_.marginalize_frame(slot);
    p |= secondary_.marginalize_frame(slot);
    p |= visual_.marginalize_frame(slot);
    return p;
  }

  /// |log(s / s_lin)| of the primary prior, zero without a scale lin point.
  double scale_deviation(const WindowState& w) const {
    if (!primary_.global_lin()) return 0.0;
    return std::abs(std::log(w.sg.scale() / primary_.global_lin()->scale()));
  }

  /// Replaces the primary by the secondary once the scale moved more than
  /// threshold (in log scale) away from the primary's linearization point.
  bool maybe_switch(const WindowState& w, double threshold) {
    if (!(scale_deviation(w) > threshold)) return false;
    primary_ = secondary_;
    secondary_ = visual_;
    secondary_.release_unconstrained_global();
    ++switches_;
    return true;
  }

 private:
  WindowPrior primary_, secondary_, visual_;
  int switches_ = 0;
};

}  // namespace rsvio
