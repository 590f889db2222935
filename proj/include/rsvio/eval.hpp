#pragma once

// Absolute trajectory error after rigid (no scale) alignment, multi-run
// aggregation and plot output.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rsvio/dataset_io.hpp"
#include "rsvio/errors.hpp"
#include "rsvio/lie.hpp"

namespace rsvio {

inline constexpr double kAssociationWindow = 0.010;  // s

struct Association {
  std::vector<double> t;
  std::vector<Vec3> est;
  std::vector<Vec3> gt;
  int unmatched = 0;
};

/// Nearest ground-truth pose within max_dt for every estimated pose.
inline Association associate(const std::vector<TimedPose>& est, const std::vector<TimedPose>& gt,
                             double max_dt = kAssociationWindow) {
  Association a;
  for (const auto& e : est) {
    auto it = std::lower_bound(gt.begin(), gt.end(), e.t, [](const TimedPose& p, double t) { return p.t < t; });
    const TimedPose* best = nullptr;
    if (it != gt.end()) best = &*it;
    if (it != gt.begin() && (!best || std::abs((it - 1)->t - e.t) < std::abs(best->t - e.t))) best = &*(it - 1);
    if (!best || std::abs(best->t - e.t) > max_dt) {
      ++a.unmatched;
      continue;
    }
    a.t.push_back(e.t);
    a.est.push_back(e.T.translation());
    a.gt.push_back(best->T.translation());
  }
  return a;
}

/// Rigid T minimizing sum |T est_i - gt_i|^2 (orthogonal Procrustes).
inline Pose3 align_se3(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
  if (est.size() != gt.size()) throw DomainError("align: size mismatch");
  if (est.size() < 3) throw DomainError("align: need at least 3 associated positions");
  const double n = static_cast<double>(est.size());
  Vec3 me = Vec3::Zero(), mg = Vec3::Zero();
  for (size_t i = 0; i < est.size(); ++i) {
    me += est[i] / n;
    mg += gt[i] / n;
  }
  Mat3 C = Mat3::Zero(), Se = Mat3::Zero(), Sg = Mat3::Zero();
  for (size_t i = 0; i < est.size(); ++i) {
    const Vec3 e = est[i] - me, g = gt[i] - mg;
    C += g * e.transpose();
    Se += e * e.transpose();
    Sg += g * g.transpose();
  }
  for (const Mat3* S : {&Se, &Sg}) {
    const Vec3 ev = Eigen::SelfAdjointEigenSolver<Mat3>(*S).eigenvalues();
    if (!(ev(1) > 1e-12 * std::max(1e-300, ev(2)) && ev(1) > 1e-18))
      throw DomainError("align: degenerate (collinear or coincident) positions");
  }
  Eigen::JacobiSVD<Mat3> svd(C, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) D(2, 2) = -1.0;
  const Mat3 R = svd.matrixU() * D * svd.matrixV().transpose();
  return Pose3(R, mg - R * me);
}

/// Similarity (s, R, t) minimizing sum |s R est_i + t - gt_i|^2 (Umeyama).
struct Sim3Alignment {
  double scale = 1.0;
  Pose3 rigid;  ///< rotation and translation applied after scaling
};

inline Sim3Alignment align_sim3(const std::vector<Vec3>& est, const std::vector<Vec3>& gt) {
  if (est.size() != gt.size() || est.size() < 3) throw DomainError("align_sim3: need at least 3 matched positions");
  const double n = static_cast<double>(est.size());
  Vec3 me = Vec3::Zero(), mg = Vec3::Zero();
  for (size_t i = 0; i < est.size(); ++i) {
    me += est[i] / n;
    mg += gt[i] / n;
  }
  Mat3 C = Mat3::Zero();
  double var = 0.0;
  for (size_t i = 0; i < est.size(); ++i) {
    C += (gt[i] - mg) * (est[i] - me).transpose() / n;
    var += (est[i] - me).squaredNorm() / n;
  }
  if (!(var > 1e-18)) throw DomainError("align_sim3: coincident positions");
  Eigen::JacobiSVD<Mat3> svd(C, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 D = Mat3::Identity();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) D(2, 2) = -1.0;
  const Mat3 R = svd.matrixU() * D * svd.matrixV().transpose();
  Sim3Alignment a;
  a.scale = (svd.singularValues().asDiagonal() * D).trace() / var;
  a.rigid = Pose3(R, mg - a.scale * R * me);
  return a;
}

struct EvalReport {
  double e_ate = 0.0;                ///< m
  std::vector<double> errors;        ///< per associated keyframe, m
  Pose3 alignment;                   ///< applied to the estimate
  std::vector<Vec3> aligned_est;
  std::vector<Vec3> gt;
  int unmatched = 0;
  std::map<std::string, std::string> metadata;
};

inline EvalReport ate(const Association& a) {
  EvalReport r;
  r.alignment = align_se3(a.est, a.gt);
  r.unmatched = a.unmatched;
  r.gt = a.gt;
  double sum = 0.0;
  for (size_t i = 0; i < a.est.size(); ++i) {
    const Vec3 e = r.alignment * a.est[i];
    r.aligned_est.push_back(e);
    r.errors.push_back((e - a.gt[i]).norm());
    sum += r.errors.back() * r.errors.back();
  }
  r.e_ate = std::sqrt(sum / a.est.size());
  return r;
}

inline EvalReport ate(const std::vector<TimedPose>& est, const std::vector<TimedPose>& gt,
                      double max_dt = kAssociationWindow) {
  return ate(associate(est, gt, max_dt));
}

/// One run of one sequence; e_ate empty marks a failed run.
struct RunRecord {
  std::string sequence;
  std::string mode;
  int run = 0;
  uint64_t seed = 0;
  std::optional<double> e_ate;
};

struct SequenceSummary {
  std::string sequence;
  std::string mode;
  std::optional<double> median;  ///< over successful runs
  int failed = 0;
  std::vector<RunRecord> runs;
};

inline double median(std::vector<double> v) {
  if (v.empty()) throw DomainError("median of an empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per (sequence, mode) median of successful runs; failures are counted.
inline std::vector<SequenceSummary> aggregate_runs(const std::vector<RunRecord>& runs) {
  std::map<std::pair<std::string, std::string>, SequenceSummary> cells;
  for (const auto& r : runs) {
    auto& c = cells[{r.sequence, r.mode}];
    c.sequence = r.sequence;
    c.mode = r.mode;
    c.runs.push_back(r);
  }
  std::vector<SequenceSummary> out;
  for (auto& [key, c] : cells) {
    std::vector<double> ok;
    for (const auto& r : c.runs) {
      if (r.e_ate) {
        ok.push_back(*r.e_ate);
      } else {
        ++c.failed;
      }
    }
    if (!ok.empty()) c.median = median(ok);
    std::sort(c.runs.begin(), c.runs.end(), [](const RunRecord& a, const RunRecord& b) { return a.run < b.run; });
    out.push_back(std::move(c));
  }
  return out;
}

inline constexpr const char* kRunsCsvHeader = "sequence,mode,run,seed,e_ate_m,status";

namespace detail {

inline std::string fmt(double v) {
  char b[32];
  std::snprintf(b, sizeof b, "%.9g", v);
  return b;
}

inline void open_or_throw(std::ofstream& f, const fs::path& p) {
  f.open(p);
  if (!f) throw DataError("cannot write " + p.string());
}

/// Green (low) to red (high) on a log scale between lo and hi.
inline std::string heat_color(double v, double lo, double hi) {
  double x = hi > lo ? (std::log(v) - std::log(lo)) / (std::log(hi) - std::log(lo)) : 0.5;
  x = std::clamp(x, 0.0, 1.0);
  char b[16];
  std::snprintf(b, sizeof b, "#%02x%02x40", static_cast<int>(255 * x), static_cast<int>(255 * (1 - x)));
  return b;
}

}  // namespace detail

/// Writes runs.csv, ate_grid.svg and, per report, <name>_trajectory.svg and
/// <name>_errors.csv.
inline void emit_plots(const std::map<std::string, EvalReport>& reports, const std::vector<RunRecord>& runs,
                       const fs::path& out_dir) {
  fs::create_directories(out_dir);
  {
    std::ofstream f;
    detail::open_or_throw(f, out_dir / "runs.csv");
    f << kRunsCsvHeader << '\n';
    for (const auto& r : runs)
      f << r.sequence << ',' << r.mode << ',' << r.run << ',' << r.seed << ','
        << (r.e_ate ? detail::fmt(*r.e_ate) : "") << ',' << (r.e_ate ? "ok" : "failed") << '\n';
  }
  if (!runs.empty()) {
    const auto summary = aggregate_runs(runs);
    int max_runs = 0;
    double lo = 1e300, hi = 0.0;
    for (const auto& s : summary) {
      max_runs = std::max<int>(max_runs, static_cast<int>(s.runs.size()));
      for (const auto& r : s.runs)
        if (r.e_ate && *r.e_ate > 0) {
          lo = std::min(lo, *r.e_ate);
          hi = std::max(hi, *r.e_ate);
        }
    }
    if (hi == 0.0) lo = hi = 1.0;
    const int cell = 28, label = 220;
    std::ofstream f;
    detail::open_or_throw(f, out_dir / "ate_grid.svg");
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << label + cell * max_runs + 10 << "\" height=\""
      << cell * summary.size() + 10 << "\" font-family=\"monospace\" font-size=\"12\">\n";
    for (size_t i = 0; i < summary.size(); ++i) {
      const auto& s = summary[i];
      f << "<text x=\"4\" y=\"" << cell * i + 18 << "\">" << s.sequence << " (" << s.mode << ")</text>\n";
      for (size_t j = 0; j < s.runs.size(); ++j) {
        const auto& r = s.runs[j];
        const std::string color = r.e_ate ? detail::heat_color(std::max(*r.e_ate, lo), lo, hi) : "#ffffff";
        f << "<rect x=\"" << label + cell * j << "\" y=\"" << cell * i + 2 << "\" width=\"" << cell - 2
          << "\" height=\"" << cell - 2 << "\" fill=\"" << color << "\" stroke=\"#888\"><title>"
          << (r.e_ate ? detail::fmt(*r.e_ate) + " m" : std::string("failed")) << "</title></rect>\n";
      }
    }
    f << "</svg>\n";
  }
  for (const auto& [name, rep] : reports) {
    {
      std::ofstream f;
      detail::open_or_throw(f, out_dir / (name + "_errors.csv"));
      f << "index,est_x,est_y,est_z,gt_x,gt_y,gt_z,error_m\n";
      for (size_t i = 0; i < rep.errors.size(); ++i) {
        const auto& e = rep.aligned_est[i];
        const auto& g = rep.gt[i];
        f << i << ',' << detail::fmt(e.x()) << ',' << detail::fmt(e.y()) << ',' << detail::fmt(e.z()) << ','
          << detail::fmt(g.x()) << ',' << detail::fmt(g.y()) << ',' << detail::fmt(g.z()) << ','
          << detail::fmt(rep.errors[i]) << '\n';
      }
    }
    // Top-down (x, y) overlay.
    double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
    for (const auto* pts : {&rep.aligned_est, &rep.gt})
      for (const auto& p : *pts) {
        x0 = std::min(x0, p.x());
        x1 = std::max(x1, p.x());
        y0 = std::min(y0, p.y());
        y1 = std::max(y1, p.y());
      }
    const double size = 500.0, pad = 20.0;
    const double span = std::max({x1 - x0, y1 - y0, 1e-9});
    auto poly = [&](const std::vector<Vec3>& pts, const char* color) {
      std::string s = "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"";
      for (const auto& p : pts)
        s += detail::fmt(pad + (p.x() - x0) / span * size) + "," + detail::fmt(pad + (y1 - p.y()) / span * size) + " ";
      return s + "\"/>\n";
    };
    std::ofstream f;
    detail::open_or_throw(f, out_dir / (name + "_trajectory.svg"));
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad << "\" height=\"" << size + 2 * pad
      << "\">\n";
    if (!rep.gt.empty()) f << poly(rep.gt, "#222222") << poly(rep.aligned_est, "#d62728");
    f << "<text x=\"" << pad << "\" y=\"14\" font-size=\"12\">e_ate " << detail::fmt(rep.e_ate) << " m</text>\n";
    f << "</svg>\n";
  }
}

}  // namespace rsvio
