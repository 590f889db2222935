#pragma once

// Dataset directories and trajectory files. Formats are documented in
// docs/formats.md. Parsers reject malformed input with the file and line.

#include <png.h>
#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "rsvio/camera.hpp"
#include "rsvio/errors.hpp"
#include "rsvio/image.hpp"
#include "rsvio/imu_preint.hpp"
#include "rsvio/lie.hpp"
#include "rsvio/state.hpp"

namespace rsvio {

namespace fs = std::filesystem;

inline constexpr std::string_view kImuHeader = "# timestamp_ns,gx_rad_s,gy_rad_s,gz_rad_s,ax_m_s2,ay_m_s2,az_m_s2";
inline constexpr std::string_view kImageHeader = "# timestamp_ns,path,shutter";

struct ImageEntry {
  int64_t timestamp_ns = 0;
  double t = 0.0;  ///< seconds since the dataset epoch
  std::string path;  ///< relative to the dataset root
  std::string shutter;  ///< "RS" or "GS"
};

struct TimedPose {
  double t = 0.0;  ///< seconds since the epoch the file was read with
  Pose3 T;        ///< T_WI, metric
};

struct DatasetIndex {
  fs::path root;
  int64_t epoch_ns = 0;
  std::vector<ImageEntry> images;
  std::vector<ImuSample> imu;
  std::map<std::string, CameraModel> cameras;
  Pose3 T_CmI;
  Vec3 gravity = Vec3(0, 0, -9.81);
  std::optional<std::vector<TimedPose>> ground_truth;

  std::vector<ImageEntry> stream(const std::string& shutter) const {
    std::vector<ImageEntry> out;
    for (const auto& e : images)
      if (e.shutter == shutter) out.push_back(e);
    return out;
  }

  Calibration calibration(const std::string& shutter) const {
    const auto it = cameras.find(shutter);
    if (it == cameras.end()) throw DataError("dataset: no camera for shutter '" + shutter + "'");
    return Calibration(T_CmI, it->second, gravity);
  }
};

namespace detail {

inline std::string where(const fs::path& p, int line) { return p.string() + ":" + std::to_string(line); }

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline int64_t parse_int64(const std::string& s, const std::string& ctx) {
  int64_t v = 0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty())
    throw DataError(ctx + ": expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s, const std::string& ctx) {
  double v = 0.0;
  const auto t = trim(s);
  const auto r = std::from_chars(t.data(), t.data() + t.size(), v);
  if (r.ec != std::errc() || r.ptr != t.data() + t.size() || t.empty() || !std::isfinite(v))
    throw DataError(ctx + ": expected a finite number, got '" + s + "'");
  return v;
}

/// Decimal seconds ("123.456789012") to integer nanoseconds, exactly.
inline int64_t parse_seconds_ns(const std::string& s, const std::string& ctx) {
  const auto t = trim(s);
  const bool neg = !t.empty() && t[0] == '-';
  const std::string body = neg ? t.substr(1) : t;
  const auto dot = body.find('.');
  const std::string ip = body.substr(0, dot);
  std::string fp = dot == std::string::npos ? "" : body.substr(dot + 1);
  if (ip.empty() || fp.size() > 9 || !std::all_of(ip.begin(), ip.end(), ::isdigit) ||
      !std::all_of(fp.begin(), fp.end(), ::isdigit))
    throw DataError(ctx + ": malformed timestamp '" + s + "' (seconds with at most 9 decimals)");
  fp.resize(9, '0');
  const int64_t ns = parse_int64(ip, ctx) * 1000000000LL + parse_int64(fp, ctx);
  return neg ? -ns : ns;
}

inline std::string format_seconds_ns(int64_t ns) {
  char buf[48];
  const bool neg = ns < 0;
  const uint64_t a = neg ? static_cast<uint64_t>(-(ns + 1)) + 1 : static_cast<uint64_t>(ns);
  std::snprintf(buf, sizeof buf, "%s%llu.%09llu", neg ? "-" : "", static_cast<unsigned long long>(a / 1000000000ULL),
                static_cast<unsigned long long>(a % 1000000000ULL));
  return buf;
}

inline std::string format_number(double v) {
  if (v == 0.0) return "0";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> read_lines(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw DataError("cannot open " + p.string());
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(f, l)) {
    if (!l.empty() && l.back() == '\r') l.pop_back();
    lines.push_back(l);
  }
  return lines;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PNG

/// 16-bit grayscale PNG of intensities in [0, 255] scaled by 257.
inline void save_png16(const fs::path& path, const Image& img) {
  FILE* fp = std::fopen(path.string().c_str(), "wb");
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw DataError("png: failed writing " + path.string());
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width(), img.height(), 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(img.width()) * 2);
  for (int y = 0; y < img.height(); ++y) {
    for (int x = 0; x < img.width(); ++x) {
      const auto v = static_cast<uint16_t>(std::lround(std::clamp(static_cast<double>(img.at(x, y)), 0.0, 255.0) * 257.0));
      row[2 * x] = static_cast<png_byte>(v >> 8);
      row[2 * x + 1] = static_cast<png_byte>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw DataError("png: failed closing " + path.string());
}

/// Loads a grayscale PNG. 16-bit values map to value / 257. 8-bit images are
/// rejected unless scale_8bit > 0, in which case they map to value * scale_8bit.
inline Image load_png(const fs::path& path, double scale_8bit = 0.0) {
  FILE* fp = std::fopen(path.string().c_str(), "rb");
  if (!fp) throw DataError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError("png: failed reading " + path.string());
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int depth = png_get_bit_depth(png, info);
  const int color = png_get_color_type(png, info);
  auto fail = [&](const std::string& msg) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw DataError(path.string() + ": " + msg);
  };
  if (color != PNG_COLOR_TYPE_GRAY) fail("expected a grayscale PNG");
  if (depth != 16 && depth != 8) fail("expected 8- or 16-bit samples");
  if (depth == 8 && !(scale_8bit > 0.0)) fail("8-bit image given; pass an 8-bit scale to accept it");
  std::vector<png_byte> row(png_get_rowbytes(png, info));
  std::vector<float> data(static_cast<size_t>(w) * h);
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x) {
      const double v = depth == 16 ? ((row[2 * x] << 8) | row[2 * x + 1]) / 257.0 : row[x] * scale_8bit;
      data[static_cast<size_t>(y) * w + x] = static_cast<float>(v);
    }
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return Image(w, h, std::move(data));
}

// ---------------------------------------------------------------------------
// Trajectories

/// Writes `timestamp_s tx ty tz qx qy qz qw`, timestamp = epoch + t.
inline void write_trajectory(const fs::path& path, const std::vector<TimedPose>& poses, int64_t epoch_ns = 0) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  for (const auto& p : poses) {
    const auto q = p.T.rotation().quaternion();
    const Vec3& t = p.T.translation();
    f << detail::format_seconds_ns(epoch_ns + std::llround(p.t * 1e9));
    for (double v : {t.x(), t.y(), t.z(), q.x(), q.y(), q.z(), q.w()}) f << ' ' << detail::format_number(v);
    f << '\n';
  }
  if (!f) throw DataError("failed writing " + path.string());
}

inline std::vector<TimedPose> read_trajectory(const fs::path& path, int64_t epoch_ns = 0) {
  const auto lines = detail::read_lines(path);
  std::vector<TimedPose> out;
  for (size_t i = 0; i < lines.size(); ++i) {
    const auto ctx = detail::where(path, static_cast<int>(i + 1));
    const auto l = detail::trim(lines[i]);
    if (l.empty() || l[0] == '#') continue;
    std::istringstream is(l);
    std::vector<std::string> tok;
    for (std::string s; is >> s;) tok.push_back(s);
    if (tok.size() != 8) throw DataError(ctx + ": expected 8 fields, got " + std::to_string(tok.size()));
    TimedPose p;
    p.t = (detail::parse_seconds_ns(tok[0], ctx) - epoch_ns) * 1e-9;
    double v[7];
    for (int k = 0; k < 7; ++k) v[k] = detail::parse_double(tok[k + 1], ctx);
    const Eigen::Quaterniond q(v[6], v[3], v[4], v[5]);
    if (std::abs(q.norm() - 1.0) > 1e-3) throw DataError(ctx + ": quaternion is not unit length");
    p.T = Pose3(Rot3::from_quaternion(q), Vec3(v[0], v[1], v[2]));
    if (!out.empty() && p.t <= out.back().t) throw DataError(ctx + ": timestamps not strictly increasing");
    out.push_back(p);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset directory

inline std::string camera_file_name(const std::string& shutter) {
  std::string s = shutter;
  std::transform(s.begin(), s.end(), s.begin(), ::tolower);
  return "camera_" + s + ".yaml";
}

inline void write_extrinsics(const fs::path& path, const Pose3& T_CmI, const Vec3& gravity) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  const Mat4 M = T_CmI.matrix();
  f << "T_cam_imu: [";
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) f << (r || c ? ", " : "") << detail::format_number(M(r, c));
  f << "]\ngravity_m_s2: [" << detail::format_number(gravity.x()) << ", " << detail::format_number(gravity.y())
    << ", " << detail::format_number(gravity.z()) << "]\n";
}

inline void write_imu_csv(const fs::path& path, const std::vector<ImuSample>& imu, int64_t epoch_ns) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << kImuHeader << '\n';
  for (const auto& m : imu) {
    f << epoch_ns + std::llround(m.timestamp * 1e9);
    for (double v : {m.gyro.x(), m.gyro.y(), m.gyro.z(), m.accel.x(), m.accel.y(), m.accel.z()})
      f << ',' << detail::format_number(v);
    f << '\n';
  }
  if (!f) throw DataError("failed writing " + path.string());
}

inline void write_image_manifest(const fs::path& path, const std::vector<ImageEntry>& images) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << kImageHeader << '\n';
  for (const auto& e : images) f << e.timestamp_ns << ',' << e.path << ',' << e.shutter << '\n';
  if (!f) throw DataError("failed writing " + path.string());
}

namespace detail {

inline std::pair<Pose3, Vec3> read_extrinsics(const fs::path& path) {
  YAML::Node n;
  try {
    n = YAML::LoadFile(path.string());
  } catch (const YAML::Exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (!n["T_cam_imu"] || !n["T_cam_imu"].IsSequence() || n["T_cam_imu"].size() != 16)
    throw DataError(path.string() + ": T_cam_imu must be a list of 16 numbers (row-major 4x4)");
  Mat4 M;
  try {
    for (int k = 0; k < 16; ++k) M(k / 4, k % 4) = n["T_cam_imu"][k].as<double>();
  } catch (const YAML::Exception&) {
    throw DataError(path.string() + ": T_cam_imu entries must be numbers");
  }
  if (!M.row(3).isApprox(Eigen::RowVector4d(0, 0, 0, 1), 1e-9))
    throw DataError(path.string() + ": T_cam_imu last row must be 0 0 0 1");
  const Mat3 R = M.topLeftCorner<3, 3>();
  if (!(R.transpose() * R).isApprox(Mat3::Identity(), 1e-6) || R.determinant() < 0)
    throw DataError(path.string() + ": T_cam_imu rotation is not orthonormal");
  Vec3 g(0, 0, -9.81);
  if (n["gravity_m_s2"]) {
    if (!n["gravity_m_s2"].IsSequence() || n["gravity_m_s2"].size() != 3)
      throw DataError(path.string() + ": gravity_m_s2 must be a list of 3 numbers");
    for (int k = 0; k < 3; ++k) g(k) = n["gravity_m_s2"][k].as<double>();
  }
  return {Pose3::from_matrix(M), g};
}

inline std::vector<std::pair<int64_t, ImuSample>> read_imu_csv(const fs::path& path) {
  const auto lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != kImuHeader)
    throw DataError(where(path, 1) + ": header must be '" + std::string(kImuHeader) +
                    "' (gyro in rad/s, accel in m/s^2)");
  std::vector<std::pair<int64_t, ImuSample>> out;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto ctx = where(path, static_cast<int>(i + 1));
    if (trim(lines[i]).empty()) continue;
    const auto f = split(lines[i], ',');
    if (f.size() != 7) throw DataError(ctx + ": expected 7 fields, got " + std::to_string(f.size()));
    ImuSample m;
    const int64_t ns = parse_int64(f[0], ctx);
    for (int k = 0; k < 3; ++k) {
      m.gyro(k) = parse_double(f[1 + k], ctx);
      m.accel(k) = parse_double(f[4 + k], ctx);
    }
    if (!out.empty() && ns <= out.back().first) throw DataError(ctx + ": timestamps not strictly increasing");
    out.emplace_back(ns, m);
  }
  if (out.size() < 2) throw DataError(path.string() + ": fewer than two IMU samples");
  // Unit plausibility: a median specific force far from 1 g or rates beyond
  // any MEMS range mean the stream is not in the documented units.
  std::vector<double> an;
  double wmax = 0.0;
  for (const auto& [ns, m] : out) {
    an.push_back(m.accel.norm());
    wmax = std::max(wmax, m.gyro.norm());
  }
  std::nth_element(an.begin(), an.begin() + an.size() / 2, an.end());
  const double amed = an[an.size() / 2];
  if (amed < 4.0 || amed > 25.0)
    throw DataError(path.string() + ": median accelerometer norm " + std::to_string(amed) +
                    " is not consistent with m/s^2");
  if (wmax > 35.0)
    throw DataError(path.string() + ": gyro rate " + std::to_string(wmax) + " exceeds 35 rad/s; deg/s data?");
  return out;
}

inline std::vector<ImageEntry> read_image_manifest(const fs::path& root) {
  const fs::path path = root / "images.csv";
  const auto lines = read_lines(path);
  if (lines.empty() || trim(lines[0]) != kImageHeader)
    throw DataError(where(path, 1) + ": header must be '" + std::string(kImageHeader) + "'");
  std::vector<ImageEntry> out;
  std::map<std::string, int64_t> last;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto ctx = where(path, static_cast<int>(i + 1));
    if (trim(lines[i]).empty()) continue;
    const auto f = split(lines[i], ',');
    if (f.size() != 3) throw DataError(ctx + ": expected 3 fields, got " + std::to_string(f.size()));
    ImageEntry e;
    e.timestamp_ns = parse_int64(f[0], ctx);
    e.path = trim(f[1]);
    e.shutter = trim(f[2]);
    if (e.shutter != "RS" && e.shutter != "GS") throw DataError(ctx + ": shutter must be RS or GS");
    if (e.path.empty() || fs::path(e.path).is_absolute()) throw DataError(ctx + ": path must be relative");
    if (!fs::is_regular_file(root / e.path)) throw DataError(ctx + ": missing image file " + e.path);
    if (last.count(e.shutter) && e.timestamp_ns <= last[e.shutter])
      throw DataError(ctx + ": timestamps not strictly increasing");
    last[e.shutter] = e.timestamp_ns;
    out.push_back(e);
  }
  if (out.empty()) throw DataError(path.string() + ": no images");
  return out;
}

}  // namespace detail

/// Reads and validates a dataset directory.
inline DatasetIndex load_dataset(const fs::path& root) {
  if (!fs::is_directory(root)) throw DataError("dataset directory not found: " + root.string());
  for (const char* f : {"images.csv", "imu.csv", "extrinsics.yaml"})
    if (!fs::is_regular_file(root / f)) throw DataError("dataset: missing " + (root / f).string());
  DatasetIndex d;
  d.root = root;
  d.images = detail::read_image_manifest(root);
  const auto imu = detail::read_imu_csv(root / "imu.csv");
  d.epoch_ns = std::min(imu.front().first, d.images.front().timestamp_ns);
  for (const auto& e : d.images) d.epoch_ns = std::min(d.epoch_ns, e.timestamp_ns);
  for (auto& e : d.images) e.t = (e.timestamp_ns - d.epoch_ns) * 1e-9;
  d.imu.reserve(imu.size());
  for (auto [ns, m] : imu) {
    m.timestamp = (ns - d.epoch_ns) * 1e-9;
    d.imu.push_back(m);
  }
  for (const auto& e : d.images) {
    if (d.cameras.count(e.shutter)) continue;
    const fs::path cf = root / camera_file_name(e.shutter);
    if (!fs::is_regular_file(cf)) throw DataError("dataset: missing " + cf.string());
    d.cameras.emplace(e.shutter, load_camera(cf));
  }
  std::tie(d.T_CmI, d.gravity) = detail::read_extrinsics(root / "extrinsics.yaml");
  if (fs::is_regular_file(root / "groundtruth.txt")) d.ground_truth = read_trajectory(root / "groundtruth.txt", d.epoch_ns);
  return d;
}

inline Image load_dataset_image(const DatasetIndex& d, const ImageEntry& e, double scale_8bit = 0.0) {
  return load_png(d.root / e.path, scale_8bit);
}

}  // namespace rsvio
