#include <gtest/gtest.h>
#include <png.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "rsvio/dataset_io.hpp"
#include "rsvio/simulator.hpp"
#include "sim_fixtures.hpp"
#include "test_oracles.hpp"

using namespace rsvio;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("rsvio_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SimulationSpec tiny_spec() {
  SimulationSpec s;
  s.camera = CameraModel(130, 130, 79.5, 63.5, RadTan{-0.02, 0.0, 0.0, 0.0}, 160, 128, 235.76e-6, 1);
  s.streams = {"RS", "GS"};
  s.duration = 2.0;
  s.T_CmI = fixture::forward_extrinsics();
  s.scene = fixture::room();
  s.trajectory = fixture::smooth_spec(0.2, 2.0);
  return s;
}

struct Exported {
  fs::path dir = temp_dir("export");
  SimulationSpec spec = tiny_spec();
  ExportSummary summary = export_dataset(spec, dir);
};

const Exported& exported() {
  static const Exported e;
  return e;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream f(p);
  f << s;
}

std::string read_text(const fs::path& p) {
  std::ifstream f(p);
  return std::string(std::istreambuf_iterator<char>(f), {});
}

/// Copies the exported dataset so a test can corrupt one file.
fs::path copy_of_export(const std::string& name) {
  const fs::path d = temp_dir(name);
  fs::copy(exported().dir, d, fs::copy_options::recursive | fs::copy_options::overwrite_existing);
  return d;
}

std::string error_of(const fs::path& dir) {
  try {
    load_dataset(dir);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

TEST(Dataset, ExportHasPaperRates) {
  const auto& e = exported();
  EXPECT_EQ(e.summary.images_per_stream, 40);
  EXPECT_EQ(e.summary.imu_samples, 400);
  const auto d = load_dataset(e.dir);
  EXPECT_EQ(d.stream("RS").size(), 40u);
  EXPECT_EQ(d.stream("GS").size(), 40u);
  EXPECT_EQ(d.imu.size(), 400u);
  ASSERT_TRUE(d.ground_truth.has_value());
  EXPECT_EQ(d.ground_truth->size(), 400u);
  EXPECT_EQ(d.epoch_ns, e.spec.epoch_ns);
}

TEST(Dataset, DualStreamTimestampsArePaired) {
  const auto d = load_dataset(exported().dir);
  const auto rs = d.stream("RS"), gs = d.stream("GS");
  ASSERT_EQ(rs.size(), gs.size());
  for (size_t k = 0; k < rs.size(); ++k) EXPECT_EQ(rs[k].timestamp_ns, gs[k].timestamp_ns);
  EXPECT_EQ(d.cameras.at("GS").row_time_td(), 0.0);
  EXPECT_EQ(d.cameras.at("RS").row_time_td(), exported().spec.camera.row_time_td());
}

TEST(Dataset, RoundTripIsLossless) {
  const auto& e = exported();
  const auto d = load_dataset(e.dir);
  const SampledTrajectory traj(Trajectory(e.spec.trajectory), e.spec.imu.rate_hz);
  const auto imu = synthesize_imu(traj, e.spec.imu, e.spec.gravity);
  for (size_t k = 0; k < d.imu.size(); ++k) {
    EXPECT_NEAR(d.imu[k].timestamp, imu[k].timestamp, 1e-12);
    EXPECT_EQ(d.imu[k].gyro, imu[k].gyro);
    EXPECT_EQ(d.imu[k].accel, imu[k].accel);
  }
  for (size_t k = 0; k < d.ground_truth->size(); ++k) {
    const auto& g = (*d.ground_truth)[k];
    const Pose3 ref = traj.pose(imu[k].timestamp);
    EXPECT_NEAR(g.t, imu[k].timestamp, 1e-12);
    EXPECT_LT(log_se3(g.T * ref.inverse()).norm(), 1e-9);
  }
  const auto entry = d.stream("RS")[7];
  const Image img = load_dataset_image(d, entry);
  const auto ref = render_rs_image(e.spec.scene, traj, e.spec.camera, e.spec.T_CmI, entry.t);
  for (size_t i = 0; i < img.data().size(); ++i) ASSERT_NEAR(img.data()[i], ref.image.data()[i], 0.5 / 257 + 1e-4);
  const auto c = d.calibration("RS");
  EXPECT_LT(log_se3(c.T_CmI * e.spec.T_CmI.inverse()).norm(), 1e-12);
}

TEST(Dataset, OutOfOrderManifestNamesTheLine) {
  const auto d = copy_of_export("unsorted");
  auto lines = detail::read_lines(d / "images.csv");
  std::swap(lines[3], lines[5]);  // RS entries of frames 1 and 2
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  write_text(d / "images.csv", s);
  const auto msg = error_of(d);
  EXPECT_NE(msg.find("images.csv:6"), std::string::npos) << msg;
  EXPECT_NE(msg.find("not strictly increasing"), std::string::npos) << msg;
}

TEST(Dataset, MalformedImuRowNamesTheLine) {
  const auto d = copy_of_export("malformed");
  auto lines = detail::read_lines(d / "imu.csv");
  lines[10] = lines[10] + ",0";
  std::string s;
  for (const auto& l : lines) s += l + "\n";
  write_text(d / "imu.csv", s);
  const auto msg = error_of(d);
  EXPECT_NE(msg.find("imu.csv:11"), std::string::npos) << msg;
}

TEST(Dataset, UnitMismatchesAreErrors) {
  {
    const auto d = copy_of_export("header");
    auto s = read_text(d / "imu.csv");
    s.replace(0, s.find('\n'), "# timestamp_ns,gx,gy,gz,ax,ay,az");
    write_text(d / "imu.csv", s);
    EXPECT_NE(error_of(d).find("header"), std::string::npos);
  }
  auto rescale = [](const fs::path& d, int first_col, double f) {
    auto lines = detail::read_lines(d / "imu.csv");
    std::string s = lines[0] + "\n";
    for (size_t i = 1; i < lines.size(); ++i) {
      auto fields = detail::split(lines[i], ',');
      for (int c = first_col; c < first_col + 3; ++c) fields[c] = detail::format_number(std::stod(fields[c]) * f);
      for (size_t c = 0; c < fields.size(); ++c) s += (c ? "," : "") + fields[c];
      s += "\n";
    }
    write_text(d / "imu.csv", s);
  };
  {
    const auto d = copy_of_export("accel_g");
    rescale(d, 4, 1.0 / 9.81);
    EXPECT_NE(error_of(d).find("m/s^2"), std::string::npos);
  }
  {
    const auto d = copy_of_export("gyro_deg");
    rescale(d, 1, 180.0 / 3.14159265358979 * 30.0);
    EXPECT_NE(error_of(d).find("deg/s"), std::string::npos);
  }
}

TEST(Dataset, MissingFilesAreErrors) {
  {
    const auto d = copy_of_export("noimg");
    fs::remove(d / "images/rs/000003.png");
    EXPECT_NE(error_of(d).find("missing image file"), std::string::npos);
  }
  {
    const auto d = copy_of_export("nocam");
    fs::remove(d / "camera_gs.yaml");
    EXPECT_NE(error_of(d).find("camera_gs.yaml"), std::string::npos);
  }
  EXPECT_THROW(load_dataset("/nonexistent/rsvio"), DataError);
}

TEST(Png, SixteenBitRoundTripAndEightBitFlag) {
  const fs::path d = temp_dir("png");
  std::vector<float> v(12 * 10);
  for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(i * 2.1);
  save_png16(d / "a.png", Image(12, 10, v));
  const Image r = load_png(d / "a.png");
  for (size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(r.data()[i], std::min(255.0f, v[i]), 0.5 / 257 + 1e-5);

  // 8-bit file written directly with libpng.
  FILE* fp = std::fopen((d / "b.png").c_str(), "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  png_init_io(png, fp);
  png_set_IHDR(png, info, 4, 4, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row = {10, 20, 30, 40};
  for (int y = 0; y < 4; ++y) png_write_row(png, row.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
  EXPECT_THROW(load_png(d / "b.png"), DataError);
  const Image e = load_png(d / "b.png", 1.0);
  EXPECT_FLOAT_EQ(e.at(2, 3), 30.0f);
}

TEST(Trajectory, IdentityLineFormat) {
  const fs::path d = temp_dir("traj");
  write_trajectory(d / "t.txt", {{0.0, Pose3()}});
  EXPECT_EQ(read_text(d / "t.txt"), "0.000000000 0 0 0 0 0 0 1\n");
}

TEST(Trajectory, RandomPosesRoundTrip) {
  const fs::path d = temp_dir("traj_rt");
  std::mt19937_64 rng(4);
  std::vector<TimedPose> poses;
  for (int i = 0; i < 100; ++i) poses.push_back({0.05 * i + 1e-9 * (i % 7), oracle::random_pose(rng, 3.1, 5.0)});
  const int64_t epoch = 1600000000123456789LL;
  write_trajectory(d / "t.txt", poses, epoch);
  const auto back = read_trajectory(d / "t.txt", epoch);
  ASSERT_EQ(back.size(), poses.size());
  double err = 0.0;
  for (size_t i = 0; i < poses.size(); ++i) {
    err = std::max(err, std::abs(back[i].t - poses[i].t));
    err = std::max(err, (back[i].T.translation() - poses[i].T.translation()).norm());
    err = std::max(err, (back[i].T.rotation().matrix() - poses[i].T.rotation().matrix()).cwiseAbs().maxCoeff());
  }
  EXPECT_LT(err, 1e-9);
}

TEST(Trajectory, NonUnitQuaternionIsRejected) {
  const fs::path d = temp_dir("traj_bad");
  write_text(d / "t.txt", "0.0 0 0 0 0 0 0 1\n0.1 0 0 0 0 0 0 1.01\n");
  try {
    read_trajectory(d / "t.txt");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("t.txt:2"), std::string::npos);
  }
  write_text(d / "t.txt", "0.0 0 0 0 0 0 0 1.0005\n");
  EXPECT_EQ(read_trajectory(d / "t.txt").size(), 1u);
}

TEST(Simulate, SpecFileParses) {
  const std::string yaml = R"(
camera: {fx: 130, fy: 130, cx: 79.5, cy: 63.5, k1: 0, k2: 0, p1: 0, p2: 0, width: 160, height: 128, row_time_td: 2.0e-4, readout_sign: 1}
streams: [RS]
duration: 0.5
imu: {rate_hz: 200, add_noise: false}
scene: {type: box_room, half_size: [4, 4, 2.5], seed: 2}
trajectory:
  start_twist: [0.5, 0, 0, 0, 0, 0.2]
  segments:
    - {type: constant_twist, duration: 0.3}
    - {type: smooth, duration: 0.4, amplitude: [0.1, 0, 0, 0, 0, 0.1], frequency: [2, 0, 0, 0, 0, 2]}
)";
  const auto s = simulation_spec_from_yaml(YAML::Load(yaml), "spec");
  EXPECT_EQ(s.trajectory.segments.size(), 2u);
  EXPECT_EQ(s.camera.width(), 160);
  EXPECT_THROW(simulation_spec_from_yaml(YAML::Load(yaml + "bogus: 1\n"), "spec"), DataError);
  const fs::path d = temp_dir("spec_export");
  const auto sum = export_dataset(s, d);
  EXPECT_EQ(sum.images_per_stream, 10);
  EXPECT_EQ(load_dataset(d).imu.size(), 100u);
}

}  // namespace
