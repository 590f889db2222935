// rsvio command-line entry point: run, simulate, eval, selftest.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "rsvio/backend.hpp"
#include "rsvio/dataset_io.hpp"
#include "rsvio/eval.hpp"
#include "rsvio/selftest.hpp"
#include "rsvio/simulator.hpp"

#ifndef RSVIO_VERSION
#define RSVIO_VERSION "unknown"
#endif

using namespace rsvio;
using json = nlohmann::json;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kDivergence = 3, kSelftest = 4 };

struct Manifest {
  json j;
  std::optional<fs::path> path;
  std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();

  void write(int status) {
    if (!path) return;
    j["version"] = RSVIO_VERSION;
    j["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    j["exit_status"] = status;
    fs::create_directories(path->parent_path().empty() ? fs::path(".") : path->parent_path());
    std::ofstream f(*path);
    if (!f) throw DataError("cannot write " + path->string());
    f << j.dump(2) << '\n';
  }
};

json config_json(SolverConfig c) {
  json j = json::object();
  for (const auto& [name, field] : config_fields(c)) {
    std::visit(
        [&](auto* p) {
          using T = std::remove_pointer_t<decltype(p)>;
          if constexpr (std::is_same_v<T, ShutterMode>) {
            j[name] = to_string(*p);
          } else {
            j[name] = *p;
          }
        },
        field);
  }
  return j;
}

int default_workers() {
  if (const char* e = std::getenv("RSVIO_WORKERS")) {
    try {
      const int w = std::stoi(e);
      if (w >= 1) return w;
    } catch (const std::exception&) {
    }
    throw DataError(std::string("RSVIO_WORKERS: expected a positive integer, got '") + e + "'");
  }
  return 1;
}

/// Epoch of a trajectory file: its first timestamp truncated to a whole second.
int64_t trajectory_epoch(const fs::path& p) {
  const auto poses = read_trajectory(p, 0);
  if (poses.empty()) throw DataError(p.string() + ": empty trajectory");
  return static_cast<int64_t>(std::floor(poses.front().t)) * 1000000000LL;
}

struct RunArgs {
  std::string dataset, config, mode, stream, out = "out";
  std::optional<uint64_t> seed;
  std::optional<int> workers;
  std::vector<std::string> sets;
};

int cmd_run(const RunArgs& a, Manifest& m) {
  const auto d = load_dataset(a.dataset);
  // Precedence: explicit flags, then --set, then the config file, then
  // RSVIO_WORKERS for the worker count.
  SolverConfig cfg = a.config.empty() ? SolverConfig{} : load_solver_config(a.config);
  if (a.config.empty() || !YAML::LoadFile(a.config)["workers"]) cfg.workers = default_workers();
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw CLI::ValidationError("--set", "expected key=value, got '" + kv + "'");
    set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (!a.mode.empty()) cfg.mode = parse_shutter_mode(a.mode);
  if (a.workers) cfg.workers = *a.workers;
  validate(cfg);
  std::string stream = a.stream;
  if (stream.empty()) stream = d.stream("RS").empty() && !d.stream("GS").empty() ? "GS" : "RS";

  const fs::path out = a.out;
  fs::create_directories(out);
  m.path = out / "manifest.json";
  m.j["config"] = config_json(cfg);
  m.j["seed"] = cfg.seed;
  m.j["stream"] = stream;
  m.j["inputs"] = {{"dataset", fs::absolute(a.dataset).string()}, {"config", a.config}};
  m.j["outputs"] = {{"trajectory", (out / "trajectory.txt").string()},
                    {"keyframes", (out / "keyframes.csv").string()},
                    {"manifest", m.path->string()}};

  const auto res = run_odometry(d, cfg, stream, [](int i, int n) {
    if (i % 50 == 0 || i == n) std::fprintf(stderr, "frame %d/%d\n", i, n);
  });
  write_trajectory(out / "trajectory.txt", res.trajectory(), d.epoch_ns);
  write_keyframe_log(out / "keyframes.csv", res.keyframes, d.epoch_ns);
  m.j["result"] = {{"keyframes", res.keyframes.size()},
                   {"final_scale", res.final_scale},
                   {"prior_switches", res.stats.prior_switches},
                   {"skipped_frames", res.stats.skipped},
                   {"diagnostics", res.diagnostics}};
  std::printf("keyframes %zu final_scale %.6f\n", res.keyframes.size(), res.final_scale);
  if (res.diverged) {
    m.j["result"]["failure"] = res.failure;
    std::fprintf(stderr, "error: divergence: %s\n", res.failure.c_str());
    return kDivergence;
  }
  return kOk;
}

int cmd_simulate(const std::string& spec_path, const std::string& out, std::optional<int> workers, Manifest& m) {
  SimulationSpec spec = load_simulation_spec(spec_path);
  spec.workers = workers ? *workers : std::max(spec.workers, default_workers());
  m.path = fs::path(out) / "manifest.json";
  m.j["inputs"] = {{"spec", fs::absolute(spec_path).string()}};
  m.j["outputs"] = {{"dataset", out}};
  m.j["seed"] = spec.image_seed;
  const auto sum = export_dataset(spec, out);
  m.j["result"] = {{"images_per_stream", sum.images_per_stream},
                   {"imu_samples", sum.imu_samples},
                   {"ground_truth_poses", sum.ground_truth_poses}};
  std::printf("images_per_stream %d imu_samples %d\n", sum.images_per_stream, sum.imu_samples);
  return kOk;
}

int cmd_eval(const std::string& est_path, const std::string& gt_path, const std::string& out, Manifest& m) {
  const int64_t epoch = trajectory_epoch(gt_path);
  const auto gt = read_trajectory(gt_path, epoch);
  const auto est = read_trajectory(est_path, epoch);
  const auto rep = ate(est, gt);
  std::printf("e_ate %.9g m (matched %zu, unmatched %d)\n", rep.e_ate, rep.errors.size(), rep.unmatched);
  m.j["inputs"] = {{"estimate", fs::absolute(est_path).string()}, {"ground_truth", fs::absolute(gt_path).string()}};
  m.j["result"] = {{"e_ate_m", rep.e_ate}, {"matched", rep.errors.size()}, {"unmatched", rep.unmatched}};
  if (!out.empty()) {
    emit_plots({{"eval", rep}}, {}, out);
    m.path = fs::path(out) / "manifest.json";
    m.j["outputs"] = {{"dir", out}};
  }
  return kOk;
}

int cmd_selftest(Manifest& m) {
  bool ok = true;
  json suites = json::array();
  for (const auto& s : selftest::run_all()) {
    std::printf("[%s] %s (%.2f s)\n", s.passed() ? "PASS" : "FAIL", s.name.c_str(), s.seconds);
    for (const auto& c : s.checks) {
      std::printf("  %s %-60s %.3g (limit %.3g)\n", c.passed ? "ok  " : "FAIL", c.name.c_str(), c.value, c.tolerance);
      suites.push_back({{"suite", s.name}, {"check", c.name}, {"value", c.value}, {"passed", c.passed}});
    }
    ok &= s.passed();
  }
  m.j["result"] = suites;
  return ok ? kOk : kSelftest;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Rolling-shutter visual-inertial odometry"};
  app.require_subcommand(1);
  app.set_version_flag("--version", RSVIO_VERSION);
  std::string manifest_override;
  app.add_option("--manifest", manifest_override, "Write the run manifest to this path");

  RunArgs ra;
  auto* run = app.add_subcommand("run", "Run odometry on a dataset directory");
  run->add_option("dataset", ra.dataset, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--config", ra.config, "Solver config YAML")->check(CLI::ExistingFile);
  run->add_option("--seed", ra.seed, "Point-selection seed");
  run->add_option("--mode", ra.mode, "Shutter handling")->check(CLI::IsMember({"rs", "gs-assume"}));
  run->add_option("--stream", ra.stream, "Image stream (default RS if present)")->check(CLI::IsMember({"RS", "GS"}));
  run->add_option("--workers", ra.workers, "Worker threads (default $RSVIO_WORKERS or 1)")->check(CLI::PositiveNumber);
  run->add_option("--set", ra.sets, "Override a config key: key=value (repeatable)");
  run->add_option("--out", ra.out, "Output directory");

  std::string spec_path, sim_out;
  std::optional<int> sim_workers;
  auto* sim = app.add_subcommand("simulate", "Render a synthetic dataset from a YAML spec");
  sim->add_option("spec", spec_path, "Simulation spec YAML")->required()->check(CLI::ExistingFile);
  sim->add_option("--out", sim_out, "Dataset directory to create")->required();
  sim->add_option("--workers", sim_workers, "Render threads")->check(CLI::PositiveNumber);

  std::string est_path, gt_path, eval_out;
  auto* ev = app.add_subcommand("eval", "Absolute trajectory error of an estimate");
  ev->add_option("estimate", est_path, "Estimated trajectory file")->required()->check(CLI::ExistingFile);
  ev->add_option("ground_truth", gt_path, "Ground-truth trajectory file")->required()->check(CLI::ExistingFile);
  ev->add_option("--out", eval_out, "Directory for error tables and plots");

  auto* st = app.add_subcommand("selftest", "Run the numerical oracle suites");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  Manifest m;
  m.j["command"] = app.get_subcommands().front()->get_name();
  std::vector<std::string> args(argv, argv + argc);
  m.j["argv"] = args;
  int status = kOk;
  try {
    if (*run) status = cmd_run(ra, m);
    if (*sim) status = cmd_simulate(spec_path, sim_out, sim_workers, m);
    if (*ev) status = cmd_eval(est_path, gt_path, eval_out, m);
    if (*st) status = cmd_selftest(m);
  } catch (const CLI::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    status = kUsage;
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: divergence: %s\n", e.what());
    status = kDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    status = kData;
  }
  if (!manifest_override.empty()) m.path = manifest_override;
  try {
    m.write(status);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    if (status == kOk) status = kData;
  }
  return status;
}
