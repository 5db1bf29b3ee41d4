#include <catch_amalgamated.hpp>

#include "mfc_cli.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using Catch::Approx;
using json = nlohmann::json;
namespace fs = std::filesystem;

static const fs::path fixtures = MFC_FIXTURES;

static fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mfc_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

static json read_json(const fs::path& p) {
  std::ifstream is(p);
  return json::parse(is);
}

static std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

static int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mfc");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return mfc::run_cli(static_cast<int>(argv.size()), argv.data());
}

static json minimal() {
  return json::parse(R"({"model": {"name": "lq"}, "horizon": 1.0, "particles": {"count": 4}})");
}

// ---------------------------------------------------------------- config

TEST_CASE("config defaults and invariants") {
  auto c = mfc::parse_config(minimal());
  CHECK(c.model.parameters.at("q") == 1.0);
  CHECK(c.model.parameters.at("mf_weight") == 0.0);
  CHECK(c.particles == 4);
  CHECK(c.global.dt == 1e-3);
  CHECK(c.workers >= 1);
  CHECK(c.write_csv);
  CHECK(c.write_json);

  auto bad = [](auto edit) {
    auto j = minimal();
    edit(j);
    return j;
  };
  using mftc::ConfigError;
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["horizon"] = 0.0; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["particles"]["count"] = 0; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["grid"]["dt"] = -1e-3; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["horizon"] = "1"; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["model"]["name"] = "heat"; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["strategy"] = "random"; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["checks"] = {"bellman", "magic"}; })), ConfigError);
  CHECK_THROWS_AS(mfc::parse_config(bad([](json& j) { j["schema_version"] = 2; })), ConfigError);
}

TEST_CASE("unknown keys are rejected at every level") {
  for (const char* path : {"/colour", "/model/flavour", "/model/parameters/qq", "/particles/weight",
                           "/picard/tolerance", "/control/newton", "/global/sweeps", "/outputs/format",
                           "/verify/h", "/sampling/points", "/grid/steps"}) {
    auto j = minimal();
    j[json::json_pointer(path)] = 1;
    INFO(path);
    CHECK_THROWS_AS(mfc::parse_config(j), mftc::ConfigError);
  }
}

TEST_CASE("particle initialisations") {
  auto j = minimal();
  j["particles"] = json::parse(R"({"init": {"atoms": [0.5, -1.0, 2.0]}})");
  auto c = mfc::parse_config(j);
  CHECK(c.particles == 3);
  auto mu = mfc::make_measure(c);
  CHECK(mu.atoms()[1](0) == -1.0);

  j["particles"]["count"] = 5;
  CHECK_THROWS_AS(mfc::parse_config(j), mftc::ConfigError);

  auto dir = scratch("atoms");
  std::ofstream(dir / "atoms.txt") << "# initial positions\n0.25\n-0.75\n\n1.5\n";
  j["particles"] = json::parse(R"({"init": {"file": "atoms.txt"}})");
  c = mfc::parse_config(j, dir.string());
  CHECK(c.particles == 3);
  CHECK(mfc::make_measure(c).atoms()[2](0) == 1.5);

  j["particles"] = json::parse(R"({"count": 6, "init": {"gaussian": {"mean": 1, "std": 0.5, "seed": 3}}})");
  auto a = mfc::make_measure(mfc::parse_config(j));
  auto b = mfc::make_measure(mfc::parse_config(j));
  CHECK(a.atoms() == b.atoms());
  j["particles"]["init"]["atoms"] = {1.0};
  CHECK_THROWS_AS(mfc::parse_config(j), mftc::ConfigError);
}

TEST_CASE("resolved config is a fixed point of parsing") {
  auto c = mfc::load_config((fixtures / "nonlq.json").string());
  auto once = mfc::to_json(c);
  auto again = mfc::to_json(mfc::parse_config(json::parse(once.dump())));
  CHECK(once == again);
  CHECK(once["picard"]["tol_gamma"] == 1e-12);
  CHECK(once["verify"]["dmv_atoms"] == json::array({2, 17}));
}

// ---------------------------------------------------------------- csv

TEST_CASE("trajectory csv round trip is exact") {
  auto m = mftc::builtin_nonlq(0.05, 0.25, 0.125, 0.5);
  std::vector<mftc::Vec<1>> x{mftc::Vec<1>(0.1), mftc::Vec<1>(-1.0 / 3.0), mftc::Vec<1>(2.0)};
  mftc::GlobalConfig g;
  g.dt = 1e-2;
  auto rep = mftc::solve_global<1, 1>(*m, 0.7, mftc::ParticleMeasure<1>(x), g);
  std::stringstream ss;
  mfc::write_trajectories_csv(rep.traj, ss);
  auto back = mfc::read_trajectories_csv(ss);
  CHECK(back.grid == rep.traj.grid);
  CHECK(mftc::agreement_check(back, rep.traj) == 0.0);
  CHECK(back.alpha == rep.traj.alpha);

  std::stringstream broken("particle,node,s,X,Z,alpha\n0,0,0,1,1\n");
  CHECK_THROWS_AS(mfc::read_trajectories_csv(broken), mftc::ConfigError);
}

// ---------------------------------------------------------------- commands

TEST_CASE("solve on the LQ fixture reproduces the Riccati value") {
  auto out = scratch("lq");
  REQUIRE(cli({"solve", "--config", (fixtures / "lq.json").string(), "--out", out.string()}) == 0);
  auto cfg = mfc::load_config((fixtures / "lq.json").string());
  auto mu = mfc::make_measure(cfg);
  auto rep = read_json(out / "report.json");
  CHECK(rep["value"].get<double>() == Approx(0.5 * mu.second_moment()).margin(1e-6));
  CHECK(rep["pass"] == true);
  CHECK(rep["schema_version"] == mfc::kSchemaVersion);
  CHECK(rep["cone"]["min_margin"].get<double>() > 0.0);
  CHECK(fs::exists(out / "config.resolved.json"));

  // config -> solve -> saved artifacts -> reload: zero deviation
  auto tb = mfc::read_trajectories_csv((out / "trajectories.csv").string());
  auto again = mftc::solve_global<1, 1>(*mfc::make_model(cfg.model), cfg.horizon, mu, cfg.global);
  CHECK(mftc::agreement_check(tb, again.traj) == 0.0);
  // the resolved config reproduces the run
  auto out2 = scratch("lq_resolved");
  REQUIRE(cli({"solve", "--config", (out / "config.resolved.json").string(), "--out", out2.string()}) == 0);
  CHECK(slurp(out / "trajectories.csv") == slurp(out2 / "trajectories.csv"));
}

TEST_CASE("solve on the nonlinear fixture meets the residual certificate") {
  auto out = scratch("nonlq");
  REQUIRE(cli({"solve", "--config", (fixtures / "nonlq.json").string(), "--out", out.string(), "--workers", "2"}) ==
          0);
  auto rep = read_json(out / "report.json");
  CHECK(rep["residual"]["max"].get<double>() <= 1e-6);
  CHECK(rep["strategy"] == "sweep");
}

TEST_CASE("exit codes") {
  auto out = scratch("codes");
  CHECK(cli({"solve", "--config", (fixtures / "bad_dt.json").string(), "--out", out.string()}) == 2);
  CHECK(cli({"solve", "--config", (out / "missing.json").string()}) == 2);
  CHECK(cli({"solve"}) == 2);
  CHECK(cli({"frobnicate", "--config", "x"}) == 2);
  CHECK(cli({"solve", "--config", (fixtures / "lq.json").string(), "--strategy", "random"}) == 2);

  auto j = minimal();
  j["extra"] = true;
  std::ofstream(out / "unknown.json") << j.dump();
  CHECK(cli({"constants", "--config", (out / "unknown.json").string(), "--out", out.string()}) == 2);

  // a sweep budget of one cannot settle the nonlinear example
  auto n = read_json(fixtures / "nonlq.json");
  n["global"]["max_sweeps"] = 1;
  std::ofstream(out / "starved.json") << n.dump();
  auto fail = out / "starved";
  CHECK(cli({"solve", "--config", (out / "starved.json").string(), "--out", fail.string()}) == 1);
  auto d = read_json(fail / "diagnostics.json");
  CHECK(d["error"] == "SolverError");
  CHECK(d["history"].size() == 1);
}

TEST_CASE("constants and check commands") {
  auto out = scratch("constants");
  auto cfg = mfc::load_config((fixtures / "nonlq.json").string());
  cfg.out_dir = out.string();
  std::ostringstream table;
  CHECK(mfc::cmd_constants(cfg, table) == 0);
  auto c = read_json(out / "constants.json");
  CHECK(c["constants"]["lambda_x"].get<double>() == 0.85);
  CHECK(c["constants"]["Lstar_0"].get<double>() >= c["constants"]["Lbar_k"].get<double>());
  CHECK(table.str().find("Lstar_0") != std::string::npos);

  // eps4 = 1/2 breaks l_k <= lambda_k / 2
  cfg.sampling.n_points = 100;
  std::ostringstream sink;
  CHECK(mfc::cmd_check(cfg, sink) == 1);
  auto a = read_json(out / "assumptions.json");
  CHECK(a["pass"] == false);
  CHECK(std::find(a["failures"].begin(), a["failures"].end(), "a3.i.l_k") != a["failures"].end());

  cfg.model.parameters = {{"eps1", 3.5e-9}, {"eps2", 0.25}, {"eps3", 0.125}, {"eps4", 0.25}};
  CHECK(mfc::cmd_check(cfg, sink) == 0);
}

TEST_CASE("verify on a small LQ run") {
  auto out = scratch("verify");
  auto cfg = mfc::load_config((fixtures / "lq.json").string());
  cfg.out_dir = out.string();
  cfg.particles = 12;
  cfg.global.dt = 1e-2;
  cfg.workers = 2;
  std::ostringstream sink;
  CHECK(mfc::cmd_verify(cfg, sink) == 0);
  auto v = read_json(out / "verify.json");
  CHECK(v["pass"] == true);
  CHECK(v["checks"].size() == 6);
  CHECK(v["checks"]["agreement"]["deviation"].get<double>() <= 1e-6);
  CHECK(v["checks"]["lfd"]["max_deviation"].get<double>() <= 1e-6);

  // a tolerance nobody can meet turns the verdict
  cfg.checks = {"bellman"};
  cfg.verify.bellman_tol = 1e-30;
  cfg.global.picard.tol_gamma = 1e-8;
  CHECK(mfc::cmd_verify(cfg, sink) == 1);
  CHECK(read_json(out / "verify.json")["checks"].size() == 1);
}

TEST_CASE("worker count does not change the csv") {
  auto a = scratch("w1"), b = scratch("w3");
  auto cfg = (fixtures / "nonlq.json").string();
  REQUIRE(cli({"solve", "--config", cfg, "--out", a.string(), "--workers", "1"}) == 0);
  REQUIRE(cli({"solve", "--config", cfg, "--out", b.string(), "--workers", "3"}) == 0);
  CHECK(slurp(a / "trajectories.csv") == slurp(b / "trajectories.csv"));
}
