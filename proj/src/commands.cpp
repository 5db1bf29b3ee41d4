#include "mfc_cli.hpp"

#include <CLI11.hpp>
#include <spdlog/fmt/fmt.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

namespace mfc {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

ojson num(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

void write_json(const fs::path& path, const ojson& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

fs::path prepare_out(const RunConfig& cfg) {
  fs::path dir(cfg.out_dir);
  fs::create_directories(dir);
  if (cfg.write_json) write_json(dir / "config.resolved.json", to_json(cfg));
  return dir;
}

std::unique_ptr<mftc::WorkerPool> make_pool(const RunConfig& cfg) {
  if (cfg.workers <= 1) return nullptr;
  return std::make_unique<mftc::WorkerPool>(cfg.workers);
}

mftc::ConstantsReport constants_of(const Model1& m, const RunConfig& cfg) {
  return mftc::compute_constants(m.constants(), mftc::model_anchors(m, cfg.global.picard.control));
}

// Global config with the cone guard switched on when requested.
mftc::GlobalConfig solver_config(const RunConfig& cfg, const mftc::ConstantsReport& c) {
  auto g = cfg.global;
  if (cfg.enforce_cone) g.picard.cone = mftc::ConeParams{c.k0};
  return g;
}

const char* error_kind(const std::exception& e) {
  if (dynamic_cast<const mftc::SolverError*>(&e)) return "SolverError";
  if (dynamic_cast<const mftc::NumericError*>(&e)) return "NumericError";
  if (dynamic_cast<const mftc::ConeViolation*>(&e)) return "ConeViolation";
  if (dynamic_cast<const mftc::CapabilityError*>(&e)) return "CapabilityError";
  if (dynamic_cast<const mftc::ComparisonError*>(&e)) return "ComparisonError";
  return "Error";
}

ojson diagnostics(const std::exception& e) {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["error"] = error_kind(e);
  j["message"] = e.what();
  if (auto* s = dynamic_cast<const mftc::SolverError*>(&e)) {
    j["last_residual"] = num(s->last_residual);
    j["history"] = s->history;
  } else if (auto* c = dynamic_cast<const mftc::ConeViolation*>(&e)) {
    j["node"] = c->node;
    j["margin"] = num(c->margin);
  } else if (auto* n = dynamic_cast<const mftc::NumericError*>(&e)) {
    j["index"] = n->index;
  }
  return j;
}

// Solver failures end the command with exit 1 and a diagnostics file.
template <class F>
int guarded(const RunConfig& cfg, const char* what, F&& body) {
  try {
    return body();
  } catch (const mftc::ConfigError&) {
    throw;
  } catch (const mftc::Error& e) {
    spdlog::error("{} failed: {}", what, e.what());
    try {
      fs::create_directories(cfg.out_dir);
      write_json(fs::path(cfg.out_dir) / "diagnostics.json", diagnostics(e));
    } catch (const std::exception& io) {
      spdlog::error("could not write diagnostics: {}", io.what());
    }
    return exit_failure;
  }
}

std::vector<std::size_t> spread(std::size_t n, const std::vector<std::size_t>& chosen) {
  if (!chosen.empty()) {
    for (auto i : chosen)
      if (i >= n) throw mftc::ConfigError("particle index " + std::to_string(i) + " out of range");
    return chosen;
  }
  std::set<std::size_t> s{0, n / 2, n - 1};
  return {s.begin(), s.end()};
}

void row(std::ostream& out, const std::string& name, double v) { out << fmt::format("  {:<24} {:>14.6e}\n", name, v); }

}  // namespace

int cmd_solve(const RunConfig& cfg, std::ostream& out) {
  return guarded(cfg, "solve", [&] {
    auto m = make_model(cfg.model);
    auto mu = make_measure(cfg);
    auto c = constants_of(*m, cfg);
    auto pool = make_pool(cfg);
    spdlog::info("solve: model {}, N = {}, T = {}, dt = {}, workers {}", cfg.model.name, cfg.particles, cfg.horizon,
                 cfg.global.dt, cfg.workers);
    auto rep = mftc::solve_global<1, 1>(*m, cfg.horizon, mu, solver_config(cfg, c), pool.get());
    double v = mftc::value_function(rep, *m);
    double margin = mftc::cone_margin(rep.traj, c.k0);
    bool ok = rep.residual.max() <= cfg.global.residual_tol;

    auto dir = prepare_out(cfg);
    if (cfg.write_csv) write_trajectories_csv(rep.traj, (dir / "trajectories.csv").string());
    if (cfg.write_json) {
      auto j = to_json(rep);
      j["model"] = cfg.model.name;
      j["value"] = v;
      j["cone"] = {{"k0", num(c.k0)}, {"min_margin", num(margin)}};
      j["residual_tol"] = cfg.global.residual_tol;
      j["pass"] = ok;
      write_json(dir / "report.json", j);
    }

    out << "solve " << cfg.model.name << "  N=" << cfg.particles << "  T=" << cfg.horizon
        << "  steps=" << rep.traj.grid.steps << "  strategy=" << mftc::to_string(rep.strategy) << '\n';
    row(out, "value v(0,m)", v);
    row(out, "residual forward", rep.residual.forward);
    row(out, "residual backward", rep.residual.backward);
    row(out, "residual terminal", rep.residual.terminal);
    row(out, "pasting gap", rep.pasting_gap);
    row(out, "cone margin (k0)", margin);
    out << fmt::format("  {:<24} {:>14}\n", "sweeps", rep.sweeps);
    out << fmt::format("  {:<24} {:>14}\n", "intervals", rep.partition.intervals());
    out << fmt::format("  {:<24} {:>14}\n", "halvings", rep.halvings);
    out << "  status: " << (ok ? "PASS" : "FAIL") << '\n';
    return ok ? exit_ok : exit_failure;
  });
}

int cmd_constants(const RunConfig& cfg, std::ostream& out) {
  auto m = make_model(cfg.model);
  auto c = constants_of(*m, cfg);
  auto dir = prepare_out(cfg);
  if (cfg.write_json) write_json(dir / "constants.json", to_json(c));
  out << "constants for " << m->name() << " (anchors "
      << (c.anchors_model_supplied ? "model-supplied" : "h1-default") << ")\n";
  for (const auto& [name, value] : c.entries()) row(out, name, value);
  row(out, "admissible sublength", mftc::admissible_sublength(c));
  return exit_ok;
}

int cmd_check(const RunConfig& cfg, std::ostream& out) {
  auto m = make_model(cfg.model);
  auto rep = mftc::check_assumptions(*m, cfg.sampling);
  auto dir = prepare_out(cfg);
  if (cfg.write_json) write_json(dir / "assumptions.json", to_json(rep));
  out << "assumptions for " << rep.model << ": " << rep.probes << " probes\n";
  for (const auto& r : rep.records)
    out << fmt::format("  {:<12} {:<4} margin {:>13.5e}  {}\n", r.name, r.pass ? "ok" : "FAIL", r.worst_margin,
                       r.description);
  out << "  status: " << (rep.pass() ? "PASS" : "FAIL") << '\n';
  return rep.pass() ? exit_ok : exit_failure;
}

int cmd_verify(const RunConfig& cfg, std::ostream& out) {
  return guarded(cfg, "verify", [&] {
    static const std::vector<std::string> all{"jacobian_fd", "apriori", "dmv_identity", "bellman", "lfd", "agreement"};
    const auto& checks = cfg.checks.empty() ? all : cfg.checks;
    const auto& vo = cfg.verify;
    auto m = make_model(cfg.model);
    auto mu = make_measure(cfg);
    auto c = constants_of(*m, cfg);
    auto gcfg = solver_config(cfg, c);
    auto pool = make_pool(cfg);
    const double T = cfg.horizon;
    const std::size_t N = cfg.particles;

    auto rep = mftc::solve_global<1, 1>(*m, T, mu, gcfg, pool.get());
    mftc::SensitivityConfig sc;
    sc.control = gcfg.picard.control;
    std::optional<mftc::JacobianBundle<1, 1>> jb;
    auto jacobians = [&](bool measure) -> const mftc::JacobianBundle<1, 1>& {
      if (!jb || (measure && !jb->has_measure)) jb = mftc::solve_jacobians<1, 1>(*m, rep.traj, measure, sc, pool.get());
      return *jb;
    };

    ojson results = ojson::object();
    bool all_pass = true;
    auto record = [&](const std::string& name, ojson j, bool pass) {
      j["pass"] = pass;
      all_pass = all_pass && pass;
      results[name] = std::move(j);
      out << fmt::format("  {:<14} {}\n", name, pass ? "PASS" : "FAIL");
    };

    out << "verify " << cfg.model.name << "  N=" << N << "  T=" << T << '\n';
    for (const auto& name : checks) {
      spdlog::info("verify: {}", name);
      if (name == "jacobian_fd") {
        bool measure = N <= vo.measure_max_particles;
        const auto& J = jacobians(measure);
        auto parts = spread(N, vo.fd_particles);
        auto [ex, ez] = mftc::check_jacobian_x_fd<1, 1>(*m, rep.traj, J, parts, vo.fd_h, sc.control, 1e-8, pool.get());
        ojson j{{"h", vo.fd_h},
                {"tolerance", vo.jacobian_tol},
                {"particles", parts},
                {"DxX", {{"max_rel_err", ex.max_rel_err}, {"worst_particle", ex.worst_particle}}},
                {"DxZ", {{"max_rel_err", ez.max_rel_err}, {"worst_particle", ez.worst_particle}}}};
        bool pass = ex.max_rel_err <= vo.jacobian_tol && ez.max_rel_err <= vo.jacobian_tol;
        if (measure) {
          mftc::ParticleSolver<1, 1> solve = [&](const mftc::ParticleMeasure<1>& p) {
            return mftc::solve_global<1, 1>(*m, T, p, gcfg, pool.get()).traj;
          };
          auto atoms = spread(N, vo.dmv_atoms);
          double xscale = 0.0;
          for (const auto& a : J.DxX) xscale = std::max(xscale, a.norm());
          const double floor = std::max(1e-8, vo.jacobian_floor * xscale);
          auto [mx, mz] = mftc::check_jacobian_m_fd<1, 1>(J, mu, solve, atoms, vo.fd_h, floor);
          j["atoms"] = atoms;
          j["kernel_floor"] = floor;
          j["DmX"] = {{"max_rel_err", mx.max_rel_err}, {"worst_atom", mx.worst_particle}};
          j["DmZ"] = {{"max_rel_err", mz.max_rel_err}, {"worst_atom", mz.worst_particle}};
          pass = pass && mx.max_rel_err <= vo.jacobian_tol && mz.max_rel_err <= vo.jacobian_tol;
        } else {
          j["measure_blocks"] = "skipped: N above measure_max_particles";
        }
        record(name, j, pass);
      } else if (name == "apriori") {
        const auto& J = jacobians(N <= vo.measure_max_particles);
        auto a = mftc::verify_apriori(J, rep.field, c, sc.cond_limit);
        record(name,
               {{"Lstar_0", a.Lstar_0},
                {"k0", a.k0},
                {"sup_dxgamma_riccati", num(a.sup_dxgamma_riccati)},
                {"sup_dxgamma_ratio", num(a.sup_dxgamma_ratio)},
                {"sup_dxgamma_slope", num(a.sup_dxgamma_slope)},
                {"sup_dmgamma", num(a.sup_dmgamma)},
                {"singular_nodes", a.singular_nodes},
                {"min_cone_margin", num(a.min_cone_margin)},
                {"slope_ok", a.slope_ok},
                {"measure_ok", a.measure_ok},
                {"cone_ok", a.cone_ok}},
               a.pass());
      } else if (name == "dmv_identity") {
        auto atoms = spread(N, vo.dmv_atoms);
        auto d = mftc::dmv_identity_check<1, 1>(T, mu, *m, gcfg, vo.dmv_h, atoms, pool.get());
        record(name,
               {{"h", d.h},
                {"tolerance", vo.dmv_tol},
                {"atoms", atoms},
                {"max_deviation", d.max_deviation},
                {"worst_atom", d.worst_atom}},
               d.max_deviation <= vo.dmv_tol);
      } else if (name == "bellman") {
        double ht = vo.bellman_ht > 0.0 ? vo.bellman_ht : rep.traj.grid.dt();
        auto b = mftc::bellman_residual<1, 1>(T, mu, *m, gcfg, ht, pool.get());
        record(name,
               {{"ht", ht},
                {"tolerance", vo.bellman_tol},
                {"residual", b.residual},
                {"dvdt", b.dvdt},
                {"hamiltonian_avg", b.hamiltonian_avg},
                {"v_t0", b.v_t0},
                {"v_t1", b.v_t1}},
               b.residual <= vo.bellman_tol);
      } else if (name == "lfd") {
        std::vector<mftc::Vec<1>> probes;
        for (double x : vo.lfd_probes.empty() ? std::vector<double>{-1.0, 0.0, 1.0} : vo.lfd_probes)
          probes.push_back(mftc::Vec<1>(x));
        auto l = mftc::lfd_consistency_check<1, 1>(T, mu, *m, gcfg, vo.lfd_theta, probes, vo.lfd_hx, pool.get());
        record(name,
               {{"theta", vo.lfd_theta},
                {"theta_effective", l.theta_effective},
                {"copies", l.copies},
                {"tolerance", vo.lfd_tol},
                {"max_deviation", l.max_deviation},
                {"du_fd", l.du_fd},
                {"gamma", l.gamma}},
               l.max_deviation <= vo.lfd_tol);
      } else if (name == "agreement") {
        auto other = gcfg;
        other.strategy = gcfg.strategy == mftc::Strategy::sweep ? mftc::Strategy::continuation : mftc::Strategy::sweep;
        auto rep2 = mftc::solve_global<1, 1>(*m, T, mu, other, pool.get());
        double d = mftc::agreement_check(rep, rep2);
        record(name,
               {{"strategies", {mftc::to_string(gcfg.strategy), mftc::to_string(other.strategy)}},
                {"tolerance", vo.agreement_tol},
                {"deviation", d}},
               d <= vo.agreement_tol);
      } else if (name == "assumptions") {
        auto a = mftc::check_assumptions(*m, cfg.sampling);
        record(name, to_json(a), a.pass());
      }
    }

    auto dir = prepare_out(cfg);
    if (cfg.write_json) {
      ojson j;
      j["schema_version"] = kSchemaVersion;
      j["model"] = cfg.model.name;
      j["checks"] = results;
      j["pass"] = all_pass;
      write_json(dir / "verify.json", j);
    }
    out << "  status: " << (all_pass ? "PASS" : "FAIL") << '\n';
    return all_pass ? exit_ok : exit_failure;
  });
}

int run_cli(int argc, char** argv) {
  auto logger = spdlog::get("mfc");
  if (!logger) logger = spdlog::stderr_color_mt("mfc");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("MFC_LOG")) spdlog::set_level(spdlog::level::from_str(lvl));

  CLI::App app{"Particle solver for mean field type control problems"};
  app.require_subcommand(1);
  std::string config_path, out_dir, strategy;
  unsigned workers = 0;
  for (const char* name : {"solve", "constants", "check", "verify"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "configuration file (JSON)")->required();
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--workers", workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--strategy", strategy, "sweep or continuation")->check(CLI::IsMember({"sweep", "continuation"}));
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? exit_ok : exit_config;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    auto cfg = load_config(config_path);
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    if (workers > 0) cfg.workers = workers;
    if (!strategy.empty()) cfg.global.strategy = mftc::strategy_from_string(strategy);
    if (cmd == "solve") return cmd_solve(cfg, std::cout);
    if (cmd == "constants") return cmd_constants(cfg, std::cout);
    if (cmd == "check") return cmd_check(cfg, std::cout);
    return cmd_verify(cfg, std::cout);
  } catch (const mftc::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return exit_config;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_failure;
  }
}

}  // namespace mfc
