#pragma once

// Command-line layer: run configuration, artifact I/O and the four
// commands. The CLI drives the scalar builtin models (d_x = d_a = 1).

#include "mftc/analysis.hpp"
#include "mftc/models/lq.hpp"
#include "mftc/models/nonlq.hpp"

#include <json.hpp>

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace mfc {

using Model1 = mftc::Model<1, 1>;
using Bundle1 = mftc::TrajectoryBundle<1, 1>;

inline constexpr int kSchemaVersion = 1;

enum ExitCode { exit_ok = 0, exit_failure = 1, exit_config = 2 };

struct ModelSpec {
  std::string name = "lq";
  std::map<std::string, double> parameters;
};

struct ParticleInit {
  enum class Kind { gaussian, atoms, file };
  Kind kind = Kind::gaussian;
  double mean = 0.0, std = 1.0;
  unsigned seed = 1;
  std::vector<double> atoms;
  std::string file;
};

// Options of the verify command. Empty index lists mean "pick a spread of
// particles".
struct VerifyOptions {
  double fd_h = 1e-5;
  double jacobian_tol = 1e-3;
  // Kernel errors are relative to max(|kernel|, jacobian_floor * |DxX|);
  // without a mean-field coupling the kernels vanish identically.
  double jacobian_floor = 1e-4;
  std::vector<std::size_t> fd_particles;
  std::size_t measure_max_particles = 60;
  double dmv_h = 1e-4;
  double dmv_tol = 1e-3;
  std::vector<std::size_t> dmv_atoms;
  double bellman_ht = 0.0;  // 0 means one time step
  double bellman_tol = 1e-3;
  double lfd_theta = 0.05;
  double lfd_hx = 1e-3;
  double lfd_tol = 1e-2;
  std::vector<double> lfd_probes;
  double agreement_tol = 1e-6;
};

struct RunConfig {
  ModelSpec model;
  double horizon = 1.0;
  std::size_t particles = 100;
  ParticleInit init;
  mftc::GlobalConfig global;
  bool enforce_cone = false;
  unsigned workers = 1;
  std::string out_dir = "out";
  bool write_csv = true, write_json = true;
  std::vector<std::string> checks;
  mftc::SamplingSpec sampling;
  VerifyOptions verify;
};

// Parses and validates a configuration document. Relative file paths are
// resolved against base_dir. Throws mftc::ConfigError on any problem,
// including unknown keys.
RunConfig parse_config(const nlohmann::json& doc, const std::string& base_dir = ".");
RunConfig load_config(const std::string& path);
// Fully resolved configuration (every default spelled out).
nlohmann::ordered_json to_json(const RunConfig& cfg);

std::shared_ptr<const Model1> make_model(const ModelSpec& spec);
mftc::ParticleMeasure<1> make_measure(const RunConfig& cfg);

// trajectories.csv: particle,node,s,X,Z,alpha with shortest round-trip
// number formatting.
void write_trajectories_csv(const Bundle1& tb, std::ostream& os);
void write_trajectories_csv(const Bundle1& tb, const std::string& path);
Bundle1 read_trajectories_csv(std::istream& is);
Bundle1 read_trajectories_csv(const std::string& path);

nlohmann::ordered_json to_json(const mftc::ConstantsReport& r);
nlohmann::ordered_json to_json(const mftc::AssumptionReport& r);
nlohmann::ordered_json to_json(const mftc::GlobalSolveReport<1, 1>& r);

int cmd_solve(const RunConfig& cfg, std::ostream& out);
int cmd_constants(const RunConfig& cfg, std::ostream& out);
int cmd_check(const RunConfig& cfg, std::ostream& out);
int cmd_verify(const RunConfig& cfg, std::ostream& out);

// Entry point of the mfc executable.
int run_cli(int argc, char** argv);

}  // namespace mfc
