#include "mfc_cli.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

namespace mfc {

using mftc::ConfigError;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace {

// Reads keys of one JSON object and rejects the ones nobody asked for.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return as<T>(j_.at(key), key);
  }

  template <class T>
  T need(const std::string& key) {
    if (!has(key)) throw ConfigError(where() + ": missing required key '" + key + "'");
    return as<T>(j_.at(key), key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + child(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  template <class T>
  T as(const json& v, const std::string& key) const {
    try {
      if constexpr (std::is_same_v<T, double>) {
        if (!v.is_number()) throw ConfigError("");
      } else if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>)
          if (v.get<long long>() < 0) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError("");
      }
      return v.get<T>();
    } catch (const std::exception&) {
      throw ConfigError("'" + child(key) + "' has the wrong type");
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

const std::map<std::string, std::map<std::string, double>>& model_defaults() {
  static const std::map<std::string, std::map<std::string, double>> d{
      {"lq", {{"a", 0.0}, {"b", 1.0}, {"q", 1.0}, {"r", 1.0}, {"qT", 1.0}, {"mf_weight", 0.0}}},
      {"nonlq", {{"eps1", 0.05}, {"eps2", 0.25}, {"eps3", 0.125}, {"eps4", 0.5}}}};
  return d;
}

const std::set<std::string>& known_checks() {
  static const std::set<std::string> s{"assumptions", "jacobian_fd", "apriori", "dmv_identity",
                                       "bellman",     "lfd",         "agreement"};
  return s;
}

template <class T>
std::vector<T> list_of(const json& v, const std::string& path) {
  if (!v.is_array()) throw ConfigError("'" + path + "' must be an array");
  std::vector<T> out;
  try {
    for (const auto& e : v) {
      if constexpr (std::is_same_v<T, double>) {
        if (!e.is_number()) throw ConfigError("");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!e.is_string()) throw ConfigError("");
      } else {
        if (!e.is_number_unsigned()) throw ConfigError("");
      }
      out.push_back(e.get<T>());
    }
  } catch (const std::exception&) {
    throw ConfigError("'" + path + "' has an element of the wrong type");
  }
  return out;
}

void parse_picard(const json& j, mftc::PicardConfig& p, bool& cone) {
  Reader r(j, "picard");
  p.tol_gamma = r.get("tol_gamma", p.tol_gamma);
  p.max_iter = r.get("max_iter", p.max_iter);
  p.omega = r.get("omega", p.omega);
  p.auto_relax = r.get("auto_relax", p.auto_relax);
  p.omega_min = r.get("omega_min", p.omega_min);
  p.nonmonotone_limit = r.get("nonmonotone_limit", p.nonmonotone_limit);
  p.divergence_factor = r.get("divergence_factor", p.divergence_factor);
  cone = r.get("enforce_cone", cone);
  std::string integ = r.get<std::string>("integrator", "rk4");
  if (integ == "rk4")
    p.integrator = mftc::PicardConfig::Integrator::rk4;
  else if (integ == "euler")
    p.integrator = mftc::PicardConfig::Integrator::euler;
  else
    throw ConfigError("picard.integrator must be rk4 or euler");
  std::string mode = r.get<std::string>("mode", "automatic");
  if (mode == "automatic")
    p.mode = mftc::PicardConfig::Mode::automatic;
  else if (mode == "field")
    p.mode = mftc::PicardConfig::Mode::field;
  else if (mode == "trajectory")
    p.mode = mftc::PicardConfig::Mode::trajectory;
  else
    throw ConfigError("picard.mode must be automatic, field or trajectory");
  r.finish();
}

void parse_control(const json& j, mftc::ControlSolveConfig& c) {
  Reader r(j, "control");
  c.newton_tol = r.get("newton_tol", c.newton_tol);
  c.newton_max_iter = r.get("newton_max_iter", c.newton_max_iter);
  c.damping = r.get("damping", c.damping);
  std::string init = r.get<std::string>("init", "warm_start");
  if (init == "warm_start")
    c.init = mftc::ControlSolveConfig::Init::warm_start;
  else if (init == "zero")
    c.init = mftc::ControlSolveConfig::Init::zero;
  else
    throw ConfigError("control.init must be zero or warm_start");
  r.finish();
}

void parse_verify(const json& j, VerifyOptions& v) {
  Reader r(j, "verify");
  v.fd_h = r.get("fd_h", v.fd_h);
  v.jacobian_tol = r.get("jacobian_tol", v.jacobian_tol);
  v.jacobian_floor = r.get("jacobian_floor", v.jacobian_floor);
  if (r.has("fd_particles")) v.fd_particles = list_of<std::size_t>(r.raw("fd_particles"), "verify.fd_particles");
  v.measure_max_particles = r.get("measure_max_particles", v.measure_max_particles);
  v.dmv_h = r.get("dmv_h", v.dmv_h);
  v.dmv_tol = r.get("dmv_tol", v.dmv_tol);
  if (r.has("dmv_atoms")) v.dmv_atoms = list_of<std::size_t>(r.raw("dmv_atoms"), "verify.dmv_atoms");
  v.bellman_ht = r.get("bellman_ht", v.bellman_ht);
  v.bellman_tol = r.get("bellman_tol", v.bellman_tol);
  v.lfd_theta = r.get("lfd_theta", v.lfd_theta);
  v.lfd_hx = r.get("lfd_hx", v.lfd_hx);
  v.lfd_tol = r.get("lfd_tol", v.lfd_tol);
  if (r.has("lfd_probes")) v.lfd_probes = list_of<double>(r.raw("lfd_probes"), "verify.lfd_probes");
  v.agreement_tol = r.get("agreement_tol", v.agreement_tol);
  r.finish();
  for (double t : {v.fd_h, v.jacobian_tol, v.jacobian_floor, v.dmv_h, v.dmv_tol, v.bellman_tol, v.lfd_hx, v.lfd_tol, v.agreement_tol})
    if (!(t > 0.0)) throw ConfigError("verify: step sizes and tolerances must be positive");
  if (v.bellman_ht < 0.0) throw ConfigError("verify.bellman_ht must be nonnegative");
  if (!(v.lfd_theta > 0.0 && v.lfd_theta < 1.0)) throw ConfigError("verify.lfd_theta must lie in (0, 1)");
}

}  // namespace

RunConfig parse_config(const json& doc, const std::string& base_dir) {
  RunConfig c;
  Reader r(doc, "");
  int version = r.get("schema_version", kSchemaVersion);
  if (version != kSchemaVersion) throw ConfigError("unsupported schema_version " + std::to_string(version));

  {
    Reader m(r.raw("model"), "model");
    if (!doc.contains("model")) throw ConfigError("config: missing required key 'model'");
    c.model.name = m.need<std::string>("name");
    auto it = model_defaults().find(c.model.name);
    if (it == model_defaults().end()) throw ConfigError("unknown model '" + c.model.name + "' (expected lq or nonlq)");
    c.model.parameters = it->second;
    if (m.has("parameters")) {
      Reader p(m.raw("parameters"), "model.parameters");
      for (auto& [k, v] : c.model.parameters) v = p.get(k, v);
      p.finish();
    }
    m.finish();
  }

  c.horizon = r.need<double>("horizon");
  if (!(c.horizon > 0.0) || !std::isfinite(c.horizon)) throw ConfigError("horizon must be positive");

  {
    if (!r.has("particles")) throw ConfigError("config: missing required key 'particles'");
    Reader p(r.raw("particles"), "particles");
    bool has_count = p.has("count");
    long long count = has_count ? p.get<long long>("count", 0) : 0;
    if (p.has("init")) {
      Reader in(p.raw("init"), "particles.init");
      int kinds = 0;
      if (in.has("gaussian")) {
        ++kinds;
        Reader g(in.raw("gaussian"), "particles.init.gaussian");
        c.init.kind = ParticleInit::Kind::gaussian;
        c.init.mean = g.get("mean", 0.0);
        c.init.std = g.get("std", 1.0);
        c.init.seed = g.get("seed", 1u);
        g.finish();
        if (!(c.init.std >= 0.0)) throw ConfigError("particles.init.gaussian.std must be nonnegative");
      }
      if (in.has("atoms")) {
        ++kinds;
        c.init.kind = ParticleInit::Kind::atoms;
        c.init.atoms = list_of<double>(in.raw("atoms"), "particles.init.atoms");
      }
      if (in.has("file")) {
        ++kinds;
        c.init.kind = ParticleInit::Kind::file;
        std::filesystem::path f = in.get<std::string>("file", "");
        if (f.is_relative()) f = std::filesystem::path(base_dir) / f;
        c.init.file = f.lexically_normal().string();
      }
      in.finish();
      if (kinds != 1) throw ConfigError("particles.init needs exactly one of gaussian, atoms, file");
    }
    p.finish();
    if (c.init.kind == ParticleInit::Kind::atoms) {
      if (has_count && count != static_cast<long long>(c.init.atoms.size()))
        throw ConfigError("particles.count does not match the number of inline atoms");
      count = static_cast<long long>(c.init.atoms.size());
    } else if (c.init.kind == ParticleInit::Kind::file) {
      std::ifstream is(c.init.file);
      if (!is) throw ConfigError("cannot open particle file '" + c.init.file + "'");
      std::string line;
      while (std::getline(is, line)) {
        auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        try {
          std::size_t used = 0;
          c.init.atoms.push_back(std::stod(line.substr(b), &used));
        } catch (const std::exception&) {
          throw ConfigError("particle file '" + c.init.file + "': bad line '" + line + "'");
        }
      }
      if (has_count && count != static_cast<long long>(c.init.atoms.size()))
        throw ConfigError("particles.count does not match the particle file");
      count = static_cast<long long>(c.init.atoms.size());
    } else if (!has_count) {
      throw ConfigError("particles.count is required for gaussian initialisation");
    }
    if (count < 1) throw ConfigError("particles.count must be at least 1");
    c.particles = static_cast<std::size_t>(count);
  }

  if (r.has("grid")) {
    Reader g(r.raw("grid"), "grid");
    c.global.dt = g.get("dt", c.global.dt);
    g.finish();
  }
  if (r.has("picard")) parse_picard(r.raw("picard"), c.global.picard, c.enforce_cone);
  if (r.has("control")) parse_control(r.raw("control"), c.global.picard.control);
  if (r.has("global")) {
    Reader g(r.raw("global"), "global");
    c.global.cap = g.get("cap", c.global.cap);
    c.global.sweep_tol = g.get("sweep_tol", c.global.sweep_tol);
    c.global.max_sweeps = g.get("max_sweeps", c.global.max_sweeps);
    c.global.anderson_depth = g.get("anderson_depth", c.global.anderson_depth);
    c.global.residual_tol = g.get("residual_tol", c.global.residual_tol);
    g.finish();
  }
  if (r.has("strategy")) c.global.strategy = mftc::strategy_from_string(r.get<std::string>("strategy", ""));

  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  c.workers = r.get("workers", hw);
  if (c.workers < 1) throw ConfigError("workers must be at least 1");

  if (r.has("outputs")) {
    Reader o(r.raw("outputs"), "outputs");
    c.out_dir = o.get<std::string>("dir", c.out_dir);
    if (o.has("formats")) {
      auto f = list_of<std::string>(o.raw("formats"), "outputs.formats");
      c.write_csv = c.write_json = false;
      for (const auto& s : f) {
        if (s == "csv")
          c.write_csv = true;
        else if (s == "json")
          c.write_json = true;
        else
          throw ConfigError("outputs.formats accepts csv and json, got '" + s + "'");
      }
    }
    o.finish();
  }

  if (r.has("checks")) {
    c.checks = list_of<std::string>(r.raw("checks"), "checks");
    for (const auto& s : c.checks)
      if (!known_checks().count(s)) throw ConfigError("unknown check '" + s + "'");
  }
  if (r.has("sampling")) {
    Reader s(r.raw("sampling"), "sampling");
    c.sampling.n_points = s.get("n_points", c.sampling.n_points);
    c.sampling.radius = s.get("radius", c.sampling.radius);
    c.sampling.seed = s.get("seed", c.sampling.seed);
    c.sampling.max_atoms = s.get("max_atoms", c.sampling.max_atoms);
    c.sampling.tolerance = s.get("tolerance", c.sampling.tolerance);
    s.finish();
  }
  if (r.has("verify")) parse_verify(r.raw("verify"), c.verify);
  r.finish();

  c.global.validate();
  c.sampling.validate();
  // model parameters are validated by the constructors
  make_model(c.model);
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config '" + path + "'");
  json doc;
  try {
    doc = json::parse(is, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  auto base = std::filesystem::path(path).parent_path().string();
  return parse_config(doc, base.empty() ? "." : base);
}

std::shared_ptr<const Model1> make_model(const ModelSpec& spec) {
  const auto& p = spec.parameters;
  auto at = [&](const char* k) {
    auto it = p.find(k);
    if (it == p.end()) throw ConfigError(spec.name + ": missing parameter " + k);
    return it->second;
  };
  if (spec.name == "lq") return mftc::builtin_lq(at("a"), at("b"), at("q"), at("r"), at("qT"), at("mf_weight"));
  if (spec.name == "nonlq") return mftc::builtin_nonlq(at("eps1"), at("eps2"), at("eps3"), at("eps4"));
  throw ConfigError("unknown model '" + spec.name + "'");
}

mftc::ParticleMeasure<1> make_measure(const RunConfig& cfg) {
  std::vector<mftc::Vec<1>> atoms(cfg.particles);
  if (cfg.init.kind == ParticleInit::Kind::gaussian) {
    std::mt19937_64 rng(cfg.init.seed);
    std::normal_distribution<double> nd(cfg.init.mean, cfg.init.std);
    for (auto& a : atoms) a(0) = nd(rng);
  } else {
    for (std::size_t i = 0; i < atoms.size(); ++i) atoms[i](0) = cfg.init.atoms[i];
  }
  return mftc::ParticleMeasure<1>(atoms);
}

ojson to_json(const RunConfig& c) {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["model"] = {{"name", c.model.name}, {"parameters", c.model.parameters}};
  j["horizon"] = c.horizon;
  ojson init;
  switch (c.init.kind) {
    case ParticleInit::Kind::gaussian:
      init["gaussian"] = {{"mean", c.init.mean}, {"std", c.init.std}, {"seed", c.init.seed}};
      break;
    case ParticleInit::Kind::atoms:
    case ParticleInit::Kind::file:
      // a file is resolved to its atoms so the document is self-contained
      init["atoms"] = c.init.atoms;
      break;
  }
  j["particles"] = {{"count", c.particles}, {"init", init}};
  j["grid"] = {{"dt", c.global.dt}};
  const auto& p = c.global.picard;
  const char* modes[] = {"automatic", "field", "trajectory"};
  j["picard"] = {{"tol_gamma", p.tol_gamma},
                 {"max_iter", p.max_iter},
                 {"omega", p.omega},
                 {"integrator", p.integrator == mftc::PicardConfig::Integrator::rk4 ? "rk4" : "euler"},
                 {"mode", modes[static_cast<int>(p.mode)]},
                 {"auto_relax", p.auto_relax},
                 {"omega_min", p.omega_min},
                 {"nonmonotone_limit", p.nonmonotone_limit},
                 {"divergence_factor", p.divergence_factor},
                 {"enforce_cone", c.enforce_cone}};
  const auto& cc = p.control;
  j["control"] = {{"newton_tol", cc.newton_tol},
                  {"newton_max_iter", cc.newton_max_iter},
                  {"damping", cc.damping},
                  {"init", cc.init == mftc::ControlSolveConfig::Init::zero ? "zero" : "warm_start"}};
  j["global"] = {{"cap", c.global.cap},
                 {"sweep_tol", c.global.sweep_tol},
                 {"max_sweeps", c.global.max_sweeps},
                 {"anderson_depth", c.global.anderson_depth},
                 {"residual_tol", c.global.residual_tol}};
  j["strategy"] = mftc::to_string(c.global.strategy);
  j["workers"] = c.workers;
  std::vector<std::string> formats;
  if (c.write_csv) formats.push_back("csv");
  if (c.write_json) formats.push_back("json");
  j["outputs"] = {{"dir", c.out_dir}, {"formats", formats}};
  j["checks"] = c.checks;
  j["sampling"] = {{"n_points", c.sampling.n_points},
                   {"radius", c.sampling.radius},
                   {"seed", c.sampling.seed},
                   {"max_atoms", c.sampling.max_atoms},
                   {"tolerance", c.sampling.tolerance}};
  const auto& v = c.verify;
  j["verify"] = {{"fd_h", v.fd_h},
                 {"jacobian_tol", v.jacobian_tol},
                 {"jacobian_floor", v.jacobian_floor},
                 {"fd_particles", v.fd_particles},
                 {"measure_max_particles", v.measure_max_particles},
                 {"dmv_h", v.dmv_h},
                 {"dmv_tol", v.dmv_tol},
                 {"dmv_atoms", v.dmv_atoms},
                 {"bellman_ht", v.bellman_ht},
                 {"bellman_tol", v.bellman_tol},
                 {"lfd_theta", v.lfd_theta},
                 {"lfd_hx", v.lfd_hx},
                 {"lfd_tol", v.lfd_tol},
                 {"lfd_probes", v.lfd_probes},
                 {"agreement_tol", v.agreement_tol}};
  return j;
}

}  // namespace mfc
