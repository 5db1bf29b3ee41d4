#include "mfc_cli.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace mfc {

using mftc::ConfigError;
using ojson = nlohmann::ordered_json;

namespace {

// Shortest representation that parses back to the same double.
void put(std::string& line, double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, r.ptr);
}

void put(std::string& line, std::size_t v) {
  char buf[24];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  line.append(buf, r.ptr);
}

template <class T>
T take(std::string_view& s, std::size_t line_no) {
  auto comma = s.find(',');
  std::string_view field = s.substr(0, comma);
  T v{};
  auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (r.ec != std::errc() || r.ptr != field.data() + field.size())
    throw ConfigError("trajectories.csv line " + std::to_string(line_no) + ": bad field '" + std::string(field) + "'");
  s = comma == std::string_view::npos ? std::string_view{} : s.substr(comma + 1);
  return v;
}

// NaN and infinities have no JSON spelling.
ojson num(double v) { return std::isfinite(v) ? ojson(v) : ojson(nullptr); }

}  // namespace

void write_trajectories_csv(const Bundle1& tb, std::ostream& os) {
  os << "particle,node,s,X,Z,alpha\n";
  std::string line;
  // particle-major rows read naturally as one trajectory after another
  for (std::size_t i = 0; i < tb.N; ++i)
    for (int k = 0; k < tb.nodes(); ++k) {
      auto q = tb.idx(k, i);
      line.clear();
      put(line, i);
      line += ',';
      put(line, static_cast<std::size_t>(k));
      line += ',';
      put(line, tb.grid.time(k));
      line += ',';
      put(line, tb.X[q](0));
      line += ',';
      put(line, tb.Z[q](0));
      line += ',';
      put(line, tb.alpha[q](0));
      line += '\n';
      os << line;
    }
}

void write_trajectories_csv(const Bundle1& tb, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  write_trajectories_csv(tb, os);
  if (!os) throw std::runtime_error("error writing " + path);
}

Bundle1 read_trajectories_csv(std::istream& is) {
  struct Row {
    std::size_t i;
    int k;
    double s, x, z, a;
  };
  std::string line;
  if (!std::getline(is, line) || line != "particle,node,s,X,Z,alpha")
    throw ConfigError("trajectories.csv: unexpected header");
  std::vector<Row> rows;
  std::size_t n = 0;
  int K = 0;
  for (std::size_t no = 2; std::getline(is, line); ++no) {
    if (line.empty()) continue;
    std::string_view s(line);
    Row r{};
    r.i = take<std::size_t>(s, no);
    r.k = take<int>(s, no);
    r.s = take<double>(s, no);
    r.x = take<double>(s, no);
    r.z = take<double>(s, no);
    r.a = take<double>(s, no);
    if (!s.empty()) throw ConfigError("trajectories.csv line " + std::to_string(no) + ": too many fields");
    if (r.k < 0) throw ConfigError("trajectories.csv: negative node index");
    n = std::max(n, r.i + 1);
    K = std::max(K, r.k);
    rows.push_back(r);
  }
  if (rows.empty() || K < 1) throw ConfigError("trajectories.csv: need at least two nodes");
  if (rows.size() != n * static_cast<std::size_t>(K + 1)) throw ConfigError("trajectories.csv: incomplete table");

  Bundle1 tb;
  mftc::TimeGrid g{0.0, 1.0, K};
  std::vector<char> filled(rows.size(), 0);
  for (const auto& r : rows) {
    if (r.k == 0) g.t0 = r.s;
    if (r.k == K) g.t1 = r.s;
  }
  tb.resize(g, n);
  for (const auto& r : rows) {
    auto q = tb.idx(r.k, r.i);
    if (filled[q]++) throw ConfigError("trajectories.csv: duplicate row");
    if (r.s != g.time(r.k)) throw ConfigError("trajectories.csv: times are not a uniform grid");
    tb.X[q](0) = r.x;
    tb.Z[q](0) = r.z;
    tb.alpha[q](0) = r.a;
  }
  return tb;
}

Bundle1 read_trajectories_csv(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot open " + path);
  return read_trajectories_csv(is);
}

ojson to_json(const mftc::ConstantsReport& r) {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["anchors"] = r.anchors_model_supplied ? "model-supplied" : "h1-default";
  ojson v = ojson::object();
  for (const auto& [name, value] : r.entries()) v[name] = num(value);
  j["constants"] = v;
  j["admissible_sublength"] = num(mftc::admissible_sublength(r));
  return j;
}

ojson to_json(const mftc::AssumptionReport& r) {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["model"] = r.model;
  j["probes"] = r.probes;
  j["tolerance"] = r.tolerance;
  j["pass"] = r.pass();
  j["failures"] = r.failures();
  ojson recs = ojson::array();
  for (const auto& a : r.records) {
    ojson e;
    e["name"] = a.name;
    e["description"] = a.description;
    e["sampled"] = a.sampled;
    e["value"] = num(a.value);
    e["worst_margin"] = num(a.worst_margin);
    e["pass"] = a.pass;
    ojson w = ojson::object();
    for (const auto& [k, vals] : a.witness) w[k] = vals;
    e["witness"] = w;
    recs.push_back(e);
  }
  j["records"] = recs;
  return j;
}

ojson to_json(const mftc::GlobalSolveReport<1, 1>& r) {
  ojson j;
  j["schema_version"] = kSchemaVersion;
  j["strategy"] = mftc::to_string(r.strategy);
  j["grid"] = {{"t0", r.traj.grid.t0}, {"t1", r.traj.grid.t1}, {"steps", r.traj.grid.steps}};
  j["particles"] = r.traj.N;
  j["sweeps"] = r.sweeps;
  j["halvings"] = r.halvings;
  j["horizons"] = r.horizons;
  j["partition"] = {{"breaks", r.partition.breaks}, {"max_length", r.partition.max_length()}};
  j["interval_iters"] = r.interval_iters;
  j["sweep_history"] = r.sweep_history;
  ojson hist = ojson::array();
  for (const auto& h : r.picard_histories) hist.push_back(h);
  j["picard_histories"] = hist;
  j["residual"] = {{"forward", r.residual.forward},
                   {"backward", r.residual.backward},
                   {"terminal", r.residual.terminal},
                   {"max", r.residual.max()}};
  j["pasting_gap"] = num(r.pasting_gap);
  j["min_cone_margin"] = num(r.min_cone_margin);
  j["gamma_slope_max"] = num(r.gamma_slope_max);
  return j;
}

}  // namespace mfc
