#pragma once

#include "mftc/constants.hpp"
#include "mftc/fbode.hpp"

#include <memory>

namespace mftc {

enum class Strategy { sweep, continuation };

inline const char* to_string(Strategy s) { return s == Strategy::sweep ? "sweep" : "continuation"; }
inline Strategy strategy_from_string(const std::string& s) {
  if (s == "sweep") return Strategy::sweep;
  if (s == "continuation") return Strategy::continuation;
  throw ConfigError("unknown strategy '" + s + "' (expected sweep or continuation)");
}

struct GlobalConfig {
  double dt = 1e-3;
  // Largest sub-interval tried first; halved on local non-contraction.
  double cap = 0.1;
  double sweep_tol = 1e-11;
  int max_sweeps = 200;
  // Anderson mixing depth on the breakpoint measures; 0 gives plain sweeps.
  int anderson_depth = 5;
  double residual_tol = 1e-6;
  Strategy strategy = Strategy::sweep;
  PicardConfig picard;

  void validate() const {
    if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("global: dt must be positive");
    if (!(cap > 0.0)) throw ConfigError("global: cap must be positive");
    if (!(sweep_tol > 0.0)) throw ConfigError("global: sweep_tol must be positive");
    if (max_sweeps < 1) throw ConfigError("global: max_sweeps must be >= 1");
    if (anderson_depth < 0) throw ConfigError("global: anderson_depth must be >= 0");
    if (!(residual_tol > 0.0)) throw ConfigError("global: residual_tol must be positive");
    picard.validate();
  }
};

// Breakpoints as node indices 0 = b_0 < ... < b_J = K of a global grid.
// Built backward from T in pieces of `len` steps; the first piece takes the
// remainder.
struct Partition {
  TimeGrid grid;
  std::vector<int> breaks;

  int intervals() const { return static_cast<int>(breaks.size()) - 1; }
  TimeGrid sub(int j) const {
    return TimeGrid{grid.time(breaks[j]), grid.time(breaks[j + 1]), breaks[j + 1] - breaks[j]};
  }
  double max_length() const {
    double r = 0.0;
    for (int j = 0; j < intervals(); ++j) r = std::max(r, sub(j).t1 - sub(j).t0);
    return r;
  }
};

inline Partition build_partition(const TimeGrid& grid, int len) {
  if (len < 1) throw ConfigError("build_partition: interval length must be at least one step");
  Partition p;
  p.grid = grid;
  std::vector<int> rev{grid.steps};
  int b = grid.steps;
  while (b > 0) {
    b = std::max(0, b - len);
    rev.push_back(b);
  }
  p.breaks.assign(rev.rbegin(), rev.rend());
  return p;
}

template <int Dx, int Da>
struct GlobalSolveReport {
  TrajectoryBundle<Dx, Da> traj;
  DecouplingFieldSample<Dx> field;
  std::vector<std::shared_ptr<const DecouplingFieldSample<Dx>>> interval_fields;
  Partition partition;
  Strategy strategy = Strategy::sweep;
  int sweeps = 0;
  int halvings = 0;
  int horizons = 1;
  std::vector<int> interval_iters;
  std::vector<std::vector<double>> picard_histories;
  std::vector<double> sweep_history;
  FbodeResidual residual;
  double pasting_gap = 0.0;
  double min_cone_margin = std::numeric_limits<double>::quiet_NaN();
  double gamma_slope_max = std::numeric_limits<double>::quiet_NaN();
};

// min over nodes of k0/2 (1 + |X| + |mu|_1) - |Z|
template <int Dx, int Da>
double cone_margin(const TrajectoryBundle<Dx, Da>& tb, double k0) {
  double r = std::numeric_limits<double>::infinity();
  for (int k = 0; k < tb.nodes(); ++k) {
    double m1 = 0.0;
    for (std::size_t i = 0; i < tb.N; ++i) m1 += tb.X[tb.idx(k, i)].norm();
    m1 /= double(tb.N);
    for (std::size_t i = 0; i < tb.N; ++i) {
      auto q = tb.idx(k, i);
      r = std::min(r, 0.5 * k0 * (1.0 + tb.X[q].norm() + m1) - tb.Z[q].norm());
    }
  }
  return r;
}

// Largest spatial slope of the field samples (field mode only).
template <int Dx>
double field_slope_max(const DecouplingFieldSample<Dx>& f) {
  if (f.mode != FieldMode::field) return std::numeric_limits<double>::quiet_NaN();
  double r = 0.0;
  for (const auto& s : f.slope) r = std::max(r, s.norm());
  return r;
}

namespace detail {

template <int Dx, int Da>
struct SweepState {
  std::vector<std::shared_ptr<const DecouplingFieldSample<Dx>>> fields;
  std::vector<std::vector<Vec<Dx>>> starts;
};

template <int Dx, int Da>
TerminalMap<Dx> interval_terminal(const Model<Dx, Da>& m, const SweepState<Dx, Da>& st, int j, int J) {
  if (j == J - 1 || !st.fields[j + 1]) return model_terminal(m);
  return handoff_terminal<Dx>(st.fields[j + 1]);
}

// Forward propagation through the pasted fields; fills starts and returns
// the per-interval bundles.
template <int Dx, int Da>
std::vector<TrajectoryBundle<Dx, Da>> propagate(const Model<Dx, Da>& m, const Partition& part,
                                                const std::vector<Vec<Dx>>& x0, SweepState<Dx, Da>& st,
                                                const PicardConfig& pc, WorkerPool* pool) {
  const int J = part.intervals();
  std::vector<TrajectoryBundle<Dx, Da>> out(J);
  std::vector<Vec<Dx>> xs = x0;
  st.starts.assign(J, {});
  for (int j = 0; j < J; ++j) {
    st.starts[j] = xs;
    ZSource<Dx> src = st.fields[j] ? field_source<Dx>(st.fields[j]) : seed_source<Dx>(interval_terminal(m, st, j, J));
    out[j] = solve_forward(m, part.sub(j), xs, src, pc, pool);
    const auto& tb = out[j];
    xs.assign(tb.X.begin() + tb.idx(tb.grid.steps, 0), tb.X.end());
  }
  return out;
}

// Global bundle from per-interval bundles; breakpoints take the right
// interval's first node, the final node gets the exact terminal value.
template <int Dx, int Da>
TrajectoryBundle<Dx, Da> assemble(const Model<Dx, Da>& m, const Partition& part,
                                  const std::vector<TrajectoryBundle<Dx, Da>>& parts, const ControlSolveConfig& cc,
                                  WorkerPool* pool) {
  TrajectoryBundle<Dx, Da> g;
  const std::size_t n = parts.front().N;
  g.resize(part.grid, n);
  for (int j = 0; j < part.intervals(); ++j) {
    const auto& tb = parts[j];
    for (int k = 0; k <= tb.grid.steps; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        auto q = g.idx(part.breaks[j] + k, i), r = tb.idx(k, i);
        g.X[q] = tb.X[r];
        g.Z[q] = tb.Z[r];
        g.alpha[q] = tb.alpha[r];
      }
  }
  const int K = part.grid.steps;
  auto muK = g.measure(K);
  std::vector<Vec<Dx>> pT;
  model_terminal(m)(muK, pT);
  auto v = m.view(muK);
  parallel_for(pool, n, [&](std::size_t i) {
    auto q = g.idx(K, i);
    g.Z[q] = pT[i];
    Vec<Da> w = g.alpha[q];
    g.alpha[q] = solve_alpha(m, g.X[q], v, g.Z[q], cc, &w);
  });
  return g;
}

template <int Dx, int Da>
double bundle_change(const TrajectoryBundle<Dx, Da>& a, const TrajectoryBundle<Dx, Da>& b) {
  double r = 0.0;
  for (std::size_t q = 0; q < a.X.size(); ++q) r = std::max(r, (a.X[q] - b.X[q]).norm() + (a.Z[q] - b.Z[q]).norm());
  return r;
}

// Type-II Anderson mixing for s = G(s).
class AndersonMixer {
 public:
  explicit AndersonMixer(int depth) : depth_(depth) {}

  Eigen::VectorXd next(const Eigen::VectorXd& s, const Eigen::VectorXd& gs) {
    Eigen::VectorXd f = gs - s;
    if (depth_ == 0) return gs;
    if (has_prev_) {
      dF_.push_back(f - f_prev_);
      dG_.push_back(gs - g_prev_);
      if (static_cast<int>(dF_.size()) > depth_) {
        dF_.erase(dF_.begin());
        dG_.erase(dG_.begin());
      }
    }
    f_prev_ = f;
    g_prev_ = gs;
    has_prev_ = true;
    if (dF_.empty()) return gs;
    const Eigen::Index m = static_cast<Eigen::Index>(dF_.size());
    Eigen::MatrixXd F(f.size(), m), G(f.size(), m);
    for (Eigen::Index c = 0; c < m; ++c) {
      F.col(c) = dF_[c];
      G.col(c) = dG_[c];
    }
    Eigen::VectorXd gamma = F.completeOrthogonalDecomposition().solve(f);
    if (!gamma.allFinite()) {
      reset();
      return gs;
    }
    return gs - G * gamma;
  }

  void reset() {
    dF_.clear();
    dG_.clear();
    has_prev_ = false;
  }

 private:
  int depth_;
  bool has_prev_ = false;
  Eigen::VectorXd f_prev_, g_prev_;
  std::vector<Eigen::VectorXd> dF_, dG_;
};

template <int Dx>
Eigen::VectorXd flatten(const std::vector<std::vector<Vec<Dx>>>& starts) {
  std::size_t n = 0;
  for (const auto& v : starts) n += v.size();
  Eigen::VectorXd r(static_cast<Eigen::Index>(n * Dx));
  Eigen::Index o = 0;
  for (const auto& v : starts)
    for (const auto& x : v) {
      r.segment<Dx>(o) = x;
      o += Dx;
    }
  return r;
}

template <int Dx>
void unflatten(const Eigen::VectorXd& r, std::vector<std::vector<Vec<Dx>>>& starts) {
  Eigen::Index o = 0;
  for (auto& v : starts)
    for (auto& x : v) {
      x = r.segment<Dx>(o);
      o += Dx;
    }
}

// Backward/forward sweeps on a fixed partition. `st.fields` may carry warm
// fields (null entries are seeded with gamma = p).
template <int Dx, int Da>
GlobalSolveReport<Dx, Da> sweep_solve(const Model<Dx, Da>& m, const Partition& part, const std::vector<Vec<Dx>>& x0,
                                      const GlobalConfig& cfg, SweepState<Dx, Da> st, WorkerPool* pool) {
  const int J = part.intervals();
  GlobalSolveReport<Dx, Da> rep;
  rep.partition = part;
  rep.interval_iters.assign(J, 0);
  rep.picard_histories.assign(J, {});
  st.fields.resize(J);

  if (J == 1) {
    auto res = picard_local(m, part.sub(0), x0, model_terminal(m), cfg.picard, pool, st.fields[0]);
    rep.traj = std::move(res.traj);
    rep.interval_fields = {res.field};
    rep.interval_iters[0] = res.iters;
    rep.picard_histories[0] = std::move(res.history);
    rep.sweeps = 1;
    return rep;
  }

  auto parts = propagate(m, part, x0, st, cfg.picard, pool);
  TrajectoryBundle<Dx, Da> prev = assemble(m, part, parts, cfg.picard.control, pool);
  std::vector<PicardResult<Dx, Da>> local(J);
  AndersonMixer mixer(cfg.anderson_depth);
  Eigen::VectorXd s_in = flatten<Dx>(st.starts);
  double best = std::numeric_limits<double>::infinity();
  for (int sweep = 1; sweep <= cfg.max_sweeps; ++sweep) {
    for (int j = J - 1; j >= 0; --j) {
      local[j] = picard_local(m, part.sub(j), st.starts[j], interval_terminal(m, st, j, J), cfg.picard, pool,
                              st.fields[j]);
      st.fields[j] = local[j].field;
      rep.interval_iters[j] = local[j].iters;
      rep.picard_histories[j] = local[j].history;
    }
    parts = propagate(m, part, x0, st, cfg.picard, pool);
    auto cur = assemble(m, part, parts, cfg.picard.control, pool);
    double change = bundle_change(cur, prev);
    rep.sweep_history.push_back(change);
    prev = std::move(cur);
    rep.sweeps = sweep;
    Eigen::VectorXd s_out = flatten<Dx>(st.starts);
    // the last sweep must be a plain one so that the bundle is the exact
    // propagation through the pasted fields
    if (change <= cfg.sweep_tol && (s_out - s_in).lpNorm<Eigen::Infinity>() <= cfg.sweep_tol) {
      rep.traj = std::move(prev);
      rep.interval_fields = st.fields;
      // gap between the terminal data each interval used and the value
      // handed over by its right neighbour
      for (int j = 0; j + 1 < J; ++j) {
        const auto& L = local[j].traj;
        const auto& R = *st.fields[j + 1];
        for (std::size_t i = 0; i < L.N; ++i)
          rep.pasting_gap = std::max(rep.pasting_gap, (L.Z[L.idx(L.grid.steps, i)] - R.val[R.idx(0, i)]).norm());
      }
      return rep;
    }
    // mixing restarts when it stops helping
    double fn = (s_out - s_in).lpNorm<Eigen::Infinity>();
    if (fn > 2.0 * best) mixer.reset();
    best = std::min(best, fn);
    s_in = mixer.next(s_in, s_out);
    unflatten<Dx>(s_in, st.starts);
  }
  throw SolverError("solve_global: sweeps did not settle", rep.sweep_history.back(), rep.sweep_history);
}

}  // namespace detail

// Global solve on [0, T] by pasting local Picard solutions (sweep) or by
// growing the horizon backward from T one interval at a time
// (continuation). Intervals are halved on local non-contraction.
template <int Dx, int Da>
GlobalSolveReport<Dx, Da> solve_global(const Model<Dx, Da>& m, double T, const ParticleMeasure<Dx>& mu0,
                                       const GlobalConfig& cfg, WorkerPool* pool = nullptr) {
  cfg.validate();
  if (!(T > 0.0) || !std::isfinite(T)) throw ConfigError("solve_global: T must be positive");
  int K = static_cast<int>(std::ceil(T / cfg.dt - 1e-9));
  K = std::max(K, 1);
  TimeGrid grid{0.0, T, K};
  int len = std::max(1, static_cast<int>(std::floor(cfg.cap / grid.dt() + 1e-9)));
  const auto& x0 = mu0.atoms();

  int halvings = 0;
  std::vector<double> failures;
  for (;;) {
    Partition part = build_partition(grid, len);
    try {
      GlobalSolveReport<Dx, Da> rep;
      if (cfg.strategy == Strategy::sweep) {
        rep = detail::sweep_solve(m, part, x0, cfg, detail::SweepState<Dx, Da>{}, pool);
      } else {
        // horizons [t_{J-h}, T], h = 1..J, each started from mu0; fields of
        // the previous horizon warm-start the shared trailing intervals
        const int J = part.intervals();
        std::vector<std::shared_ptr<const DecouplingFieldSample<Dx>>> warm;
        int total_sweeps = 0;
        for (int h = 1; h <= J; ++h) {
          Partition sub;
          const int b0 = part.breaks[J - h];
          sub.grid = TimeGrid{grid.time(b0), T, K - b0};
          for (int j = J - h; j <= J; ++j) sub.breaks.push_back(part.breaks[j] - b0);
          detail::SweepState<Dx, Da> st;
          st.fields.assign(h, nullptr);
          for (std::size_t j = 0; j < warm.size(); ++j) st.fields[h - int(warm.size()) + int(j)] = warm[j];
          rep = detail::sweep_solve(m, sub, x0, cfg, st, pool);
          total_sweeps += rep.sweeps;
          warm = rep.interval_fields;
        }
        rep.horizons = J;
        rep.sweeps = total_sweeps;
      }
      rep.strategy = cfg.strategy;
      rep.halvings = halvings;
      rep.field = make_field(rep.traj, rep.traj.Z, cfg.picard.field_mode<Dx>());
      rep.gamma_slope_max = field_slope_max(rep.field);
      rep.residual = fbode_residual(m, rep.traj, model_terminal(m), pool);
      if (cfg.picard.cone) rep.min_cone_margin = cone_margin(rep.traj, cfg.picard.cone->k0);
      if (!(rep.residual.max() <= cfg.residual_tol))
        throw SolverError("solve_global: residual " + std::to_string(rep.residual.max()) + " above tolerance",
                          rep.residual.max(), rep.sweep_history);
      return rep;
    } catch (const SolverError& e) {
      // only local non-contraction is cured by shorter intervals
      std::string w = e.what();
      if (w.rfind("picard_local", 0) != 0) throw;
      failures.push_back(e.last_residual);
      if (len == 1)
        throw SolverError("solve_global: no contraction even with single-step intervals", e.last_residual, failures);
      len = std::max(1, len / 2);
      ++halvings;
    }
  }
}

// max over nodes and particles of |X_A - X_B| + |Z_A - Z_B|
template <int Dx, int Da>
double agreement_check(const TrajectoryBundle<Dx, Da>& a, const TrajectoryBundle<Dx, Da>& b) {
  if (!(a.grid == b.grid) || a.N != b.N) throw ComparisonError("agreement_check: grids or particle counts differ");
  return detail::bundle_change(a, b);
}

template <int Dx, int Da>
double agreement_check(const GlobalSolveReport<Dx, Da>& a, const GlobalSolveReport<Dx, Da>& b) {
  return agreement_check(a.traj, b.traj);
}

}  // namespace mftc
