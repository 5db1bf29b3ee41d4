#pragma once

#include "mftc/control.hpp"
#include "mftc/parallel.hpp"

#include <functional>
#include <limits>
#include <numeric>
#include <optional>

namespace mftc {

struct TimeGrid {
  double t0 = 0.0, t1 = 1.0;
  int steps = 1;

  double dt() const { return steps > 0 ? (t1 - t0) / steps : 0.0; }
  double time(int k) const { return k == steps ? t1 : t0 + k * dt(); }
  int nodes() const { return steps + 1; }
  void validate() const {
    if (!std::isfinite(t0) || !std::isfinite(t1)) throw ConfigError("TimeGrid: non-finite endpoints");
    if (!(t1 > t0)) throw ConfigError("TimeGrid: t1 must exceed t0");
    if (steps < 1) throw ConfigError("TimeGrid: steps must be positive");
  }
  bool operator==(const TimeGrid& o) const { return t0 == o.t0 && t1 == o.t1 && steps == o.steps; }
};

// Flows on a time grid, stored node-major: entry (k, i) at k * N + i.
template <int Dx, int Da>
struct TrajectoryBundle {
  TimeGrid grid;
  std::size_t N = 0;
  std::vector<Vec<Dx>> X, Z;
  std::vector<Vec<Da>> alpha;

  std::size_t idx(int k, std::size_t i) const { return static_cast<std::size_t>(k) * N + i; }
  int nodes() const { return grid.nodes(); }
  ParticleMeasure<Dx> measure(int k) const {
    return ParticleMeasure<Dx>(std::vector<Vec<Dx>>(X.begin() + idx(k, 0), X.begin() + idx(k, 0) + N));
  }
  void resize(const TimeGrid& g, std::size_t n) {
    grid = g;
    N = n;
    X.assign(g.nodes() * n, Vec<Dx>::Zero());
    Z.assign(g.nodes() * n, Vec<Dx>::Zero());
    alpha.assign(g.nodes() * n, Vec<Da>::Zero());
  }
};

enum class FieldMode { field, trajectory };

// gamma sampled along a flow: at node k particle i sits at loc(k, i) with
// value val(k, i). In field mode (d_x = 1) each sample also carries the
// spatial slope of the field across particles, so the field can be
// evaluated off the sampled flow by the anchored linear form
//   gamma_i(s) + slope_i(s) (y - loc_i(s)).
// Trajectory mode has zero slope.
template <int Dx>
struct DecouplingFieldSample {
  using X = Vec<Dx>;
  using M = Mat<Dx, Dx>;
  TimeGrid grid;
  std::size_t N = 0;
  FieldMode mode = FieldMode::trajectory;
  std::vector<X> loc, val;
  std::vector<M> slope;

  std::size_t idx(int k, std::size_t i) const { return static_cast<std::size_t>(k) * N + i; }

  // Anchored evaluation at local time u (in steps from t0). Values between
  // nodes use cubic interpolation in time; at nodes the result is exact.
  X anchored(double u, std::size_t i, const X& y) const {
    CubicStencil st = cubic_stencil(grid.steps, u);
    X g = X::Zero(), l = X::Zero();
    M s = M::Zero();
    for (int j = 0; j < st.count; ++j) {
      std::size_t p = idx(st.first + j, i);
      g += st.w[j] * val[p];
      if (mode == FieldMode::field) {
        l += st.w[j] * loc[p];
        s += st.w[j] * slope[p];
      }
    }
    if (mode == FieldMode::field) g += s * (y - l);
    return g;
  }

  // Piecewise-linear interpolation across the particles at node k (d_x = 1
  // only). Outside the hull the end segments are extended linearly and
  // *extrapolated is set.
  X interpolate(int k, const X& y, bool* extrapolated = nullptr) const {
    if constexpr (Dx != 1) {
      throw CapabilityError("DecouplingFieldSample::interpolate is one-dimensional");
    } else {
      auto knots = sorted_knots(k);
      if (extrapolated) *extrapolated = false;
      if (knots.size() == 1) {
        if (extrapolated) *extrapolated = y(0) != knots[0].first;
        return X(knots[0].second);
      }
      double x = y(0);
      std::size_t j;
      if (x < knots.front().first) {
        j = 0;
        if (extrapolated) *extrapolated = true;
      } else if (x > knots.back().first) {
        j = knots.size() - 2;
        if (extrapolated) *extrapolated = true;
      } else {
        auto it = std::upper_bound(knots.begin(), knots.end(), x,
                                   [](double a, const std::pair<double, double>& b) { return a < b.first; });
        j = std::min<std::size_t>(std::max<std::ptrdiff_t>(it - knots.begin() - 1, 0), knots.size() - 2);
        if (x == knots[j].first) return X(knots[j].second);
      }
      double x0 = knots[j].first, x1 = knots[j + 1].first;
      double w = (x - x0) / (x1 - x0);
      return X((1.0 - w) * knots[j].second + w * knots[j + 1].second);
    }
  }

  // Distinct sorted (location, value) knots at node k; coincident particles
  // are merged with their mean value (d_x = 1).
  std::vector<std::pair<double, double>> sorted_knots(int k) const {
    std::vector<std::size_t> ord(N);
    std::iota(ord.begin(), ord.end(), 0);
    std::stable_sort(ord.begin(), ord.end(),
                     [&](std::size_t a, std::size_t b) { return loc[idx(k, a)](0) < loc[idx(k, b)](0); });
    std::vector<std::pair<double, double>> out;
    std::size_t p = 0;
    while (p < N) {
      std::size_t q = p;
      double x = loc[idx(k, ord[p])](0), s = 0.0;
      while (q < N && loc[idx(k, ord[q])](0) == x) s += val[idx(k, ord[q++])](0);
      out.emplace_back(x, s / double(q - p));
      p = q;
    }
    return out;
  }

  // Slopes of the field across particles at every node (field mode).
  // Each distinct knot gets the derivative of the quadratic through itself
  // and its neighbours (one-sided at the ends, secant for two knots, zero
  // for a single knot).
  void compute_slopes() {
    slope.assign(loc.size(), M::Zero());
    if (mode != FieldMode::field) return;
    if constexpr (Dx == 1) {
      for (int k = 0; k < grid.nodes(); ++k) {
        auto kn = sorted_knots(k);
        const std::size_t m = kn.size();
        std::vector<double> d(m, 0.0);
        auto quad_slope = [&](std::size_t a, std::size_t b, std::size_t c, std::size_t at) {
          double x0 = kn[a].first, x1 = kn[b].first, x2 = kn[c].first;
          double y0 = kn[a].second, y1 = kn[b].second, y2 = kn[c].second;
          double xa = kn[at].first;
          return y0 * ((xa - x1) + (xa - x2)) / ((x0 - x1) * (x0 - x2)) +
                 y1 * ((xa - x0) + (xa - x2)) / ((x1 - x0) * (x1 - x2)) +
                 y2 * ((xa - x0) + (xa - x1)) / ((x2 - x0) * (x2 - x1));
        };
        if (m == 2) {
          d[0] = d[1] = (kn[1].second - kn[0].second) / (kn[1].first - kn[0].first);
        } else if (m >= 3) {
          for (std::size_t j = 0; j < m; ++j) {
            std::size_t c = std::clamp<std::size_t>(j, 1, m - 2);
            d[j] = quad_slope(c - 1, c, c + 1, j);
          }
        }
        for (std::size_t i = 0; i < N; ++i) {
          double x = loc[idx(k, i)](0);
          auto it = std::lower_bound(kn.begin(), kn.end(), x,
                                     [](const std::pair<double, double>& a, double b) { return a.first < b; });
          slope[idx(k, i)](0, 0) = d[it - kn.begin()];
        }
      }
    }
  }

  // max over samples of |gamma| / (1 + |x| + |mu|_1)
  double weighted_sup_norm() const {
    double r = 0.0;
    for (int k = 0; k < grid.nodes(); ++k) {
      double m1 = 0.0;
      for (std::size_t i = 0; i < N; ++i) m1 += loc[idx(k, i)].norm();
      m1 /= double(N);
      for (std::size_t i = 0; i < N; ++i)
        r = std::max(r, val[idx(k, i)].norm() / (1.0 + loc[idx(k, i)].norm() + m1));
    }
    return r;
  }
};

// Terminal data for the backward equation: the adjoint value of every
// particle given the terminal measure (atoms in particle order).
template <int Dx>
using TerminalMap = std::function<void(const ParticleMeasure<Dx>&, std::vector<Vec<Dx>>&)>;

// p = d_x k + int d_mu k(y)(.) dmu(y)
template <int Dx, int Da>
TerminalMap<Dx> model_terminal(const Model<Dx, Da>& m) {
  return [&m](const ParticleMeasure<Dx>& mu, std::vector<Vec<Dx>>& out) {
    auto v = m.view(mu);
    m.terminal_adjoint(v, out);
  };
}

// Terminal data handed over from the initial node of a later interval.
template <int Dx>
TerminalMap<Dx> handoff_terminal(std::shared_ptr<const DecouplingFieldSample<Dx>> right) {
  return [right](const ParticleMeasure<Dx>& mu, std::vector<Vec<Dx>>& out) {
    out.resize(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) out[i] = right->anchored(0.0, i, mu[i]);
  };
}

struct PicardConfig {
  enum class Integrator { rk4, euler };
  enum class Mode { automatic, field, trajectory };
  double tol_gamma = 1e-10;
  int max_iter = 200;
  double omega = 1.0;
  Integrator integrator = Integrator::rk4;
  Mode mode = Mode::automatic;
  bool auto_relax = true;
  double omega_min = 0.125;
  int nonmonotone_limit = 3;
  double divergence_factor = 1e8;
  ControlSolveConfig control;
  std::optional<ConeParams> cone;

  void validate() const {
    if (!(tol_gamma > 0.0)) throw ConfigError("picard: tol_gamma must be positive");
    if (max_iter < 1) throw ConfigError("picard: max_iter must be >= 1");
    if (!(omega > 0.0 && omega <= 1.0)) throw ConfigError("picard: omega must lie in (0, 1]");
    if (!(omega_min > 0.0 && omega_min <= 1.0)) throw ConfigError("picard: omega_min must lie in (0, 1]");
    control.validate();
    if (cone && !(cone->k0 > 0.0)) throw ConfigError("picard: cone k0 must be positive");
  }
  template <int Dx>
  FieldMode field_mode() const {
    if (mode == Mode::field) {
      if (Dx != 1) throw ConfigError("picard: field mode needs a one-dimensional state");
      return FieldMode::field;
    }
    if (mode == Mode::trajectory) return FieldMode::trajectory;
    return Dx == 1 ? FieldMode::field : FieldMode::trajectory;
  }
};

// Source of the adjoint variable seen by the forward equation at local time
// u (in steps) for the particle positions of mu.
template <int Dx>
using ZSource = std::function<void(double u, const ParticleMeasure<Dx>& mu, std::vector<Vec<Dx>>& z)>;

template <int Dx>
ZSource<Dx> seed_source(const TerminalMap<Dx>& p) {
  return [p](double, const ParticleMeasure<Dx>& mu, std::vector<Vec<Dx>>& z) { p(mu, z); };
}

template <int Dx>
ZSource<Dx> field_source(std::shared_ptr<const DecouplingFieldSample<Dx>> f) {
  return [f](double u, const ParticleMeasure<Dx>& mu, std::vector<Vec<Dx>>& z) {
    z.resize(mu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) z[i] = f->anchored(u, i, mu[i]);
  };
}

namespace detail {

// Controls and drifts of all particles at one stage. `warm` holds one warm
// start per particle and is updated in place.
template <int Dx, int Da>
void stage_eval(const Model<Dx, Da>& m, const ParticleMeasure<Dx>& mu, const std::vector<Vec<Dx>>& z,
                const ControlSolveConfig& cc, std::vector<Vec<Da>>& warm,
                std::type_identity_t<std::vector<Vec<Da>>>* alpha_out,
                std::vector<Vec<Dx>>& drift, WorkerPool* pool) {
  const std::size_t n = mu.size();
  auto v = m.view(mu);
  drift.resize(n);
  parallel_for(pool, n, [&](std::size_t i) {
    Vec<Da> a = solve_alpha(m, mu[i], v, z[i], cc, &warm[i]);
    warm[i] = a;
    drift[i] = m.f(mu[i], v, a);
    if (!drift[i].allFinite()) throw NumericError("forward pass: non-finite drift", static_cast<long>(i));
  });
  if (alpha_out) *alpha_out = warm;
}

}  // namespace detail

// Integrates the forward equation dX/ds = f(X, X#m, alpha(X, X#m, z)) on the
// grid with z supplied by `src`. Z and alpha of the returned bundle are the
// values seen at the nodes.
template <int Dx, int Da>
TrajectoryBundle<Dx, Da> solve_forward(const Model<Dx, Da>& m, const TimeGrid& grid, const std::vector<Vec<Dx>>& x0,
                                       const ZSource<Dx>& src, const PicardConfig& cfg, WorkerPool* pool = nullptr,
                                       std::vector<Vec<Da>>* warm_io = nullptr) {
  using X = Vec<Dx>;
  const std::size_t n = x0.size();
  const int K = grid.steps;
  const double dt = grid.dt();
  TrajectoryBundle<Dx, Da> tb;
  tb.resize(grid, n);
  std::vector<Vec<Da>> warm = warm_io && warm_io->size() == n ? *warm_io : std::vector<Vec<Da>>(n, Vec<Da>::Zero());
  std::vector<X> Y = x0, z, k1, k2, k3, k4, tmp(n);
  std::vector<Vec<Da>> a_node;

  auto node_record = [&](int k, const ParticleMeasure<Dx>& mu, std::vector<X>& drift) {
    src(double(k), mu, z);
    try {
      detail::stage_eval(m, mu, z, cfg.control, warm, &a_node, drift, pool);
    } catch (const ConeViolation& e) {
      throw ConeViolation(std::string(e.what()) + " (node " + std::to_string(k) + ")", k, e.margin);
    }
    double m1 = mu.mean_abs_norm();
    for (std::size_t i = 0; i < n; ++i) {
      tb.X[tb.idx(k, i)] = mu[i];
      tb.Z[tb.idx(k, i)] = z[i];
      tb.alpha[tb.idx(k, i)] = a_node[i];
      if (cfg.cone) {
        auto c = cone_check<Dx>(mu[i], m1, z[i], *cfg.cone);
        if (!c.inside) throw ConeViolation("forward pass: cone violated at node " + std::to_string(k), k, c.margin);
      }
    }
  };
  auto stage = [&](double u, const std::vector<X>& pos, std::vector<X>& drift) {
    ParticleMeasure<Dx> mu(pos);
    src(u, mu, z);
    detail::stage_eval(m, mu, z, cfg.control, warm, nullptr, drift, pool);
  };

  for (int k = 0; k < K; ++k) {
    ParticleMeasure<Dx> mu(Y);
    node_record(k, mu, k1);
    if (cfg.integrator == PicardConfig::Integrator::euler) {
      for (std::size_t i = 0; i < n; ++i) Y[i] += dt * k1[i];
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) tmp[i] = Y[i] + 0.5 * dt * k1[i];
    stage(k + 0.5, tmp, k2);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = Y[i] + 0.5 * dt * k2[i];
    stage(k + 0.5, tmp, k3);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = Y[i] + dt * k3[i];
    stage(k + 1.0, tmp, k4);
    for (std::size_t i = 0; i < n; ++i) Y[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
  }
  ParticleMeasure<Dx> muK(Y);
  node_record(K, muK, k1);
  if (warm_io) *warm_io = warm;
  return tb;
}

// Adjoint integrand Phi_i = d_x f_i^T Z_i + d_x g_i + measure terms at every
// node, node-major.
template <int Dx, int Da>
std::vector<Vec<Dx>> adjoint_integrand(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb,
                                       WorkerPool* pool = nullptr) {
  const std::size_t n = tb.N;
  std::vector<Vec<Dx>> phi(tb.X.size());
  std::vector<Vec<Dx>> Zk(n), meas;
  std::vector<Vec<Da>> Ak(n);
  for (int k = 0; k < tb.nodes(); ++k) {
    auto mu = tb.measure(k);
    auto v = m.view(mu);
    for (std::size_t i = 0; i < n; ++i) {
      Zk[i] = tb.Z[tb.idx(k, i)];
      Ak[i] = tb.alpha[tb.idx(k, i)];
    }
    m.adjoint_measure_terms(v, Zk, Ak, meas);
    parallel_for(pool, n, [&](std::size_t i) {
      phi[tb.idx(k, i)] = m.fx(mu[i], v, Ak[i]).transpose() * Zk[i] + m.gx(mu[i], v, Ak[i]) + meas[i];
    });
  }
  return phi;
}

// gamma_new(k, i) = p_i(X_K) + int_{t_k}^{T} Phi_i, where Phi uses the Z
// stored in the bundle (the previous field along the current flow).
template <int Dx, int Da>
std::vector<Vec<Dx>> backward_values(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb,
                                     const TerminalMap<Dx>& p, WorkerPool* pool = nullptr) {
  using X = Vec<Dx>;
  const std::size_t n = tb.N;
  const int K = tb.grid.steps;
  auto phi = adjoint_integrand(m, tb, pool);
  std::vector<X> pT;
  p(tb.measure(K), pT);
  std::vector<X> out(tb.X.size());
  parallel_for(pool, n, [&](std::size_t i) {
    std::vector<X> fw, tail;
    cumulative_quadrature<X>(
        K, tb.grid.dt(), [&](int k) -> X { return phi[tb.idx(k, i)]; }, fw, tail, X::Zero());
    for (int k = 0; k < K; ++k) out[tb.idx(k, i)] = pT[i] + tail[k];
    out[tb.idx(K, i)] = pT[i];
  });
  return out;
}

// Builds the next field from a forward bundle and relaxed values.
template <int Dx, int Da>
DecouplingFieldSample<Dx> make_field(const TrajectoryBundle<Dx, Da>& tb, std::vector<Vec<Dx>> values,
                                     FieldMode mode) {
  DecouplingFieldSample<Dx> f;
  f.grid = tb.grid;
  f.N = tb.N;
  f.mode = mode;
  f.loc = tb.X;
  f.val = std::move(values);
  f.compute_slopes();
  return f;
}

// Relaxed backward update omega * new + (1 - omega) * previous, where the
// previous field is read along the bundle (its Z).
template <int Dx, int Da>
DecouplingFieldSample<Dx> backward_update_gamma(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb,
                                                const TerminalMap<Dx>& p, const PicardConfig& cfg,
                                                double omega, WorkerPool* pool = nullptr) {
  auto g = backward_values(m, tb, p, pool);
  if (omega != 1.0)
    for (std::size_t q = 0; q < g.size(); ++q) g[q] = omega * g[q] + (1.0 - omega) * tb.Z[q];
  return make_field(tb, std::move(g), cfg.field_mode<Dx>());
}

// |||gamma - Z|||_1 along the bundle
template <int Dx, int Da>
double weighted_gap(const TrajectoryBundle<Dx, Da>& tb, const std::vector<Vec<Dx>>& g) {
  double r = 0.0;
  for (int k = 0; k < tb.nodes(); ++k) {
    double m1 = 0.0;
    for (std::size_t i = 0; i < tb.N; ++i) m1 += tb.X[tb.idx(k, i)].norm();
    m1 /= double(tb.N);
    for (std::size_t i = 0; i < tb.N; ++i) {
      std::size_t q = tb.idx(k, i);
      double d = (g[q] - tb.Z[q]).norm() / (1.0 + tb.X[q].norm() + m1);
      if (!std::isfinite(d)) return std::numeric_limits<double>::infinity();
      r = std::max(r, d);
    }
  }
  return r;
}

template <int Dx, int Da>
struct PicardResult {
  TrajectoryBundle<Dx, Da> traj;
  std::shared_ptr<const DecouplingFieldSample<Dx>> field;
  int iters = 0;
  std::vector<double> history;
  double omega_final = 1.0;
  int relax_events = 0;
};

// Re-solves the controls for given (X, Z) nodes; used after convergence so
// that the stored alpha satisfies the first-order condition with the final Z.
template <int Dx, int Da>
void recompute_alpha(const Model<Dx, Da>& m, TrajectoryBundle<Dx, Da>& tb, const ControlSolveConfig& cc,
                     WorkerPool* pool = nullptr) {
  for (int k = 0; k < tb.nodes(); ++k) {
    auto mu = tb.measure(k);
    auto v = m.view(mu);
    parallel_for(pool, tb.N, [&](std::size_t i) {
      std::size_t q = tb.idx(k, i);
      Vec<Da> w = tb.alpha[q];
      tb.alpha[q] = solve_alpha(m, tb.X[q], v, tb.Z[q], cc, &w);
    });
  }
}

// Local Picard iteration on one interval: forward pass against the current
// field, backward update, relaxation, until the weighted sup change drops
// below tol_gamma. `initial` optionally replaces the seed gamma = p.
template <int Dx, int Da>
PicardResult<Dx, Da> picard_local(const Model<Dx, Da>& m, const TimeGrid& grid, const std::vector<Vec<Dx>>& x0,
                                  const TerminalMap<Dx>& p, const PicardConfig& cfg, WorkerPool* pool = nullptr,
                                  std::shared_ptr<const DecouplingFieldSample<Dx>> initial = nullptr) {
  cfg.validate();
  if (x0.empty()) throw ConfigError("picard_local: no particles");
  PicardResult<Dx, Da> res;
  const std::size_t n = x0.size();
  const FieldMode mode = cfg.field_mode<Dx>();

  if (grid.t1 == grid.t0) {
    TimeGrid g0{grid.t0, grid.t1, 0};
    res.traj.grid = g0;
    res.traj.N = n;
    res.traj.X = x0;
    ParticleMeasure<Dx> mu(x0);
    p(mu, res.traj.Z);
    res.traj.alpha.assign(n, Vec<Da>::Zero());
    recompute_alpha(m, res.traj, cfg.control, pool);
    auto f = std::make_shared<DecouplingFieldSample<Dx>>();
    f->grid = g0;
    f->N = n;
    f->mode = mode;
    f->loc = x0;
    f->val = res.traj.Z;
    f->compute_slopes();
    res.field = f;
    res.iters = 1;
    res.history = {0.0};
    return res;
  }
  grid.validate();

  double omega = cfg.omega;
  int nonmono = 0;
  std::vector<Vec<Da>> warm(n, Vec<Da>::Zero());
  ZSource<Dx> src = initial ? field_source<Dx>(initial) : seed_source<Dx>(p);
  for (int it = 0; it < cfg.max_iter; ++it) {
    auto tb = solve_forward(m, grid, x0, src, cfg, pool, &warm);
    auto g = backward_values(m, tb, p, pool);
    double gap = weighted_gap(tb, g);
    res.history.push_back(gap);
    const std::size_t h = res.history.size();
    if (!std::isfinite(gap) || (h > 1 && gap > cfg.divergence_factor * std::max(res.history[0], 1e-300)))
      throw SolverError("picard_local: iteration diverged", gap, res.history);
    if (gap <= cfg.tol_gamma) {
      tb.Z = g;
      recompute_alpha(m, tb, cfg.control, pool);
      res.traj = std::move(tb);
      res.field = std::make_shared<DecouplingFieldSample<Dx>>(make_field(res.traj, std::move(g), mode));
      res.iters = it + 1;
      res.omega_final = omega;
      return res;
    }
    if (cfg.auto_relax && h > 1 && gap > res.history[h - 2]) {
      if (++nonmono >= cfg.nonmonotone_limit && omega > cfg.omega_min) {
        omega = std::max(cfg.omega_min, 0.5 * omega);
        nonmono = 0;
        ++res.relax_events;
      }
    }
    if (omega != 1.0)
      for (std::size_t q = 0; q < g.size(); ++q) g[q] = omega * g[q] + (1.0 - omega) * tb.Z[q];
    src = field_source<Dx>(std::make_shared<const DecouplingFieldSample<Dx>>(make_field(tb, std::move(g), mode)));
  }
  throw SolverError("picard_local: no contraction within max_iter", res.history.back(), res.history);
}

struct FbodeResidual {
  double forward = 0.0, backward = 0.0, terminal = 0.0;
  double max() const { return std::max({forward, backward, terminal}); }
};

// Integral-form residuals of a bundle with the same quadrature as the
// backward update:
//   forward  max |X_k - X_0 - int_{t_0}^{t_k} f|
//   backward max |Z_k - p(X_K) - int_{t_k}^{T} Phi|
//   terminal max |Z_K - p(X_K)|
template <int Dx, int Da>
FbodeResidual fbode_residual(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb, const TerminalMap<Dx>& p,
                             WorkerPool* pool = nullptr) {
  using X = Vec<Dx>;
  FbodeResidual r;
  const int K = tb.grid.steps;
  const std::size_t n = tb.N;
  std::vector<X> pT;
  p(tb.measure(K), pT);
  for (std::size_t i = 0; i < n; ++i) r.terminal = std::max(r.terminal, (tb.Z[tb.idx(K, i)] - pT[i]).norm());
  if (K == 0) return r;
  std::vector<X> drift(tb.X.size());
  for (int k = 0; k <= K; ++k) {
    auto mu = tb.measure(k);
    auto v = m.view(mu);
    for (std::size_t i = 0; i < n; ++i) drift[tb.idx(k, i)] = m.f(mu[i], v, tb.alpha[tb.idx(k, i)]);
  }
  auto phi = adjoint_integrand(m, tb, pool);
  const double dt = tb.grid.dt();
  std::vector<double> fmax(n, 0.0), bmax(n, 0.0);
  parallel_for(pool, n, [&](std::size_t i) {
    std::vector<X> fw, tail, fw2, tail2;
    cumulative_quadrature<X>(
        K, dt, [&](int k) -> X { return drift[tb.idx(k, i)]; }, fw, tail, X::Zero());
    cumulative_quadrature<X>(
        K, dt, [&](int k) -> X { return phi[tb.idx(k, i)]; }, fw2, tail2, X::Zero());
    for (int k = 0; k <= K; ++k) {
      fmax[i] = std::max(fmax[i], (tb.X[tb.idx(k, i)] - tb.X[tb.idx(0, i)] - fw[k]).norm());
      bmax[i] = std::max(bmax[i], (tb.Z[tb.idx(k, i)] - pT[i] - tail2[k]).norm());
    }
  });
  for (std::size_t i = 0; i < n; ++i) {
    r.forward = std::max(r.forward, fmax[i]);
    r.backward = std::max(r.backward, bmax[i]);
  }
  return r;
}

}  // namespace mftc
