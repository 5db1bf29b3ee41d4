#pragma once

#include "mftc/constants.hpp"
#include "mftc/deriv_check.hpp"
#include "mftc/global.hpp"
#include "mftc/sensitivity.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace mftc {

// ---------------------------------------------------------------- anchors

// Values at (0, delta_0, 0) that enter the growth constants.
template <int Dx, int Da>
ModelAnchors model_anchors(const Model<Dx, Da>& m, const ControlSolveConfig& cc = {}) {
  using X = Vec<Dx>;
  using A = Vec<Da>;
  auto d0 = ParticleMeasure<Dx>::dirac(X::Zero());
  auto v = m.view(d0);
  const X x = X::Zero();
  const A a = A::Zero();
  ModelAnchors r;
  r.f0 = m.f(x, v, a).norm();
  r.gm0 = m.gm(x, v, a, x).norm();
  r.gx0 = m.gx(x, v, a).norm();
  r.ga0 = m.ga(x, v, a).norm();
  r.km0 = m.km(x, v, x).norm();
  r.kx0 = m.kx(x, v).norm();
  r.alpha0 = solve_alpha(m, x, v, X::Zero().eval(), cc).norm();
  std::vector<X> p;
  m.terminal_adjoint(v, p);
  r.p0 = p[0].norm();
  r.model_supplied = true;
  return r;
}

// ---------------------------------------------------------------- assumptions

struct SamplingSpec {
  int n_points = 1000;
  double radius = 5.0;
  unsigned seed = 20240601;
  int max_atoms = 6;
  double tolerance = 1e-9;
  // step of the difference quotients that estimate Lipschitz constants
  double lip_step = 1e-4;

  void validate() const {
    if (n_points < 1) throw ConfigError("sampling: n_points must be >= 1");
    if (!(radius > 0.0) || !std::isfinite(radius)) throw ConfigError("sampling: radius must be positive");
    if (max_atoms < 1) throw ConfigError("sampling: max_atoms must be >= 1");
    if (!(tolerance >= 0.0)) throw ConfigError("sampling: tolerance must be nonnegative");
    if (!(lip_step > 0.0)) throw ConfigError("sampling: lip_step must be positive");
  }
};

struct AssumptionRecord {
  std::string name;
  std::string description;
  bool sampled = true;
  // smallest (constant - observed) over the probes; negative means violated
  double worst_margin = std::numeric_limits<double>::infinity();
  // observed extreme value (for information)
  double value = std::numeric_limits<double>::quiet_NaN();
  std::map<std::string, std::vector<double>> witness;
  bool pass = true;
};

struct AssumptionReport {
  std::string model;
  ModelConstants declared;
  double tolerance = 1e-9;
  int probes = 0;
  std::vector<AssumptionRecord> records;

  bool pass() const {
    for (const auto& r : records)
      if (!r.pass) return false;
    return true;
  }
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& r : records)
      if (!r.pass) out.push_back(r.name);
    return out;
  }
  const AssumptionRecord& at(const std::string& name) const {
    for (const auto& r : records)
      if (r.name == name) return r;
    throw std::out_of_range("AssumptionReport: no record '" + name + "'");
  }
};

namespace detail {

template <int R, int C>
double opnorm(const Mat<R, C>& a) {
  if constexpr (R == 1 || C == 1) {
    return a.norm();
  } else {
    return Eigen::JacobiSVD<Mat<R, C>>(a).singularValues()(0);
  }
}

// Operator norm of a bilinear map with components T[k]. Exact for a single
// component; otherwise the upper bound sqrt(sum_k |T_k|^2).
template <class M, std::size_t n>
double opnorm(const std::array<M, n>& t) {
  if constexpr (n == 1) {
    return opnorm(t[0]);
  } else {
    double s = 0.0;
    for (const auto& c : t) s += opnorm(c) * opnorm(c);
    return std::sqrt(s);
  }
}

template <int Dx, int Da>
struct Probe {
  Vec<Dx> x, xt, xh;
  Vec<Da> alpha;
  std::vector<Vec<Dx>> atoms, xtilde;
};

template <int D>
std::vector<double> to_list(const Vec<D>& v) {
  return std::vector<double>(v.data(), v.data() + D);
}
template <int D>
std::vector<double> to_list(const std::vector<Vec<D>>& vs) {
  std::vector<double> out;
  for (const auto& v : vs) out.insert(out.end(), v.data(), v.data() + D);
  return out;
}

template <int Dx, int Da>
std::map<std::string, std::vector<double>> witness_of(const Probe<Dx, Da>& p) {
  return {{"x", to_list(p.x)},         {"alpha", to_list(p.alpha)}, {"xt", to_list(p.xt)},
          {"xh", to_list(p.xh)},       {"atoms", to_list(p.atoms)}, {"xtilde", to_list(p.xtilde)}};
}

// Keeps the smallest margin and its witness.
struct Tracker {
  AssumptionRecord rec;
  template <class W>
  void see(double margin, W&& witness) {
    if (!std::isfinite(margin)) margin = -std::numeric_limits<double>::infinity();
    if (rec.witness.empty() || margin < rec.worst_margin) {
      rec.worst_margin = margin;
      rec.witness = witness();
    }
  }
};

// All second derivatives of f that (a1)(iii) bounds, as operator norms.
template <int Dx, int Da>
double f_second_sup(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v, const Vec<Da>& a,
                    const Vec<Dx>& xt, const Vec<Dx>& xh) {
  return std::max({opnorm(m.fmm(x, v, a, xt, xh)), opnorm(m.faa(x, v, a)), opnorm(m.fam(x, v, a, xt)),
                   opnorm(m.fax(x, v, a)), opnorm(m.fxx(x, v, a)), opnorm(m.fxtm(x, v, a, xt)),
                   opnorm(m.fxm(x, v, a, xt))});
}

template <int Dx, int Da>
Eigen::VectorXd f_second_stack(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v,
                               const Vec<Da>& a, const Vec<Dx>& xt, const Vec<Dx>& xh) {
  std::vector<Eigen::VectorXd> parts{flat(m.fmm(x, v, a, xt, xh)), flat(m.faa(x, v, a)),
                                     flat(m.fam(x, v, a, xt)),     flat(m.fax(x, v, a)),
                                     flat(m.fxx(x, v, a)),         flat(m.fxtm(x, v, a, xt)),
                                     flat(m.fxm(x, v, a, xt))};
  Eigen::Index n = 0;
  for (auto& p : parts) n += p.size();
  Eigen::VectorXd out(n);
  n = 0;
  for (auto& p : parts) {
    out.segment(n, p.size()) = p;
    n += p.size();
  }
  return out;
}

template <int D>
double lam_min(const Mat<D, D>& a) {
  Eigen::SelfAdjointEigenSolver<Mat<D, D>> es(0.5 * (a + a.transpose()));
  return es.eigenvalues().minCoeff();
}

}  // namespace detail

// Samples the structural inequalities of the model at random probes and
// compares them with the declared constants.
template <int Dx, int Da>
AssumptionReport check_assumptions(const Model<Dx, Da>& m, const SamplingSpec& spec = {}) {
  using X = Vec<Dx>;
  using A = Vec<Da>;
  using MXX = Mat<Dx, Dx>;
  using detail::opnorm;
  spec.validate();
  const ModelConstants mc = m.constants();
  AssumptionReport rep;
  rep.model = m.name();
  rep.declared = mc;
  rep.tolerance = spec.tolerance;
  rep.probes = spec.n_points;

  auto make = [](const char* name, const char* desc) {
    detail::Tracker t;
    t.rec.name = name;
    t.rec.description = desc;
    return t;
  };
  detail::Tracker a1i = make("a1.i", "lambda_min(d_a f d_a f^T) >= lambda_f");
  detail::Tracker a1ii = make("a1.ii", "first derivatives of f bounded by Lambda_f");
  detail::Tracker a1iii = make("a1.iii", "second derivatives of f times (1+|x|+|mu|_1) bounded by lbar_f");
  detail::Tracker a1iv = make("a1.iv", "second derivatives of f Lipschitz with decaying constant (estimate)");
  detail::Tracker a2i = make("a2.i", "d_a d_a g >= lambda_g");
  detail::Tracker a2iia = make("a2.ii.a", "d_x d_x G >= lambda_g");
  detail::Tracker a2iib = make("a2.ii.b", "displacement monotonicity of g: triple sum >= -l_g |Xtilde|^2");
  detail::Tracker a2iiia = make("a2.iii.a", "second derivatives of g bounded by Lambda_g");
  detail::Tracker a2iiib = make("a2.iii.b", "mixed control derivatives of g bounded by lbar_g");
  detail::Tracker a3ia = make("a3.i.a", "d_x d_x K >= lambda_k");
  detail::Tracker a3ib = make("a3.i.b", "displacement monotonicity of k: triple sum >= -l_k |Xtilde|^2");
  detail::Tracker a3ii = make("a3.ii", "second derivatives of k bounded by Lambda_k");

  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> box(-spec.radius, spec.radius);
  std::uniform_int_distribution<int> natoms(1, spec.max_atoms);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto rand_x = [&] {
    X v;
    for (int i = 0; i < Dx; ++i) v(i) = box(rng);
    return v;
  };
  auto rand_a = [&] {
    A v;
    for (int i = 0; i < Da; ++i) v(i) = box(rng);
    return v;
  };

  double a1i_min = std::numeric_limits<double>::infinity(), a1ii_max = 0, a1iii_max = 0, a1iv_max = 0;
  double a2i_min = a1i_min, a2iia_min = a1i_min, a2iib_min = a1i_min, a2iiia_max = 0, a2iiib_max = 0;
  double a3ia_min = a1i_min, a3ib_min = a1i_min, a3ii_max = 0;

  for (int p = 0; p < spec.n_points; ++p) {
    detail::Probe<Dx, Da> pr;
    pr.x = rand_x();
    pr.alpha = rand_a();
    const int n = natoms(rng);
    pr.atoms.resize(n);
    for (auto& y : pr.atoms) y = rand_x();
    // the first probe sits at the origin with delta_0
    if (p == 0) {
      pr.x.setZero();
      pr.alpha.setZero();
      pr.atoms.assign(1, X::Zero());
    }
    pr.xt = (p % 2 == 0) ? pr.atoms[0] : rand_x();
    pr.xh = (p % 3 == 0) ? pr.atoms.back() : rand_x();
    pr.xtilde.resize(n);
    // every fourth probe uses a rigid translation, the extremal direction
    // for mean-field couplings
    X shift;
    for (int i = 0; i < Dx; ++i) shift(i) = gauss(rng);
    for (auto& t : pr.xtilde) {
      if (p % 4 == 1) {
        t = shift;
      } else {
        for (int i = 0; i < Dx; ++i) t(i) = gauss(rng);
      }
    }
    ParticleMeasure<Dx> mu(pr.atoms);
    auto v = m.view(mu);
    const double mu1 = mu.mean_abs_norm();
    const X& x = pr.x;
    const A& a = pr.alpha;
    auto wit = [&] { return detail::witness_of(pr); };

    // (a1)
    auto fa = m.fa(x, v, a);
    double l = detail::lam_min<Dx>(MXX(fa * fa.transpose()));
    a1i_min = std::min(a1i_min, l);
    a1i.see(l - mc.lambda_f, wit);
    double d1 = std::max({opnorm(fa), opnorm(m.fm(x, v, a, pr.xt)), opnorm(m.fx(x, v, a))});
    a1ii_max = std::max(a1ii_max, d1);
    a1ii.see(mc.Lambda_f - d1, wit);
    double weight = 1.0 + x.norm() + mu1;
    double d2 = detail::f_second_sup(m, x, v, a, pr.xt, pr.xh) * weight;
    a1iii_max = std::max(a1iii_max, d2);
    a1iii.see(mc.lbar_f - d2, wit);

    {
      // difference quotient of the stacked second derivatives
      const double h = spec.lip_step;
      auto jig = [&](auto& vec) {
        for (int i = 0; i < vec.size(); ++i) vec(i) += h * gauss(rng);
      };
      X x2 = x, xt2 = pr.xt, xh2 = pr.xh;
      A a2 = a;
      jig(x2);
      jig(xt2);
      jig(xh2);
      jig(a2);
      auto atoms2 = pr.atoms;
      double w2 = 0.0;
      for (auto& y : atoms2) {
        X old = y;
        jig(y);
        w2 += (y - old).squaredNorm();
      }
      w2 = std::sqrt(w2 / double(n));  // coupling bound on W_2
      ParticleMeasure<Dx> mu2(atoms2);
      auto v2 = m.view(mu2);
      Eigen::VectorXd s1 = detail::f_second_stack(m, x, v, a, pr.xt, pr.xh);
      Eigen::VectorXd s2 = detail::f_second_stack(m, x2, v2, a2, xt2, xh2);
      double dist = (x2 - x).norm() + w2 + (a2 - a).norm() + (xt2 - pr.xt).norm() + (xh2 - pr.xh).norm();
      double wmax = 1.0 + std::max(x.norm(), x2.norm()) + std::max(mu1, mu2.mean_abs_norm());
      double lip = (s2 - s1).lpNorm<Eigen::Infinity>() * wmax / dist;
      a1iv_max = std::max(a1iv_max, lip);
      a1iv.see(std::isfinite(lip) ? 0.0 : -std::numeric_limits<double>::infinity(), wit);
    }

    // (a2)
    double gaa = detail::lam_min<Da>(m.gaa(x, v, a));
    a2i_min = std::min(a2i_min, gaa);
    a2i.see(gaa - mc.lambda_g, wit);

    MXX Gxx = m.gxx(x, v, a) + pairwise_mean<MXX>(mu.size(), [&](std::size_t j) -> MXX {
                return m.gxtm(mu[j], v, a, x);
              });
    double gx = detail::lam_min<Dx>(Gxx);
    a2iia_min = std::min(a2iia_min, gx);
    a2iia.see(gx - mc.lambda_g, wit);

    const std::size_t N = mu.size();
    const auto& Xt = pr.xtilde;
    double xnorm2 = pairwise_mean<double>(N, [&](std::size_t i) { return Xt[i].squaredNorm(); });
    auto triple = [&](auto&& xm, auto&& mm) {
      // 2 (1/N^2) sum_{i,r} Xt_r^T xm(X_i; X_r) Xt_i + (1/N^3) sum_{l,i,r} Xt_i^T mm(X_l; X_i, X_r) Xt_r
      double s = pairwise_mean<double>(N, [&](std::size_t i) {
        return pairwise_mean<double>(N, [&](std::size_t r) {
          double t = 2.0 * Xt[r].dot(xm(mu[i], mu[r]) * Xt[i]);
          t += pairwise_mean<double>(N, [&](std::size_t l) { return Xt[i].dot(mm(mu[l], mu[i], mu[r]) * Xt[r]); });
          return t;
        });
      });
      return s / xnorm2;
    };
    double tg = triple([&](const X& y, const X& yt) -> MXX { return m.gxm(y, v, a, yt); },
                       [&](const X& y, const X& yt, const X& yh) -> MXX { return m.gmm(y, v, a, yt, yh); });
    a2iib_min = std::min(a2iib_min, tg);
    a2iib.see(tg + mc.l_g, wit);

    double g2 = std::max({opnorm(m.gmm(x, v, a, pr.xt, pr.xh)), opnorm(m.gaa(x, v, a)), opnorm(m.gxm(x, v, a, pr.xt)),
                          opnorm(m.gxx(x, v, a)), opnorm(m.gxtm(x, v, a, pr.xt))});
    a2iiia_max = std::max(a2iiia_max, g2);
    a2iiia.see(mc.Lambda_g - g2, wit);
    double g3 = std::max(opnorm(m.gax(x, v, a)), opnorm(m.gam(x, v, a, pr.xt)));
    a2iiib_max = std::max(a2iiib_max, g3);
    a2iiib.see(mc.lbar_g - g3, wit);

    // (a3)
    MXX Kxx = m.kxx(x, v) + pairwise_mean<MXX>(N, [&](std::size_t j) -> MXX { return m.kxtm(mu[j], v, x); });
    double kx = detail::lam_min<Dx>(Kxx);
    a3ia_min = std::min(a3ia_min, kx);
    a3ia.see(kx - mc.lambda_k, wit);
    double tk = triple([&](const X& y, const X& yt) -> MXX { return m.kxm(y, v, yt); },
                       [&](const X& y, const X& yt, const X& yh) -> MXX { return m.kmm(y, v, yt, yh); });
    a3ib_min = std::min(a3ib_min, tk);
    a3ib.see(tk + mc.l_k, wit);
    double k2 = std::max({opnorm(m.kmm(x, v, pr.xt, pr.xh)), opnorm(m.kxm(x, v, pr.xt)), opnorm(m.kxx(x, v)),
                          opnorm(m.kxtm(x, v, pr.xt))});
    a3ii_max = std::max(a3ii_max, k2);
    a3ii.see(mc.Lambda_k - k2, wit);
  }

  a1i.rec.value = a1i_min;
  a1ii.rec.value = a1ii_max;
  a1iii.rec.value = a1iii_max;
  a1iv.rec.value = a1iv_max;
  a2i.rec.value = a2i_min;
  a2iia.rec.value = a2iia_min;
  a2iib.rec.value = a2iib_min;
  a2iiia.rec.value = a2iiia_max;
  a2iiib.rec.value = a2iiib_max;
  a3ia.rec.value = a3ia_min;
  a3ib.rec.value = a3ib_min;
  a3ii.rec.value = a3ii_max;

  for (auto* t : {&a1i, &a1ii, &a1iii, &a1iv, &a2i, &a2iia, &a2iib, &a2iiia, &a2iiib, &a3ia, &a3ib, &a3ii})
    rep.records.push_back(t->rec);

  auto fixed = [&](const char* name, const char* desc, double margin, double value,
                   std::map<std::string, std::vector<double>> w = {}) {
    AssumptionRecord r;
    r.name = name;
    r.description = desc;
    r.sampled = false;
    r.worst_margin = margin;
    r.value = value;
    r.witness = std::move(w);
    rep.records.push_back(r);
  };
  fixed("a2.ii.l_g", "l_g <= lambda_g / 2", 0.5 * mc.lambda_g - mc.l_g, mc.l_g);
  fixed("a3.i.l_k", "l_k <= lambda_k / 2", 0.5 * mc.lambda_k - mc.l_k, mc.l_k);

  {
    // (h1) at the origin with delta_0
    auto d0 = ParticleMeasure<Dx>::dirac(X::Zero());
    auto v = m.view(d0);
    const X z = X::Zero();
    const A a0 = A::Zero();
    double worst = std::max({m.f(z, v, a0).norm(), m.gx(z, v, a0).norm(), m.ga(z, v, a0).norm(),
                             m.gm(z, v, a0, z).norm(), m.kx(z, v).norm(), m.km(z, v, z).norm()});
    fixed("h1", "f, d_x g, d_a g, d_mu g, d_x k, d_mu k vanish at (0, delta_0, 0)", -worst, worst,
          {{"x", detail::to_list(z)}, {"alpha", detail::to_list(a0)}, {"atoms", detail::to_list(z)}});
  }
  {
    auto cr = compute_constants(mc);
    fixed("h2.lbar_g", "8 lbar_g <= lambda_g", mc.lambda_g - 8.0 * mc.lbar_g, mc.lbar_g);
    fixed("h2.lbar_f", "lbar_f <= lambda_g / (40 max(Lbar_k, L*_0))", cr.h2_lbar_f_max - mc.lbar_f, mc.lbar_f);
  }

  for (auto& r : rep.records) r.pass = r.worst_margin >= -spec.tolerance;
  return rep;
}

// ---------------------------------------------------------------- value function

// v(t0, m) = avg k(X_T, mu_T) + int avg g(X_s, mu_s, alpha_s) ds with the
// same cumulative rule as the backward update.
template <int Dx, int Da>
double value_function(const TrajectoryBundle<Dx, Da>& tb, const Model<Dx, Da>& m) {
  const int K = tb.grid.steps;
  const std::size_t N = tb.N;
  std::vector<double> run(K + 1);
  for (int k = 0; k <= K; ++k) {
    auto mu = tb.measure(k);
    auto v = m.view(mu);
    run[k] = pairwise_mean<double>(N, [&](std::size_t i) { return m.g(mu[i], v, tb.alpha[tb.idx(k, i)]); });
  }
  auto muT = tb.measure(K);
  auto vT = m.view(muT);
  double term = pairwise_mean<double>(N, [&](std::size_t i) { return m.k(muT[i], vT); });
  if (K == 0) return term;
  std::vector<double> fw, tail;
  cumulative_quadrature<double>(K, tb.grid.dt(), [&](int k) { return run[k]; }, fw, tail, 0.0);
  return term + tail[0];
}

template <int Dx, int Da>
double value_function(const GlobalSolveReport<Dx, Da>& rep, const Model<Dx, Da>& m) {
  return value_function(rep.traj, m);
}

// ---------------------------------------------------------------- identities

struct IdentityCheck {
  double max_deviation = 0.0;
  std::size_t worst_atom = 0;
  int worst_direction = 0;
  double h = 0.0;
};

// Forward difference of v(0, .) under moving atom i by h e against
// Z_0(x_i) e / N. The deviation is first order in h.
template <int Dx, int Da>
IdentityCheck dmv_identity_check(double T, const ParticleMeasure<Dx>& mu, const Model<Dx, Da>& m,
                                 const GlobalConfig& cfg, double h, std::vector<std::size_t> atoms = {},
                                 WorkerPool* pool = nullptr) {
  if (!(h > 0.0) || !std::isfinite(h)) throw ConfigError("dmv_identity_check: h must be positive");
  if (atoms.empty())
    for (std::size_t i = 0; i < mu.size(); ++i) atoms.push_back(i);
  for (auto i : atoms)
    if (i >= mu.size()) throw ConfigError("dmv_identity_check: atom index out of range");
  auto base = solve_global(m, T, mu, cfg, pool);
  const double v0 = value_function(base, m);
  const double N = double(mu.size());
  const std::size_t jobs = atoms.size() * Dx;
  std::vector<double> dev(jobs);
  parallel_for(pool, jobs, [&](std::size_t q) {
    std::size_t i = atoms[q / Dx];
    int c = int(q % Dx);
    Vec<Dx> e = Vec<Dx>::Unit(c);
    auto rep = solve_global(m, T, mu.perturb_atom(i, h * e), cfg);
    double fd = (value_function(rep, m) - v0) / h;
    dev[q] = std::abs(fd - base.traj.Z[base.traj.idx(0, i)](c) / N);
  });
  IdentityCheck r;
  r.h = h;
  for (std::size_t q = 0; q < jobs; ++q)
    if (dev[q] > r.max_deviation || q == 0) {
      r.max_deviation = dev[q];
      r.worst_atom = atoms[q / Dx];
      r.worst_direction = int(q % Dx);
    }
  return r;
}

struct BellmanCheck {
  double residual = 0.0;
  double dvdt = 0.0;
  double hamiltonian_avg = 0.0;
  double v_t0 = 0.0, v_t1 = 0.0;
};

// |d_t v + avg (f . Z_0 + g)| at t = 0 with a one-sided difference in t.
// The model is autonomous, so v(ht, m) on [ht, T] is the value on a
// horizon of T - ht.
template <int Dx, int Da>
BellmanCheck bellman_residual(double T, const ParticleMeasure<Dx>& mu, const Model<Dx, Da>& m,
                              const GlobalConfig& cfg, double ht, WorkerPool* pool = nullptr) {
  if (!(ht > 0.0) || !(ht < T)) throw ConfigError("bellman_residual: ht must lie in (0, T)");
  double steps = ht / cfg.dt;
  if (std::abs(steps - std::round(steps)) > 1e-9 * std::max(1.0, steps))
    throw ConfigError("bellman_residual: ht must be a whole number of time steps");
  auto a = solve_global(m, T, mu, cfg, pool);
  auto b = solve_global(m, T - ht, mu, cfg, pool);
  BellmanCheck r;
  r.v_t0 = value_function(a, m);
  r.v_t1 = value_function(b, m);
  r.dvdt = (r.v_t1 - r.v_t0) / ht;
  auto v = m.view(mu);
  const auto& tb = a.traj;
  r.hamiltonian_avg = pairwise_mean<double>(mu.size(), [&](std::size_t i) {
    auto q = tb.idx(0, i);
    return m.f(mu[i], v, tb.alpha[q]).dot(tb.Z[q]) + m.g(mu[i], v, tb.alpha[q]);
  });
  r.residual = std::abs(r.dvdt + r.hamiltonian_avg);
  return r;
}

struct LfdCheck {
  double max_deviation = 0.0;
  double theta_effective = 0.0;
  std::size_t copies = 0;
  std::vector<double> du_fd, gamma;  // per probe and direction
};

// Flat derivative through mixtures: u(x) = [v((1-theta) m + theta delta_x) - v(m)] / theta
// with the mixture built by adding copies of x. The central difference of
// u in x is compared with gamma(0, x, m) from the tagged flow.
template <int Dx, int Da>
LfdCheck lfd_consistency_check(double T, const ParticleMeasure<Dx>& mu, const Model<Dx, Da>& m,
                               const GlobalConfig& cfg, double theta, const std::vector<Vec<Dx>>& probes,
                               double hx = 1e-3, WorkerPool* pool = nullptr) {
  if (!(theta > 0.0 && theta < 1.0)) throw ConfigError("lfd_consistency_check: theta must lie in (0, 1)");
  if (!(hx > 0.0)) throw ConfigError("lfd_consistency_check: hx must be positive");
  if (probes.empty()) throw ConfigError("lfd_consistency_check: no probe points");
  const double N = double(mu.size());
  LfdCheck r;
  r.copies = static_cast<std::size_t>(std::max(1.0, std::ceil(theta * N / (1.0 - theta) - 1e-9)));
  r.theta_effective = double(r.copies) / (N + double(r.copies));
  auto base = solve_global(m, T, mu, cfg, pool);
  const std::size_t jobs = probes.size() * Dx;
  r.du_fd.assign(jobs, 0.0);
  r.gamma.assign(jobs, 0.0);
  std::vector<Vec<Dx>> gam(probes.size());
  for (std::size_t p = 0; p < probes.size(); ++p) {
    // nearest particle's anchored field value seeds the shooting
    std::size_t best = 0;
    for (std::size_t i = 1; i < mu.size(); ++i)
      if ((mu[i] - probes[p]).norm() < (mu[best] - probes[p]).norm()) best = i;
    Vec<Dx> guess = base.field.anchored(0.0, best, probes[p]);
    gam[p] = tagged_flow(m, base.traj, probes[p], guess, cfg.picard.control, 1e-13, 50, pool).Z[0];
  }
  parallel_for(pool, jobs, [&](std::size_t q) {
    std::size_t p = q / Dx;
    int c = int(q % Dx);
    Vec<Dx> e = Vec<Dx>::Unit(c);
    double vp = value_function(solve_global(m, T, mu.with_copies(probes[p] + hx * e, r.copies), cfg), m);
    double vm = value_function(solve_global(m, T, mu.with_copies(probes[p] - hx * e, r.copies), cfg), m);
    r.du_fd[q] = (vp - vm) / (2.0 * hx * r.theta_effective);
    r.gamma[q] = gam[p](c);
  });
  for (std::size_t q = 0; q < jobs; ++q) r.max_deviation = std::max(r.max_deviation, std::abs(r.du_fd[q] - r.gamma[q]));
  return r;
}

}  // namespace mftc
