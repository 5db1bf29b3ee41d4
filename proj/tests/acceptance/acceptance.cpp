// Acceptance run: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include "mftc/analysis.hpp"
#include "mftc/models/lq.hpp"
#include "mftc/models/nonlq.hpp"
#include "test_models.hpp"

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>

using namespace mftc;
using V1 = Vec<1>;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(int id, bool pass, const std::string& what, const std::string& detail) {
  std::printf("%s  C%-2d %s | %s\n", pass ? "PASS" : "FAIL", id, what.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!pass) ++failures;
}

// Runs one criterion; an exception is a failure of that criterion only.
void criterion(int id, const std::string& what, const std::function<std::pair<bool, std::string>()>& body) {
  try {
    auto [pass, detail] = body();
    report(id, pass, what, detail);
  } catch (const std::exception& e) {
    report(id, false, what, std::string("exception: ") + e.what());
  }
}

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

ParticleMeasure<1> gaussian(std::size_t n, double mean, double sd, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, sd);
  std::vector<V1> a(n);
  for (auto& x : a) x(0) = nd(rng);
  return ParticleMeasure<1>(a);
}

GlobalConfig tight(double dt) {
  GlobalConfig c;
  c.dt = dt;
  c.picard.tol_gamma = 1e-14;
  c.sweep_tol = 1e-13;
  return c;
}

ConstantsReport constants_of(const Model<1, 1>& m) { return compute_constants(m.constants(), model_anchors(m)); }

std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// ---------------------------------------------------------------- constants oracle

// Cell-by-cell evaluation of the constant chain in long double, written
// from the printed formulas independently of compute_constants.
struct Sheet {
  std::vector<std::pair<std::string, long double>> cells;
  long double& operator[](const std::string& k) {
    for (auto& c : cells)
      if (c.first == k) return c.second;
    cells.emplace_back(k, 0.0L);
    return cells.back().second;
  }
};

long double mx(std::initializer_list<long double> v) { return *std::max_element(v.begin(), v.end()); }
long double mn(std::initializer_list<long double> v) { return *std::min_element(v.begin(), v.end()); }

void sub_lengths(Sheet& s, const std::string& pre, const ModelConstants& mc, long double Lp, long double Lbp) {
  long double Lf = s["L_f"], La = s["L_alpha"], Lg = s["L_g"];
  long double Lam_f = mc.Lambda_f, lbar_f = mc.lbar_f, Lam_g = mc.Lambda_g, lbar_g = mc.lbar_g;
  s[pre + "L_p"] = Lp;
  s[pre + "Lbar_p"] = Lbp;
  s[pre + "L_B"] = Lf * (1 + La + 2 * Lp * La);
  s[pre + "Lbar_B"] = Lf * (1 + La + 2 * Lbp * La);
  long double e3 = mn({1 / (6 * s[pre + "Lbar_B"]), Lbp / (50 * (2 * Lbp * Lam_f + Lg * (1 + La + 2 * Lbp * La)))});
  s[pre + "eps3"] = e3;
  long double c = 2 * Lbp * lbar_f;
  long double e4 =
      mn({e3, 7 * Lp / (73 * (3 * (c + Lam_g) + 3 * (c + lbar_g) * La * (1 + 2 * Lp) + 6 * Lam_f * Lp))});
  s[pre + "eps4"] = e4;
  long double mg = c + mx({Lam_g, lbar_g});
  long double b2 = 1 / (2 * (8 * Lp * Lf * La + 5 * (Lam_f + mg * La)));
  long double b3 = 1 / (2 * std::sqrt(Lf * La) * std::sqrt(34 * Lp * Lam_f + (34 * Lp * La + 21 + 17 * La) * mg));
  s[pre + "eps1"] = mn({e4, b2, b3});
}

Sheet hand_constants(const ModelConstants& mc, const ModelAnchors& an) {
  Sheet s;
  const long double lf = mc.lambda_f, Lf = mc.Lambda_f, lbf = mc.lbar_f;
  const long double lg = mc.lambda_g, Lg = mc.Lambda_g, lbg = mc.lbar_g;
  const long double lk = mc.lambda_k, Lk = mc.Lambda_k;
  s["L_f"] = mx({Lf, (long double)an.f0});
  s["L_g"] = mx({(long double)an.gm0, (long double)an.gx0, (long double)an.ga0, Lg, lbg});
  s["L_k"] = mx({(long double)an.km0, (long double)an.kx0, Lk});
  s["lambda_z"] = lf * lf / (Lg + lg / 20);
  s["lambda_x"] = lg * 17 / 20;
  s["eps_small_1"] = mn({lk / 4, s["lambda_z"] / 2, lg / 40});
  s["eps_small_2"] = mn({lk / 4, s["lambda_z"] / 4, lg / 5});
  s["lambdabar_k"] = lk / 4;
  s["lambdabar_z"] = s["lambda_z"] / 2;
  s["lambdabar_x"] = lg / 40;
  s["Lambda_h"] = Lg + lg / 20;
  s["lbar_h"] = lg / 5;
  const long double lz = s["lambda_z"], lx = s["lambda_x"], e1 = s["eps_small_1"], e2 = s["eps_small_2"];
  const long double bk = s["lambdabar_k"], bz = s["lambdabar_z"], bx = s["lambdabar_x"], Lh = s["Lambda_h"];
  s["Lstar_1"] = mx({4 * Lk * Lk / lk, (2 * Lh + lg / 20) / lz, (Lf * 5 / 2 + 2 * Lh + lg / 20) / lx});
  s["Lstar_2"] = mx({39 * Lk * Lk / bk, (5 * Lg + lg / 4) / bx, (5 * Lf + 7 * Lg + lg * 13 / 20) / bz});
  const long double sq = (2 * Lg + lg / 5) * (2 * Lg + lg / 5);
  s["Lstar_3"] = mx({(12 + s["Lstar_2"] / e1) * Lk * Lk / lk,
                     (2 * Lg + lg / 5 + s["Lstar_2"] / (4 * e1) * (Lf * Lf * 25 / 16 + sq)) / lx});
  s["Lstar_4"] = mx({Lk * Lk / (e1 * lk), (Lf * Lf * 25 / 16 + sq) / (4 * e1 * lx)});
  s["Lstar_5"] = mx({9 * Lk * Lk / (4 * e2 * bk), 25 * Lf * Lf / (64 * e2 * bz),
                     (Lf * Lf * 25 / 16 + 9 * (lg / 10 + Lg) * (lg / 10 + Lg)) / (4 * e2 * bx)});
  s["Lstar_6"] = mx({27 * Lk * Lk / bk, (Lg + lg / 10) / bx, (Lg + lg / 10) / bz, 12 * Lk * Lk / lk,
                     (2 * Lg + lg / 5) / lx, 6 * Lk * Lk / bk, (2 * Lg + lg * 3 / 20) / bx,
                     (Lf * 15 / 4 + 7 * Lg + lg * 13 / 20) / bz});
  s["Lstar_0"] = (long double)mc.dx *
                 mx({s["Lstar_1"], std::sqrt((s["Lstar_4"] * (2 + s["Lstar_5"]) + 1) * s["Lstar_1"] * s["Lstar_6"])});
  s["Lbar_k"] = 3 * Lk;
  s["k0"] = 4 * mx({s["Lbar_k"], s["Lstar_0"]});
  s["L_alpha"] = mx({20 * Lf / (19 * lg), 20 * (lbg + s["k0"] / 2 * lbf) / (19 * lg), (long double)an.alpha0});
  s["h2_lbar_g_max"] = lg / 8;
  s["h2_lbar_f_max"] = lg / (40 * mx({s["Lbar_k"], s["Lstar_0"]}));
  const long double Lp = mx({s["Lbar_k"], s["Lstar_0"]});
  sub_lengths(s, "", mc, Lp, Lp);
  sub_lengths(s, "terminal_", mc, s["Lbar_k"], mx({(long double)an.p0, s["Lbar_k"]}));
  return s;
}

}  // namespace

int main() {
  const auto nonlq = builtin_nonlq(0.05, 0.25, 0.125, 0.5);  // the worked example
  const auto admissible = builtin_nonlq(3.5e-9, 0.25, 0.125, 0.25);
  const auto lq = builtin_lq(0, 1, 1, 1, 1, 0);
  const auto c_nonlq = constants_of(*nonlq);
  const auto c_lq = constants_of(*lq);

  // LQ reference run shared by criteria 1, 3, 4, 6, 7, 8
  const auto mu_lq = gaussian(100, 0.2, 1.0, 101);
  GlobalSolveReport<1, 1> rep_lq;
  double lq_seconds = 0.0;

  criterion(1, "Riccati oracle (LQ, T=1, N=100, dt=1e-3)", [&] {
    auto t0 = std::chrono::steady_clock::now();
    rep_lq = solve_global<1, 1>(*lq, 1.0, mu_lq, GlobalConfig{});
    lq_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& tb = rep_lq.traj;
    double ez = 0.0, ex = 0.0;
    for (std::size_t i = 0; i < tb.N; ++i) {
      double x = mu_lq.atoms()[i](0);
      ez = std::max(ez, std::abs(tb.Z[tb.idx(0, i)](0) - x));
      for (int k = 0; k < tb.nodes(); ++k)
        ex = std::max(ex, std::abs(tb.X[tb.idx(k, i)](0) - x * std::exp(-tb.grid.time(k))));
    }
    double ev = std::abs(value_function(rep_lq, *lq) - 0.5 * mu_lq.second_moment());
    bool pass = ez <= 1e-6 && ex <= 1e-6 && ev <= 1e-6 && lq_seconds < 10.0;
    return std::pair{pass, fmt("max|Z0-x| %.2e, max|X-x e^-s| %.2e, |v-M2/2| %.2e, %.2f s", ez, ex, ev, lq_seconds)};
  });

  criterion(2, "Picard contraction ratio <= 0.75 at length <= eps1 (nonlinear example)", [&] {
    // At eps1 the gaps reach rounding after one update, so the same test
    // runs on a ladder of longer intervals as well. Ratios whose
    // denominator sits at rounding level (< 1e-13) are not informative.
    const double e1 = admissible_sublength(c_nonlq);
    const auto x0 = gaussian(50, 0.0, 1.0, 102).atoms();
    PicardConfig pc;
    pc.tol_gamma = 1e-15;
    pc.auto_relax = false;
    double worst = 0.0, worst_eps1 = 0.0;
    int counted = 0, counted_eps1 = 0;
    for (double len : {e1, 1e-6, 1e-4, 1e-3, 1e-2, 0.05, 0.1}) {
      pc.max_iter = 60;
      std::vector<double> h;
      try {
        h = picard_local<1, 1>(*nonlq, TimeGrid{1.0 - len, 1.0, 4}, x0, model_terminal(*nonlq), pc).history;
      } catch (const SolverError& e) {
        h = e.history;  // stalls at the rounding floor above tol_gamma
      }
      for (std::size_t n = 2; n < h.size(); ++n) {
        if (h[n - 1] < 1e-13) break;
        double r = h[n] / h[n - 1];
        worst = std::max(worst, r);
        ++counted;
        if (len == e1) {
          worst_eps1 = std::max(worst_eps1, r);
          ++counted_eps1;
        }
      }
    }
    return std::pair{worst <= 0.75, fmt("eps1 = %.3e: %d ratios above rounding (max %.3f); lengths up to 0.1: %d "
                                         "ratios, max %.3f",
                                         e1, counted_eps1, worst_eps1, counted, worst)};
  });

  criterion(3, "cone margins positive on assumption-passing models", [&] {
    SamplingSpec s;
    s.n_points = 200;
    bool lq_ok = check_assumptions(*lq, s).pass(), adm_ok = check_assumptions(*admissible, s).pass();
    auto mu = gaussian(30, 0.0, 1.0, 103);
    auto rep = solve_global<1, 1>(*admissible, 1.0, mu, GlobalConfig{});
    double m_adm = cone_margin(rep.traj, constants_of(*admissible).k0);
    double m_lq = cone_margin(rep_lq.traj, c_lq.k0);
    // informative: the worked example does not pass every assumption
    auto rep_ex = solve_global<1, 1>(*nonlq, 1.0, mu, GlobalConfig{});
    double m_ex = cone_margin(rep_ex.traj, c_nonlq.k0);
    bool pass = lq_ok && adm_ok && m_adm > 0.0 && m_lq > 0.0;
    return std::pair{pass, fmt("LQ (assumptions %s) margin %.4g; admissible nonlinear (assumptions %s) margin %.4g; "
                               "worked example margin %.4g",
                               lq_ok ? "pass" : "FAIL", m_lq, adm_ok ? "pass" : "FAIL", m_adm, m_ex)};
  });

  criterion(4, "sup |d_x gamma| along flows <= L*_0 (nonlinear example, LQ)", [&] {
    auto mu = gaussian(20, 0.0, 1.0, 104);
    auto rep = solve_global<1, 1>(*nonlq, 1.0, mu, GlobalConfig{});
    auto a = verify_apriori(solve_jacobians<1, 1>(*nonlq, rep.traj, true), rep.field, c_nonlq);
    auto b = verify_apriori(solve_jacobians<1, 1>(*lq, rep_lq.traj, false), rep_lq.field, c_lq);
    auto sup = [](const AprioriReport& r) {
      double s = std::max(r.sup_dxgamma_riccati, r.sup_dxgamma_ratio);
      return std::isfinite(r.sup_dxgamma_slope) ? std::max(s, r.sup_dxgamma_slope) : s;
    };
    bool pass = a.slope_ok && b.slope_ok && sup(a) <= a.Lstar_0 && sup(b) <= b.Lstar_0;
    return std::pair{pass, fmt("nonlinear %.4f (measure %.4f) vs L*_0 %.4g; LQ %.6f vs L*_0 %.4g", sup(a),
                               a.sup_dmgamma, a.Lstar_0, sup(b), b.Lstar_0)};
  });

  criterion(5, "Jacobian blocks vs central FD (h=1e-5, rel 1e-3) and RK4 order", [&] {
    double worst = 0.0;
    std::string parts;
    auto run = [&](const Model<1, 1>& m, const ParticleMeasure<1>& mu, double T, const char* label) {
      auto cfg = tight(1e-2);
      auto rep = solve_global<1, 1>(m, T, mu, cfg);
      auto jb = solve_jacobians<1, 1>(m, rep.traj, true);
      auto idx = all_indices(mu.size());
      auto [fx, fz] = check_jacobian_x_fd<1, 1>(m, rep.traj, jb, idx, 1e-5);
      ParticleSolver<1, 1> solve = [&](const ParticleMeasure<1>& p) { return solve_global<1, 1>(m, T, p, cfg).traj; };
      auto [mx_, mz] = check_jacobian_m_fd<1, 1>(jb, mu, solve, idx, 1e-5);
      double w = std::max({fx.max_rel_err, fz.max_rel_err, mx_.max_rel_err, mz.max_rel_err});
      worst = std::max(worst, w);
      parts += fmt("%s DxX %.1e DxZ %.1e DmX %.1e DmZ %.1e; ", label, fx.max_rel_err, fz.max_rel_err,
                   mx_.max_rel_err, mz.max_rel_err);
    };
    run(*nonlq, gaussian(20, 0.0, 1.0, 105), 1.0, "nonlinear N=20");
    // mean-field weight so that the measure kernels do not vanish
    run(*builtin_lq(0, 1, 1, 1, 1, 0.5), gaussian(50, 0.2, 1.0, 106), 1.0, "LQ N=50");

    // Step halving needs smooth coefficients along the flow. The bump phi of
    // the nonlinear example is only C^2 at |x| = 1, so its run uses atoms
    // whose trajectories stay off that set, and the crossing is checked.
    // Successive differences are taken in the sup norm over the coarsest
    // grid's nodes.
    auto halving = [&](const Model<1, 1>& m, const ParticleMeasure<1>& mu, bool& crosses) {
      std::vector<JacobianBundle<1, 1>> jbs;
      crosses = false;
      for (double dt : {0.02, 0.01, 0.005}) {
        auto cfg = tight(dt);
        cfg.residual_tol = 1e-3;  // coarse grids
        auto rep = solve_global<1, 1>(m, 0.4, mu, cfg);
        for (std::size_t i = 0; i < mu.size(); ++i)
          for (int k = 0; k < rep.traj.grid.steps; ++k) {
            double a = std::abs(rep.traj.X[rep.traj.idx(k, i)](0)) - 1.0;
            double b = std::abs(rep.traj.X[rep.traj.idx(k + 1, i)](0)) - 1.0;
            crosses = crosses || a * b <= 0.0;
          }
        jbs.push_back(solve_jacobians<1, 1>(m, rep.traj, false));
      }
      auto diff = [&](const JacobianBundle<1, 1>& a, const JacobianBundle<1, 1>& b, int scale) {
        double d = 0.0;
        for (int k = 0; k <= jbs[0].grid.steps; ++k)
          for (std::size_t i = 0; i < a.N; ++i)
            d = std::max(d, std::abs(a.DxX[a.idx(k * scale, i)](0, 0) - b.DxX[b.idx(2 * k * scale, i)](0, 0)));
        return d;
      };
      return diff(jbs[0], jbs[1], 1) / diff(jbs[1], jbs[2], 2);
    };
    bool cross_nl = false, cross_lq = false;
    std::vector<V1> inner{V1(-0.6), V1(-0.3), V1(0.0), V1(0.3), V1(0.6), V1(1.8), V1(2.5), V1(-2.0)};
    double ratio_nl = halving(*nonlq, ParticleMeasure<1>(inner), cross_nl);
    double ratio_lq = halving(*builtin_lq(0, 1, 1, 1, 1, 0.5), gaussian(8, 0.2, 1.0, 107), cross_lq);
    auto order_ok = [](double r) { return r >= 12.0 && r <= 20.0; };
    bool pass = worst <= 1e-3 && !cross_nl && order_ok(ratio_nl) && order_ok(ratio_lq);
    return std::pair{pass, parts + fmt("step-halving ratio nonlinear %.2f (order %.2f%s), LQ %.2f (order %.2f)",
                                       ratio_nl, std::log2(ratio_nl), cross_nl ? ", crosses |x|=1" : "",
                                       ratio_lq, std::log2(ratio_lq))};
  });

  criterion(6, "d_m v = Z_0 identity (LQ <= 1e-5 at h=1e-4, nonlinear <= 1e-3)", [&] {
    auto a = dmv_identity_check<1, 1>(1.0, mu_lq, *lq, GlobalConfig{}, 1e-4);
    auto mu = gaussian(30, 0.0, 1.0, 108);
    auto b = dmv_identity_check<1, 1>(1.0, mu, *nonlq, GlobalConfig{}, 1e-4, {0, 7, 15, 22, 29});
    bool pass = a.max_deviation <= 1e-5 && b.max_deviation <= 1e-3;
    return std::pair{pass, fmt("LQ all 100 atoms %.2e; nonlinear N=30 atoms {0,7,15,22,29} %.2e", a.max_deviation,
                               b.max_deviation)};
  });

  criterion(7, "Bellman residual (LQ <= 1e-4, nonlinear <= 1e-3)", [&] {
    auto a = bellman_residual<1, 1>(1.0, mu_lq, *lq, GlobalConfig{}, 1e-3);
    auto mu = gaussian(30, 0.0, 1.0, 109);
    auto b = bellman_residual<1, 1>(1.0, mu, *nonlq, GlobalConfig{}, 1e-3);
    bool pass = a.residual <= 1e-4 && b.residual <= 1e-3;
    return std::pair{pass, fmt("LQ %.2e; nonlinear N=30 %.2e (dt = ht = 1e-3)", a.residual, b.residual)};
  });

  criterion(8, "sweep and continuation agree within 1e-6", [&] {
    GlobalConfig c;
    c.strategy = Strategy::continuation;
    double a = agreement_check(rep_lq, solve_global<1, 1>(*lq, 1.0, mu_lq, c));
    auto mu = gaussian(30, 0.0, 1.0, 110);
    double b = agreement_check(solve_global<1, 1>(*nonlq, 1.0, mu, GlobalConfig{}),
                               solve_global<1, 1>(*nonlq, 1.0, mu, c));
    return std::pair{a <= 1e-6 && b <= 1e-6, fmt("LQ %.2e; nonlinear %.2e", a, b)};
  });

  criterion(9, "constants ledger vs independent evaluation", [&] {
    const auto mc = nonlq->constants();
    const auto an = model_anchors(*nonlq);
    bool typed = mc.lambda_f == 0.25 && mc.Lambda_f == 3.0 && mc.lambda_g == 1.0 && mc.Lambda_g == 1.5 &&
                 mc.lambda_k == 1.0 && mc.Lambda_k == 1.5;
    auto sheet = hand_constants(mc, an);
    double worst = 0.0;
    std::string worst_name;
    std::size_t n = 0;
    for (const auto& [name, value] : c_nonlq.entries()) {
      long double ref = sheet[name];
      double rel = double(std::abs((long double)value - ref) / std::max(1.0L, std::abs(ref)));
      ++n;
      if (rel > worst) {
        worst = rel;
        worst_name = name;
      }
    }
    bool exact = c_nonlq.lambda_x == 17.0 / 20.0 * mc.lambda_g;
    bool remark = c_nonlq.Lstar_0 >= c_nonlq.Lbar_k && c_nonlq.k0 == 4.0 * c_nonlq.Lstar_0;
    bool pass = typed && exact && remark && worst <= 1e-14 && sheet.cells.size() == n;
    return std::pair{pass, fmt("%zu entries, worst rel dev %.2e (%s); lambda_x = %.17g; L*_0 %.6g >= Lbar_k %.3g",
                               n, worst, worst_name.c_str(), c_nonlq.lambda_x, c_nonlq.Lstar_0, c_nonlq.Lbar_k)};
  });

  criterion(10, "assumption checker: admissible example passes, faults flagged with witness", [&] {
    auto ok = check_assumptions(*admissible, SamplingSpec{});
    SamplingSpec s;
    testmodels::DriftOffset<1, 1> drift(admissible, 0.3);
    testmodels::ScaledGaa<1, 1> soft(admissible, 0.5);
    auto rd = check_assumptions(drift, s);
    auto rs = check_assumptions(soft, s);
    bool drift_flag = !rd.at("h1").pass && !rd.at("h1").witness.empty();
    bool soft_flag = !rs.at("a2.i").pass && !rs.at("a2.i").witness.empty();
    bool pass = ok.pass() && ok.probes == 1000 && drift_flag && soft_flag;
    std::string fails;
    for (const auto& f : ok.failures()) fails += f + " ";
    return std::pair{pass, fmt("admissible: %zu records, %d probes, failures [%s]; drift offset -> h1 margin %.3g; "
                               "scaled g_aa -> a2.i margin %.3g",
                               ok.records.size(), int(ok.probes), fails.c_str(), rd.at("h1").worst_margin,
                               rs.at("a2.i").worst_margin)};
  });

  criterion(11, "trajectories.csv bitwise identical for 1 and 3 workers", [&] {
    auto dir = fs::temp_directory_path() / "mfc_acceptance";
    fs::remove_all(dir);
    std::string base = std::string(MFC_BINARY) + " solve --config " + MFC_FIXTURES + "/nonlq.json --out ";
    int r1 = std::system((base + (dir / "w1").string() + " --workers 1 > /dev/null").c_str());
    int r3 = std::system((base + (dir / "w3").string() + " --workers 3 > /dev/null").c_str());
    auto slurp = [](const fs::path& p) {
      std::ifstream is(p, std::ios::binary);
      std::stringstream ss;
      ss << is.rdbuf();
      return ss.str();
    };
    auto a = slurp(dir / "w1" / "trajectories.csv"), b = slurp(dir / "w3" / "trajectories.csv");
    bool pass = r1 == 0 && r3 == 0 && !a.empty() && a == b;
    return std::pair{pass, fmt("exit codes %d/%d, %zu bytes each, %s", r1, r3, a.size(), a == b ? "identical" : "DIFFER")};
  });

  std::printf("%s: %d criteria failed\n", failures ? "FAIL" : "PASS", failures);
  return failures ? 1 : 0;
}
