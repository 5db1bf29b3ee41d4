#include <catch_amalgamated.hpp>

#include "mftc/global.hpp"
#include "mftc/models/lq.hpp"
#include "mftc/models/nonlq.hpp"
#include "mftc/sensitivity.hpp"

#include <random>

using namespace mftc;
using Catch::Approx;
using V1 = Vec<1>;

static ParticleMeasure<1> gaussian_measure(std::size_t n, double mean, double sd, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, sd);
  std::vector<V1> a(n);
  for (auto& x : a) x(0) = nd(rng);
  return ParticleMeasure<1>(a);
}

static GlobalConfig tight(double dt) {
  GlobalConfig c;
  c.dt = dt;
  c.picard.tol_gamma = 1e-14;
  c.sweep_tol = 1e-13;
  return c;
}

TEST_CASE("LQ x-flow matches the Riccati oracle") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0);
  auto mu = gaussian_measure(10, 0.3, 1.0, 41);
  auto rep = solve_global<1, 1>(*m, 1.0, mu, GlobalConfig{});
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  double ex = 0, ez = 0, eg = 0, em = 0;
  for (int k = 0; k <= 1000; ++k)
    for (std::size_t i = 0; i < 10; ++i) {
      double s = rep.traj.grid.time(k);
      ex = std::max(ex, std::abs(jb.DxX[jb.idx(k, i)](0, 0) - std::exp(-s)));
      ez = std::max(ez, std::abs(jb.DxZ[jb.idx(k, i)](0, 0) - std::exp(-s)));
      eg = std::max(eg, std::abs(jb.Gx[jb.idx(k, i)](0, 0) - 1.0));
      for (std::size_t j = 0; j < 10; ++j) em = std::max(em, std::abs(jb.DmX[jb.kidx(k, i, j)](0, 0)));
    }
  CHECK(ex <= 1e-10);
  CHECK(ez <= 1e-10);
  CHECK(eg <= 1e-10);
  CHECK(em <= 1e-12);  // no measure coupling
  CHECK(jb.DxZ[jb.idx(0, 3)](0, 0) == Approx(1.0).margin(1e-10));
  CHECK(jb.duality_defect <= 1e-5);
}

TEST_CASE("frozen dynamics keep the identity") {
  // f = 0, g = alpha^2/2, k = x^2: X is constant and Z = 2 X
  auto m = builtin_lq(0, 0, 0, 1, 2, 0);
  auto mu = gaussian_measure(5, 0.0, 1.0, 42);
  auto rep = solve_global<1, 1>(*m, 0.5, mu, GlobalConfig{});
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  for (std::size_t q = 0; q < jb.DxX.size(); ++q) {
    CHECK(jb.DxX[q](0, 0) == 1.0);
    CHECK(jb.DxZ[q](0, 0) == 2.0);
  }
}

TEST_CASE("two-particle kernel against the closed form") {
  // f = alpha + mean, g = (alpha^2 + x^2)/2, k = x^2/2. The mean mode obeys
  // (m, z)' = M (m, z) with M = [[1, -1], [-1, -1]], M^2 = 2 I, z(T) = m(T);
  // differences decay like e^{-s}.
  auto m = builtin_lq(0, 1, 1, 1, 1, 1);
  ParticleMeasure<1> mu(std::vector<V1>{V1(-0.4), V1(0.9)});
  const double T = 1.0;
  auto rep = solve_global<1, 1>(*m, T, mu, GlobalConfig{});
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  const double r2 = std::sqrt(2.0);
  auto ch = [&](double s) { return std::cosh(r2 * s); };
  auto sh = [&](double s) { return std::sinh(r2 * s) / r2; };
  const double rho = (ch(T) + 2.0 * sh(T)) / ch(T);
  double err = 0.0, errx = 0.0;
  for (int k = 0; k <= rep.traj.grid.steps; ++k) {
    double s = rep.traj.grid.time(k);
    double a = ch(s) + sh(s) - sh(s) * rho;
    double kern = a - std::exp(-s);
    for (std::size_t i = 0; i < 2; ++i) {
      errx = std::max(errx, std::abs(jb.DxX[jb.idx(k, i)](0, 0) - std::exp(-s)));
      for (std::size_t j = 0; j < 2; ++j) err = std::max(err, std::abs(jb.DmX[jb.kidx(k, i, j)](0, 0) - kern));
    }
  }
  CHECK(errx <= 1e-10);
  CHECK(err <= 1e-9);
  // the discrete solution obeys the same closed form
  double xerr = 0.0;
  const double m0 = 0.25, d0 = -1.3;
  for (int k = 0; k <= rep.traj.grid.steps; k += 100) {
    double s = rep.traj.grid.time(k);
    double mean = (ch(s) + sh(s) - sh(s) * rho) * m0;
    xerr = std::max(xerr, std::abs(rep.traj.X[rep.traj.idx(k, 0)](0) - (mean + 0.5 * d0 * std::exp(-s))));
  }
  CHECK(xerr <= 1e-9);
}

TEST_CASE("tagged flow at an atom reproduces that particle") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  auto mu = gaussian_measure(15, 0.0, 1.0, 43);
  auto rep = solve_global<1, 1>(m, 0.5, mu, tight(1e-2));
  for (std::size_t i : {0u, 6u, 14u}) {
    auto tf = tagged_flow<1, 1>(m, rep.traj, mu[i], V1(rep.traj.Z[i](0) + 0.3));
    CHECK(tf.terminal_residual <= 1e-12);
    double e = 0.0;
    for (int k = 0; k <= rep.traj.grid.steps; ++k)
      e = std::max(e, std::abs(tf.X[k](0) - rep.traj.X[rep.traj.idx(k, i)](0)) +
                          std::abs(tf.Z[k](0) - rep.traj.Z[rep.traj.idx(k, i)](0)));
    CHECK(e <= 1e-8);
  }
}

TEST_CASE("nonlq Jacobian blocks against finite differences") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  auto mu = gaussian_measure(20, 0.0, 1.0, 44);
  const double T = 0.6;
  auto cfg = tight(1e-2);
  auto rep = solve_global<1, 1>(m, T, mu, cfg);
  auto jb = solve_jacobians<1, 1>(m, rep.traj, true);
  auto [fx, fz] = check_jacobian_x_fd<1, 1>(m, rep.traj, jb, {0, 9, 17});
  CHECK(fx.max_rel_err <= 1e-4);
  CHECK(fz.max_rel_err <= 1e-3);
  ParticleSolver<1, 1> solve = [&](const ParticleMeasure<1>& p) { return solve_global<1, 1>(m, T, p, cfg).traj; };
  auto [mx, mz] = check_jacobian_m_fd<1, 1>(jb, mu, solve, {3, 11});
  CHECK(mx.max_rel_err <= 1e-3);
  CHECK(mz.max_rel_err <= 1e-3);
  CHECK(check_translation_fd<1, 1>(jb, mu, solve) <= 1e-4);
  // backward DxZ agrees with the Riccati feedback
  double e = 0.0;
  for (std::size_t q = 0; q < jb.DxZ.size(); ++q) e = std::max(e, std::abs(jb.DxZ[q](0, 0) - jb.Gx[q](0, 0) * jb.DxX[q](0, 0)));
  CHECK(e <= 1e-8);
  CHECK(jb.duality_defect <= 1e-3);
}

TEST_CASE("LQ measure kernels against finite differences") {
  auto m = builtin_lq(0.2, 1, 1, 1, 1, 0.5);
  auto mu = gaussian_measure(50, 0.2, 1.0, 45);
  const double T = 0.5;
  auto cfg = tight(1e-2);
  auto rep = solve_global<1, 1>(*m, T, mu, cfg);
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  ParticleSolver<1, 1> solve = [&](const ParticleMeasure<1>& p) { return solve_global<1, 1>(*m, T, p, cfg).traj; };
  auto [mx, mz] = check_jacobian_m_fd<1, 1>(jb, mu, solve, {0, 25, 49});
  CHECK(mx.max_rel_err <= 1e-3);
  CHECK(mz.max_rel_err <= 1e-3);
  auto [fx, fz] = check_jacobian_x_fd<1, 1>(*m, rep.traj, jb, {1, 30});
  CHECK(fx.max_rel_err <= 1e-4);
  CHECK(fz.max_rel_err <= 1e-3);
}

TEST_CASE("DxX converges at fourth order under step halving") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  // phi is only C^2 at |x| = 1; atoms whose flows cross it cap the RK4 order
  std::vector<Vec<1>> x;
  for (double v : {-0.6, -0.3, 0.0, 0.3, 0.6, 1.8, 2.5, -2.0}) x.push_back(Vec<1>(v));
  ParticleMeasure<1> mu(x);
  const double T = 0.4;
  std::vector<JacobianBundle<1, 1>> jbs;
  for (double dt : {0.02, 0.01, 0.005}) {
    auto cfg = tight(dt);
    cfg.residual_tol = 1e-3;  // the forward residual is O(dt^4) on these coarse grids
    auto rep = solve_global<1, 1>(m, T, mu, cfg);
    for (const auto& xq : rep.traj.X) REQUIRE(std::abs(std::abs(xq(0)) - 1.0) > 0.1);
    jbs.push_back(solve_jacobians<1, 1>(m, rep.traj, false));
  }
  auto diff = [&](const JacobianBundle<1, 1>& a, const JacobianBundle<1, 1>& b, int scale) {
    double d = 0.0;
    for (int k = 0; k <= jbs[0].grid.steps; ++k)
      for (std::size_t i = 0; i < a.N; ++i)
        d = std::max(d, std::abs(a.DxX[a.idx(k * scale, i)](0, 0) - b.DxX[b.idx(2 * k * scale, i)](0, 0)));
    return d;
  };
  double ratio = diff(jbs[0], jbs[1], 1) / diff(jbs[1], jbs[2], 2);
  INFO("ratio " << ratio);
  CHECK(ratio >= 12.0);
  CHECK(ratio <= 20.0);
}

TEST_CASE("field slopes and the Riccati route agree") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  auto mu = gaussian_measure(200, 0.0, 1.0, 47);
  auto rep = solve_global<1, 1>(m, 0.3, mu, tight(1e-2));
  auto a = solve_jacobians<1, 1>(m, rep.traj, false);
  auto b = solve_jacobians<1, 1>(m, rep.traj, false, {}, nullptr, &rep.field);
  double e = 0.0, s = 0.0;
  for (std::size_t q = 0; q < a.Gx.size(); ++q) {
    e = std::max(e, std::abs(a.Gx[q](0, 0) - b.Gx[q](0, 0)));
    s = std::max(s, std::abs(a.Gx[q](0, 0)));
  }
  CHECK(e / s <= 2e-2);
}

TEST_CASE("a-priori report on LQ") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0);
  auto mu = gaussian_measure(20, 0.0, 1.0, 48);
  auto rep = solve_global<1, 1>(*m, 1.0, mu, GlobalConfig{});
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  auto c = compute_constants(m->constants());
  auto r = verify_apriori(jb, rep.field, c);
  CHECK(r.sup_dxgamma_riccati == Approx(1.0).margin(1e-9));
  CHECK(r.sup_dxgamma_ratio == Approx(1.0).margin(1e-9));
  CHECK(r.sup_dxgamma_slope == Approx(1.0).margin(1e-6));
  CHECK(r.sup_dmgamma <= 1e-10);
  CHECK(r.min_cone_margin > 0.0);
  CHECK(r.pass());

  auto bad = rep.field;
  for (auto& g : bad.val) g *= c.Lstar_0 + 1.0;
  bad.compute_slopes();
  auto rb = verify_apriori(jb, bad, c);
  CHECK_FALSE(rb.slope_ok);
  CHECK_FALSE(rb.pass());
}

TEST_CASE("initial Jacobians and capability limits") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0.3);
  auto mu = gaussian_measure(6, 0.0, 1.0, 49);
  auto rep = solve_global<1, 1>(*m, 0.2, mu, GlobalConfig{});
  auto jb = solve_jacobians<1, 1>(*m, rep.traj, true);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(jb.DxX[jb.idx(0, i)](0, 0) == 1.0);
    for (std::size_t j = 0; j < 6; ++j) CHECK(jb.DmX[jb.kidx(0, i, j)](0, 0) == 0.0);
  }
  SensitivityConfig sc;
  sc.max_particles = 5;
  CHECK_THROWS_AS((solve_jacobians<1, 1>(*m, rep.traj, true, sc)), CapabilityError);
  CHECK_NOTHROW((solve_jacobians<1, 1>(*m, rep.traj, false, sc)));
  sc.max_particles = 200;
  sc.memory_cap_bytes = 1000;
  CHECK_THROWS_AS((solve_jacobians<1, 1>(*m, rep.traj, true, sc)), CapabilityError);
  auto xonly = solve_jacobians<1, 1>(*m, rep.traj, false);
  CHECK_THROWS_AS((check_jacobian_m_fd<1, 1>(xonly, mu, {}, {0})), ConfigError);
}

TEST_CASE("measure kernels in two dimensions") {
  LinearQuadratic<2, 2>::Coeffs c;
  c.A << 0.1, 0.2, -0.1, 0.0;
  c.B = Mat<2, 2>::Identity();
  c.W << 0.3, 0.1, -0.2, 0.05;
  c.Q = Mat<2, 2>::Identity();
  c.C << 0.1, 0.0, 0.0, 0.1;
  c.S << 0.2, 0.05, 0.05, 0.1;
  c.QT = Mat<2, 2>::Identity();
  c.CT << 0.2, 0.0, 0.0, -0.1;
  LinearQuadratic<2, 2> m(c);
  std::vector<Vec<2>> at{Vec<2>(0.4, -0.3), Vec<2>(1.1, 0.6), Vec<2>(-0.8, 0.9), Vec<2>(0.1, 0.1)};
  ParticleMeasure<2> mu(at);
  GlobalConfig cfg = tight(0.02);
  const double T = 0.4;
  auto rep = solve_global<2, 2>(m, T, mu, cfg);
  auto jb = solve_jacobians<2, 2>(m, rep.traj, true);
  ParticleSolver<2, 2> solve = [&](const ParticleMeasure<2>& p) { return solve_global<2, 2>(m, T, p, cfg).traj; };
  auto [mx, mz] = check_jacobian_m_fd<2, 2>(jb, mu, solve, {0, 2});
  CHECK(mx.max_rel_err <= 1e-3);
  CHECK(mz.max_rel_err <= 1e-3);
  auto [fx, fz] = check_jacobian_x_fd<2, 2>(m, rep.traj, jb, {1, 3});
  CHECK(fx.max_rel_err <= 1e-4);
  CHECK(fz.max_rel_err <= 1e-3);
}
