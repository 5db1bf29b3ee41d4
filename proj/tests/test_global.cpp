#include <catch_amalgamated.hpp>

#include "mftc/constants.hpp"
#include "mftc/global.hpp"
#include "mftc/models/lq.hpp"
#include "mftc/models/nonlq.hpp"

#include <random>

using namespace mftc;
using V1 = Vec<1>;

static ParticleMeasure<1> gaussian_measure(std::size_t n, double mean, double sd, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(mean, sd);
  std::vector<V1> a(n);
  for (auto& x : a) x(0) = nd(rng);
  return ParticleMeasure<1>(a);
}

TEST_CASE("partition is built backward from T") {
  auto p = build_partition(TimeGrid{0.0, 1.0, 10}, 3);
  CHECK(p.breaks == std::vector<int>{0, 1, 4, 7, 10});
  CHECK(p.intervals() == 4);
  CHECK(p.sub(0).steps == 1);
  CHECK(p.sub(3).t1 == 1.0);
  CHECK(p.max_length() == Catch::Approx(0.3));
  auto q = build_partition(TimeGrid{0.0, 1.0, 10}, 5);
  CHECK(q.breaks == std::vector<int>{0, 5, 10});
  auto s = build_partition(TimeGrid{0.0, 1.0, 10}, 20);
  CHECK(s.breaks == std::vector<int>{0, 10});
  CHECK_THROWS_AS(build_partition(TimeGrid{0.0, 1.0, 10}, 0), ConfigError);
}

TEST_CASE("global LQ solve matches the Riccati oracle") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0);
  auto mu = gaussian_measure(100, 0.3, 1.0, 21);
  GlobalConfig cfg;
  cfg.picard.cone = ConeParams{compute_constants(m->constants()).k0};
  auto rep = solve_global<1, 1>(*m, 1.0, mu, cfg);
  CHECK(rep.partition.intervals() == 10);
  double zerr = 0.0, xerr = 0.0;
  for (std::size_t i = 0; i < mu.size(); ++i) {
    zerr = std::max(zerr, std::abs(rep.traj.Z[i](0) - mu[i](0)));
    for (int k = 0; k <= 1000; k += 100)
      xerr = std::max(xerr, std::abs(rep.traj.X[rep.traj.idx(k, i)](0) - mu[i](0) * std::exp(-0.001 * k)));
  }
  CHECK(zerr <= 1e-6);
  CHECK(xerr <= 1e-6);
  CHECK(rep.residual.max() <= 1e-6);
  CHECK(rep.min_cone_margin > 0.0);
  CHECK(rep.gamma_slope_max == Catch::Approx(1.0).margin(1e-6));
  CHECK(rep.pasting_gap <= 1e-9);
  CHECK(rep.halvings == 0);
  CHECK(rep.interval_iters.size() == 10);
}

TEST_CASE("short horizon degenerates to one local solve") {
  auto m = builtin_lq(0.2, 1, 1, 1, 2, 0.5);
  auto mu = gaussian_measure(30, 0.0, 1.0, 22);
  GlobalConfig cfg;
  auto rep = solve_global<1, 1>(*m, 0.05, mu, cfg);
  REQUIRE(rep.partition.intervals() == 1);
  auto loc = picard_local<1, 1>(*m, TimeGrid{0.0, 0.05, 50}, mu.atoms(), model_terminal(*m), cfg.picard);
  CHECK(rep.traj.X == loc.traj.X);
  CHECK(rep.traj.Z == loc.traj.Z);
  CHECK(rep.traj.alpha == loc.traj.alpha);
  CHECK(rep.interval_iters[0] == loc.iters);
}

TEST_CASE("hand-off reproduces the right field at its initial node") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0.3);
  auto mu = gaussian_measure(20, 0.0, 1.0, 23);
  GlobalConfig cfg;
  auto rep = solve_global<1, 1>(*m, 0.3, mu, cfg);
  REQUIRE(rep.interval_fields.size() == 3);
  for (int j = 1; j < 3; ++j) {
    const auto& f = rep.interval_fields[j];
    std::vector<V1> at(f->loc.begin(), f->loc.begin() + f->N), out;
    handoff_terminal<1>(f)(ParticleMeasure<1>(at), out);
    for (std::size_t i = 0; i < f->N; ++i) CHECK(out[i](0) == f->val[f->idx(0, i)](0));
  }
}

TEST_CASE("sweep and continuation agree on LQ") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0);
  auto mu = gaussian_measure(50, 0.3, 1.0, 24);
  GlobalConfig a, b;
  b.strategy = Strategy::continuation;
  auto ra = solve_global<1, 1>(*m, 1.0, mu, a);
  auto rb = solve_global<1, 1>(*m, 1.0, mu, b);
  CHECK(rb.horizons == 10);
  CHECK(agreement_check(ra, rb) <= 1e-8);
}

TEST_CASE("repeated solves are bit-identical") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  auto mu = gaussian_measure(20, 0.0, 1.0, 25);
  GlobalConfig cfg;
  auto a = solve_global<1, 1>(m, 0.4, mu, cfg);
  WorkerPool pool(3);
  auto b = solve_global<1, 1>(m, 0.4, mu, cfg, &pool);
  CHECK(agreement_check(a, b) == 0.0);
}

TEST_CASE("nonlq global solve certifies the residual") {
  NonLQModel m(0.05, 0.25, 0.125, 0.5);
  auto c = compute_constants(m.constants());
  auto mu = gaussian_measure(50, 0.0, 1.0, 26);
  GlobalConfig a, b;
  a.picard.cone = ConeParams{c.k0};
  b.picard.cone = a.picard.cone;
  b.strategy = Strategy::continuation;
  auto ra = solve_global<1, 1>(m, 1.0, mu, a);
  CHECK(ra.residual.max() <= 1e-6);
  CHECK(ra.min_cone_margin > 0.0);
  CHECK(ra.gamma_slope_max <= c.Lstar_0);
  auto rb = solve_global<1, 1>(m, 1.0, mu, b);
  CHECK(agreement_check(ra, rb) <= 1e-6);
}

TEST_CASE("intervals are halved on local non-contraction") {
  // qT != 1 so the seed gamma = p is not already the fixed point
  auto m = builtin_lq(0, 1, 1, 1, 3, 0);
  auto mu = gaussian_measure(10, 0.0, 1.0, 27);
  GlobalConfig cfg;
  cfg.cap = 1.0;
  cfg.picard.max_iter = 6;
  auto rep = solve_global<1, 1>(*m, 1.0, mu, cfg);
  CHECK(rep.halvings > 0);
  CHECK(rep.partition.max_length() < 1.0);
  CHECK(rep.residual.max() <= 1e-6);

  cfg.picard.max_iter = 1;
  cfg.dt = 0.1;
  try {
    solve_global<1, 1>(*m, 1.0, mu, cfg);
    FAIL("expected SolverError");
  } catch (const SolverError& e) {
    CHECK(std::string(e.what()).find("single-step") != std::string::npos);
    CHECK_FALSE(e.history.empty());
  }
}

TEST_CASE("agreement check rejects mismatched grids") {
  TrajectoryBundle<1, 1> a, b;
  a.resize(TimeGrid{0, 1, 10}, 3);
  b.resize(TimeGrid{0, 1, 20}, 3);
  CHECK_THROWS_AS(agreement_check(a, b), ComparisonError);
  b.resize(TimeGrid{0, 1, 10}, 4);
  CHECK_THROWS_AS(agreement_check(a, b), ComparisonError);
}

TEST_CASE("global config validation") {
  auto m = builtin_lq(0, 1, 1, 1, 1, 0);
  auto mu = gaussian_measure(5, 0.0, 1.0, 28);
  GlobalConfig cfg;
  CHECK_THROWS_AS((solve_global<1, 1>(*m, 0.0, mu, cfg)), ConfigError);
  cfg.dt = -1;
  CHECK_THROWS_AS((solve_global<1, 1>(*m, 1.0, mu, cfg)), ConfigError);
  CHECK_THROWS_AS(strategy_from_string("bogus"), ConfigError);
  CHECK(strategy_from_string("continuation") == Strategy::continuation);
}
