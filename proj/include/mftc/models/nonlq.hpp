#pragma once

#include "mftc/model.hpp"


namespace mftc {

namespace nonlq_detail {

// Smoothed absolute value: |y| outside (-1, 1), a quartic inside.
inline double phi(double y) {
  double a = std::abs(y);
  if (a >= 1.0) return a;
  double y2 = y * y;
  return -y2 * y2 / 8.0 + 0.75 * y2 + 0.375;
}
inline double dphi(double y) {
  if (y >= 1.0) return 1.0;
  if (y <= -1.0) return -1.0;
  return -0.5 * y * y * y + 1.5 * y;
}
inline double d2phi(double y) {
  if (std::abs(y) >= 1.0) return 0.0;
  return -1.5 * y * y + 1.5;
}

// Largest of the second-derivative magnitudes of f (divided by eps1) times
// the growth weight 1 + |x| + Phi, where Phi >= |mu|_1 bounds the first
// moment. |phi'| <= 1 and |phi''| <= 3/2 are used for the probe points.
inline double c1_objective(double x, double a, double P) {
  double E = std::exp(-x * x - a * a - P * P);
  double ax = std::abs(x), aa = std::abs(a);
  double t = 0.0;
  t = std::max(t, 2.0 * ax * std::abs(1.0 - 2.0 * P * P) * E);    // d_mu d_mu
  t = std::max(t, 2.0 * std::abs(1.0 - 2.0 * a * a) * ax * E);    // d_a d_a
  t = std::max(t, 4.0 * ax * aa * P * E);                         // d_a d_mu
  t = std::max(t, 2.0 * aa * std::abs(1.0 - 2.0 * x * x) * E);    // d_a d_x
  t = std::max(t, 2.0 * ax * std::abs(3.0 - 2.0 * x * x) * E);    // d_x d_x
  t = std::max(t, 3.0 * ax * P * E);                              // d_xt d_mu
  t = std::max(t, 2.0 * std::abs(1.0 - 2.0 * x * x) * P * E);     // d_x d_mu
  return t * (1.0 + ax + P);
}

// Dense grid over x, a in [0, 6], Phi in [3/8, 6] followed by a shrinking
// pattern search from the best grid points.
inline double estimate_c1() {
  const int n = 97;
  const double lo_p = 0.375, hi = 6.0;
  struct Cand {
    double v, x, a, p;
  };
  std::vector<Cand> best;
  for (int i = 0; i < n; ++i) {
    double x = hi * i / (n - 1);
    for (int j = 0; j < n; ++j) {
      double a = hi * j / (n - 1);
      for (int l = 0; l < n; ++l) {
        double p = lo_p + (hi - lo_p) * l / (n - 1);
        double v = c1_objective(x, a, p);
        if (best.size() < 8 || v > best.back().v) {
          best.push_back({v, x, a, p});
          std::sort(best.begin(), best.end(), [](const Cand& u, const Cand& w) { return u.v > w.v; });
          if (best.size() > 8) best.pop_back();
        }
      }
    }
  }
  double top = 0.0;
  for (Cand c : best) {
    double step = hi / (n - 1);
    while (step > 1e-12) {
      bool moved = false;
      for (int d = 0; d < 3; ++d)
        for (double s : {-step, step}) {
          Cand t = c;
          (d == 0 ? t.x : d == 1 ? t.a : t.p) += s;
          t.x = std::max(t.x, 0.0);
          t.a = std::max(t.a, 0.0);
          t.p = std::max(t.p, lo_p);
          t.v = c1_objective(t.x, t.a, t.p);
          if (t.v > c.v) {
            c = t;
            moved = true;
          }
        }
      if (!moved) step *= 0.5;
    }
    top = std::max(top, c.v);
  }
  return top;
}

inline double c1_constant() {
  static const double c1 = estimate_c1();
  return c1;
}

}  // namespace nonlq_detail

// The one-dimensional non-linear-quadratic example:
//   f = x + a + mean + eps1 x E,  E = exp(-x^2 - a^2 - Phi^2),  Phi = int phi dmu
//   g = a^2/2 + x^2/2 - eps2 mean^2 + eps3 a mean
//   k = x^2/2 - eps4 x mean
class NonLQModel final : public Model<1, 1> {
 public:
  NonLQModel(double eps1, double eps2, double eps3, double eps4) : e1_(eps1), e2_(eps2), e3_(eps3), e4_(eps4) {
    auto bad = [](double v, double hi, bool open_hi) {
      return !std::isfinite(v) || v <= 0.0 || (open_hi ? v >= hi : v > hi);
    };
    if (bad(eps1, 1.0, true)) throw ConfigError("nonlq: eps1 must lie in (0, 1)");
    if (bad(eps2, 0.25, false)) throw ConfigError("nonlq: eps2 must lie in (0, 1/4]");
    if (bad(eps3, 0.125, false)) throw ConfigError("nonlq: eps3 must lie in (0, 1/8]");
    if (bad(eps4, 0.5, false)) throw ConfigError("nonlq: eps4 must lie in (0, 1/2]");
    c1_ = nonlq_detail::c1_constant();
  }

  std::string name() const override { return "nonlq"; }
  std::map<std::string, double> parameters() const override {
    return {{"eps1", e1_}, {"eps2", e2_}, {"eps3", e3_}, {"eps4", e4_}};
  }
  std::map<std::string, double> metadata() const override { return {{"C1_sampled", c1_}}; }
  bool h1_declared() const override { return true; }
  double c1() const { return c1_; }

  ModelConstants constants() const override {
    ModelConstants mc;
    mc.lambda_f = 0.25;
    mc.Lambda_f = 3.0;
    mc.lbar_f = c1_ * e1_;
    mc.lambda_g = 1.0;
    mc.Lambda_g = 1.5;
    mc.lbar_g = e3_;
    mc.l_g = 2.0 * e2_;
    mc.lambda_k = 1.0;
    mc.Lambda_k = 1.5;
    // The monotonicity triple sum of k equals -2 eps4 (mean Xtilde)^2.
    mc.l_k = 2.0 * e4_;
    mc.dx = mc.da = 1;
    return mc;
  }

  Feat features(const Measure& mu) const override {
    Feat f(2);
    const auto& at = mu.atoms();
    f(0) = pairwise_mean<double>(at.size(), [&](std::size_t i) { return at[i](0); });
    f(1) = pairwise_mean<double>(at.size(), [&](std::size_t i) { return nonlq_detail::phi(at[i](0)); });
    return f;
  }

  X f(const X& x, const View& v, const A& a) const override {
    return X(x(0) + a(0) + v.feat(0) + e1_ * x(0) * E(x, v, a));
  }
  MXX fx(const X& x, const View& v, const A& a) const override {
    return MXX(1.0 + e1_ * (1.0 - 2.0 * x(0) * x(0)) * E(x, v, a));
  }
  MXA fa(const X& x, const View& v, const A& a) const override {
    return MXA(1.0 - 2.0 * e1_ * a(0) * x(0) * E(x, v, a));
  }
  MXX fm(const X& x, const View& v, const A& a, const X& xt) const override {
    return MXX(1.0 - 2.0 * e1_ * nonlq_detail::dphi(xt(0)) * x(0) * v.feat(1) * E(x, v, a));
  }
  TXX fxx(const X& x, const View& v, const A& a) const override {
    double y = x(0);
    return {MXX(-2.0 * e1_ * y * (3.0 - 2.0 * y * y) * E(x, v, a))};
  }
  TAX fax(const X& x, const View& v, const A& a) const override {
    return {MAX(-2.0 * e1_ * a(0) * (1.0 - 2.0 * x(0) * x(0)) * E(x, v, a))};
  }
  TAA faa(const X& x, const View& v, const A& a) const override {
    return {MAA(-2.0 * e1_ * (1.0 - 2.0 * a(0) * a(0)) * x(0) * E(x, v, a))};
  }
  TXX fxm(const X& x, const View& v, const A& a, const X& xt) const override {
    return {MXX(-2.0 * e1_ * nonlq_detail::dphi(xt(0)) * (1.0 - 2.0 * x(0) * x(0)) * v.feat(1) * E(x, v, a))};
  }
  TXX fxtm(const X& x, const View& v, const A& a, const X& xt) const override {
    return {MXX(-2.0 * e1_ * nonlq_detail::d2phi(xt(0)) * x(0) * v.feat(1) * E(x, v, a))};
  }
  TAX fam(const X& x, const View& v, const A& a, const X& xt) const override {
    return {MAX(4.0 * e1_ * nonlq_detail::dphi(xt(0)) * x(0) * a(0) * v.feat(1) * E(x, v, a))};
  }
  TXX fmm(const X& x, const View& v, const A& a, const X& xt, const X& xh) const override {
    double P = v.feat(1);
    return {MXX(-2.0 * e1_ * nonlq_detail::dphi(xt(0)) * nonlq_detail::dphi(xh(0)) * x(0) * (1.0 - 2.0 * P * P) *
                E(x, v, a))};
  }

  double g(const X& x, const View& v, const A& a) const override {
    double m = v.feat(0);
    return 0.5 * a(0) * a(0) + 0.5 * x(0) * x(0) - e2_ * m * m + e3_ * a(0) * m;
  }
  X gx(const X& x, const View&, const A&) const override { return x; }
  A ga(const X&, const View& v, const A& a) const override { return A(a(0) + e3_ * v.feat(0)); }
  X gm(const X&, const View& v, const A& a, const X&) const override {
    return X(-2.0 * e2_ * v.feat(0) + e3_ * a(0));
  }
  MXX gxx(const X&, const View&, const A&) const override { return MXX(1.0); }
  MAX gax(const X&, const View&, const A&) const override { return MAX(0.0); }
  MAA gaa(const X&, const View&, const A&) const override { return MAA(1.0); }
  MXX gxm(const X&, const View&, const A&, const X&) const override { return MXX(0.0); }
  MXX gxtm(const X&, const View&, const A&, const X&) const override { return MXX(0.0); }
  MAX gam(const X&, const View&, const A&, const X&) const override { return MAX(e3_); }
  MXX gmm(const X&, const View&, const A&, const X&, const X&) const override { return MXX(-2.0 * e2_); }

  double k(const X& x, const View& v) const override { return 0.5 * x(0) * x(0) - e4_ * x(0) * v.feat(0); }
  X kx(const X& x, const View& v) const override { return X(x(0) - e4_ * v.feat(0)); }
  X km(const X& x, const View&, const X&) const override { return X(-e4_ * x(0)); }
  MXX kxx(const X&, const View&) const override { return MXX(1.0); }
  MXX kxm(const X&, const View&, const X&) const override { return MXX(-e4_); }
  MXX kxtm(const X&, const View&, const X&) const override { return MXX(0.0); }
  MXX kmm(const X&, const View&, const X&, const X&) const override { return MXX(0.0); }

  // sum_j fm_j(X_i) Z_j = sum_j Z_j - 2 eps1 Phi phi'(X_i) sum_j X_j E_j Z_j
  void adjoint_measure_terms(const View& v, const std::vector<X>& Z, const std::vector<A>& alpha,
                             std::vector<X>& out) const override {
    const auto& at = v.measure().atoms();
    const std::size_t n = at.size();
    double mz = pairwise_mean<double>(n, [&](std::size_t j) { return Z[j](0); });
    double mxez = pairwise_mean<double>(n, [&](std::size_t j) { return at[j](0) * E(at[j], v, alpha[j]) * Z[j](0); });
    double ma = pairwise_mean<double>(n, [&](std::size_t j) { return alpha[j](0); });
    double P = v.feat(1), m = v.feat(0);
    double gterm = -2.0 * e2_ * m + e3_ * ma;
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = X(mz - 2.0 * e1_ * P * nonlq_detail::dphi(at[i](0)) * mxez + gterm);
  }

  // -2 eps1 (1 - 2 Phi^2) phi'(X_i) phi'(X_r) mean(X E Z) - 2 eps2
  void adjoint_measure_hessian(const View& v, const std::vector<X>& Z, const std::vector<A>& alpha,
                               std::vector<MXX>& out) const override {
    const auto& at = v.measure().atoms();
    const std::size_t n = at.size();
    double mxez = pairwise_mean<double>(n, [&](std::size_t j) { return at[j](0) * E(at[j], v, alpha[j]) * Z[j](0); });
    double P = v.feat(1);
    double c = -2.0 * e1_ * (1.0 - 2.0 * P * P) * mxez;
    out.resize(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      double di = nonlq_detail::dphi(at[i](0));
      for (std::size_t r = 0; r < n; ++r) out[i * n + r] = MXX(c * di * nonlq_detail::dphi(at[r](0)) - 2.0 * e2_);
    }
  }

  void terminal_measure_terms(const View& v, std::vector<X>& out) const override {
    out.assign(v.measure().size(), X(-e4_ * v.feat(0)));
  }

 private:
  double E(const X& x, const View& v, const A& a) const {
    double P = v.feat(1);
    return std::exp(-x(0) * x(0) - a(0) * a(0) - P * P);
  }

  double e1_, e2_, e3_, e4_;
  double c1_ = 0.0;
};

inline std::shared_ptr<const NonLQModel> builtin_nonlq(double eps1, double eps2, double eps3, double eps4) {
  return std::make_shared<NonLQModel>(eps1, eps2, eps3, eps4);
}

}  // namespace mftc
