#pragma once

#include "mftc/model.hpp"

#include <functional>
#include <map>
#include <optional>

namespace mftc {

// One evaluation point for the derivative checker. When `atom` is set the
// measure-derivative probes xt (and xh for second measure derivatives) are
// taken at that atom and the measure is perturbed by moving it; otherwise
// the probe points are free and a small mixture mass is moved instead.
template <int Dx, int Da>
struct DerivProbe {
  Vec<Dx> x;
  ParticleMeasure<Dx> mu;
  Vec<Da> alpha;
  Vec<Dx> xt;
  Vec<Dx> xh;
  std::optional<std::size_t> atom;
};

struct DerivCheckEntry {
  double max_rel_err = 0.0;
  std::size_t worst_probe = 0;
};

struct DerivCheckReport {
  std::map<std::string, DerivCheckEntry> entries;
  double tolerance = 1e-5;
  std::vector<std::string> failures() const {
    std::vector<std::string> out;
    for (const auto& [k, e] : entries)
      if (!(e.max_rel_err <= tolerance)) out.push_back(k);
    return out;
  }
  bool pass() const { return failures().empty(); }
};

struct DerivCheckOptions {
  double h = 1e-5;
  double tolerance = 1e-5;
  // Error metric |fd - an| / max(|an|, floor), elementwise max.
  double floor = 1e-4;
  // Mixture masses used (with linear extrapolation to zero mass) when a
  // measure probe is not an atom.
  double theta1 = 2e-3;
  double theta2 = 1e-3;
};

namespace detail {

template <class M>
Eigen::VectorXd flat(const M& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index c = 0, p = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) v(p++) = m(r, c);
  return v;
}
inline Eigen::VectorXd flat(double s) { return Eigen::VectorXd::Constant(1, s); }

template <class T, std::size_t n>
Eigen::VectorXd flat(const std::array<T, n>& a) {
  std::vector<Eigen::VectorXd> parts;
  Eigen::Index total = 0;
  for (const auto& m : a) {
    parts.push_back(flat(m));
    total += parts.back().size();
  }
  Eigen::VectorXd v(total);
  Eigen::Index p = 0;
  for (auto& part : parts) {
    v.segment(p, part.size()) = part;
    p += part.size();
  }
  return v;
}

inline double rel_err(const Eigen::VectorXd& fd, const Eigen::VectorXd& an, double floor) {
  double e = 0.0;
  for (Eigen::Index i = 0; i < fd.size(); ++i)
    e = std::max(e, std::abs(fd(i) - an(i)) / std::max(std::abs(an(i)), floor));
  if (!fd.allFinite() || !an.allFinite()) e = std::numeric_limits<double>::infinity();
  return e;
}

}  // namespace detail

// Compares every analytic derivative of `model` with central differences.
//
// Layout conventions of the flattened comparisons follow the model
// contract: a Jacobian J of an output u with respect to an input w is
// compared column by column, J(:, j) ~ (u(w + h e_j) - u(w - h e_j)) / 2h.
template <int Dx, int Da>
DerivCheckReport finite_diff_check_derivatives(const Model<Dx, Da>& model,
                                               const std::vector<DerivProbe<Dx, Da>>& probes,
                                               DerivCheckOptions opt = {}) {
  using M = Model<Dx, Da>;
  using X = typename M::X;
  using A = typename M::A;
  using Measure = ParticleMeasure<Dx>;
  using VecFn = std::function<Eigen::VectorXd(const X&, const Measure&, const A&, const X&, const X&)>;

  DerivCheckReport rep;
  rep.tolerance = opt.tolerance;
  const double h = opt.h;

  auto record = [&](const std::string& name, double err, std::size_t pi) {
    auto& e = rep.entries[name];
    if (err > e.max_rel_err || !std::isfinite(err)) {
      e.max_rel_err = err;
      e.worst_probe = pi;
    }
  };

  // Jacobian of fn with respect to an argument slot, by central differences.
  // slot: 0 = x, 1 = alpha, 2 = xt
  auto jac_arg = [&](const VecFn& fn, const DerivProbe<Dx, Da>& p, int slot) {
    const int dim = (slot == 1) ? Da : Dx;
    Eigen::VectorXd base = fn(p.x, p.mu, p.alpha, p.xt, p.xh);
    Eigen::MatrixXd J(base.size(), dim);
    for (int j = 0; j < dim; ++j) {
      X xp = p.x, xm = p.x, tp = p.xt, tm = p.xt;
      A ap = p.alpha, am = p.alpha;
      if (slot == 0) {
        xp(j) += h;
        xm(j) -= h;
      } else if (slot == 1) {
        ap(j) += h;
        am(j) -= h;
      } else {
        tp(j) += h;
        tm(j) -= h;
      }
      J.col(j) = (fn(xp, p.mu, ap, tp, p.xh) - fn(xm, p.mu, am, tm, p.xh)) / (2.0 * h);
    }
    return J;
  };

  // L-derivative in the measure at point y: moves atom `atom` when given,
  // otherwise a mixture mass located at y.
  auto jac_measure = [&](const std::function<Eigen::VectorXd(const Measure&)>& fn, const Measure& mu, const X& y,
                         std::optional<std::size_t> atom) {
    Eigen::VectorXd base = fn(mu);
    Eigen::MatrixXd J(base.size(), Dx);
    const std::size_t n = mu.size();
    if (atom) {
      for (int b = 0; b < Dx; ++b) {
        X d = X::Zero();
        d(b) = h;
        J.col(b) = (fn(mu.perturb_atom(*atom, d)) - fn(mu.perturb_atom(*atom, -d))) * (double(n) / (2.0 * h));
      }
      return J;
    }
    auto mixture_quotient = [&](double theta, int b) {
      // replicate every atom R times and add one atom at y +- h e_b
      std::size_t R = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround((1.0 / theta - 1.0) / n)));
      std::vector<X> base_atoms;
      base_atoms.reserve(n * R + 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < R; ++r) base_atoms.push_back(mu[i]);
      double w = 1.0 / double(n * R + 1);
      X d = X::Zero();
      d(b) = h;
      auto ap = base_atoms, am = base_atoms;
      ap.push_back(y + d);
      am.push_back(y - d);
      Eigen::VectorXd q = (fn(Measure(ap)) - fn(Measure(am))) / (2.0 * h * w);
      return std::pair<double, Eigen::VectorXd>(w, q);
    };
    for (int b = 0; b < Dx; ++b) {
      auto [w1, q1] = mixture_quotient(opt.theta1, b);
      auto [w2, q2] = mixture_quotient(opt.theta2, b);
      J.col(b) = (w1 * q2 - w2 * q1) / (w1 - w2);
    }
    return J;
  };

  auto view_of = [&](const Measure& mu) { return model.view(mu); };

  for (std::size_t pi = 0; pi < probes.size(); ++pi) {
    DerivProbe<Dx, Da> p = probes[pi];
    if (p.atom) p.xh = p.mu[*p.atom];
    const auto v = view_of(p.mu);

    // -------- first derivatives
    VecFn F = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.f(x, vv, a));
    };
    VecFn Gs = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return detail::flat(model.g(x, vv, a));
    };
    VecFn Ks = [&](const X& x, const Measure& mu, const A&, const X&, const X&) {
      auto vv = view_of(mu);
      return detail::flat(model.k(x, vv));
    };
    auto cmp = [&](const std::string& name, const Eigen::MatrixXd& fd, const Eigen::VectorXd& an) {
      record(name, detail::rel_err(detail::flat(fd), an, opt.floor), pi);
    };

    cmp("fx", jac_arg(F, p, 0), detail::flat(model.fx(p.x, v, p.alpha)));
    cmp("fa", jac_arg(F, p, 1), detail::flat(model.fa(p.x, v, p.alpha)));
    cmp("gx", jac_arg(Gs, p, 0).transpose(), detail::flat(model.gx(p.x, v, p.alpha)));
    cmp("ga", jac_arg(Gs, p, 1).transpose(), detail::flat(model.ga(p.x, v, p.alpha)));
    cmp("kx", jac_arg(Ks, p, 0).transpose(), detail::flat(model.kx(p.x, v)));

    const X y = p.atom ? X(p.mu[*p.atom]) : p.xt;
    cmp("fm", jac_measure([&](const Measure& mu) { return F(p.x, mu, p.alpha, p.xt, p.xh); }, p.mu, y, p.atom),
        detail::flat(model.fm(p.x, v, p.alpha, y)));
    cmp("gm", jac_measure([&](const Measure& mu) { return Gs(p.x, mu, p.alpha, p.xt, p.xh); }, p.mu, y, p.atom).transpose(),
        detail::flat(model.gm(p.x, v, p.alpha, y)));
    cmp("km", jac_measure([&](const Measure& mu) { return Ks(p.x, mu, p.alpha, p.xt, p.xh); }, p.mu, y, p.atom).transpose(),
        detail::flat(model.km(p.x, v, y)));

    // -------- second derivatives of f, per component
    VecFn FX = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return detail::flat(model.fx(x, vv, a));
    };
    VecFn FA = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return detail::flat(model.fa(x, vv, a));
    };
    VecFn FM = [&](const X& x, const Measure& mu, const A& a, const X& xt, const X&) {
      auto vv = view_of(mu);
      return detail::flat(model.fm(x, vv, a, xt));
    };
    // Rearranges a finite-difference Jacobian of a flattened Dx x C matrix
    // (column-major) with respect to an input of size I into per-component
    // C x I blocks.
    auto per_component = [](const Eigen::MatrixXd& J, int C, int I) {
      Eigen::VectorXd out(Dx * C * I);
      Eigen::Index p2 = 0;
      for (int kk = 0; kk < Dx; ++kk)
        for (int i = 0; i < I; ++i)
          for (int c = 0; c < C; ++c) out(p2++) = J(c * Dx + kk, i);
      return out;
    };
    auto cmp_comp = [&](const std::string& name, const Eigen::MatrixXd& J, int C, int I, const Eigen::VectorXd& an) {
      record(name, detail::rel_err(per_component(J, C, I), an, opt.floor), pi);
    };

    cmp_comp("fxx", jac_arg(FX, p, 0), Dx, Dx, detail::flat(model.fxx(p.x, v, p.alpha)));
    cmp_comp("fax", jac_arg(FA, p, 0), Da, Dx, detail::flat(model.fax(p.x, v, p.alpha)));
    cmp_comp("faa", jac_arg(FA, p, 1), Da, Da, detail::flat(model.faa(p.x, v, p.alpha)));
    const X xt = p.xt;
    const auto& pt = p;
    cmp_comp("fxm", jac_arg(FM, pt, 0), Dx, Dx, detail::flat(model.fxm(p.x, v, p.alpha, xt)));
    cmp_comp("fxtm", jac_arg(FM, pt, 2), Dx, Dx, detail::flat(model.fxtm(p.x, v, p.alpha, xt)));
    {
      // fam is stored as Da x Dx per component; compare its transpose
      auto fam = model.fam(p.x, v, p.alpha, xt);
      std::array<Mat<Dx, Da>, Dx> famT;
      for (int kk = 0; kk < Dx; ++kk) famT[kk] = fam[kk].transpose();
      cmp_comp("fam", jac_arg(FM, pt, 1), Dx, Da, detail::flat(famT));
    }
    {
      Eigen::MatrixXd J = jac_measure([&](const Measure& mu) { return FM(p.x, mu, p.alpha, xt, p.xh); }, p.mu,
                                      p.xh, p.atom);
      cmp_comp("fmm", J, Dx, Dx, detail::flat(model.fmm(p.x, v, p.alpha, xt, p.xh)));
    }

    // -------- second derivatives of g
    VecFn GX = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.gx(x, vv, a));
    };
    VecFn GA = [&](const X& x, const Measure& mu, const A& a, const X&, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.ga(x, vv, a));
    };
    VecFn GM = [&](const X& x, const Measure& mu, const A& a, const X& t, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.gm(x, vv, a, t));
    };
    cmp("gxx", jac_arg(GX, p, 0), detail::flat(model.gxx(p.x, v, p.alpha)));
    cmp("gax", jac_arg(GA, p, 0), detail::flat(model.gax(p.x, v, p.alpha)));
    cmp("gaa", jac_arg(GA, p, 1), detail::flat(model.gaa(p.x, v, p.alpha)));
    cmp("gxm", jac_arg(GM, pt, 0), detail::flat(model.gxm(p.x, v, p.alpha, xt)));
    cmp("gxtm", jac_arg(GM, pt, 2), detail::flat(model.gxtm(p.x, v, p.alpha, xt)));
    cmp("gam", jac_arg(GM, pt, 1).transpose(), detail::flat(model.gam(p.x, v, p.alpha, xt)));
    cmp("gmm", jac_measure([&](const Measure& mu) { return GM(p.x, mu, p.alpha, xt, p.xh); }, p.mu, p.xh, p.atom),
        detail::flat(model.gmm(p.x, v, p.alpha, xt, p.xh)));

    // -------- second derivatives of k
    VecFn KX = [&](const X& x, const Measure& mu, const A&, const X&, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.kx(x, vv));
    };
    VecFn KM = [&](const X& x, const Measure& mu, const A&, const X& t, const X&) {
      auto vv = view_of(mu);
      return Eigen::VectorXd(model.km(x, vv, t));
    };
    cmp("kxx", jac_arg(KX, p, 0), detail::flat(model.kxx(p.x, v)));
    cmp("kxm", jac_arg(KM, pt, 0), detail::flat(model.kxm(p.x, v, xt)));
    cmp("kxtm", jac_arg(KM, pt, 2), detail::flat(model.kxtm(p.x, v, xt)));
    cmp("kmm", jac_measure([&](const Measure& mu) { return KM(p.x, mu, p.alpha, xt, p.xh); }, p.mu, p.xh, p.atom),
        detail::flat(model.kmm(p.x, v, xt, p.xh)));
  }
  return rep;
}

}  // namespace mftc
