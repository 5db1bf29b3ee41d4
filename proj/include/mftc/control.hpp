#pragma once

#include "mftc/model.hpp"

#include <Eigen/Cholesky>

#include <functional>
#include <limits>
#include <optional>
#include <type_traits>

namespace mftc {

struct ControlSolveConfig {
  enum class Init { zero, warm_start };
  double newton_tol = 1e-12;
  int newton_max_iter = 50;
  double damping = 1.0;
  Init init = Init::warm_start;

  void validate() const {
    if (!(newton_tol > 0.0)) throw ConfigError("control: newton_tol must be positive");
    if (newton_max_iter < 1) throw ConfigError("control: newton_max_iter must be >= 1");
    if (!(damping > 0.0 && damping <= 1.0)) throw ConfigError("control: damping must lie in (0, 1]");
  }
};

struct ConeParams {
  double k0 = 1.0;
};

struct ConeCheck {
  bool inside = true;
  double margin = 0.0;
};

// |z| <= k0/2 (1 + |x| + |mu|_1)
template <int Dx>
ConeCheck cone_check(const Vec<Dx>& x, const ParticleMeasure<Dx>& mu, const Vec<Dx>& z, ConeParams cone) {
  double r = 0.5 * cone.k0 * (1.0 + x.norm() + mu.mean_abs_norm());
  ConeCheck c;
  c.margin = r - z.norm();
  c.inside = c.margin >= 0.0;
  return c;
}

// Same as above with the first moment already known.
template <int Dx>
ConeCheck cone_check(const Vec<Dx>& x, double mu_norm1, const Vec<Dx>& z, ConeParams cone) {
  ConeCheck c;
  c.margin = 0.5 * cone.k0 * (1.0 + x.norm() + mu_norm1) - z.norm();
  c.inside = c.margin >= 0.0;
  return c;
}

// First-order condition d_a f(x, mu, a)^T z + d_a g(x, mu, a).
template <int Dx, int Da>
Vec<Da> foc_residual(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v, const Vec<Dx>& z,
                     const Vec<Da>& a) {
  return m.fa(x, v, a).transpose() * z + m.ga(x, v, a);
}

// Hessian of the Hamiltonian in the control: sum_k z_k d_aa f_k + d_aa g.
template <int Dx, int Da>
Mat<Da, Da> control_hessian(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v, const Vec<Dx>& z,
                            const Vec<Da>& a) {
  Mat<Da, Da> H = m.gaa(x, v, a);
  auto faa = m.faa(x, v, a);
  for (int k = 0; k < Dx; ++k) H += z(k) * faa[k];
  return H;
}

struct ControlSolveInfo {
  int iterations = 0;
  double residual = 0.0;
};

// Minimizer of a -> f(x, mu, a).z + g(x, mu, a) via damped Newton on the FOC.
// A Hessian that is not positive definite means the point lies outside the
// region where the minimizer is unique; this is reported as a cone
// violation.
template <int Dx, int Da>
Vec<Da> solve_alpha(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v, const Vec<Dx>& z,
                    const ControlSolveConfig& cfg = {}, const std::type_identity_t<Vec<Da>>* warm = nullptr,
                    std::optional<ConeParams> cone = std::nullopt, ControlSolveInfo* info = nullptr) {
  using A = Vec<Da>;
  if (cone) {
    auto c = cone_check<Dx>(x, v.measure(), z, *cone);
    if (!c.inside) throw ConeViolation("solve_alpha: point outside the cone", -1, c.margin);
  }
  A a = (warm && cfg.init == ControlSolveConfig::Init::warm_start) ? *warm : A::Zero();
  A r = foc_residual(m, x, v, z, a);
  double rn = r.norm();
  int it = 0;
  auto finish = [&]() {
    if (info) {
      info->iterations = it;
      info->residual = rn;
    }
    return a;
  };
  bool converged = rn <= cfg.newton_tol;
  for (; !converged && it < cfg.newton_max_iter; ++it) {
    if (!r.allFinite()) throw NumericError("solve_alpha: non-finite FOC residual");
    Eigen::LLT<Mat<Da, Da>> llt(control_hessian(m, x, v, z, a));
    if (llt.info() != Eigen::Success)
      throw ConeViolation("solve_alpha: control Hessian not positive definite", -1, 0.0);
    A step = -llt.solve(r);
    double t = cfg.damping;
    A trial;
    A rt;
    double rtn = std::numeric_limits<double>::infinity();
    for (int bt = 0; bt < 40; ++bt) {
      trial = a + t * step;
      rt = foc_residual(m, x, v, z, trial);
      rtn = rt.norm();
      if (rtn < rn || rtn <= cfg.newton_tol) break;
      t *= 0.5;
    }
    if (!(rtn < rn) && rtn > cfg.newton_tol) {
      // No decrease available: accept only if we are at rounding level.
      double scale = 1.0 + (m.fa(x, v, a).transpose() * z).norm() + m.ga(x, v, a).norm();
      if (rn <= 64.0 * std::numeric_limits<double>::epsilon() * scale) {
        converged = true;
        break;
      }
      throw SolverError("solve_alpha: Newton stagnated", rn);
    }
    a = trial;
    r = rt;
    rn = rtn;
    converged = rn <= cfg.newton_tol;
  }
  if (!converged) throw SolverError("solve_alpha: Newton did not converge", rn);
  // One polishing step brings the residual to rounding level; it is kept
  // only if it does not increase the residual.
  {
    Eigen::LLT<Mat<Da, Da>> llt(control_hessian(m, x, v, z, a));
    if (llt.info() == Eigen::Success) {
      A trial = a - llt.solve(r);
      A rt = foc_residual(m, x, v, z, trial);
      if (rt.allFinite() && rt.norm() <= rn) {
        a = trial;
        rn = rt.norm();
      }
    }
  }
  return finish();
}

template <int Dx, int Da>
struct AlphaDerivatives {
  Mat<Da, Dx> dx;  // d alpha / dx
  Mat<Da, Dx> dz;  // d alpha / dz
  Mat<Da, Da> H;   // control Hessian at the solution
  // d alpha / d mu at xt
  std::function<Mat<Da, Dx>(const Vec<Dx>&)> dmu;
};

// Implicit-function derivatives of the minimizer:
//   dx = -H^{-1}(sum_k z_k d_x d_a f_k + d_x d_a g)
//   dz = -H^{-1} d_a f^T
//   dmu(xt) = -H^{-1}(sum_k z_k d_mu d_a f_k(xt) + d_mu d_a g(xt))
// The returned dmu captures references to x, v, z and alpha.
template <int Dx, int Da>
AlphaDerivatives<Dx, Da> alpha_derivatives(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v,
                                           const Vec<Dx>& z, const Vec<Da>& a) {
  AlphaDerivatives<Dx, Da> d;
  d.H = control_hessian(m, x, v, z, a);
  Eigen::LLT<Mat<Da, Da>> llt(d.H);
  if (llt.info() != Eigen::Success)
    throw ConeViolation("alpha_derivatives: control Hessian not positive definite", -1, 0.0);
  Mat<Da, Dx> lax = m.gax(x, v, a);
  auto fax = m.fax(x, v, a);
  for (int k = 0; k < Dx; ++k) lax += z(k) * fax[k];
  d.dx = -llt.solve(lax);
  d.dz = -llt.solve(m.fa(x, v, a).transpose());
  d.dmu = [&m, &x, &v, &z, &a, llt](const Vec<Dx>& xt) -> Mat<Da, Dx> {
    Mat<Da, Dx> lam = m.gam(x, v, a, xt);
    auto fam = m.fam(x, v, a, xt);
    for (int k = 0; k < Dx; ++k) lam += z(k) * fam[k];
    return -llt.solve(lam);
  };
  return d;
}

// H(x, mu, z) = f(x, mu, a).z + g(x, mu, a) at the minimizer.
template <int Dx, int Da>
double hamiltonian(const Model<Dx, Da>& m, const Vec<Dx>& x, const MeasureView<Dx>& v, const Vec<Dx>& z,
                   const ControlSolveConfig& cfg = {}) {
  Vec<Da> a = solve_alpha(m, x, v, z, cfg);
  return m.f(x, v, a).dot(z) + m.g(x, v, a);
}

}  // namespace mftc
