#pragma once

#include "mftc/constants.hpp"
#include "mftc/fbode.hpp"

#include <Eigen/LU>

namespace mftc {

struct SensitivityConfig {
  // The measure kernels need N^2 blocks per node.
  std::size_t max_particles = 200;
  double memory_cap_bytes = 2e9;
  // DxZ DxX^-1 is used for d_x gamma only below this condition number.
  double cond_limit = 1e6;
  ControlSolveConfig control;

  void validate() const {
    if (max_particles < 1) throw ConfigError("sensitivity: max_particles must be >= 1");
    if (!(memory_cap_bytes > 0.0)) throw ConfigError("sensitivity: memory_cap_bytes must be positive");
    if (!(cond_limit > 1.0)) throw ConfigError("sensitivity: cond_limit must exceed 1");
    control.validate();
  }
};

// Jacobian flows along a solved trajectory. Node-major storage: per particle
// [k * N + i], kernels [(k * N + i) * N + j]. The kernels are scaled so that
// the derivative of X_i in atom j of the particle system is
//   delta_ij DxX_i + DmX[i][j] / N.
template <int Dx, int Da>
struct JacobianBundle {
  using M = Mat<Dx, Dx>;
  TimeGrid grid;
  std::size_t N = 0;
  std::vector<M> DxX, DxZ;
  // d_x gamma along the flow (Riccati of the frozen-measure x-flow)
  std::vector<M> Gx;
  bool has_measure = false;
  std::vector<M> DmX, DmZ;
  // d_mu gamma(X_i)(X_j) along the flow
  std::vector<M> Gm;
  // max over nodes of |d/ds <DxZ, DxX>| product rule vs right-hand side
  double duality_defect = 0.0;

  std::size_t idx(int k, std::size_t i) const { return static_cast<std::size_t>(k) * N + i; }
  std::size_t kidx(int k, std::size_t i, std::size_t j) const { return (static_cast<std::size_t>(k) * N + i) * N + j; }
};

namespace detail {

// Particle data at half-step resolution: entry s is local time u = s / 2.
// Midpoint states are cubic interpolants of the nodes with the control
// re-solved there.
template <int Dx, int Da>
struct HalfStepData {
  int K = 0;
  std::size_t N = 0;
  std::vector<ParticleMeasure<Dx>> mu;
  std::vector<Feat> feat;
  std::vector<std::vector<Vec<Dx>>> Z;
  std::vector<std::vector<Vec<Da>>> alpha;

  MeasureView<Dx> view(int s) const { return MeasureView<Dx>{&mu[s], feat[s]}; }
};

template <class T, class Get>
T cubic_at(int K, double u, Get&& get) {
  auto st = cubic_stencil(K, u);
  T r = st.w[0] * get(st.first);
  for (int j = 1; j < st.count; ++j) r += st.w[j] * get(st.first + j);
  return r;
}

template <int Dx, int Da>
HalfStepData<Dx, Da> half_step_data(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb,
                                    const ControlSolveConfig& cc, WorkerPool* pool) {
  HalfStepData<Dx, Da> d;
  d.K = tb.grid.steps;
  d.N = tb.N;
  const int S = 2 * d.K + 1;
  d.mu.resize(S);
  d.feat.resize(S);
  d.Z.resize(S);
  d.alpha.resize(S);
  for (int s = 0; s < S; ++s) {
    std::vector<Vec<Dx>> X(d.N);
    auto& Z = d.Z[s];
    auto& al = d.alpha[s];
    Z.resize(d.N);
    al.resize(d.N);
    if (s % 2 == 0) {
      const int k = s / 2;
      for (std::size_t i = 0; i < d.N; ++i) {
        X[i] = tb.X[tb.idx(k, i)];
        Z[i] = tb.Z[tb.idx(k, i)];
        al[i] = tb.alpha[tb.idx(k, i)];
      }
    } else {
      const double u = 0.5 * s;
      for (std::size_t i = 0; i < d.N; ++i) {
        X[i] = cubic_at<Vec<Dx>>(d.K, u, [&](int k) { return tb.X[tb.idx(k, i)]; });
        Z[i] = cubic_at<Vec<Dx>>(d.K, u, [&](int k) { return tb.Z[tb.idx(k, i)]; });
        al[i] = cubic_at<Vec<Da>>(d.K, u, [&](int k) { return tb.alpha[tb.idx(k, i)]; });
      }
    }
    d.mu[s] = ParticleMeasure<Dx>(std::move(X));
    d.feat[s] = m.features(d.mu[s]);
    if (s % 2 == 1) {
      auto v = d.view(s);
      parallel_for(pool, d.N, [&](std::size_t i) {
        Vec<Da> w = al[i];
        al[i] = solve_alpha(m, d.mu[s][i], v, Z[i], cc, &w);
      });
    }
  }
  return d;
}

// Coefficients of the linearised particle system at one half-step:
//   dX' = A dX + B dZ,   dZ' = -(C dX + D dZ)
// Per-particle blocks describe the x-flow with the measure flow frozen; the
// full matrices (n = N Dx) include all measure couplings.
template <int Dx, int Da>
struct StageCoeffs {
  using M = Mat<Dx, Dx>;
  std::vector<M> Ax, Bx, Cx, Dxx;
  Eigen::MatrixXd A, B, C, D;
};

template <int Dx, int Da>
StageCoeffs<Dx, Da> stage_coeffs(const Model<Dx, Da>& m, const HalfStepData<Dx, Da>& d, int s, bool full,
                                 WorkerPool* pool) {
  using M = Mat<Dx, Dx>;
  using MXA = Mat<Dx, Da>;
  const std::size_t N = d.N;
  const double invN = 1.0 / double(N);
  const auto& X = d.mu[s].atoms();
  const auto& Z = d.Z[s];
  const auto& al = d.alpha[s];
  const MeasureView<Dx> v = d.view(s);

  StageCoeffs<Dx, Da> c;
  c.Ax.resize(N);
  c.Bx.resize(N);
  c.Cx.resize(N);
  c.Dxx.resize(N);
  std::vector<AlphaDerivatives<Dx, Da>> ad(N);
  std::vector<MXA> fa(N), Hxa(N);
  parallel_for(pool, N, [&](std::size_t i) {
    ad[i] = alpha_derivatives(m, X[i], v, Z[i], al[i]);
    M fx = m.fx(X[i], v, al[i]);
    fa[i] = m.fa(X[i], v, al[i]);
    auto fxx = m.fxx(X[i], v, al[i]);
    auto fax = m.fax(X[i], v, al[i]);
    M Hxx = m.gxx(X[i], v, al[i]);
    Hxa[i] = m.gax(X[i], v, al[i]).transpose();
    for (int k = 0; k < Dx; ++k) {
      Hxx += Z[i](k) * fxx[k];
      Hxa[i] += Z[i](k) * fax[k].transpose();
    }
    // evaluation-point derivative of the adjoint measure term
    M T8 = pairwise_mean<M>(N, [&](std::size_t l) -> M {
      M r = m.gxtm(X[l], v, al[l], X[i]);
      auto t = m.fxtm(X[l], v, al[l], X[i]);
      for (int k = 0; k < Dx; ++k) r += Z[l](k) * t[k];
      return r;
    });
    c.Ax[i] = fx + fa[i] * ad[i].dx;
    c.Bx[i] = fa[i] * ad[i].dz;
    c.Cx[i] = Hxx + Hxa[i] * ad[i].dx + T8;
    c.Dxx[i] = fx.transpose() + Hxa[i] * ad[i].dz;
  });
  if (!full) return c;

  const Eigen::Index n = static_cast<Eigen::Index>(N) * Dx;
  const Eigen::Index na = static_cast<Eigen::Index>(N) * Da;
  c.A.setZero(n, n);
  c.B.setZero(n, n);
  c.C.setZero(n, n);
  c.D.setZero(n, n);
  Eigen::MatrixXd Ebig(n, na), AMU(na, n);
  std::vector<M> G9;
  m.adjoint_measure_hessian(v, Z, al, G9);
  parallel_for(pool, N, [&](std::size_t i) {
    const Eigen::Index ri = static_cast<Eigen::Index>(i) * Dx;
    for (std::size_t l = 0; l < N; ++l) {
      const Eigen::Index cl = static_cast<Eigen::Index>(l) * Dx;
      Mat<Da, Dx> amu = ad[i].dmu(X[l]);
      M Fxm = m.gxm(X[i], v, al[i], X[l]).transpose();
      auto fxm_i = m.fxm(X[i], v, al[i], X[l]);
      for (int k = 0; k < Dx; ++k) Fxm += Z[i](k) * fxm_i[k].transpose();
      M Gxl = m.gxm(X[l], v, al[l], X[i]);
      auto fxm_l = m.fxm(X[l], v, al[l], X[i]);
      for (int k = 0; k < Dx; ++k) Gxl += Z[l](k) * fxm_l[k];
      MXA E = m.gam(X[l], v, al[l], X[i]).transpose();
      auto fam_l = m.fam(X[l], v, al[l], X[i]);
      for (int k = 0; k < Dx; ++k) E += Z[l](k) * fam_l[k].transpose();
      c.A.template block<Dx, Dx>(ri, cl) = invN * (m.fm(X[i], v, al[i], X[l]) + fa[i] * amu);
      c.C.template block<Dx, Dx>(ri, cl) = invN * (Hxa[i] * amu + Fxm + Gxl + E * ad[l].dx + G9[i * N + l]);
      c.D.template block<Dx, Dx>(ri, cl) = invN * (m.fm(X[l], v, al[l], X[i]).transpose() + E * ad[l].dz);
      Ebig.template block<Dx, Da>(ri, static_cast<Eigen::Index>(l) * Da) = E;
      AMU.template block<Da, Dx>(static_cast<Eigen::Index>(i) * Da, cl) = amu;
    }
    c.A.template block<Dx, Dx>(ri, ri) += c.Ax[i];
    c.B.template block<Dx, Dx>(ri, ri) = c.Bx[i];
    c.C.template block<Dx, Dx>(ri, ri) += c.Cx[i];
    c.D.template block<Dx, Dx>(ri, ri) += c.Dxx[i];
  });
  // measure part of the controls inside the adjoint measure term
  c.C.noalias() += (invN * invN) * (Ebig * AMU);
  return c;
}

// Terminal Jacobians of p: per-particle (measure frozen) and full.
template <int Dx, int Da>
void terminal_coeffs(const Model<Dx, Da>& m, const HalfStepData<Dx, Da>& d, bool full, std::vector<Mat<Dx, Dx>>& Px,
                     Eigen::MatrixXd& P) {
  using M = Mat<Dx, Dx>;
  const int s = 2 * d.K;
  const std::size_t N = d.N;
  const double invN = 1.0 / double(N);
  const auto& X = d.mu[s].atoms();
  const MeasureView<Dx> v = d.view(s);
  Px.resize(N);
  for (std::size_t i = 0; i < N; ++i)
    Px[i] = m.kxx(X[i], v) + pairwise_mean<M>(N, [&](std::size_t l) -> M { return m.kxtm(X[l], v, X[i]); });
  if (!full) return;
  const Eigen::Index n = static_cast<Eigen::Index>(N) * Dx;
  P.setZero(n, n);
  for (std::size_t i = 0; i < N; ++i) {
    const Eigen::Index ri = static_cast<Eigen::Index>(i) * Dx;
    for (std::size_t l = 0; l < N; ++l) {
      M kmm = pairwise_mean<M>(N, [&](std::size_t q) -> M { return m.kmm(X[q], v, X[i], X[l]); });
      P.template block<Dx, Dx>(ri, static_cast<Eigen::Index>(l) * Dx) =
          invN * (m.kxm(X[i], v, X[l]).transpose() + m.kxm(X[l], v, X[i]) + kmm);
    }
    P.template block<Dx, Dx>(ri, ri) += Px[i];
  }
}

// -(C + D G + G A + G B G)
template <class Mt>
Mt riccati_rhs(const Mt& G, const Mt& A, const Mt& B, const Mt& C, const Mt& D) {
  Mt GB = G * B;
  return -(C + D * G + G * A + GB * G);
}

}  // namespace detail

// Jacobian flows of a solved trajectory. The x-flow freezes the measure
// flow; with `measure` the full linearised particle system is integrated
// and the kernels are extracted from it. d_x gamma comes from the backward
// Riccati equation of the respective linear system, unless `slopes` (1-D
// field mode) is given, in which case the x-flow uses the nodal slopes.
template <int Dx, int Da>
JacobianBundle<Dx, Da> solve_jacobians(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb, bool measure,
                                       const SensitivityConfig& cfg = {}, WorkerPool* pool = nullptr,
                                       const DecouplingFieldSample<Dx>* slopes = nullptr) {
  using M = Mat<Dx, Dx>;
  using MD = Eigen::MatrixXd;
  cfg.validate();
  if (tb.N == 0) throw ConfigError("solve_jacobians: empty trajectory");
  if (slopes && (slopes->mode != FieldMode::field || !(slopes->grid == tb.grid) || slopes->N != tb.N))
    throw ConfigError("solve_jacobians: slopes need a field-mode sample on the trajectory grid");
  const int K = tb.grid.steps;
  const std::size_t N = tb.N;
  const double dt = tb.grid.dt();
  const Eigen::Index n = static_cast<Eigen::Index>(N) * Dx;
  if (measure) {
    if (N > cfg.max_particles)
      throw CapabilityError("solve_jacobians: " + std::to_string(N) + " particles exceed the measure-kernel cap of " +
                            std::to_string(cfg.max_particles));
    double bytes = 5.0 * double(n) * double(n) * double(K + 1) * sizeof(double);
    if (bytes > cfg.memory_cap_bytes)
      throw CapabilityError("solve_jacobians: kernel storage exceeds the memory cap");
  }

  JacobianBundle<Dx, Da> jb;
  jb.grid = tb.grid;
  jb.N = N;
  jb.has_measure = measure;
  const std::size_t nodes = static_cast<std::size_t>(K + 1);
  jb.DxX.assign(nodes * N, M::Identity());
  jb.DxZ.assign(nodes * N, M::Zero());
  jb.Gx.assign(nodes * N, M::Zero());

  auto hs = detail::half_step_data(m, tb, cfg.control, pool);
  const int S = 2 * K + 1;
  // x-flow coefficients are small; keep them for every half-step
  std::vector<detail::StageCoeffs<Dx, Da>> xc(S);
  std::vector<M> Px;
  MD P;
  detail::terminal_coeffs(m, hs, measure, Px, P);

  // full coefficients are cached when they fit in a quarter of the cap
  const bool cache_full = measure && 4.0 * n * n * S * sizeof(double) <= 0.25 * cfg.memory_cap_bytes;
  std::vector<detail::StageCoeffs<Dx, Da>> fc(cache_full ? S : 0);
  auto coeff = [&](int s) -> detail::StageCoeffs<Dx, Da> {
    if (cache_full && fc[s].A.size() > 0) return fc[s];
    auto c = detail::stage_coeffs(m, hs, s, measure, pool);
    if (cache_full) fc[s] = c;
    return c;
  };
  for (int s = 0; s < S; ++s) {
    auto c = measure ? coeff(s) : detail::stage_coeffs(m, hs, s, false, pool);
    xc[s].Ax = std::move(c.Ax);
    xc[s].Bx = std::move(c.Bx);
    xc[s].Cx = std::move(c.Cx);
    xc[s].Dxx = std::move(c.Dxx);
  }

  // backward Riccati for d_x gamma
  for (std::size_t i = 0; i < N; ++i) jb.Gx[jb.idx(K, i)] = Px[i];
  if (slopes) {
    for (std::size_t q = 0; q < jb.Gx.size(); ++q) jb.Gx[q] = slopes->slope[q];
  } else {
    for (int k = K - 1; k >= 0; --k) {
      const int s1 = 2 * k + 2, sm = 2 * k + 1, s0 = 2 * k;
      const double h = -dt;
      for (std::size_t i = 0; i < N; ++i) {
        auto F = [&](const M& G, int s) {
          return detail::riccati_rhs<M>(G, xc[s].Ax[i], xc[s].Bx[i], xc[s].Cx[i], xc[s].Dxx[i]);
        };
        const M& G = jb.Gx[jb.idx(k + 1, i)];
        M k1 = F(G, s1);
        M k2 = F(G + 0.5 * h * k1, sm);
        M k3 = F(G + 0.5 * h * k2, sm);
        M k4 = F(G + h * k3, s0);
        jb.Gx[jb.idx(k, i)] = G + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
      }
    }
  }
  for (const auto& G : jb.Gx)
    if (!G.allFinite()) throw NumericError("solve_jacobians: d_x gamma blew up", -1);

  auto G_at = [&](std::size_t i, int s) -> M {
    if (s % 2 == 0) return jb.Gx[jb.idx(s / 2, i)];
    return detail::cubic_at<M>(K, 0.5 * s, [&](int k) { return jb.Gx[jb.idx(k, i)]; });
  };

  // forward DxX
  for (int k = 0; k < K; ++k) {
    const int s0 = 2 * k, sm = s0 + 1, s1 = s0 + 2;
    for (std::size_t i = 0; i < N; ++i) {
      auto F = [&](const M& Y, int s) -> M { return (xc[s].Ax[i] + xc[s].Bx[i] * G_at(i, s)) * Y; };
      const M& Y = jb.DxX[jb.idx(k, i)];
      M k1 = F(Y, s0);
      M k2 = F(Y + 0.5 * dt * k1, sm);
      M k3 = F(Y + 0.5 * dt * k2, sm);
      M k4 = F(Y + dt * k3, s1);
      jb.DxX[jb.idx(k + 1, i)] = Y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
  }
  auto X_at = [&](std::size_t i, int s) -> M {
    if (s % 2 == 0) return jb.DxX[jb.idx(s / 2, i)];
    return detail::cubic_at<M>(K, 0.5 * s, [&](int k) { return jb.DxX[jb.idx(k, i)]; });
  };
  // backward DxZ from its terminal condition
  for (std::size_t i = 0; i < N; ++i) jb.DxZ[jb.idx(K, i)] = Px[i] * jb.DxX[jb.idx(K, i)];
  for (int k = K - 1; k >= 0; --k) {
    const int s1 = 2 * k + 2, sm = 2 * k + 1, s0 = 2 * k;
    const double h = -dt;
    for (std::size_t i = 0; i < N; ++i) {
      auto F = [&](const M& Y, int s) -> M { return -(xc[s].Cx[i] * X_at(i, s) + xc[s].Dxx[i] * Y); };
      const M& Y = jb.DxZ[jb.idx(k + 1, i)];
      M k1 = F(Y, s1);
      M k2 = F(Y + 0.5 * h * k1, sm);
      M k3 = F(Y + 0.5 * h * k2, sm);
      M k4 = F(Y + h * k3, s0);
      jb.DxZ[jb.idx(k, i)] = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
  }
  // d/ds tr(DxZ^T DxX): three-point product rule against the right-hand side
  if (K >= 1) {
    for (int k = 0; k <= K; ++k) {
      auto sten = node_derivative_stencil(K, k);
      for (std::size_t i = 0; i < N; ++i) {
        double fd = 0.0;
        for (auto [node, w] : sten)
          if (w != 0.0) fd += w * (jb.DxZ[jb.idx(node, i)].transpose() * jb.DxX[jb.idx(node, i)]).trace();
        fd /= dt;
        const auto& c = xc[2 * k];
        const M& Y = jb.DxX[jb.idx(k, i)];
        const M& W = jb.DxZ[jb.idx(k, i)];
        M dW = -(c.Cx[i] * Y + c.Dxx[i] * W);
        M dY = c.Ax[i] * Y + c.Bx[i] * W;
        double direct = (dW.transpose() * Y + W.transpose() * dY).trace();
        jb.duality_defect = std::max(jb.duality_defect, std::abs(fd - direct) / (1.0 + std::abs(direct)));
      }
    }
  }
  for (std::size_t q = 0; q < jb.DxX.size(); ++q)
    if (!jb.DxX[q].allFinite() || !jb.DxZ[q].allFinite())
      throw NumericError("solve_jacobians: non-finite x-flow", static_cast<long>(q));
  if (!measure) return jb;

  // full system: Riccati, forward J, backward JZ
  std::vector<MD> G(nodes), J(nodes), JZ(nodes);
  G[K] = P;
  for (int k = K - 1; k >= 0; --k) {
    auto c1 = coeff(2 * k + 2), cm = coeff(2 * k + 1), c0 = coeff(2 * k);
    const double h = -dt;
    auto F = [](const MD& Gm, const detail::StageCoeffs<Dx, Da>& c) {
      return detail::riccati_rhs<MD>(Gm, c.A, c.B, c.C, c.D);
    };
    MD k1 = F(G[k + 1], c1);
    MD k2 = F(G[k + 1] + 0.5 * h * k1, cm);
    MD k3 = F(G[k + 1] + 0.5 * h * k2, cm);
    MD k4 = F(G[k + 1] + h * k3, c0);
    G[k] = G[k + 1] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!G[k].allFinite()) throw NumericError("solve_jacobians: measure Riccati blew up", k);
  }
  auto Gfull_at = [&](int s) -> MD {
    if (s % 2 == 0) return G[s / 2];
    return detail::cubic_at<MD>(K, 0.5 * s, [&](int k) -> const MD& { return G[k]; });
  };
  J[0] = MD::Identity(n, n);
  for (int k = 0; k < K; ++k) {
    auto c0 = coeff(2 * k), cm = coeff(2 * k + 1), c1 = coeff(2 * k + 2);
    MD Gm = Gfull_at(2 * k + 1);
    MD L0 = c0.A + c0.B * G[k], Lm = cm.A + cm.B * Gm, L1 = c1.A + c1.B * G[k + 1];
    MD k1 = L0 * J[k];
    MD k2 = Lm * (J[k] + 0.5 * dt * k1);
    MD k3 = Lm * (J[k] + 0.5 * dt * k2);
    MD k4 = L1 * (J[k] + dt * k3);
    J[k + 1] = J[k] + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }
  auto J_at = [&](int s) -> MD {
    if (s % 2 == 0) return J[s / 2];
    return detail::cubic_at<MD>(K, 0.5 * s, [&](int k) -> const MD& { return J[k]; });
  };
  JZ[K] = P * J[K];
  for (int k = K - 1; k >= 0; --k) {
    auto c1 = coeff(2 * k + 2), cm = coeff(2 * k + 1), c0 = coeff(2 * k);
    const double h = -dt;
    MD Jm = J_at(2 * k + 1);
    auto F = [](const MD& Y, const MD& Jx, const detail::StageCoeffs<Dx, Da>& c) -> MD {
      return -(c.C * Jx + c.D * Y);
    };
    MD k1 = F(JZ[k + 1], J[k + 1], c1);
    MD k2 = F(JZ[k + 1] + 0.5 * h * k1, Jm, cm);
    MD k3 = F(JZ[k + 1] + 0.5 * h * k2, Jm, cm);
    MD k4 = F(JZ[k + 1] + h * k3, J[k], c0);
    JZ[k] = JZ[k + 1] + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
  }

  const double Nd = double(N);
  jb.DmX.assign(nodes * N * N, M::Zero());
  jb.DmZ.assign(nodes * N * N, M::Zero());
  jb.Gm.assign(nodes * N * N, M::Zero());
  for (int k = 0; k <= K; ++k)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const Eigen::Index ri = static_cast<Eigen::Index>(i) * Dx, cj = static_cast<Eigen::Index>(j) * Dx;
        M x = J[k].block<Dx, Dx>(ri, cj), z = JZ[k].block<Dx, Dx>(ri, cj), g = G[k].block<Dx, Dx>(ri, cj);
        if (i == j) {
          x -= jb.DxX[jb.idx(k, i)];
          z -= jb.DxZ[jb.idx(k, i)];
          g -= jb.Gx[jb.idx(k, i)];
        }
        auto q = jb.kidx(k, i, j);
        jb.DmX[q] = Nd * x;
        jb.DmZ[q] = Nd * z;
        jb.Gm[q] = Nd * g;
      }
  for (std::size_t q = 0; q < jb.DmX.size(); ++q)
    if (!jb.DmX[q].allFinite() || !jb.DmZ[q].allFinite())
      throw NumericError("solve_jacobians: non-finite measure kernel", static_cast<long>(q));
  return jb;
}

// Flow of a single tagged point x0 in the frozen measure flow of `tb`
// (the point carries no mass). Solved by Newton shooting on Z(t0) with RK4
// on the half-step data, so it is independent of the Picard machinery.
template <int Dx, int Da>
struct TaggedFlow {
  std::vector<Vec<Dx>> X, Z;
  int newton_iters = 0;
  double terminal_residual = 0.0;
};

namespace detail {

template <int Dx, int Da>
class TaggedSystem {
 public:
  using X = Vec<Dx>;
  TaggedSystem(const Model<Dx, Da>& m, const HalfStepData<Dx, Da>& d, const TimeGrid& g,
               const ControlSolveConfig& cc)
      : m_(m), d_(d), g_(g), cc_(cc) {}

  // (X', Z') at half-step s
  std::pair<X, X> rhs(const X& x, const X& z, int s, Vec<Da>& warm) const {
    auto v = d_.view(s);
    Vec<Da> a = solve_alpha(m_, x, v, z, cc_, &warm);
    warm = a;
    const auto& at = d_.mu[s].atoms();
    const auto& Zs = d_.Z[s];
    const auto& As = d_.alpha[s];
    X meas = pairwise_mean<X>(at.size(), [&](std::size_t l) -> X {
      return m_.fm(at[l], v, As[l], x).transpose() * Zs[l] + m_.gm(at[l], v, As[l], x);
    });
    X dz = -(m_.fx(x, v, a).transpose() * z + m_.gx(x, v, a) + meas);
    return {m_.f(x, v, a), dz};
  }

  X terminal(const X& x) const {
    const int s = 2 * d_.K;
    auto v = d_.view(s);
    const auto& at = d_.mu[s].atoms();
    return m_.kx(x, v) + pairwise_mean<X>(at.size(), [&](std::size_t l) -> X { return m_.km(at[l], v, x); });
  }

  void integrate(const X& x0, const X& z0, std::vector<X>& Xs, std::vector<X>& Zs) const {
    const int K = d_.K;
    const double dt = g_.dt();
    Xs.assign(K + 1, x0);
    Zs.assign(K + 1, z0);
    Vec<Da> warm = Vec<Da>::Zero();
    for (int k = 0; k < K; ++k) {
      const X& x = Xs[k];
      const X& z = Zs[k];
      auto [a1, b1] = rhs(x, z, 2 * k, warm);
      auto [a2, b2] = rhs(x + 0.5 * dt * a1, z + 0.5 * dt * b1, 2 * k + 1, warm);
      auto [a3, b3] = rhs(x + 0.5 * dt * a2, z + 0.5 * dt * b2, 2 * k + 1, warm);
      auto [a4, b4] = rhs(x + dt * a3, z + dt * b3, 2 * k + 2, warm);
      Xs[k + 1] = x + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
      Zs[k + 1] = z + (dt / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
    }
  }

 private:
  const Model<Dx, Da>& m_;
  const HalfStepData<Dx, Da>& d_;
  TimeGrid g_;
  ControlSolveConfig cc_;
};

template <int Dx, int Da>
TaggedFlow<Dx, Da> tagged_flow_impl(const Model<Dx, Da>& m, const HalfStepData<Dx, Da>& d, const TimeGrid& g,
                                    const Vec<Dx>& x0, const Vec<Dx>& z_guess, const ControlSolveConfig& cc,
                                    double tol, int max_iter) {
  using X = Vec<Dx>;
  TaggedSystem<Dx, Da> sys(m, d, g, cc);
  TaggedFlow<Dx, Da> out;
  X z = z_guess;
  auto resid = [&](const X& z0, std::vector<X>& Xs, std::vector<X>& Zs) {
    sys.integrate(x0, z0, Xs, Zs);
    return X(Zs.back() - sys.terminal(Xs.back()));
  };
  std::vector<X> Xs, Zs, Xp, Zp;
  X F = resid(z, Xs, Zs);
  for (int it = 0; it < max_iter; ++it) {
    out.newton_iters = it;
    double scale = 1.0 + Zs.back().norm();
    if (F.norm() <= tol * scale) break;
    Mat<Dx, Dx> Jm;
    for (int c = 0; c < Dx; ++c) {
      double h = 1e-7 * (1.0 + std::abs(z(c)));
      X zp = z;
      zp(c) += h;
      X zm = z;
      zm(c) -= h;
      Jm.col(c) = (resid(zp, Xp, Zp) - resid(zm, Xp, Zp)) / (2.0 * h);
    }
    X step = Jm.fullPivLu().solve(F);
    double lam = 1.0;
    bool ok = false;
    for (int b = 0; b < 30; ++b) {
      X zn = z - lam * step;
      X Fn = resid(zn, Xp, Zp);
      if (Fn.allFinite() && Fn.norm() < F.norm()) {
        z = zn;
        F = Fn;
        Xs.swap(Xp);
        Zs.swap(Zp);
        ok = true;
        break;
      }
      lam *= 0.5;
    }
    if (!ok) break;
  }
  out.X = std::move(Xs);
  out.Z = std::move(Zs);
  out.terminal_residual = F.norm();
  return out;
}

}  // namespace detail

template <int Dx, int Da>
TaggedFlow<Dx, Da> tagged_flow(const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb, const Vec<Dx>& x0,
                               const Vec<Dx>& z_guess, const ControlSolveConfig& cc = {}, double tol = 1e-13,
                               int max_iter = 50, WorkerPool* pool = nullptr) {
  auto d = detail::half_step_data(m, tb, cc, pool);
  return detail::tagged_flow_impl(m, d, tb.grid, x0, z_guess, cc, tol, max_iter);
}

struct JacobianCheckEntry {
  double max_rel_err = 0.0;
  std::size_t worst_particle = 0;
};

// Central differences of tagged flows in the initial point against DxX and
// DxZ. The error of particle i is max_k |fd - an| / max(max_k |an|, floor).
template <int Dx, int Da>
std::pair<JacobianCheckEntry, JacobianCheckEntry> check_jacobian_x_fd(
    const Model<Dx, Da>& m, const TrajectoryBundle<Dx, Da>& tb, const JacobianBundle<Dx, Da>& jb,
    const std::vector<std::size_t>& particles, double h = 1e-5, const ControlSolveConfig& cc = {},
    double floor = 1e-8, WorkerPool* pool = nullptr) {
  using X = Vec<Dx>;
  auto d = detail::half_step_data(m, tb, cc, pool);
  const int K = tb.grid.steps;
  JacobianCheckEntry ex, ez;
  std::vector<std::pair<double, double>> errs(particles.size());
  parallel_for(pool, particles.size(), [&](std::size_t p) {
    const std::size_t i = particles[p];
    double num_x = 0.0, den_x = 0.0, num_z = 0.0, den_z = 0.0;
    for (int c = 0; c < Dx; ++c) {
      X e = X::Zero();
      e(c) = h;
      const X x0 = tb.X[tb.idx(0, i)];
      const X z0 = tb.Z[tb.idx(0, i)];
      const Mat<Dx, Dx>& G0 = jb.Gx[jb.idx(0, i)];
      auto fp = detail::tagged_flow_impl(m, d, tb.grid, X(x0 + e), X(z0 + G0 * e), cc, 1e-14, 50);
      auto fm = detail::tagged_flow_impl(m, d, tb.grid, X(x0 - e), X(z0 - G0 * e), cc, 1e-14, 50);
      for (int k = 0; k <= K; ++k) {
        X dx = (fp.X[k] - fm.X[k]) / (2.0 * h), dz = (fp.Z[k] - fm.Z[k]) / (2.0 * h);
        X ax = jb.DxX[jb.idx(k, i)].col(c), az = jb.DxZ[jb.idx(k, i)].col(c);
        num_x = std::max(num_x, (dx - ax).norm());
        den_x = std::max(den_x, ax.norm());
        num_z = std::max(num_z, (dz - az).norm());
        den_z = std::max(den_z, az.norm());
      }
    }
    errs[p] = {num_x / std::max(den_x, floor), num_z / std::max(den_z, floor)};
  });
  for (std::size_t p = 0; p < particles.size(); ++p) {
    if (errs[p].first > ex.max_rel_err) ex = {errs[p].first, particles[p]};
    if (errs[p].second > ez.max_rel_err) ez = {errs[p].second, particles[p]};
  }
  return {ex, ez};
}

// Re-solves the particle system for atom j shifted by +-h e_c and compares
//   N ((X_i^+ - X_i^-) / 2h - delta_ij DxX_i)
// with DmX[i][j] (same for Z). Errors are scaled by the largest kernel
// entry of column j over all nodes and particles.
template <int Dx, int Da>
using ParticleSolver = std::function<TrajectoryBundle<Dx, Da>(const ParticleMeasure<Dx>&)>;

template <int Dx, int Da>
std::pair<JacobianCheckEntry, JacobianCheckEntry> check_jacobian_m_fd(const JacobianBundle<Dx, Da>& jb,
                                                                      const ParticleMeasure<Dx>& mu0,
                                                                      const ParticleSolver<Dx, Da>& solve,
                                                                      const std::vector<std::size_t>& atoms,
                                                                      double h = 1e-5, double floor = 1e-8) {
  using X = Vec<Dx>;
  if (!jb.has_measure) throw ConfigError("check_jacobian_m_fd: bundle has no measure kernels");
  const int K = jb.grid.steps;
  const std::size_t N = jb.N;
  const double Nd = double(N);
  JacobianCheckEntry ex, ez;
  for (std::size_t j : atoms) {
    double num_x = 0.0, den_x = 0.0, num_z = 0.0, den_z = 0.0;
    for (int c = 0; c < Dx; ++c) {
      X e = X::Zero();
      e(c) = h;
      auto tp = solve(mu0.perturb_atom(j, e));
      auto tm = solve(mu0.perturb_atom(j, -e));
      if (!(tp.grid == jb.grid) || tp.N != N) throw ComparisonError("check_jacobian_m_fd: solver changed the grid");
      for (int k = 0; k <= K; ++k)
        for (std::size_t i = 0; i < N; ++i) {
          auto q = tp.idx(k, i);
          X dx = Nd * (tp.X[q] - tm.X[q]) / (2.0 * h), dz = Nd * (tp.Z[q] - tm.Z[q]) / (2.0 * h);
          if (i == j) {
            dx -= Nd * jb.DxX[jb.idx(k, i)].col(c);
            dz -= Nd * jb.DxZ[jb.idx(k, i)].col(c);
          }
          X ax = jb.DmX[jb.kidx(k, i, j)].col(c), az = jb.DmZ[jb.kidx(k, i, j)].col(c);
          num_x = std::max(num_x, (dx - ax).norm());
          den_x = std::max(den_x, ax.norm());
          num_z = std::max(num_z, (dz - az).norm());
          den_z = std::max(den_z, az.norm());
        }
    }
    double rx = num_x / std::max(den_x, floor), rz = num_z / std::max(den_z, floor);
    if (rx > ex.max_rel_err) ex = {rx, j};
    if (rz > ez.max_rel_err) ez = {rz, j};
  }
  return {ex, ez};
}

// Uniform translation of all atoms: DxX_i + (1/N) sum_j DmX[i][j] against
// central differences of re-solved trajectories. Returns the max relative
// error over nodes and particles.
template <int Dx, int Da>
double check_translation_fd(const JacobianBundle<Dx, Da>& jb, const ParticleMeasure<Dx>& mu0,
                            const ParticleSolver<Dx, Da>& solve, double h = 1e-5) {
  using X = Vec<Dx>;
  if (!jb.has_measure) throw ConfigError("check_translation_fd: bundle has no measure kernels");
  const int K = jb.grid.steps;
  const std::size_t N = jb.N;
  double num = 0.0, den = 0.0;
  for (int c = 0; c < Dx; ++c) {
    X e = X::Zero();
    e(c) = h;
    auto tp = solve(mu0.push_forward([&](const X& x) { return X(x + e); }));
    auto tm = solve(mu0.push_forward([&](const X& x) { return X(x - e); }));
    for (int k = 0; k <= K; ++k)
      for (std::size_t i = 0; i < N; ++i) {
        X fd = (tp.X[tp.idx(k, i)] - tm.X[tm.idx(k, i)]) / (2.0 * h);
        X an = jb.DxX[jb.idx(k, i)].col(c);
        for (std::size_t j = 0; j < N; ++j) an += jb.DmX[jb.kidx(k, i, j)].col(c) / double(N);
        num = std::max(num, (fd - an).norm());
        den = std::max(den, an.norm());
      }
  }
  return num / std::max(den, 1e-12);
}

struct AprioriReport {
  double Lstar_0 = 0.0, k0 = 0.0;
  double sup_dxgamma_riccati = 0.0;
  double sup_dxgamma_ratio = 0.0;
  double sup_dxgamma_slope = std::numeric_limits<double>::quiet_NaN();
  double sup_dmgamma = std::numeric_limits<double>::quiet_NaN();
  std::size_t singular_nodes = 0;
  double min_cone_margin = std::numeric_limits<double>::infinity();
  bool slope_ok = true, measure_ok = true, cone_ok = true;
  bool pass() const { return slope_ok && measure_ok && cone_ok; }
};

// Operator norms of d_x gamma along the flow (Riccati, DxZ DxX^-1 where
// DxX is well conditioned, nodal field slopes in 1-D) and the measure
// sensitivity sup_i (1/N) sum_j |d_mu gamma(X_i)(X_j)|, all against L*_0;
// cone margins of the field values against k0.
template <int Dx, int Da>
AprioriReport verify_apriori(const JacobianBundle<Dx, Da>& jb, const DecouplingFieldSample<Dx>& field,
                             const ConstantsReport& constants, double cond_limit = 1e6) {
  using M = Mat<Dx, Dx>;
  if (!(field.grid == jb.grid) || field.N != jb.N) throw ComparisonError("verify_apriori: bundles do not match");
  AprioriReport r;
  r.Lstar_0 = constants.Lstar_0;
  r.k0 = constants.k0;
  auto opnorm = [](const M& a) { return Eigen::JacobiSVD<M>(a).singularValues()(0); };
  const int K = jb.grid.steps;
  const std::size_t N = jb.N;
  for (int k = 0; k <= K; ++k) {
    double m1 = 0.0;
    for (std::size_t i = 0; i < N; ++i) m1 += field.loc[field.idx(k, i)].norm();
    m1 /= double(N);
    for (std::size_t i = 0; i < N; ++i) {
      auto q = jb.idx(k, i);
      r.sup_dxgamma_riccati = std::max(r.sup_dxgamma_riccati, opnorm(jb.Gx[q]));
      Eigen::JacobiSVD<M> svd(jb.DxX[q]);
      double smin = svd.singularValues()(Dx - 1), smax = svd.singularValues()(0);
      if (smin > 0.0 && smax / smin < cond_limit)
        r.sup_dxgamma_ratio = std::max(r.sup_dxgamma_ratio, opnorm(M(jb.DxZ[q] * jb.DxX[q].inverse())));
      else
        ++r.singular_nodes;
      double margin =
          0.5 * r.k0 * (1.0 + field.loc[q].norm() + m1) - field.val[q].norm();
      r.min_cone_margin = std::min(r.min_cone_margin, margin);
    }
  }
  if (field.mode == FieldMode::field) {
    r.sup_dxgamma_slope = 0.0;
    for (const auto& s : field.slope) r.sup_dxgamma_slope = std::max(r.sup_dxgamma_slope, s.norm());
  }
  if (jb.has_measure) {
    r.sup_dmgamma = 0.0;
    for (int k = 0; k <= K; ++k)
      for (std::size_t i = 0; i < N; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) acc += opnorm(jb.Gm[jb.kidx(k, i, j)]);
        r.sup_dmgamma = std::max(r.sup_dmgamma, acc / double(N));
      }
  }
  double sx = std::max(r.sup_dxgamma_riccati, r.sup_dxgamma_ratio);
  if (std::isfinite(r.sup_dxgamma_slope)) sx = std::max(sx, r.sup_dxgamma_slope);
  r.slope_ok = sx <= r.Lstar_0;
  r.measure_ok = !jb.has_measure || r.sup_dmgamma <= r.Lstar_0;
  r.cone_ok = r.min_cone_margin >= 0.0;
  return r;
}

}  // namespace mftc
