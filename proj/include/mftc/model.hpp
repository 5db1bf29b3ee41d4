#pragma once

#include "mftc/core.hpp"
#include "mftc/measure.hpp"

#include <map>
#include <memory>
#include <string>

namespace mftc {

// Structural constants of (a1)-(a3). Dimensions are carried for the d_x
// factor in L*_0.
struct ModelConstants {
  double lambda_f = 1.0, Lambda_f = 1.0, lbar_f = 0.0;
  double lambda_g = 1.0, Lambda_g = 1.0, lbar_g = 0.0, l_g = 0.0;
  double lambda_k = 1.0, Lambda_k = 1.0, l_k = 0.0;
  int dx = 1, da = 1;

  // Returns an empty string when the declared invariants hold, otherwise a
  // description of the first violated one.
  std::string invariant_violation() const {
    auto pos = [](double v) { return std::isfinite(v) && v > 0.0; };
    auto nonneg = [](double v) { return std::isfinite(v) && v >= 0.0; };
    if (!pos(lambda_f) || !pos(lambda_g) || !pos(lambda_k)) return "lambda constants must be positive";
    if (!pos(Lambda_f) || !pos(Lambda_g) || !pos(Lambda_k)) return "Lambda constants must be positive";
    if (!nonneg(lbar_f) || !nonneg(lbar_g) || !nonneg(l_g) || !nonneg(l_k)) return "l constants must be nonnegative";
    if (Lambda_g < lambda_g) return "Lambda_g < lambda_g";
    if (Lambda_k < lambda_k) return "Lambda_k < lambda_k";
    if (l_g > 0.5 * lambda_g) return "l_g > lambda_g/2";
    if (l_k > 0.5 * lambda_k) return "l_k > lambda_k/2";
    if (dx < 1 || da < 1) return "dimensions must be positive";
    return {};
  }
};

// A measure argument together with the summary statistics a model needs
// (for example the mean). Built once per measure by Model::view.
template <int Dx>
struct MeasureView {
  const ParticleMeasure<Dx>* mu = nullptr;
  Feat feat;
  const ParticleMeasure<Dx>& measure() const { return *mu; }
};

// Coefficient contract for (f, g, k) and all first and second derivatives.
//
// Shapes (row = output, column = input):
//   fx  Dx x Dx, fa Dx x Da, fm(xt) Dx x Dx with [k][b] = d_mu f_k (xt)_b
//   gx  Dx, ga Da, gm(xt) Dx
//   gxx Dx x Dx, gax Da x Dx (Jacobian of ga in x), gaa Da x Da
//   gxm(xt)  Dx x Dx, Jacobian of gm(xt) in x
//   gxtm(xt) Dx x Dx, Jacobian of gm(xt) in xt
//   gam(xt)  Da x Dx, Jacobian of ga in the atom at xt
//   gmm(xt, xh) Dx x Dx, Jacobian of gm(xt) in the atom at xh
// f's second derivatives are per output component k with the same meaning.
// k's derivatives follow g without the control argument.
template <int Dx_, int Da_>
class Model {
 public:
  static constexpr int Dx = Dx_;
  static constexpr int Da = Da_;
  using X = Vec<Dx>;
  using A = Vec<Da>;
  using MXX = Mat<Dx, Dx>;
  using MXA = Mat<Dx, Da>;
  using MAX = Mat<Da, Dx>;
  using MAA = Mat<Da, Da>;
  using TXX = std::array<MXX, Dx>;
  using TAX = std::array<MAX, Dx>;
  using TAA = std::array<MAA, Dx>;
  using Measure = ParticleMeasure<Dx>;
  using View = MeasureView<Dx>;

  virtual ~Model() = default;

  virtual std::string name() const = 0;
  virtual std::map<std::string, double> parameters() const { return {}; }
  virtual std::map<std::string, double> metadata() const { return {}; }
  virtual ModelConstants constants() const = 0;
  // Whether the model declares (h1). The checker verifies it either way.
  virtual bool h1_declared() const { return false; }

  virtual Feat features(const Measure& mu) const = 0;
  View view(const Measure& mu) const { return View{&mu, features(mu)}; }

  // drift
  virtual X f(const X& x, const View& v, const A& a) const = 0;
  virtual MXX fx(const X& x, const View& v, const A& a) const = 0;
  virtual MXA fa(const X& x, const View& v, const A& a) const = 0;
  virtual MXX fm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual TXX fxx(const X& x, const View& v, const A& a) const = 0;
  virtual TAX fax(const X& x, const View& v, const A& a) const = 0;
  virtual TAA faa(const X& x, const View& v, const A& a) const = 0;
  virtual TXX fxm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual TXX fxtm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual TAX fam(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual TXX fmm(const X& x, const View& v, const A& a, const X& xt, const X& xh) const = 0;

  // running cost
  virtual double g(const X& x, const View& v, const A& a) const = 0;
  virtual X gx(const X& x, const View& v, const A& a) const = 0;
  virtual A ga(const X& x, const View& v, const A& a) const = 0;
  virtual X gm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual MXX gxx(const X& x, const View& v, const A& a) const = 0;
  virtual MAX gax(const X& x, const View& v, const A& a) const = 0;
  virtual MAA gaa(const X& x, const View& v, const A& a) const = 0;
  virtual MXX gxm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual MXX gxtm(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual MAX gam(const X& x, const View& v, const A& a, const X& xt) const = 0;
  virtual MXX gmm(const X& x, const View& v, const A& a, const X& xt, const X& xh) const = 0;

  // terminal cost
  virtual double k(const X& x, const View& v) const = 0;
  virtual X kx(const X& x, const View& v) const = 0;
  virtual X km(const X& x, const View& v, const X& xt) const = 0;
  virtual MXX kxx(const X& x, const View& v) const = 0;
  virtual MXX kxm(const X& x, const View& v, const X& xt) const = 0;
  virtual MXX kxtm(const X& x, const View& v, const X& xt) const = 0;
  virtual MXX kmm(const X& x, const View& v, const X& xt, const X& xh) const = 0;

  // Measure part of the adjoint right-hand side for every particle i:
  //   out_i = (1/N) sum_j [ fm(X_j, mu, a_j)(X_i)^T Z_j + gm(X_j, mu, a_j)(X_i) ]
  // where X_j are the atoms of the view. Generic O(N^2); models override it
  // with closed forms.
  virtual void adjoint_measure_terms(const View& v, const std::vector<X>& Z, const std::vector<A>& alpha,
                                     std::vector<X>& out) const {
    const auto& at = v.measure().atoms();
    const std::size_t n = at.size();
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] = pairwise_mean<X>(n, [&](std::size_t j) -> X {
        return fm(at[j], v, alpha[j], at[i]).transpose() * Z[j] + gm(at[j], v, alpha[j], at[i]);
      });
    }
  }

  // Second measure derivative of the adjoint measure part, as an N x N
  // block table (row-major, [i * N + r]):
  //   out_ir = (1/N) sum_l [ sum_k Z_lk fmm_k(X_l; X_i, X_r) + gmm(X_l; X_i, X_r) ]
  // Generic O(N^3).
  virtual void adjoint_measure_hessian(const View& v, const std::vector<X>& Z, const std::vector<A>& alpha,
                                       std::vector<MXX>& out) const {
    const auto& at = v.measure().atoms();
    const std::size_t n = at.size();
    out.resize(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t r = 0; r < n; ++r)
        out[i * n + r] = pairwise_mean<MXX>(n, [&](std::size_t l) -> MXX {
          MXX acc = gmm(at[l], v, alpha[l], at[i], at[r]);
          auto t = fmm(at[l], v, alpha[l], at[i], at[r]);
          for (int k = 0; k < Dx; ++k) acc += Z[l](k) * t[k];
          return acc;
        });
  }

  // out_i = (1/N) sum_j km(X_j, mu)(X_i).
  virtual void terminal_measure_terms(const View& v, std::vector<X>& out) const {
    const auto& at = v.measure().atoms();
    const std::size_t n = at.size();
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = pairwise_mean<X>(n, [&](std::size_t j) -> X { return km(at[j], v, at[i]); });
  }

  // Terminal map p(x, mu) = d_x k(x, mu) + int d_mu k(y, mu)(x) dmu(y) for
  // every atom of the view.
  void terminal_adjoint(const View& v, std::vector<X>& out) const {
    terminal_measure_terms(v, out);
    const auto& at = v.measure().atoms();
    for (std::size_t i = 0; i < at.size(); ++i) out[i] += kx(at[i], v);
  }
};

// Values at the origin used by the growth constants of Props 5.1-5.4.
struct ModelAnchors {
  double f0 = 0.0;      // |f(0, delta_0, 0)|
  double gm0 = 0.0;     // |d_mu g(0, delta_0, 0)(0)|
  double gx0 = 0.0;     // |d_x g(0, delta_0, 0)|
  double ga0 = 0.0;     // |d_a g(0, delta_0, 0)|
  double km0 = 0.0;     // |d_mu k(0, delta_0)(0)|
  double kx0 = 0.0;     // |d_x k(0, delta_0)|
  double alpha0 = 0.0;  // |alpha_hat(0, delta_0, 0)|
  double p0 = 0.0;      // |p(0, delta_0)|
  bool model_supplied = false;
};

// Forwarding decorator. Tests derive from it to inject faults into single
// derivatives while leaving everything else untouched.
template <int Dx, int Da>
class ForwardingModel : public Model<Dx, Da> {
 public:
  using B = Model<Dx, Da>;
  using typename B::A;
  using typename B::MAA;
  using typename B::MAX;
  using typename B::MXA;
  using typename B::MXX;
  using typename B::Measure;
  using typename B::TAA;
  using typename B::TAX;
  using typename B::TXX;
  using typename B::View;
  using typename B::X;

  explicit ForwardingModel(std::shared_ptr<const B> inner) : in_(std::move(inner)) {}

  std::string name() const override { return in_->name(); }
  std::map<std::string, double> parameters() const override { return in_->parameters(); }
  std::map<std::string, double> metadata() const override { return in_->metadata(); }
  ModelConstants constants() const override { return in_->constants(); }
  bool h1_declared() const override { return in_->h1_declared(); }
  Feat features(const Measure& mu) const override { return in_->features(mu); }

  X f(const X& x, const View& v, const A& a) const override { return in_->f(x, v, a); }
  MXX fx(const X& x, const View& v, const A& a) const override { return in_->fx(x, v, a); }
  MXA fa(const X& x, const View& v, const A& a) const override { return in_->fa(x, v, a); }
  MXX fm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->fm(x, v, a, xt); }
  TXX fxx(const X& x, const View& v, const A& a) const override { return in_->fxx(x, v, a); }
  TAX fax(const X& x, const View& v, const A& a) const override { return in_->fax(x, v, a); }
  TAA faa(const X& x, const View& v, const A& a) const override { return in_->faa(x, v, a); }
  TXX fxm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->fxm(x, v, a, xt); }
  TXX fxtm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->fxtm(x, v, a, xt); }
  TAX fam(const X& x, const View& v, const A& a, const X& xt) const override { return in_->fam(x, v, a, xt); }
  TXX fmm(const X& x, const View& v, const A& a, const X& xt, const X& xh) const override {
    return in_->fmm(x, v, a, xt, xh);
  }

  double g(const X& x, const View& v, const A& a) const override { return in_->g(x, v, a); }
  X gx(const X& x, const View& v, const A& a) const override { return in_->gx(x, v, a); }
  A ga(const X& x, const View& v, const A& a) const override { return in_->ga(x, v, a); }
  X gm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->gm(x, v, a, xt); }
  MXX gxx(const X& x, const View& v, const A& a) const override { return in_->gxx(x, v, a); }
  MAX gax(const X& x, const View& v, const A& a) const override { return in_->gax(x, v, a); }
  MAA gaa(const X& x, const View& v, const A& a) const override { return in_->gaa(x, v, a); }
  MXX gxm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->gxm(x, v, a, xt); }
  MXX gxtm(const X& x, const View& v, const A& a, const X& xt) const override { return in_->gxtm(x, v, a, xt); }
  MAX gam(const X& x, const View& v, const A& a, const X& xt) const override { return in_->gam(x, v, a, xt); }
  MXX gmm(const X& x, const View& v, const A& a, const X& xt, const X& xh) const override {
    return in_->gmm(x, v, a, xt, xh);
  }

  double k(const X& x, const View& v) const override { return in_->k(x, v); }
  X kx(const X& x, const View& v) const override { return in_->kx(x, v); }
  X km(const X& x, const View& v, const X& xt) const override { return in_->km(x, v, xt); }
  MXX kxx(const X& x, const View& v) const override { return in_->kxx(x, v); }
  MXX kxm(const X& x, const View& v, const X& xt) const override { return in_->kxm(x, v, xt); }
  MXX kxtm(const X& x, const View& v, const X& xt) const override { return in_->kxtm(x, v, xt); }
  MXX kmm(const X& x, const View& v, const X& xt, const X& xh) const override { return in_->kmm(x, v, xt, xh); }

  // The measure hooks fall back to the generic sums so that injected faults
  // in fm/gm/km propagate into the solver.

 protected:
  std::shared_ptr<const B> in_;
};

template <int Dx, int Da>
using ModelPtr = std::shared_ptr<const Model<Dx, Da>>;

}  // namespace mftc
