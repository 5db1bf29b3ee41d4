#pragma once

#include "mftc/model.hpp"

#include <string>
#include <utility>
#include <vector>

namespace mftc {

// Sub-interval lengths for one choice of the terminal Lipschitz constants
// (L_p, Lbar_p).
struct SubIntervalLengths {
  double L_p = 0.0, Lbar_p = 0.0;
  double L_B = 0.0, Lbar_B = 0.0;
  double eps3 = 0.0, eps4 = 0.0, eps1 = 0.0;
};

struct ConstantsReport {
  // growth constants
  double L_f = 0, L_g = 0, L_k = 0, L_alpha = 0;
  bool anchors_model_supplied = false;
  // ellipticity chain
  double lambda_z = 0, lambda_x = 0;
  double eps_small_1 = 0, eps_small_2 = 0;
  double lambdabar_k = 0, lambdabar_z = 0, lambdabar_x = 0;
  double Lambda_h = 0, lbar_h = 0;
  double Lstar_1 = 0, Lstar_2 = 0, Lstar_3 = 0, Lstar_4 = 0, Lstar_5 = 0, Lstar_6 = 0, Lstar_0 = 0;
  double Lbar_k = 0, k0 = 0;
  // (h2) bounds
  double h2_lbar_g_max = 0;  // lambda_g / 8
  double h2_lbar_f_max = 0;  // lambda_g / (40 max(Lbar_k, L*_0))
  // sub-intervals: the global variant (L_p = Lbar_p = max(Lbar_k, L*_0))
  // drives admissible_sublength; the local-terminal variant is informative.
  SubIntervalLengths global, terminal;

  std::vector<std::pair<std::string, double>> entries() const {
    return {{"L_f", L_f},
            {"L_g", L_g},
            {"L_k", L_k},
            {"L_alpha", L_alpha},
            {"lambda_z", lambda_z},
            {"lambda_x", lambda_x},
            {"eps_small_1", eps_small_1},
            {"eps_small_2", eps_small_2},
            {"lambdabar_k", lambdabar_k},
            {"lambdabar_z", lambdabar_z},
            {"lambdabar_x", lambdabar_x},
            {"Lambda_h", Lambda_h},
            {"lbar_h", lbar_h},
            {"Lstar_1", Lstar_1},
            {"Lstar_2", Lstar_2},
            {"Lstar_3", Lstar_3},
            {"Lstar_4", Lstar_4},
            {"Lstar_5", Lstar_5},
            {"Lstar_6", Lstar_6},
            {"Lstar_0", Lstar_0},
            {"Lbar_k", Lbar_k},
            {"k0", k0},
            {"h2_lbar_g_max", h2_lbar_g_max},
            {"h2_lbar_f_max", h2_lbar_f_max},
            {"L_p", global.L_p},
            {"Lbar_p", global.Lbar_p},
            {"L_B", global.L_B},
            {"Lbar_B", global.Lbar_B},
            {"eps3", global.eps3},
            {"eps4", global.eps4},
            {"eps1", global.eps1},
            {"terminal_L_p", terminal.L_p},
            {"terminal_Lbar_p", terminal.Lbar_p},
            {"terminal_L_B", terminal.L_B},
            {"terminal_Lbar_B", terminal.Lbar_B},
            {"terminal_eps3", terminal.eps3},
            {"terminal_eps4", terminal.eps4},
            {"terminal_eps1", terminal.eps1}};
  }
};

// eps3, eps4 and eps1 for given (L_p, Lbar_p).
inline SubIntervalLengths sub_interval_lengths(const ModelConstants& mc, const ConstantsReport& r, double L_p,
                                               double Lbar_p) {
  using std::max;
  using std::min;
  using std::sqrt;
  SubIntervalLengths s;
  s.L_p = L_p;
  s.Lbar_p = Lbar_p;
  const double Lf = r.L_f, La = r.L_alpha, Lg = r.L_g;
  const double Lf_ = mc.Lambda_f, lf = mc.lbar_f, Lg_ = mc.Lambda_g, lg = mc.lbar_g;
  s.L_B = Lf * (1.0 + La + 2.0 * L_p * La);
  s.Lbar_B = Lf * (1.0 + La + 2.0 * Lbar_p * La);
  s.eps3 = min(1.0 / (6.0 * s.Lbar_B),
               Lbar_p / (50.0 * (2.0 * Lbar_p * Lf_ + Lg * (1.0 + La + 2.0 * Lbar_p * La))));
  const double a = 2.0 * Lbar_p * lf;
  s.eps4 = min(s.eps3, 7.0 * L_p /
                           (73.0 * (3.0 * (a + Lg_) + 3.0 * (a + lg) * La * (1.0 + 2.0 * L_p) + 6.0 * Lf_ * L_p)));
  const double mg = a + max(Lg_, lg);
  const double t2 = 1.0 / (2.0 * (8.0 * L_p * Lf * La + 5.0 * (Lf_ + mg * La)));
  const double t3 =
      1.0 / (2.0 * sqrt(Lf * La) * sqrt(34.0 * L_p * Lf_ + (34.0 * L_p * La + 21.0 + 17.0 * La) * mg));
  s.eps1 = min({s.eps4, t2, t3});
  return s;
}

// Evaluates the constant chain. Anchor values (|f(0, delta_0, 0)| etc.)
// default to zero, which is what (h1) gives.
inline ConstantsReport compute_constants(const ModelConstants& mc, const ModelAnchors& anc = {}) {
  using std::max;
  using std::min;
  using std::sqrt;
  ConstantsReport r;
  const double lf = mc.lambda_f, Lf = mc.Lambda_f, lbf = mc.lbar_f;
  const double lg = mc.lambda_g, Lg = mc.Lambda_g, lbg = mc.lbar_g;
  const double lk = mc.lambda_k, Lk = mc.Lambda_k;

  r.anchors_model_supplied = anc.model_supplied;
  r.L_f = max(Lf, anc.f0);
  r.L_g = max({anc.gm0, anc.gx0, anc.ga0, Lg, lbg});
  r.L_k = max({anc.km0, anc.kx0, Lk});

  r.lambda_z = lf * lf / (Lg + lg / 20.0);
  r.lambda_x = 17.0 * lg / 20.0;
  r.eps_small_1 = min({lk / 4.0, r.lambda_z / 2.0, lg / 40.0});
  r.eps_small_2 = min({lk / 4.0, r.lambda_z / 4.0, lg / 5.0});
  r.lambdabar_k = lk / 4.0;
  r.lambdabar_z = r.lambda_z / 2.0;
  r.lambdabar_x = lg / 40.0;
  r.Lambda_h = Lg + lg / 20.0;
  r.lbar_h = lg / 5.0;

  const double lz = r.lambda_z, lx = r.lambda_x, e1 = r.eps_small_1, e2 = r.eps_small_2;
  const double bk = r.lambdabar_k, bz = r.lambdabar_z, bx = r.lambdabar_x, Lh = r.Lambda_h;
  const double Lk2 = Lk * Lk, Lf2 = Lf * Lf;

  r.Lstar_1 = max({4.0 * Lk2 / lk, (2.0 * Lh + lg / 20.0) / lz, (2.5 * Lf + 2.0 * Lh + lg / 20.0) / lx});
  r.Lstar_2 = max({39.0 * Lk2 / bk, (5.0 * Lg + lg / 4.0) / bx, (5.0 * Lf + 7.0 * Lg + 13.0 * lg / 20.0) / bz});
  const double q = 25.0 * Lf2 / 16.0 + (2.0 * Lg + lg / 5.0) * (2.0 * Lg + lg / 5.0);
  r.Lstar_3 = max((12.0 + r.Lstar_2 / e1) * Lk2 / lk,
                  (2.0 * Lg + lg / 5.0 + r.Lstar_2 / (4.0 * e1) * q) / lx);
  r.Lstar_4 = max(Lk2 / (e1 * lk), q / (4.0 * e1 * lx));
  const double q5 = 25.0 * Lf2 / 16.0 + 9.0 * (lg / 10.0 + Lg) * (lg / 10.0 + Lg);
  r.Lstar_5 = max({9.0 * Lk2 / (4.0 * e2 * bk), 25.0 * Lf2 / (64.0 * e2 * bz), q5 / (4.0 * e2 * bx)});
  r.Lstar_6 = max({27.0 * Lk2 / bk, (Lg + lg / 10.0) / bx, (Lg + lg / 10.0) / bz, 12.0 * Lk2 / lk,
                   (2.0 * Lg + lg / 5.0) / lx, 6.0 * Lk2 / bk, (2.0 * Lg + 3.0 * lg / 20.0) / bx,
                   (15.0 * Lf / 4.0 + 7.0 * Lg + 13.0 * lg / 20.0) / bz});
  r.Lstar_0 = double(mc.dx) *
              max(r.Lstar_1, sqrt((r.Lstar_4 * (2.0 + r.Lstar_5) + 1.0) * r.Lstar_1 * r.Lstar_6));
  r.Lbar_k = 3.0 * Lk;
  r.k0 = 4.0 * max(r.Lbar_k, r.Lstar_0);

  r.L_alpha = max({20.0 * Lf / (19.0 * lg), 20.0 * (lbg + 0.5 * r.k0 * lbf) / (19.0 * lg), anc.alpha0});

  r.h2_lbar_g_max = lg / 8.0;
  r.h2_lbar_f_max = lg / (40.0 * max(r.Lbar_k, r.Lstar_0));

  const double Lp = max(r.Lbar_k, r.Lstar_0);
  r.global = sub_interval_lengths(mc, r, Lp, Lp);
  r.terminal = sub_interval_lengths(mc, r, r.Lbar_k, max(anc.p0, r.Lbar_k));
  return r;
}

// Theoretical admissible sub-interval length (global variant).
inline double admissible_sublength(const ConstantsReport& r) {
  double e = r.global.eps1;
  if (!(e > 0.0) || !std::isfinite(e)) throw Error("admissible_sublength: non-positive or non-finite result");
  return e;
}

}  // namespace mftc
