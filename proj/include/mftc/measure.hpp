#pragma once

#include "mftc/core.hpp"

#include <algorithm>
#include <cstdint>
#include <functional>
#include <limits>
#include <vector>

namespace mftc {

// Empirical measure with N uniform-weight atoms in R^D.
template <int D>
class ParticleMeasure {
 public:
  using Point = Vec<D>;

  ParticleMeasure() = default;
  explicit ParticleMeasure(std::vector<Point> atoms) : atoms_(std::move(atoms)) { validate(); }

  static ParticleMeasure dirac(const Point& x, std::size_t copies = 1) {
    return ParticleMeasure(std::vector<Point>(copies, x));
  }

  std::size_t size() const { return atoms_.size(); }
  const Point& operator[](std::size_t i) const { return atoms_[i]; }
  const std::vector<Point>& atoms() const { return atoms_; }
  std::vector<Point>& atoms_mut() { return atoms_; }

  Point mean() const {
    return pairwise_mean<Point>(atoms_.size(), [&](std::size_t i) { return atoms_[i]; });
  }
  double mean_abs_norm() const {
    return pairwise_mean<double>(atoms_.size(), [&](std::size_t i) { return atoms_[i].norm(); });
  }
  double second_moment() const {
    return pairwise_mean<double>(atoms_.size(), [&](std::size_t i) { return atoms_[i].squaredNorm(); });
  }

  // Replaces every atom by its image. A non-finite image raises a
  // NumericError carrying the atom index.
  ParticleMeasure push_forward(const std::function<Point(const Point&)>& map) const {
    std::vector<Point> out;
    out.reserve(atoms_.size());
    for (std::size_t i = 0; i < atoms_.size(); ++i) {
      Point y = map(atoms_[i]);
      if (!y.allFinite()) throw NumericError("push_forward: non-finite image", static_cast<long>(i));
      out.push_back(y);
    }
    ParticleMeasure r;
    r.atoms_ = std::move(out);
    return r;
  }

  ParticleMeasure perturb_atom(std::size_t index, const Point& delta) const {
    if (index >= atoms_.size()) throw std::out_of_range("perturb_atom: index out of range");
    ParticleMeasure r = *this;
    r.atoms_[index] += delta;
    r.validate();
    return r;
  }

  // Appends `copies` atoms at x. With integer counts this represents the
  // mixture (N m + c delta_x)/(N + c) exactly.
  ParticleMeasure with_copies(const Point& x, std::size_t copies) const {
    ParticleMeasure r = *this;
    r.atoms_.insert(r.atoms_.end(), copies, x);
    r.validate();
    return r;
  }

 private:
  void validate() const {
    if (atoms_.empty()) throw ConfigError("ParticleMeasure needs at least one atom");
    for (std::size_t i = 0; i < atoms_.size(); ++i)
      if (!atoms_[i].allFinite()) throw NumericError("ParticleMeasure: non-finite atom", static_cast<long>(i));
  }

  std::vector<Point> atoms_;
};

namespace detail {

// Exact 1-D W1 via the quantile coupling; handles unequal atom counts by
// walking the merged quantile breakpoints.
inline double w1_1d(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  if (a.size() == b.size()) {
    return pairwise_mean<double>(a.size(), [&](std::size_t i) { return std::abs(a[i] - b[i]); });
  }
  double acc = 0.0, q = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    double qa = double(i + 1) / na, qb = double(j + 1) / nb;
    double qn = std::min(qa, qb);
    acc += (qn - q) * std::abs(a[i] - b[j]);
    q = qn;
    if (qa <= qn) ++i;
    if (qb <= qn) ++j;
  }
  return acc;
}

}  // namespace detail

struct W1Options {
  std::size_t n_exact = 12;
};

// Wasserstein-1 distance between empirical measures. Exact in 1-D for any
// counts; in higher dimension exact for equal counts up to n_exact via a
// subset dynamic program over assignments. Otherwise a CapabilityError is
// thrown whose `bound` holds |mean(mu) - mean(nu)|.
template <int D>
double w1_distance(const ParticleMeasure<D>& mu, const ParticleMeasure<D>& nu, W1Options opt = {}) {
  if constexpr (D == 1) {
    std::vector<double> a(mu.size()), b(nu.size());
    for (std::size_t i = 0; i < mu.size(); ++i) a[i] = mu[i](0);
    for (std::size_t i = 0; i < nu.size(); ++i) b[i] = nu[i](0);
    return detail::w1_1d(std::move(a), std::move(b));
  } else {
    const std::size_t n = mu.size();
    if (n != nu.size() || n > opt.n_exact || n > 20) {
      CapabilityError e("w1_distance: unsupported size/dimension combination; mean-difference bound attached");
      e.bound = (mu.mean() - nu.mean()).norm();
      throw e;
    }
    // dp[mask] = min cost of assigning the first popcount(mask) atoms of mu
    // to the atoms of nu in mask.
    const std::size_t full = (std::size_t{1} << n);
    std::vector<double> dp(full, std::numeric_limits<double>::infinity());
    dp[0] = 0.0;
    for (std::size_t mask = 0; mask < full; ++mask) {
      if (!std::isfinite(dp[mask])) continue;
      std::size_t i = static_cast<std::size_t>(__builtin_popcountll(mask));
      if (i >= n) continue;
      for (std::size_t j = 0; j < n; ++j) {
        if (mask & (std::size_t{1} << j)) continue;
        std::size_t nm = mask | (std::size_t{1} << j);
        double c = dp[mask] + (mu[i] - nu[j]).norm();
        if (c < dp[nm]) dp[nm] = c;
      }
    }
    return dp[full - 1] / static_cast<double>(n);
  }
}

}  // namespace mftc
