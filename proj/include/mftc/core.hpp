#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mftc {

template <int D>
using Vec = Eigen::Matrix<double, D, 1>;
template <int R, int C>
using Mat = Eigen::Matrix<double, R, C>;

// Small dynamic vector with inline storage, used for measure features.
using Feat = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, 16, 1>;

// ---------------------------------------------------------------- errors

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct CapabilityError : Error {
  using Error::Error;
  double bound = 0.0;  // fallback lower bound when one is available
};

struct ComparisonError : Error {
  using Error::Error;
};

struct NumericError : Error {
  NumericError(const std::string& what, long idx = -1) : Error(what), index(idx) {}
  long index;
};

struct ConeViolation : Error {
  ConeViolation(const std::string& what, long node_idx = -1, double m = 0.0)
      : Error(what), node(node_idx), margin(m) {}
  long node;
  double margin;
};

struct SolverError : Error {
  SolverError(const std::string& what, double resid = 0.0, std::vector<double> hist = {})
      : Error(what), last_residual(resid), history(std::move(hist)) {}
  double last_residual;
  std::vector<double> history;
};

// ---------------------------------------------------------------- summation

// Pairwise summation over [0, n). The split points depend only on n, so the
// rounding pattern is fixed for a given particle count.
template <class T, class F>
T pairwise_sum(std::size_t lo, std::size_t hi, F&& term) {
  if (hi - lo <= 8) {
    T acc = term(lo);
    for (std::size_t i = lo + 1; i < hi; ++i) acc += term(i);
    return acc;
  }
  std::size_t mid = lo + (hi - lo) / 2;
  T left = pairwise_sum<T>(lo, mid, term);
  T right = pairwise_sum<T>(mid, hi, term);
  return left + right;
}

template <class T, class F>
T pairwise_sum(std::size_t n, F&& term) {
  if (n == 0) throw std::invalid_argument("pairwise_sum over empty range");
  return pairwise_sum<T>(0, n, term);
}

template <class T, class F>
T pairwise_mean(std::size_t n, F&& term) {
  T s = pairwise_sum<T>(n, term);
  return s / static_cast<double>(n);
}

// ---------------------------------------------------------------- interpolation

// Lagrange weights of the nodes xs[0..n) at point t.
template <std::size_t n>
std::array<double, n> lagrange_weights(const std::array<double, n>& xs, double t) {
  std::array<double, n> w{};
  for (std::size_t j = 0; j < n; ++j) {
    double v = 1.0;
    for (std::size_t m = 0; m < n; ++m)
      if (m != j) v *= (t - xs[m]) / (xs[j] - xs[m]);
    w[j] = v;
  }
  return w;
}

// Four-node window on a uniform grid with K steps (nodes 0..K) that
// surrounds local coordinate u = (t - t0)/dt, together with cubic weights.
// For K < 3 all available nodes are used.
struct CubicStencil {
  int first = 0;
  int count = 0;
  std::array<double, 4> w{};
};

inline CubicStencil cubic_stencil(int K, double u) {
  CubicStencil st;
  if (K <= 0) {
    st.first = 0;
    st.count = 1;
    st.w[0] = 1.0;
    return st;
  }
  if (K < 3) {
    st.first = 0;
    st.count = K + 1;
    for (int j = 0; j <= K; ++j) {
      double v = 1.0;
      for (int m = 0; m <= K; ++m)
        if (m != j) v *= (u - m) / double(j - m);
      st.w[j] = v;
    }
    return st;
  }
  int k = static_cast<int>(std::floor(u));
  k = std::clamp(k, 0, K - 1);
  int first = std::clamp(k - 1, 0, K - 3);
  st.first = first;
  st.count = 4;
  std::array<double, 4> xs{double(first), double(first + 1), double(first + 2), double(first + 3)};
  st.w = lagrange_weights<4>(xs, u);
  return st;
}

// Weights for d/du at node k using a 3-point (K >= 2) or 2-point stencil.
inline std::array<std::pair<int, double>, 3> node_derivative_stencil(int K, int k) {
  std::array<std::pair<int, double>, 3> out{};
  if (K == 1) {
    out[0] = {0, -1.0};
    out[1] = {1, 1.0};
    out[2] = {0, 0.0};
  } else if (k == 0) {
    out[0] = {0, -1.5};
    out[1] = {1, 2.0};
    out[2] = {2, -0.5};
  } else if (k == K) {
    out[0] = {K, 1.5};
    out[1] = {K - 1, -2.0};
    out[2] = {K - 2, 0.5};
  } else {
    out[0] = {k - 1, -0.5};
    out[1] = {k + 1, 0.5};
    out[2] = {k, 0.0};
  }
  return out;
}

// ---------------------------------------------------------------- quadrature

// Weights of the integral over the single step [k, k+1] (unit spacing) using
// a cubic through four surrounding nodes. Returns (first node, weights).
// Interior steps use the symmetric (-1, 13, 13, -1)/24 rule, the edge steps
// the one-sided (9, 19, -5, 1)/24 rule. Grids with K < 3 fall back to the
// polynomial through all nodes.
inline std::pair<int, std::array<double, 4>> step_quadrature(int K, int k) {
  std::array<double, 4> w{};
  if (K == 1) {
    w = {0.5, 0.5, 0.0, 0.0};
    return {0, w};
  }
  if (K == 2) {
    // quadratic through nodes 0,1,2 integrated over [k, k+1]
    if (k == 0)
      w = {5.0 / 12.0, 8.0 / 12.0, -1.0 / 12.0, 0.0};
    else
      w = {-1.0 / 12.0, 8.0 / 12.0, 5.0 / 12.0, 0.0};
    return {0, w};
  }
  if (k == 0) {
    w = {9.0 / 24.0, 19.0 / 24.0, -5.0 / 24.0, 1.0 / 24.0};
    return {0, w};
  }
  if (k == K - 1) {
    w = {1.0 / 24.0, -5.0 / 24.0, 19.0 / 24.0, 9.0 / 24.0};
    return {K - 3, w};
  }
  w = {-1.0 / 24.0, 13.0 / 24.0, 13.0 / 24.0, -1.0 / 24.0};
  return {k - 1, w};
}

// Cumulative integrals of nodal samples y[0..K] with spacing dt.
// forward[k] = int_{t0}^{t_k}, tail[k] = int_{t_k}^{t_K}.
template <class T, class Get>
void cumulative_quadrature(int K, double dt, Get&& y, std::vector<T>& forward, std::vector<T>& tail,
                           const T& zero) {
  forward.assign(K + 1, zero);
  tail.assign(K + 1, zero);
  std::vector<T> step(K > 0 ? K : 0, zero);
  for (int k = 0; k < K; ++k) {
    auto [first, w] = step_quadrature(K, k);
    T acc = zero;
    int cnt = (K == 1) ? 2 : (K == 2 ? 3 : 4);
    for (int j = 0; j < cnt; ++j) acc += w[j] * y(first + j);
    step[k] = dt * acc;
  }
  for (int k = 0; k < K; ++k) forward[k + 1] = forward[k] + step[k];
  for (int k = K - 1; k >= 0; --k) tail[k] = tail[k + 1] + step[k];
}

inline bool all_finite(double v) { return std::isfinite(v); }

template <class Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.allFinite();
}

}  // namespace mftc
