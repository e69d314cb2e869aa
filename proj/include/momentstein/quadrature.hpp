#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "momentstein/common.hpp"

namespace momentstein {

/// Nodes and weights of a 1D quadrature rule on an interval.
struct QuadratureRule {
  std::vector<double> nodes;
  std::vector<double> weights;

  template <typename F>
  double integrate(F&& f) const {
    double s = 0.0;
    for (size_t i = 0; i < nodes.size(); ++i) s += weights[i] * f(nodes[i]);
    return s;
  }
};

namespace detail {

/// Gauss-Legendre nodes/weights on [-1,1] by Golub-Welsch (symmetric
/// tridiagonal eigenproblem); deterministic and accurate for small n.
inline void gauss_legendre_reference(int n, std::vector<double>& x, std::vector<double>& w) {
  Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
  for (int k = 1; k < n; ++k) {
    const double b = k / std::sqrt(4.0 * k * k - 1.0);
    jacobi(k, k - 1) = b;
    jacobi(k - 1, k) = b;
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jacobi);
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < n; ++i) {
    x[i] = es.eigenvalues()(i);
    w[i] = 2.0 * sqr(es.eigenvectors()(0, i));
  }
}

}  // namespace detail

/// Composite Gauss-Legendre rule: `panels` equal subintervals of [a,b],
/// `order` points each.
inline QuadratureRule composite_gauss_legendre(double a, double b, int panels, int order = 16) {
  static thread_local int cached_order = -1;
  static thread_local std::vector<double> xr, wr;
  if (order != cached_order) {
    detail::gauss_legendre_reference(order, xr, wr);
    cached_order = order;
  }
  QuadratureRule rule;
  rule.nodes.reserve(static_cast<size_t>(panels) * order);
  rule.weights.reserve(static_cast<size_t>(panels) * order);
  const double h = (b - a) / panels;
  for (int p = 0; p < panels; ++p) {
    const double lo = a + p * h;
    const double mid = lo + 0.5 * h;
    for (int i = 0; i < order; ++i) {
      rule.nodes.push_back(mid + 0.5 * h * xr[i]);
      rule.weights.push_back(0.5 * h * wr[i]);
    }
  }
  return rule;
}

/// Adaptive Simpson quadrature with absolute tolerance.
template <typename F>
double adaptive_simpson(F&& f, double a, double b, double tol = 1e-12, int max_depth = 40) {
  struct Impl {
    const std::function<double(double)> g;
    double run(double a, double b, double fa, double fm, double fb, double whole, double tol,
               int depth) const {
      const double m = 0.5 * (a + b);
      const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
      const double flm = g(lm), frm = g(rm);
      const double left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
      const double right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
      const double delta = left + right - whole;
      if (depth <= 0 || std::abs(delta) <= 15.0 * tol) return left + right + delta / 15.0;
      return run(a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) +
             run(m, b, fm, frm, fb, right, 0.5 * tol, depth - 1);
    }
  };
  if (a == b) return 0.0;
  Impl impl{std::function<double(double)>(f)};
  const double fa = impl.g(a), fb = impl.g(b), fm = impl.g(0.5 * (a + b));
  const double whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
  return impl.run(a, b, fa, fm, fb, whole, tol, max_depth);
}

/// Cumulative integral of samples on a uniform grid, 4th order (cubic
/// increments). out[i] = integral from x[0] to x[i].
inline std::vector<double> cumulative_integral(const std::vector<double>& y, double h) {
  const size_t n = y.size();
  std::vector<double> out(n, 0.0);
  if (n < 4) {  // trapezoid fallback for tiny grids
    for (size_t i = 1; i < n; ++i) out[i] = out[i - 1] + 0.5 * h * (y[i - 1] + y[i]);
    return out;
  }
  double acc = 0.0;
  for (size_t i = 0; i + 1 < n; ++i) {
    double inc;
    if (i == 0) {
      inc = h / 24.0 * (9.0 * y[0] + 19.0 * y[1] - 5.0 * y[2] + y[3]);
    } else if (i + 2 >= n) {
      inc = h / 24.0 * (9.0 * y[n - 1] + 19.0 * y[n - 2] - 5.0 * y[n - 3] + y[n - 4]);
    } else {
      inc = h / 24.0 * (-y[i - 1] + 13.0 * y[i] + 13.0 * y[i + 1] - y[i + 2]);
    }
    acc += inc;
    out[i + 1] = acc;
  }
  return out;
}

}  // namespace momentstein
