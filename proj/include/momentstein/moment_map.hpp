#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "momentstein/common.hpp"
#include "momentstein/measures.hpp"
#include "momentstein/parallel.hpp"
#include "momentstein/quadrature.hpp"
#include "momentstein/rng.hpp"

namespace momentstein {

enum class MapBackend { closed_form, grid1d, product, max_affine, smoothed_max_affine };

inline const char* backend_name(MapBackend b) {
  switch (b) {
    case MapBackend::closed_form: return "closed_form";
    case MapBackend::grid1d: return "grid1d";
    case MapBackend::product: return "product";
    case MapBackend::max_affine: return "max_affine";
    case MapBackend::smoothed_max_affine: return "smoothed_max_affine";
  }
  return "?";
}

/// phi(x) = max_i (x . y_i - c_i); the solution class of the moment-map
/// problem for discrete targets.
struct MaxAffinePotential {
  Mat slopes;      // m x d atom slopes y_i
  Vec intercepts;  // c_i

  int dim() const { return static_cast<int>(slopes.cols()); }
  int atom_count() const { return static_cast<int>(slopes.rows()); }

  double value(const Vec& x) const { return (slopes * x - intercepts).maxCoeff(); }
  int argmax(const Vec& x) const {
    int idx = 0;
    (slopes * x - intercepts).maxCoeff(&idx);
    return idx;
  }

  /// Sorted-by-slope atom order and cell breakpoints (1D only). Atom i is
  /// active on (bp[i], bp[i+1]) with bp[0] = -inf, bp[m] = +inf. Assumes
  /// all atoms are active; inactive atoms yield inverted breakpoints that
  /// the caller treats as empty cells.
  struct Cells1D {
    std::vector<int> order;          // indices sorted by slope
    std::vector<double> breakpoints; // size m+1 with +-inf ends
  };
  Cells1D cells_1d() const {
    if (dim() != 1) throw error("legendre divergence: 1D cell structure requested in d >= 2");
    const int m = atom_count();
    Cells1D c;
    c.order.resize(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) c.order[static_cast<size_t>(i)] = i;
    std::sort(c.order.begin(), c.order.end(),
              [&](int a, int b) { return slopes(a, 0) < slopes(b, 0); });
    const double inf = std::numeric_limits<double>::infinity();
    c.breakpoints.assign(static_cast<size_t>(m) + 1, 0.0);
    c.breakpoints.front() = -inf;
    c.breakpoints.back() = inf;
    for (int k = 1; k < m; ++k) {
      const int i = c.order[static_cast<size_t>(k - 1)], j = c.order[static_cast<size_t>(k)];
      const double dy = slopes(j, 0) - slopes(i, 0);
      c.breakpoints[static_cast<size_t>(k)] =
          dy > 0 ? (intercepts[j] - intercepts[i]) / dy : -inf;
    }
    // monotone envelope: an inactive atom shows up as a non-increasing pair
    for (size_t k = 1; k + 1 < c.breakpoints.size(); ++k)
      if (c.breakpoints[k] < c.breakpoints[k - 1]) c.breakpoints[k] = c.breakpoints[k - 1];
    return c;
  }

  /// Exact masses int_{cell i} e^{-phi} dx in 1D (piecewise exponential).
  /// Returns masses in original atom order.
  Vec cell_masses_1d() const {
    const auto cells = cells_1d();
    const int m = atom_count();
    Vec masses = Vec::Zero(m);
    for (int k = 0; k < m; ++k) {
      const int i = cells.order[static_cast<size_t>(k)];
      const double s = slopes(i, 0), c = intercepts[i];
      const double l = cells.breakpoints[static_cast<size_t>(k)];
      const double u = cells.breakpoints[static_cast<size_t>(k) + 1];
      if (!(u > l)) continue;
      double mass;
      if (std::isinf(l) && std::isinf(u)) {
        mass = std::numeric_limits<double>::infinity();
      } else if (std::isinf(u)) {
        if (s <= 0.0) throw error("hyperplane support: e^{-phi} not integrable");
        mass = std::exp(c - s * l) / s;
      } else if (std::isinf(l)) {
        if (s >= 0.0) throw error("hyperplane support: e^{-phi} not integrable");
        mass = std::exp(c - s * u) / (-s);
      } else if (s == 0.0) {
        mass = std::exp(c) * (u - l);
      } else if (s > 0.0) {
        mass = std::exp(c - s * l) * -std::expm1(-s * (u - l)) / s;
      } else {
        mass = std::exp(c - s * u) * -std::expm1(s * (u - l)) / (-s);
      }
      masses[i] = mass;
    }
    return masses;
  }

  /// Base-measure barycenter of cell i in 1D: E[X | X in cell i] under e^{-phi}.
  double cell_barycenter_1d(int atom) const {
    const auto cells = cells_1d();
    const int m = atom_count();
    int k = 0;
    for (; k < m; ++k)
      if (cells.order[static_cast<size_t>(k)] == atom) break;
    const double s = slopes(atom, 0), c = intercepts[atom];
    const double l = cells.breakpoints[static_cast<size_t>(k)];
    const double u = cells.breakpoints[static_cast<size_t>(k) + 1];
    // int x e^{-(sx-c)} over the cell divided by the cell mass
    auto anti_mass = [&](double t) { return -std::exp(c - s * t) / s; };
    auto anti_first = [&](double t) { return -std::exp(c - s * t) * (t + 1.0 / s) / s; };
    if (s == 0.0) return 0.5 * (l + u);
    const double lo = std::isinf(l) ? (s < 0 ? u - 60.0 / -s : l) : l;
    const double hi = std::isinf(u) ? (s > 0 ? l + 60.0 / s : u) : u;
    const double mass = anti_mass(hi) - anti_mass(lo);
    const double first = anti_first(hi) - anti_first(lo);
    return first / mass;
  }
};

namespace detail {

/// Natural cubic spline on a uniform grid.
struct UniformCubicSpline {
  double a = 0.0, h = 1.0;
  std::vector<double> y, m;  // values and second derivatives at nodes

  void build(double a_, double h_, std::vector<double> values) {
    a = a_;
    h = h_;
    y = std::move(values);
    const size_t n = y.size();
    m.assign(n, 0.0);
    if (n < 3) return;
    std::vector<double> diag(n - 2, 4.0), rhs(n - 2), scratch(n - 2);
    for (size_t i = 1; i + 1 < n; ++i)
      rhs[i - 1] = 6.0 * (y[i + 1] - 2.0 * y[i] + y[i - 1]) / (h * h);
    // Thomas algorithm, off-diagonals are 1
    scratch[0] = 1.0 / diag[0];
    rhs[0] /= diag[0];
    for (size_t i = 1; i < n - 2; ++i) {
      const double piv = diag[i] - scratch[i - 1];
      scratch[i] = 1.0 / piv;
      rhs[i] = (rhs[i] - rhs[i - 1]) / piv;
    }
    for (size_t i = n - 2; i-- > 1;) rhs[i - 1] -= scratch[i - 1] * rhs[i];
    for (size_t i = 1; i + 1 < n; ++i) m[i] = rhs[i - 1];
  }

  double eval(double x) const {
    const size_t n = y.size();
    const double t = (x - a) / h;
    if (t <= 0.0) return y.front() + (y[1] - y[0]) / h * (x - a);  // clamped by caller
    if (t >= static_cast<double>(n - 1))
      return y.back() + (y[n - 1] - y[n - 2]) / h * (x - (a + h * (n - 1)));
    const size_t i = std::min(static_cast<size_t>(t), n - 2);
    const double s = t - static_cast<double>(i);
    const double s1 = 1.0 - s;
    return s1 * y[i] + s * y[i + 1] +
           h * h / 6.0 * (s1 * (s1 * s1 - 1.0) * m[i] + s * (s * s - 1.0) * m[i + 1]);
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// backend payloads
// ---------------------------------------------------------------------------

namespace detail {

struct ClosedForm1D {
  enum class Kind { gaussian, cube, exponential };
  Kind kind = Kind::gaussian;
  double sigma2 = 1.0;  // gaussian
  double a = 1.0;       // cube half-width of the target box

  double value(double x) const {
    switch (kind) {
      case Kind::gaussian: return 0.5 * sigma2 * x * x + 0.5 * std::log(2.0 * kPi / sigma2);
      case Kind::cube: {
        // 2 log cosh(ax/2) computed without overflow
        const double t = 0.5 * a * x;
        const double lc = std::abs(t) + std::log1p(std::exp(-2.0 * std::abs(t))) - std::log(2.0);
        return 2.0 * lc + std::log(4.0 / a);
      }
      case Kind::exponential: return std::exp(x) - x;
    }
    return 0.0;
  }
  double grad(double x) const {
    switch (kind) {
      case Kind::gaussian: return sigma2 * x;
      case Kind::cube: return a * std::tanh(0.5 * a * x);
      case Kind::exponential: return std::expm1(x);
    }
    return 0.0;
  }
  double hess(double x) const {
    switch (kind) {
      case Kind::gaussian: return sigma2;
      case Kind::cube: {
        const double c = std::cosh(0.5 * a * x);
        const double sech = (std::abs(0.5 * a * x) > 350.0) ? 0.0 : 1.0 / c;
        return 0.5 * a * a * sech * sech;
      }
      case Kind::exponential: return std::exp(x);
    }
    return 0.0;
  }
  // range of grad (open interval)
  std::pair<double, double> grad_range() const {
    const double inf = std::numeric_limits<double>::infinity();
    switch (kind) {
      case Kind::gaussian: return {-inf, inf};
      case Kind::cube: return {-a, a};
      case Kind::exponential: return {-1.0, inf};
    }
    return {-inf, inf};
  }
  double grad_inverse(double y) const {
    switch (kind) {
      case Kind::gaussian: return y / sigma2;
      case Kind::cube: return (2.0 / a) * std::atanh(y / a);
      case Kind::exponential: return std::log1p(y);
    }
    return 0.0;
  }
  /// Inverse CDF of the base density e^{-phi} via its closed form.
  double base_quantile(double u) const {
    switch (kind) {
      case Kind::gaussian: return CounterRng::normal_quantile(u) / std::sqrt(sigma2);
      case Kind::cube: return (2.0 / a) * std::atanh(2.0 * u - 1.0);
      case Kind::exponential:
        // base CDF is 1 - exp(-e^x)
        return std::log(-std::log1p(-u));
    }
    return 0.0;
  }
};

struct Grid1DMap {
  double a = 0.0, h = 1.0;
  std::vector<double> phi;   // node values, int e^{-phi} = 1 up to quadrature
  std::vector<double> grad;  // 4th-order first differences
  std::vector<double> hess;  // centered second differences (spec'd evaluator)
  std::vector<double> base_cdf;
  double log_norm = 0.0;  // log int e^{-phi} on the grid (+ affine tails)
  UniformCubicSpline spline;

  size_t n() const { return phi.size(); }
  double xmax() const { return a + h * static_cast<double>(n() - 1); }

  void finalize() {
    const size_t nn = n();
    grad.assign(nn, 0.0);
    hess.assign(nn, 0.0);
    for (size_t i = 0; i < nn; ++i) {
      if (i >= 2 && i + 2 < nn) {
        grad[i] = (-phi[i + 2] + 8.0 * phi[i + 1] - 8.0 * phi[i - 1] + phi[i - 2]) / (12.0 * h);
      } else if (i >= 1 && i + 1 < nn) {
        grad[i] = (phi[i + 1] - phi[i - 1]) / (2.0 * h);
      } else if (i == 0) {
        grad[i] = (phi[1] - phi[0]) / h;
      } else {
        grad[i] = (phi[nn - 1] - phi[nn - 2]) / h;
      }
      if (i >= 1 && i + 1 < nn) hess[i] = (phi[i + 1] - 2.0 * phi[i] + phi[i - 1]) / (h * h);
    }
    hess[0] = hess[1];
    hess[nn - 1] = hess[nn - 2];
    // enforce monotone grad for the legendre bracketing (convexity holds up
    // to rounding; tiny non-monotone jitter is clipped)
    for (size_t i = 1; i < nn; ++i) grad[i] = std::max(grad[i], grad[i - 1]);
    spline.build(a, h, phi);

    std::vector<double> w(nn);
    for (size_t i = 0; i < nn; ++i) w[i] = std::exp(-phi[i]);
    base_cdf = cumulative_integral(w, h);
    double total = base_cdf.back();
    // affine tails e^{-phi} ~ exponential beyond the grid
    if (grad.front() < -1e-12) total += w.front() / -grad.front();
    if (grad.back() > 1e-12) total += w.back() / grad.back();
    log_norm = std::log(total);
    for (auto& c : base_cdf) c /= total;
  }

  double value(double x) const {
    if (x <= a) return phi.front() + grad.front() * (x - a);
    if (x >= xmax()) return phi.back() + grad.back() * (x - xmax());
    return spline.eval(x);
  }
  double gradient(double x) const {
    if (x <= a) return grad.front();
    if (x >= xmax()) return grad.back();
    const double t = (x - a) / h;
    const size_t i = std::min(static_cast<size_t>(t), n() - 2);
    const double s = t - static_cast<double>(i);
    return (1.0 - s) * grad[i] + s * grad[i + 1];
  }
  double hessian(double x) const {
    if (x <= a || x >= xmax()) return 0.0;
    const double t = (x - a) / h;
    const size_t i = std::min(static_cast<size_t>(t), n() - 2);
    const double s = t - static_cast<double>(i);
    return (1.0 - s) * hess[i] + s * hess[i + 1];
  }
  /// x with gradient(x) = y; exact inverse of the piecewise-linear gradient.
  double grad_inverse(double y) const {
    if (y <= grad.front() || y >= grad.back()) throw error("outside range: legendre inversion");
    const auto it = std::upper_bound(grad.begin(), grad.end(), y);
    const size_t i = static_cast<size_t>(it - grad.begin()) - 1;
    const double g0 = grad[i], g1 = grad[i + 1];
    const double s = (g1 > g0) ? (y - g0) / (g1 - g0) : 0.5;
    return a + h * (static_cast<double>(i) + s);
  }
  double base_quantile(double u) const {
    const auto it = std::lower_bound(base_cdf.begin(), base_cdf.end(), u);
    size_t i = static_cast<size_t>(it - base_cdf.begin());
    i = std::clamp<size_t>(i, 1, n() - 1);
    const double c0 = base_cdf[i - 1], c1 = base_cdf[i];
    const double s = (c1 > c0) ? (u - c0) / (c1 - c0) : 0.5;
    return a + h * (static_cast<double>(i - 1) + s);
  }
};

struct SmoothedMaxAffine {
  MaxAffinePotential atoms;
  double beta = 1.0;
  double log_norm = 0.0;  // log int e^{-phi_beta}, set at construction (1D/2D)

  Vec softmax(const Vec& x) const {
    Vec z = beta * (atoms.slopes * x - atoms.intercepts);
    const double zmax = z.maxCoeff();
    Vec e = (z.array() - zmax).exp();
    return e / e.sum();
  }
  double value(const Vec& x) const {
    Vec z = beta * (atoms.slopes * x - atoms.intercepts);
    const double zmax = z.maxCoeff();
    return (zmax + std::log((z.array() - zmax).exp().sum())) / beta;
  }
  Vec gradient(const Vec& x) const { return atoms.slopes.transpose() * softmax(x); }
  Mat hessian(const Vec& x) const {
    const Vec s = softmax(x);
    const Vec g = atoms.slopes.transpose() * s;
    Mat h = -beta * g * g.transpose();
    for (int i = 0; i < atoms.atom_count(); ++i)
      h += beta * s[i] * atoms.slopes.row(i).transpose() * atoms.slopes.row(i);
    return h;
  }
};

}  // namespace detail

// ---------------------------------------------------------------------------
// MomentMap
// ---------------------------------------------------------------------------

/// A convex potential phi with value/gradient/Hessian evaluators, Legendre
/// transform, and normalized base density e^{-phi}. Immutable and cheap to
/// copy (backend payloads are shared).
class MomentMap {
 public:
  struct LegendreResult {
    double value;  // phi*(y)
    Vec gradient;  // grad phi*(y), the inverse of grad phi
  };

  MapBackend backend() const { return backend_; }
  int dim() const {
    if (backend_ == MapBackend::product) return static_cast<int>(factors_->size());
    if (backend_ == MapBackend::max_affine) return maxaffine_->dim();
    if (backend_ == MapBackend::smoothed_max_affine) return smoothed_->atoms.dim();
    return 1;
  }
  const MaxAffinePotential& atoms() const {
    if (backend_ == MapBackend::max_affine) return *maxaffine_;
    if (backend_ == MapBackend::smoothed_max_affine) return smoothed_->atoms;
    throw error("no closed form: map has no atom representation");
  }
  const std::vector<MomentMap>& factors() const {
    if (backend_ != MapBackend::product) throw error("no closed form: not a product map");
    return *factors_;
  }

  // ---- evaluators ---------------------------------------------------------
  double value(const Vec& x) const {
    switch (backend_) {
      case MapBackend::closed_form: return closed_->value(x[0]);
      case MapBackend::grid1d: return grid_->value(x[0]);
      case MapBackend::product: {
        double s = 0.0;
        for (int j = 0; j < dim(); ++j) s += (*factors_)[static_cast<size_t>(j)].value1(x[j]);
        return s;
      }
      case MapBackend::max_affine: return maxaffine_->value(x);
      case MapBackend::smoothed_max_affine: return smoothed_->value(x);
    }
    return 0.0;
  }
  Vec gradient(const Vec& x) const {
    Vec g(dim());
    switch (backend_) {
      case MapBackend::closed_form: g[0] = closed_->grad(x[0]); break;
      case MapBackend::grid1d: g[0] = grid_->gradient(x[0]); break;
      case MapBackend::product:
        for (int j = 0; j < dim(); ++j) g[j] = (*factors_)[static_cast<size_t>(j)].gradient1(x[j]);
        break;
      case MapBackend::max_affine: g = maxaffine_->slopes.row(maxaffine_->argmax(x)).transpose(); break;
      case MapBackend::smoothed_max_affine: g = smoothed_->gradient(x); break;
    }
    return g;
  }
  Mat hessian(const Vec& x) const {
    const int d = dim();
    Mat h = Mat::Zero(d, d);
    switch (backend_) {
      case MapBackend::closed_form: h(0, 0) = closed_->hess(x[0]); break;
      case MapBackend::grid1d: h(0, 0) = grid_->hessian(x[0]); break;
      case MapBackend::product:
        for (int j = 0; j < d; ++j) h(j, j) = (*factors_)[static_cast<size_t>(j)].hessian1(x[j]);
        break;
      case MapBackend::max_affine: break;  // zero a.e.
      case MapBackend::smoothed_max_affine: h = smoothed_->hessian(x); break;
    }
    return h;
  }

  double value1(double x) const { return value(Vec::Constant(1, x)); }
  double gradient1(double x) const { return gradient(Vec::Constant(1, x))[0]; }
  double hessian1(double x) const { return hessian(Vec::Constant(1, x))(0, 0); }

  // ---- Legendre transform ---------------------------------------------------
  LegendreResult legendre(const Vec& y) const {
    const int d = dim();
    LegendreResult out;
    out.gradient.resize(d);
    switch (backend_) {
      case MapBackend::closed_form: {
        const auto [lo, hi] = closed_->grad_range();
        if (!(y[0] > lo && y[0] < hi)) throw error("outside range: y not in the gradient image");
        const double x = closed_->grad_inverse(y[0]);
        out.gradient[0] = x;
        out.value = x * y[0] - closed_->value(x);
        return out;
      }
      case MapBackend::grid1d: {
        const double x = grid_->grad_inverse(y[0]);
        out.gradient[0] = x;
        out.value = x * y[0] - grid_->value(x);
        return out;
      }
      case MapBackend::product: {
        out.value = 0.0;
        for (int j = 0; j < d; ++j) {
          const auto r = (*factors_)[static_cast<size_t>(j)].legendre(Vec::Constant(1, y[j]));
          out.value += r.value;
          out.gradient[j] = r.gradient[0];
        }
        return out;
      }
      case MapBackend::max_affine: {
        if (d != 1) throw error("legendre divergence: nonsmooth legendre only in 1D");
        const auto cells = maxaffine_->cells_1d();
        const int m = maxaffine_->atom_count();
        const double ymin = maxaffine_->slopes(cells.order.front(), 0);
        const double ymax = maxaffine_->slopes(cells.order.back(), 0);
        if (!(y[0] >= ymin && y[0] <= ymax)) throw error("outside range: y outside atom hull");
        // phi* is the lower convex envelope through (y_i, c_i)
        int k = 0;
        while (k + 1 < m && maxaffine_->slopes(cells.order[static_cast<size_t>(k) + 1], 0) < y[0]) ++k;
        const int i = cells.order[static_cast<size_t>(k)];
        if (maxaffine_->slopes(i, 0) == y[0]) {
          out.value = maxaffine_->intercepts[i];
          out.gradient[0] = maxaffine_->cell_barycenter_1d(i);
          return out;
        }
        const int j = cells.order[static_cast<size_t>(k) + 1];
        const double yi = maxaffine_->slopes(i, 0), yj = maxaffine_->slopes(j, 0);
        const double s = (y[0] - yi) / (yj - yi);
        out.value = (1.0 - s) * maxaffine_->intercepts[i] + s * maxaffine_->intercepts[j];
        out.gradient[0] = cells.breakpoints[static_cast<size_t>(k) + 1];
        return out;
      }
      case MapBackend::smoothed_max_affine: {
        // damped Newton on grad phi_beta(x) = y
        Vec x = Vec::Zero(d);
        // start from the atom-hull barycenter for stability
        x = smoothed_->atoms.slopes.colwise().mean().transpose() * 0.0;
        double best = std::numeric_limits<double>::infinity();
        for (int it = 0; it < 200; ++it) {
          const Vec r = smoothed_->gradient(x) - y;
          const double rn = r.norm();
          if (rn < 1e-12 * (1.0 + y.norm())) break;
          best = std::min(best, rn);
          Mat h = smoothed_->hessian(x);
          h.diagonal().array() += 1e-14;
          Vec step = h.ldlt().solve(r);
          double t = 1.0;
          for (int ls = 0; ls < 60; ++ls) {
            if ((smoothed_->gradient(x - t * step) - y).norm() < rn) break;
            t *= 0.5;
            if (ls == 59) throw error("legendre divergence: newton stalled");
          }
          x -= t * step;
          if (it == 199) throw error("legendre divergence: newton iteration limit");
        }
        if ((smoothed_->gradient(x) - y).norm() > 1e-8 * (1.0 + y.norm()))
          throw error("outside range: y not reachable by smoothed gradient");
        out.gradient = x;
        out.value = x.dot(y) - smoothed_->value(x);
        return out;
      }
    }
    throw error("legendre divergence");
  }

  // ---- base density e^{-phi} -------------------------------------------------
  /// log of the normalized base density.
  double base_log_density(const Vec& x) const { return -value(x) - log_normalization(); }
  /// log of int e^{-phi} dx (0 for exactly-normalized closed forms).
  double log_normalization() const {
    switch (backend_) {
      case MapBackend::closed_form: return 0.0;
      case MapBackend::grid1d: return grid_->log_norm;
      case MapBackend::product: {
        double s = 0.0;
        for (const auto& f : *factors_) s += f.log_normalization();
        return s;
      }
      case MapBackend::max_affine: {
        if (dim() == 1) return std::log(maxaffine_->cell_masses_1d().sum());
        return maxaffine_log_norm_;
      }
      case MapBackend::smoothed_max_affine: return smoothed_->log_norm;
    }
    return 0.0;
  }

  /// Sample the normalized base density (deterministic per (count, seed)).
  Mat sample_base(int count, uint64_t seed) const {
    const CounterRng rng(seed);
    Mat out(count, dim());
    switch (backend_) {
      case MapBackend::closed_form:
        for (int i = 0; i < count; ++i)
          out(i, 0) = closed_->base_quantile(rng.uniform(static_cast<uint64_t>(i)));
        return out;
      case MapBackend::grid1d:
        for (int i = 0; i < count; ++i)
          out(i, 0) = grid_->base_quantile(rng.uniform(static_cast<uint64_t>(i)));
        return out;
      case MapBackend::product: {
        for (int j = 0; j < dim(); ++j) {
          const Mat col = (*factors_)[static_cast<size_t>(j)].sample_base_stream(
              count, rng.substream(static_cast<uint64_t>(j) + 1));
          out.col(j) = col.col(0);
        }
        return out;
      }
      case MapBackend::max_affine: {
        if (dim() != 1) throw error("sampling unsupported: max-affine base in d >= 2");
        return sample_max_affine_1d(*maxaffine_, count, rng);
      }
      case MapBackend::smoothed_max_affine: {
        if (dim() != 1) throw error("sampling unsupported: smoothed base in d >= 2");
        // rejection below the piecewise-exponential envelope e^{-phi_inf}
        const double accept_norm = std::exp(-log_normalization());
        (void)accept_norm;
        Mat env(1, 1);
        const auto& atoms = smoothed_->atoms;
        for (int i = 0; i < count; ++i) {
          const CounterRng sub = rng.substream(static_cast<uint64_t>(i) + 17);
          uint64_t k = 0;
          for (;;) {
            const Mat cand = sample_max_affine_1d(atoms, 1, sub.substream(k));
            const double u = sub.uniform(2 * k + 1);
            Vec x = cand.row(0).transpose();
            // phi_beta >= phi_inf, so exp(phi_inf - phi_beta) <= 1
            if (u <= std::exp(atoms.value(x) - smoothed_->value(x))) {
              out(i, 0) = x[0];
              break;
            }
            if (++k > 10000) throw error("sampling unsupported: rejection stalled");
          }
        }
        return out;
      }
    }
    throw error("sampling unsupported");
  }

  Mat sample_base_stream(int count, const CounterRng& rng) const {
    Mat out(count, 1);
    switch (backend_) {
      case MapBackend::closed_form:
        for (int i = 0; i < count; ++i)
          out(i, 0) = closed_->base_quantile(rng.uniform(static_cast<uint64_t>(i)));
        return out;
      case MapBackend::grid1d:
        for (int i = 0; i < count; ++i)
          out(i, 0) = grid_->base_quantile(rng.uniform(static_cast<uint64_t>(i)));
        return out;
      default: throw error("sampling unsupported: product factor sampler");
    }
  }

  /// Interval outside which the base density is negligible (for quadrature).
  std::pair<double, double> base_interval() const {
    switch (backend_) {
      case MapBackend::closed_form: {
        using K = detail::ClosedForm1D::Kind;
        if (closed_->kind == K::gaussian) {
          const double r = std::sqrt(2.0 * kTruncationNats / closed_->sigma2);
          return {-r, r};
        }
        if (closed_->kind == K::cube) {
          const double r = (kTruncationNats + 2.0) / closed_->a;
          return {-r, r};
        }
        return {-kTruncationNats, std::log(kTruncationNats) + 1.0};
      }
      case MapBackend::grid1d: return {grid_->a, grid_->xmax()};
      case MapBackend::max_affine:
      case MapBackend::smoothed_max_affine: {
        const auto& at = atoms();
        if (at.dim() != 1) throw error("integration failure: no 1D interval");
        const auto cells = at.cells_1d();
        const double smin = at.slopes(cells.order.front(), 0);
        const double smax = at.slopes(cells.order.back(), 0);
        double lo = -kTruncationNats / std::max(-smin, 0.05);
        double hi = kTruncationNats / std::max(smax, 0.05);
        for (double b : cells.breakpoints)
          if (std::isfinite(b)) {
            lo = std::min(lo, b - 1.0);
            hi = std::max(hi, b + 1.0);
          }
        return {lo, hi};
      }
      default: throw error("integration failure: no 1D interval");
    }
  }

  nlohmann::json to_json() const;
  static MomentMap from_json(const nlohmann::json& j);
  static MomentMap from_json_file(const std::string& path);

  // ---- factories -------------------------------------------------------------
  static MomentMap closed_gaussian(double sigma2) {
    MomentMap m;
    m.backend_ = MapBackend::closed_form;
    detail::ClosedForm1D c;
    c.kind = detail::ClosedForm1D::Kind::gaussian;
    c.sigma2 = sigma2;
    m.closed_ = std::make_shared<detail::ClosedForm1D>(c);
    return m;
  }
  static MomentMap closed_cube(double half_width) {
    MomentMap m;
    m.backend_ = MapBackend::closed_form;
    detail::ClosedForm1D c;
    c.kind = detail::ClosedForm1D::Kind::cube;
    c.a = half_width;
    m.closed_ = std::make_shared<detail::ClosedForm1D>(c);
    return m;
  }
  static MomentMap closed_exponential() {
    MomentMap m;
    m.backend_ = MapBackend::closed_form;
    detail::ClosedForm1D c;
    c.kind = detail::ClosedForm1D::Kind::exponential;
    m.closed_ = std::make_shared<detail::ClosedForm1D>(c);
    return m;
  }
  static MomentMap from_grid(detail::Grid1DMap grid) {
    MomentMap m;
    m.backend_ = MapBackend::grid1d;
    m.grid_ = std::make_shared<detail::Grid1DMap>(std::move(grid));
    return m;
  }
  static MomentMap product_of(std::vector<MomentMap> factors) {
    for (const auto& f : factors)
      if (f.dim() != 1) throw error("no closed form: product factors must be 1D");
    MomentMap m;
    m.backend_ = MapBackend::product;
    m.factors_ = std::make_shared<std::vector<MomentMap>>(std::move(factors));
    return m;
  }
  static MomentMap from_max_affine(MaxAffinePotential atoms) {
    MomentMap m;
    m.backend_ = MapBackend::max_affine;
    m.maxaffine_ = std::make_shared<MaxAffinePotential>(std::move(atoms));
    return m;
  }
  static MomentMap smoothed(MaxAffinePotential atoms, double beta);

  const detail::Grid1DMap& grid() const {
    if (backend_ != MapBackend::grid1d) throw error("no closed form: not a grid map");
    return *grid_;
  }

 private:
  static Mat sample_max_affine_1d(const MaxAffinePotential& atoms, int count,
                                  const CounterRng& rng) {
    // exact inverse-CDF sampling of the piecewise-exponential density
    const auto cells = atoms.cells_1d();
    const Vec masses = atoms.cell_masses_1d();
    const double total = masses.sum();
    const int m = atoms.atom_count();
    std::vector<double> cum(static_cast<size_t>(m), 0.0);
    double acc = 0.0;
    for (int k = 0; k < m; ++k) {
      acc += masses[cells.order[static_cast<size_t>(k)]] / total;
      cum[static_cast<size_t>(k)] = acc;
    }
    cum.back() = 1.0;
    Mat out(count, 1);
    for (int i = 0; i < count; ++i) {
      double u = rng.uniform(static_cast<uint64_t>(i));
      const auto it = std::lower_bound(cum.begin(), cum.end(), u);
      const size_t k = static_cast<size_t>(it - cum.begin());
      const int idx = cells.order[k];
      const double s = atoms.slopes(idx, 0), c = atoms.intercepts[idx];
      const double l = cells.breakpoints[k], uppr = cells.breakpoints[k + 1];
      const double lo_u = (k == 0) ? 0.0 : cum[k - 1];
      const double v = (u - lo_u) / std::max(cum[k] - lo_u, 1e-300);  // uniform within cell
      double x;
      if (s == 0.0) {
        x = l + v * (uppr - l);
      } else {
        // conditional CDF of e^{-s x} on the cell, inverted in closed form
        const double cellmass = masses[idx] / std::exp(c);
        if (std::isinf(uppr)) {
          x = l - std::log1p(-v) / s;
        } else if (std::isinf(l)) {
          x = uppr - std::log(v) / s;  // s < 0 here
        } else if (s > 0.0) {
          x = l - std::log1p(-v * (-std::expm1(-s * (uppr - l)))) / s;
          (void)cellmass;
        } else {
          x = uppr - std::log1p(-(1.0 - v) * (-std::expm1(s * (uppr - l)))) / (-s);
        }
      }
      out(i, 0) = x;
    }
    return out;
  }

  MapBackend backend_ = MapBackend::closed_form;
  std::shared_ptr<const detail::ClosedForm1D> closed_;
  std::shared_ptr<const detail::Grid1DMap> grid_;
  std::shared_ptr<const std::vector<MomentMap>> factors_;
  std::shared_ptr<const MaxAffinePotential> maxaffine_;
  std::shared_ptr<const detail::SmoothedMaxAffine> smoothed_;
  double maxaffine_log_norm_ = 0.0;

  friend MomentMap smooth_max_affine(const MaxAffinePotential&, double);
};

// ---- serialization -----------------------------------------------------------

inline nlohmann::json MomentMap::to_json() const {
  nlohmann::json j;
  j["backend"] = backend_name(backend_);
  switch (backend_) {
    case MapBackend::closed_form: {
      using K = detail::ClosedForm1D::Kind;
      switch (closed_->kind) {
        case K::gaussian:
          j["kind"] = "gaussian";
          j["sigma2"] = closed_->sigma2;
          break;
        case K::cube:
          j["kind"] = "cube";
          j["half_width"] = closed_->a;
          break;
        case K::exponential: j["kind"] = "exponential"; break;
      }
      break;
    }
    case MapBackend::grid1d: {
      j["a"] = grid_->a;
      j["h"] = grid_->h;
      j["values"] = grid_->phi;
      j["normalization"] = {{"convention", "grad_zero_at_origin"}, {"log_norm", grid_->log_norm}};
      break;
    }
    case MapBackend::product: {
      nlohmann::json fs = nlohmann::json::array();
      for (const auto& f : *factors_) fs.push_back(f.to_json());
      j["factors"] = std::move(fs);
      break;
    }
    case MapBackend::max_affine:
    case MapBackend::smoothed_max_affine: {
      const auto& at = atoms();
      nlohmann::json sl = nlohmann::json::array(), ic = nlohmann::json::array();
      for (int i = 0; i < at.atom_count(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int c = 0; c < at.dim(); ++c) row.push_back(at.slopes(i, c));
        sl.push_back(std::move(row));
        ic.push_back(at.intercepts[i]);
      }
      j["slopes"] = std::move(sl);
      j["intercepts"] = std::move(ic);
      if (backend_ == MapBackend::smoothed_max_affine) j["beta"] = smoothed_->beta;
      break;
    }
  }
  return j;
}

inline MomentMap MomentMap::from_json(const nlohmann::json& j) {
  const std::string b = j.value("backend", "");
  if (b == "closed_form") {
    const std::string kind = j.value("kind", "");
    if (kind == "gaussian") return closed_gaussian(j.value("sigma2", 1.0));
    if (kind == "cube") return closed_cube(j.value("half_width", 1.0));
    if (kind == "exponential") return closed_exponential();
    throw error("parse error: unknown closed-form kind '" + kind + "'");
  }
  if (b == "grid1d") {
    detail::Grid1DMap g;
    g.a = j.at("a").get<double>();
    g.h = j.at("h").get<double>();
    g.phi = j.at("values").get<std::vector<double>>();
    if (g.phi.size() < 8) throw error("parse error: grid too small");
    g.finalize();
    return from_grid(std::move(g));
  }
  if (b == "product") {
    std::vector<MomentMap> fs;
    for (const auto& f : j.at("factors")) fs.push_back(from_json(f));
    return product_of(std::move(fs));
  }
  if (b == "max_affine" || b == "smoothed_max_affine") {
    const auto& sl = j.at("slopes");
    const auto m = static_cast<Eigen::Index>(sl.size());
    if (m == 0) throw error("parse error: empty atom list");
    const auto d = static_cast<Eigen::Index>(sl[0].size());
    MaxAffinePotential at;
    at.slopes.resize(m, d);
    at.intercepts.resize(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index c = 0; c < d; ++c) at.slopes(i, c) = sl[i][c].get<double>();
      at.intercepts[i] = j.at("intercepts")[i].get<double>();
    }
    if (b == "max_affine") return from_max_affine(std::move(at));
    return smoothed(std::move(at), j.at("beta").get<double>());
  }
  throw error("parse error: unknown map backend '" + b + "'");
}

inline MomentMap MomentMap::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("parse error: cannot open map file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw error(std::string("parse error: ") + e.what());
  }
  return from_json(j);
}

inline MomentMap MomentMap::smoothed(MaxAffinePotential atoms, double beta) {
  if (!(beta > 0.0)) throw error("nonpositive beta: smoothing temperature must be > 0");
  MomentMap m;
  m.backend_ = MapBackend::smoothed_max_affine;
  auto payload = std::make_shared<detail::SmoothedMaxAffine>();
  payload->atoms = std::move(atoms);
  payload->beta = beta;
  // normalization by quadrature (1D and 2D; higher d unsupported for now)
  if (payload->atoms.dim() == 1) {
    MomentMap tmp;
    tmp.backend_ = MapBackend::max_affine;
    tmp.maxaffine_ = std::make_shared<MaxAffinePotential>(payload->atoms);
    auto [lo, hi] = tmp.base_interval();
    const auto rule = composite_gauss_legendre(lo, hi, 240, 16);
    const detail::SmoothedMaxAffine& sm = *payload;
    Vec x(1);
    double z = 0.0;
    for (size_t i = 0; i < rule.nodes.size(); ++i) {
      x[0] = rule.nodes[i];
      z += rule.weights[i] * std::exp(-sm.value(x));
    }
    payload->log_norm = std::log(z);
  } else {
    payload->log_norm = 0.0;  // normalized lazily by Monte Carlo consumers
  }
  m.smoothed_ = std::move(payload);
  return m;
}

}  // namespace momentstein
