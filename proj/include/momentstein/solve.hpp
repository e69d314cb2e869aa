#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "momentstein/moment_map.hpp"

namespace momentstein {

// ---------------------------------------------------------------------------
// closed forms
// ---------------------------------------------------------------------------

/// Exact moment maps for the families where the solution is known:
/// gaussians, centered boxes (and their products), the two-point measure,
/// and the centered exponential.
inline MomentMap closed_form_map(const Measure& mu) {
  switch (mu.family()) {
    case Family::gaussian: {
      auto [mean, cov] = mu.moments();
      return MomentMap::closed_gaussian(cov(0, 0));
    }
    case Family::uniform_box: {
      if (!mu.centered()) throw error("not centered: box must be centered");
      auto [lo, hi] = mu.support_bounds();
      return MomentMap::closed_cube(hi[0]);
    }
    case Family::exponential_centered: {
      auto [mean, cov] = mu.moments();
      if (std::abs(cov(0, 0) - 1.0) > 1e-9)
        throw error("no closed form: scaled exponential_centered");
      return MomentMap::closed_exponential();
    }
    case Family::product: {
      std::vector<MomentMap> fs;
      fs.reserve(mu.factors().size());
      for (const auto& f : mu.factors()) fs.push_back(closed_form_map(f));
      return MomentMap::product_of(std::move(fs));
    }
    case Family::empirical: {
      // two-point uniform {-a, +a}
      const Mat& pts = mu.points();
      if (mu.dim() == 1 && pts.rows() == 2 && std::abs(pts(0, 0) + pts(1, 0)) < 1e-12 &&
          std::abs(mu.weights()[0] - 0.5) < 1e-12) {
        const double a = std::abs(pts(0, 0));
        MaxAffinePotential at;
        at.slopes.resize(2, 1);
        at.slopes << pts(0, 0), pts(1, 0);
        at.intercepts = Vec::Constant(2, std::log(a / 2.0));
        return MomentMap::from_max_affine(std::move(at));
      }
      throw error("no closed form: general empirical measure");
    }
    default: throw error("no closed form: family " + std::string(family_name(mu.family())));
  }
}

// ---------------------------------------------------------------------------
// 1D damped fixed-point solver
// ---------------------------------------------------------------------------

struct Grid1DSpec {
  int nodes = 4096;
  double radius = 0.0;  // 0 = automatic (46-nat core of the base density)
};

namespace detail {

struct FixedPointState {
  double a, h;
  std::vector<double> phi;
};

/// One damped fixed-point sweep phi <- (1-l) phi + l int_0^x T, with
/// T = Q_mu(F_{e^-phi}) computed through tail-stable CDF channels, axis
/// recentred at the T-root, and exp(-phi) renormalized to unit mass.
/// Returns the sup change.
template <typename QFn, typename QcFn>
double fixed_point_sweep(FixedPointState& st, const QFn& quantile, const QcFn& quantile_comp,
                         double cdf_mu_at_0, double lambda) {
  const size_t n = st.phi.size();
  std::vector<double> w(n), wr(n);
  for (size_t i = 0; i < n; ++i) w[i] = std::exp(-st.phi[i]);
  for (size_t i = 0; i < n; ++i) wr[i] = w[n - 1 - i];
  const auto cl = cumulative_integral(w, st.h);
  const auto crr = cumulative_integral(wr, st.h);
  const double z = cl.back();

  std::vector<double> t(n);
  for (size_t i = 0; i < n; ++i) {
    const double f = std::clamp(cl[i] / z, 1e-300, 1.0);
    if (f <= 0.5) {
      t[i] = quantile(f);
    } else {
      const double fc = std::clamp(crr[n - 1 - i] / z, 1e-300, 1.0);
      t[i] = quantile_comp(fc);
    }
  }
  const auto psi = cumulative_integral(t, st.h);

  double change = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double next = (1.0 - lambda) * st.phi[i] + lambda * psi[i];
    change = std::max(change, std::abs(next - st.phi[i]));
    st.phi[i] = next;
  }
  // the additive constant is free; pin it by unit mass
  for (size_t i = 0; i < n; ++i) w[i] = std::exp(-st.phi[i]);
  const double znew = cumulative_integral(w, st.h).back();
  const double logz = std::log(znew);
  for (auto& v : st.phi) v += logz;
  change += std::abs(logz);

  // recenter: the fixed point has phi'(0) = 0, i.e. F_{e^-phi}(0) = F_mu(0);
  // shifting the axis is an exact translation of phi
  const auto it = std::lower_bound(cl.begin(), cl.end(), cdf_mu_at_0 * z);
  if (it != cl.begin() && it != cl.end()) {
    const size_t i = static_cast<size_t>(it - cl.begin());
    const double s = (cdf_mu_at_0 * z - cl[i - 1]) / std::max(cl[i] - cl[i - 1], 1e-300);
    const double x0 = st.a + st.h * (static_cast<double>(i - 1) + s);
    if (std::abs(x0) > 0.05 * st.h) st.a -= x0;
  }
  return change;
}

}  // namespace detail

struct TkeResidual {
  std::vector<double> residual;
  double sup = 0.0;
  int flagged = 0;
};

/// Pointwise residual of e^{-phi} = rho(grad phi) det(Hess phi), using the
/// normalized base density. Non-finite evaluations are flagged and excluded
/// from the sup.
inline TkeResidual verify_tke_residual(const MomentMap& map, const Measure& mu,
                                       const std::vector<Vec>& points) {
  if (!mu.analytic()) throw error("integration failure: residual needs a density");
  TkeResidual out;
  out.residual.reserve(points.size());
  for (const Vec& x : points) {
    double r = std::numeric_limits<double>::quiet_NaN();
    try {
      const double lhs = std::exp(map.base_log_density(x));
      const Vec g = map.gradient(x);
      const double det = map.hessian(x).determinant();
      r = lhs - mu.density(g) * det;
    } catch (const error&) {
      r = std::numeric_limits<double>::quiet_NaN();
    }
    out.residual.push_back(r);
    if (std::isfinite(r))
      out.sup = std::max(out.sup, std::abs(r));
    else
      ++out.flagged;
  }
  return out;
}

/// solve_1d: damped monotone-rearrangement fixed point on a uniform grid.
/// Normalization: grad phi(0) = 0 and int e^{-phi} = 1.
inline MomentMap solve_1d(const Measure& mu, Grid1DSpec spec = {}, double tol = 1e-6,
                          int max_iter = 400) {
  if (mu.dim() != 1 || !mu.analytic())
    throw error("no closed form: solve_1d needs a 1D analytic measure");
  {
    auto [mean, cov] = mu.moments();
    if (std::abs(mean[0]) > 1e-7) throw error("not centered: solve_1d requires a centered measure");
  }
  auto quantile = [&](double u) { return mu.quantile(u); };
  auto quantile_comp = [&](double q) { return mu.quantile_complement(q); };
  const double f0 = mu.cdf(0.0);
  const double lambda = 0.5;

  // bootstrap pass on a coarse wide grid to locate the base-density core
  detail::FixedPointState coarse;
  const double r0 = spec.radius > 0.0 ? spec.radius : 50.0;
  const int n0 = 513;
  coarse.a = -r0;
  coarse.h = 2.0 * r0 / (n0 - 1);
  coarse.phi.resize(n0);
  for (int i = 0; i < n0; ++i)
    coarse.phi[static_cast<size_t>(i)] =
        0.5 * sqr(coarse.a + i * coarse.h) + 0.5 * std::log(2.0 * kPi);
  for (int k = 0; k < 200; ++k) {
    if (detail::fixed_point_sweep(coarse, quantile, quantile_comp, f0, lambda) < 1e-4) break;
  }

  // core: per-side depth caps; a side whose target support is bounded has a
  // quantile function with bounded sensitivity, so a shallow cap suffices
  // and buys grid resolution. Unbounded sides need the full 46 nats.
  auto [supp_lo, supp_hi] = mu.support_bounds();
  const double cap_left = std::isfinite(supp_lo[0]) ? 15.0 : kTruncationNats;
  const double cap_right = std::isfinite(supp_hi[0]) ? 15.0 : kTruncationNats;
  const double phimin = *std::min_element(coarse.phi.begin(), coarse.phi.end());
  int lo_i = 0, hi_i = n0 - 1;
  const auto imin = static_cast<int>(
      std::min_element(coarse.phi.begin(), coarse.phi.end()) - coarse.phi.begin());
  for (int i = imin; i >= 0; --i)
    if (coarse.phi[static_cast<size_t>(i)] - phimin <= cap_left) lo_i = i;
  for (int i = imin; i < n0; ++i)
    if (coarse.phi[static_cast<size_t>(i)] - phimin <= cap_right) hi_i = i;
  double a = coarse.a + lo_i * coarse.h - 2.0 * coarse.h;
  double b = coarse.a + hi_i * coarse.h + 2.0 * coarse.h;
  if (spec.radius > 0.0) {
    a = std::max(a, -spec.radius);
    b = std::min(b, spec.radius);
  }

  // fine grid, initialized from the coarse potential
  detail::FixedPointState st;
  st.a = a;
  st.h = (b - a) / (spec.nodes - 1);
  st.phi.resize(static_cast<size_t>(spec.nodes));
  auto coarse_value = [&](double x) {
    const double t = (x - coarse.a) / coarse.h;
    if (t <= 0.0)
      return coarse.phi[0] + (coarse.phi[1] - coarse.phi[0]) / coarse.h * (x - coarse.a);
    if (t >= n0 - 1.0)
      return coarse.phi[static_cast<size_t>(n0 - 1)] +
             (coarse.phi[static_cast<size_t>(n0 - 1)] - coarse.phi[static_cast<size_t>(n0 - 2)]) /
                 coarse.h * (x - (coarse.a + (n0 - 1) * coarse.h));
    const auto i = static_cast<size_t>(t);
    const double s = t - static_cast<double>(i);
    return (1.0 - s) * coarse.phi[i] + s * coarse.phi[i + 1];
  };
  for (int i = 0; i < spec.nodes; ++i)
    st.phi[static_cast<size_t>(i)] = coarse_value(st.a + i * st.h);

  double change = std::numeric_limits<double>::infinity();
  int iters = 0;
  for (; iters < max_iter; ++iters) {
    change = detail::fixed_point_sweep(st, quantile, quantile_comp, f0, lambda);
    if (change < tol / 10.0) break;
  }

  detail::Grid1DMap grid;
  grid.a = st.a;
  grid.h = st.h;
  grid.phi = std::move(st.phi);
  grid.finalize();
  // final exact recentering: subtract the root of the gradient from the axis
  {
    const auto& g = grid.grad;
    const auto it = std::lower_bound(g.begin(), g.end(), 0.0);
    if (it != g.begin() && it != g.end()) {
      const size_t i = static_cast<size_t>(it - g.begin());
      const double s = (0.0 - g[i - 1]) / std::max(g[i] - g[i - 1], 1e-300);
      grid.a -= grid.a + grid.h * (static_cast<double>(i - 1) + s);
      grid.spline.a = grid.a;
    }
  }
  MomentMap map = MomentMap::from_grid(std::move(grid));

  // a posteriori certificate: PDE residual on the interior core nodes
  const auto& gm = map.grid();
  const double pm = *std::min_element(gm.phi.begin(), gm.phi.end());
  std::vector<Vec> pts;
  for (size_t i = 1; i + 1 < gm.n(); ++i)
    if (gm.phi[i] - pm <= kTruncationNats) pts.push_back(Vec::Constant(1, gm.a + gm.h * i));
  const auto res = verify_tke_residual(map, mu, pts);
  if (change >= tol / 10.0 || res.sup >= tol)
    throw error("solver stalled: residual " + std::to_string(res.sup) + " after " +
                std::to_string(iters) + " iterations (tol " + std::to_string(tol) + ")");
  return map;
}

/// solve_product: tensorize independent 1D maps, phi(x) = sum_i phi_i(x_i).
inline MomentMap solve_product(std::vector<MomentMap> factors) {
  return MomentMap::product_of(std::move(factors));
}

// ---------------------------------------------------------------------------
// semi-discrete solver
// ---------------------------------------------------------------------------

struct SemidiscreteQuad {
  int mc_samples = 200000;  // d >= 2 only; 1D masses are exact
  uint64_t seed = 71;
};

namespace detail {

struct SemidiscreteMasses {
  Vec masses;
  double total;
  double se_max = 0.0;  // Monte Carlo standard error (0 for exact 1D)
};

inline SemidiscreteMasses semidiscrete_masses(const MaxAffinePotential& at,
                                              const SemidiscreteQuad& quad) {
  SemidiscreteMasses out;
  if (at.dim() == 1) {
    out.masses = at.cell_masses_1d();
    out.total = out.masses.sum();
    return out;
  }
  // importance sampling from an isotropic gaussian wide enough to cover the
  // atom hull; per-block accumulation in fixed order keeps this reproducible
  const int d = at.dim();
  const double sp = 2.0 * std::sqrt(at.slopes.rowwise().squaredNorm().maxCoeff()) + 2.0;
  const CounterRng rng(quad.seed);
  const int m = at.atom_count();
  const size_t block = 4096;
  const size_t nblocks = (static_cast<size_t>(quad.mc_samples) + block - 1) / block;
  std::vector<Vec> block_sum(nblocks, Vec::Zero(m));
  std::vector<Vec> block_sumsq(nblocks, Vec::Zero(m));
  const double log_q_const = -0.5 * d * std::log(2.0 * kPi * sp * sp);
  parallel_blocks(static_cast<size_t>(quad.mc_samples), block, [&](size_t bi, size_t lo, size_t hi) {
    Vec x(d);
    for (size_t i = lo; i < hi; ++i) {
      for (int j = 0; j < d; ++j)
        x[j] = sp * rng.normal(i * static_cast<uint64_t>(d) + static_cast<uint64_t>(j));
      const double logq = log_q_const - 0.5 * x.squaredNorm() / (sp * sp);
      const double w = std::exp(-at.value(x) - logq);
      const int cell = at.argmax(x);
      block_sum[bi][cell] += w;
      block_sumsq[bi][cell] += w * w;
    }
  });
  Vec sum = Vec::Zero(m), sumsq = Vec::Zero(m);
  for (size_t bi = 0; bi < nblocks; ++bi) {
    sum += block_sum[bi];
    sumsq += block_sumsq[bi];
  }
  const double n = static_cast<double>(quad.mc_samples);
  out.masses = sum / n;
  out.total = out.masses.sum();
  for (int i = 0; i < m; ++i) {
    const double var = std::max(0.0, sumsq[i] / n - sqr(out.masses[i]));
    out.se_max = std::max(out.se_max, std::sqrt(var / n) / out.total);
  }
  return out;
}

}  // namespace detail

/// solve_semidiscrete: fit max-affine intercepts so that the normalized
/// base-measure cell masses match the empirical weights. Minimizes the
/// convex dual sum_i p_i c_i - log int e^{-max_i(x.y_i - c_i)} dx whose
/// gradient is exactly the mass mismatch.
inline MaxAffinePotential solve_semidiscrete(const Measure& mu, SemidiscreteQuad quad = {},
                                             double tol = 1e-3, int max_iter = 500) {
  if (mu.family() != Family::empirical)
    throw error("no closed form: solve_semidiscrete needs an empirical measure");
  if (mu.points().rows() < 2) throw error("hyperplane support: need at least two atoms");
  {
    auto [mean, cov] = mu.moments();
    const double scale = std::sqrt(cov.trace());
    if (mean.norm() > 1e-9 * std::max(1.0, scale))
      throw error("not centered: semidiscrete target must be centered");
  }
  MaxAffinePotential at;
  at.slopes = mu.points();
  at.intercepts = Vec::Zero(mu.points().rows());
  const Vec p = mu.weights();

  auto objective = [&](const Vec& c) {
    MaxAffinePotential tmp = at;
    tmp.intercepts = c;
    const auto mm = detail::semidiscrete_masses(tmp, quad);
    return std::make_tuple(p.dot(c) - std::log(mm.total), (p - mm.masses / mm.total).eval(),
                           mm.se_max);
  };

  Vec c = at.intercepts;
  auto [j0, g, se] = objective(c);
  double step = 1.0;
  for (int it = 0; it < max_iter; ++it) {
    if (g.cwiseAbs().maxCoeff() < tol) break;
    bool accepted = false;
    for (int ls = 0; ls < 50; ++ls) {
      Vec cand = c - step * g;
      auto [j1, g1, se1] = objective(cand);
      if (j1 <= j0 - 0.25 * step * g.squaredNorm()) {
        c = cand;
        j0 = j1;
        g = g1;
        se = se1;
        accepted = true;
        step *= 1.5;
        break;
      }
      step *= 0.5;
    }
    if (!accepted)
      throw error("insufficient quadrature: line search stalled (gradient " +
                  std::to_string(g.cwiseAbs().maxCoeff()) + ")");
    if (it + 1 == max_iter && g.cwiseAbs().maxCoeff() >= tol)
      throw error("solver stalled: semidiscrete gradient " +
                  std::to_string(g.cwiseAbs().maxCoeff()));
  }
  if (at.dim() >= 2 && 3.0 * se > tol)
    throw error("insufficient quadrature: Monte Carlo standard error " + std::to_string(se));

  // pin the translation freedom: make int e^{-phi} = 1
  at.intercepts = c;
  const auto mm = detail::semidiscrete_masses(at, quad);
  at.intercepts.array() -= std::log(mm.total);
  return at;
}

/// smooth_max_affine: phi_beta = beta^{-1} log sum_i exp(beta (x.y_i - c_i)).
inline MomentMap smooth_max_affine(const MaxAffinePotential& atoms, double beta) {
  return MomentMap::smoothed(atoms, beta);
}

/// legendre: (phi*(y), grad phi*(y)) for y in the interior of supp(mu).
inline MomentMap::LegendreResult legendre(const MomentMap& map, const Vec& y) {
  return map.legendre(y);
}

// ---------------------------------------------------------------------------
// pushforward diagnostics
// ---------------------------------------------------------------------------

struct PushforwardCheck {
  double statistic = 0.0;
  double p_value = 1.0;
  std::string method;  // "ks" or "energy"
};

namespace detail {

inline double kolmogorov_pvalue(double t) {
  if (t < 1e-3) return 1.0;
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = 2.0 * ((k % 2) ? 1.0 : -1.0) * std::exp(-2.0 * sqr(k * t));
    s += term;
    if (std::abs(term) < 1e-14) break;
  }
  return std::clamp(s, 0.0, 1.0);
}

inline double ks_statistic(std::vector<double> values, const Measure& mu) {
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  double d = 0.0;
  for (size_t i = 0; i < values.size(); ++i) {
    const double f = mu.cdf(values[i]);
    d = std::max(d, std::max(f - static_cast<double>(i) / n,
                             (static_cast<double>(i) + 1.0) / n - f));
  }
  return d;
}

inline double energy_statistic(const Mat& a, const Mat& b) {
  auto mean_cross = [](const Mat& u, const Mat& v) {
    double s = 0.0;
    for (int i = 0; i < u.rows(); ++i)
      for (int j = 0; j < v.rows(); ++j) s += (u.row(i) - v.row(j)).norm();
    return s / (static_cast<double>(u.rows()) * static_cast<double>(v.rows()));
  };
  return 2.0 * mean_cross(a, b) - mean_cross(a, a) - mean_cross(b, b);
}

}  // namespace detail

/// pushforward_check: samples X ~ e^{-phi}, transports by grad phi, and
/// tests agreement with mu (1D: Kolmogorov-Smirnov against the CDF;
/// d >= 2: energy distance against a mu sample with a permutation p-value).
inline PushforwardCheck pushforward_check(const MomentMap& map, const Measure& mu, int count,
                                          uint64_t seed) {
  const Mat x = map.sample_base(count, seed);
  PushforwardCheck out;
  if (map.dim() == 1 && mu.analytic() && mu.dim() == 1) {
    std::vector<double> y(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) y[static_cast<size_t>(i)] = map.gradient1(x(i, 0));
    out.statistic = detail::ks_statistic(std::move(y), mu);
    out.p_value = detail::kolmogorov_pvalue(std::sqrt(static_cast<double>(count)) * out.statistic);
    out.method = "ks";
    return out;
  }
  const int sub = std::min(count, 800);
  Mat ya(sub, map.dim());
  Vec xi(map.dim());
  for (int i = 0; i < sub; ++i) {
    xi = x.row(i).transpose();
    ya.row(i) = map.gradient(xi).transpose();
  }
  const Mat yb = mu.sample(sub, seed ^ 0x9e3779b97f4a7c15ULL);
  out.statistic = detail::energy_statistic(ya, yb);
  out.method = "energy";
  // permutation null: pool and reshuffle deterministically
  Mat pool(2 * sub, map.dim());
  pool.topRows(sub) = ya;
  pool.bottomRows(sub) = yb;
  const CounterRng rng(seed ^ 0x6a09e667f3bcc909ULL);
  const int nperm = 100;
  int worse = 0;
  std::vector<int> idx(static_cast<size_t>(2 * sub));
  for (int pmt = 0; pmt < nperm; ++pmt) {
    for (int i = 0; i < 2 * sub; ++i) idx[static_cast<size_t>(i)] = i;
    const CounterRng prng = rng.substream(static_cast<uint64_t>(pmt) + 1);
    for (int i = 2 * sub - 1; i > 0; --i) {
      const auto j =
          static_cast<int>(prng.bits(static_cast<uint64_t>(i)) % static_cast<uint64_t>(i + 1));
      std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
    }
    Mat pa(sub, map.dim()), pb(sub, map.dim());
    for (int i = 0; i < sub; ++i) {
      pa.row(i) = pool.row(idx[static_cast<size_t>(i)]);
      pb.row(i) = pool.row(idx[static_cast<size_t>(i + sub)]);
    }
    if (detail::energy_statistic(pa, pb) >= out.statistic) ++worse;
  }
  out.p_value = (worse + 1.0) / (nperm + 1.0);
  return out;
}

}  // namespace momentstein
