#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "momentstein/common.hpp"
#include "momentstein/quadrature.hpp"
#include "momentstein/rng.hpp"

namespace momentstein {

enum class Family { gaussian, uniform_box, exponential_centered, quartic, product, empirical };

enum class SupportKind { all_space, box, half_line_product, polytope };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::gaussian: return "gaussian";
    case Family::uniform_box: return "uniform_box";
    case Family::exponential_centered: return "exponential_centered";
    case Family::quartic: return "quartic";
    case Family::product: return "product";
    case Family::empirical: return "empirical";
  }
  return "?";
}

namespace detail {

/// Numeric CDF/quantile tables for the quartic family e^{-x^2/2 - a x^4}.
struct QuarticTable {
  double alpha = 0.25;
  double radius = 0.0;   // support truncation (46 nats)
  double log_norm = 0.0; // log of the normalizing constant
  double variance = 0.0;
  std::vector<double> x, cdf, cdfc; // cdfc accumulated from the right

  explicit QuarticTable(double a) : alpha(a) {
    // truncation radius: x^2/2 + a x^4 = kTruncationNats
    double lo = 1.0, hi = 2.0;
    auto depth = [a](double t) { return 0.5 * t * t + a * t * t * t * t; };
    while (depth(hi) < kTruncationNats) hi *= 2.0;
    for (int i = 0; i < 200; ++i) {
      const double m = 0.5 * (lo + hi);
      (depth(m) < kTruncationNats ? lo : hi) = m;
    }
    radius = hi;

    const int n = 8193;
    x.resize(n);
    std::vector<double> dens(n);
    const double h = 2.0 * radius / (n - 1);
    for (int i = 0; i < n; ++i) {
      x[i] = -radius + i * h;
      dens[i] = std::exp(-depth(x[i]));
    }
    cdf = cumulative_integral(dens, h);
    const double z = cdf.back();
    log_norm = std::log(z);
    std::vector<double> rev(dens.rbegin(), dens.rend());
    auto cr = cumulative_integral(rev, h);
    cdfc.assign(n, 0.0);
    for (int i = 0; i < n; ++i) cdfc[i] = cr[n - 1 - i] / z;
    for (auto& c : cdf) c /= z;

    std::vector<double> x2d(n);
    for (int i = 0; i < n; ++i) x2d[i] = x[i] * x[i] * dens[i];
    variance = cumulative_integral(x2d, h).back() / z;
  }

  double density(double t) const {
    if (std::abs(t) > radius) return 0.0;
    return std::exp(-0.5 * t * t - alpha * t * t * t * t - log_norm);
  }
  double cdf_at(double t) const { return interp(x, cdf, t, 0.0, 1.0); }
  double cdfc_at(double t) const { return interp(x, cdfc, t, 1.0, 0.0); }
  double quantile(double u) const { return inv(cdf, u, false); }
  double quantile_complement(double q) const { return inv(cdfc, q, true); }

 private:
  static double interp(const std::vector<double>& xs, const std::vector<double>& ys, double t,
                       double below, double above) {
    if (t <= xs.front()) return below;
    if (t >= xs.back()) return above;
    const auto it = std::upper_bound(xs.begin(), xs.end(), t);
    const size_t i = static_cast<size_t>(it - xs.begin());
    const double s = (t - xs[i - 1]) / (xs[i] - xs[i - 1]);
    return ys[i - 1] + s * (ys[i] - ys[i - 1]);
  }
  double inv(const std::vector<double>& table, double u, bool decreasing) const {
    // table is monotone in the node index; bisection then Newton refine
    size_t lo = 0, hi = table.size() - 1;
    auto le = [&](double a, double b) { return decreasing ? a >= b : a <= b; };
    if (le(u, table[0])) return x.front();
    if (le(table[hi], u)) return x.back();
    while (hi - lo > 1) {
      const size_t m = (lo + hi) / 2;
      (le(table[m], u) ? lo : hi) = m;
    }
    double t0 = x[lo], t1 = x[hi], f0 = table[lo], f1 = table[hi];
    double t = t0 + (u - f0) / (f1 - f0 + (f1 == f0 ? 1e-300 : 0.0)) * (t1 - t0);
    for (int it = 0; it < 4; ++it) {
      const double f = decreasing ? cdfc_at(t) : cdf_at(t);
      const double d = density(t) * (decreasing ? -1.0 : 1.0);
      if (d == 0.0) break;
      const double step = (f - u) / d;
      t -= step;
      t = std::clamp(t, t0, t1);
      if (std::abs(step) < 1e-15 * (1.0 + std::abs(t))) break;
    }
    return t;
  }
};

}  // namespace detail

/// A probability measure on R^d: an analytic 1D family leaf (with an
/// affine location/scale record), a product of independent factors, or an
/// empirical weighted point cloud. Immutable after construction.
class Measure {
 public:
  // ---- factories -------------------------------------------------------
  static Measure gaussian(double sigma2, int dim = 1) {
    if (sigma2 <= 0.0) throw error("nonpositive scale: gaussian sigma2 must be > 0");
    Measure leaf = leaf_measure(Family::gaussian, 0.0, std::sqrt(sigma2));
    return dim == 1 ? finish(std::move(leaf)) : replicate(leaf, dim);
  }
  static Measure uniform_box(double lo, double hi, int dim = 1) {
    if (!(hi > lo)) throw error("nonpositive scale: uniform_box needs hi > lo");
    Measure leaf = leaf_measure(Family::uniform_box, 0.5 * (lo + hi), 0.5 * (hi - lo));
    if (std::abs(leaf.loc_) > 1e-14) {
      leaf.loc_ = 0.0;  // Theorem-1 style centering; flagged, not silent
      leaf.autocentered_ = true;
    }
    return dim == 1 ? finish(std::move(leaf)) : replicate(leaf, dim);
  }
  static Measure exponential_centered() {
    return finish(leaf_measure(Family::exponential_centered, 0.0, 1.0));
  }
  static Measure quartic(double alpha) {
    if (alpha <= 0.0) throw error("nonpositive scale: quartic alpha must be > 0");
    Measure m = leaf_measure(Family::quartic, 0.0, 1.0);
    m.quartic_ = std::make_shared<detail::QuarticTable>(alpha);
    return finish(std::move(m));
  }
  static Measure product(std::vector<Measure> factors) {
    Measure m;
    m.family_ = Family::product;
    for (auto& f : factors)
      if (f.dim() != 1) throw error("unknown family: product factors must be 1D");
    m.factors_ = std::move(factors);
    return finish(std::move(m));
  }
  static Measure empirical(Mat points, Vec weights) {
    Measure m;
    m.family_ = Family::empirical;
    if (points.rows() == 0) throw error("unknown family: empty cloud");
    if (weights.size() == 0)
      weights = Vec::Constant(points.rows(), 1.0 / static_cast<double>(points.rows()));
    if (weights.size() != points.rows()) throw error("unknown family: weight count mismatch");
    if ((weights.array() < 0.0).any()) throw error("nonpositive scale: negative weight");
    const double s = weights.sum();
    if (s <= 0.0) throw error("nonpositive scale: zero total weight");
    weights /= s;
    m.points_ = std::move(points);
    m.weights_ = std::move(weights);
    m.uniform_weights_ =
        (m.weights_.array() - 1.0 / static_cast<double>(m.weights_.size())).abs().maxCoeff() <
        1e-15;
    check_full_rank(m.points_, m.weights_);
    return finish(std::move(m));
  }

  /// Construct from a JSON measure spec:
  /// {"family": ..., "dim": d, "params": {...}}.
  static Measure from_spec(const nlohmann::json& spec);
  static Measure from_spec_file(const std::string& path);
  /// Empirical cloud from CSV with header x1,...,xd,weight.
  static Measure from_csv(const std::string& path);

  // ---- basic structure --------------------------------------------------
  Family family() const { return family_; }
  int dim() const {
    switch (family_) {
      case Family::product: return static_cast<int>(factors_.size());
      case Family::empirical: return static_cast<int>(points_.cols());
      default: return 1;
    }
  }
  bool analytic() const { return family_ != Family::empirical; }
  bool is_product() const { return family_ == Family::product; }
  const std::vector<Measure>& factors() const { return factors_; }
  const Mat& points() const { return points_; }
  const Vec& weights() const { return weights_; }
  /// True when the cloud was built with exactly equal 1/n weights.
  bool uniform_weights() const { return uniform_weights_; }

  bool centered() const { return centered_; }
  bool isotropic() const { return isotropic_; }
  bool autocentered() const { return autocentered_; }
  /// True for families of the form e^{-V} with V convex.
  bool log_concave() const {
    switch (family_) {
      case Family::empirical: return false;
      case Family::product:
        return std::all_of(factors_.begin(), factors_.end(),
                           [](const Measure& f) { return f.log_concave(); });
      default: return true;
    }
  }

  SupportKind support_kind() const {
    switch (family_) {
      case Family::gaussian:
      case Family::quartic: return SupportKind::all_space;
      case Family::uniform_box: return SupportKind::box;
      case Family::exponential_centered: return SupportKind::half_line_product;
      case Family::product: return factors_[0].support_kind();
      case Family::empirical: return SupportKind::polytope;
    }
    return SupportKind::all_space;
  }

  /// Open-support bounds per coordinate (+-inf for unbounded sides).
  std::pair<Vec, Vec> support_bounds() const {
    const int d = dim();
    Vec lo(d), hi(d);
    if (family_ == Family::product) {
      for (int j = 0; j < d; ++j) {
        auto [l, h] = factors_[j].support_bounds();
        lo[j] = l[0];
        hi[j] = h[0];
      }
      return {lo, hi};
    }
    if (family_ == Family::empirical) {
      lo = points_.colwise().minCoeff();
      hi = points_.colwise().maxCoeff();
      return {lo, hi};
    }
    const double inf = std::numeric_limits<double>::infinity();
    switch (family_) {
      case Family::gaussian:
      case Family::quartic: lo[0] = -inf; hi[0] = inf; break;
      case Family::uniform_box: lo[0] = loc_ - scale_; hi[0] = loc_ + scale_; break;
      case Family::exponential_centered: lo[0] = loc_ - scale_; hi[0] = inf; break;
      default: break;
    }
    return {lo, hi};
  }

  // ---- density ----------------------------------------------------------
  double density(const Vec& x) const {
    if (family_ == Family::product) {
      double p = 1.0;
      for (int j = 0; j < dim(); ++j) p *= factors_[j].density1(x[j]);
      return p;
    }
    if (family_ == Family::empirical) throw error("integration failure: empirical has no density");
    return density1(x[0]);
  }
  double density1(double x) const { return std_density((x - loc_) / scale_) / scale_; }
  double log_density1(double x) const {
    const double t = (x - loc_) / scale_;
    return std_log_density(t) - std::log(scale_);
  }
  /// d/dx log rho(x); defined in the open support.
  double log_density_gradient1(double x) const {
    const double t = (x - loc_) / scale_;
    return std_log_density_grad(t) / scale_;
  }

  // ---- 1D distribution functions ----------------------------------------
  double cdf(double x) const {
    require_1d("cdf");
    return std_cdf((x - loc_) / scale_);
  }
  double cdf_complement(double x) const {
    require_1d("cdf");
    return std_cdfc((x - loc_) / scale_);
  }
  double quantile(double u) const {
    require_1d("quantile");
    return loc_ + scale_ * std_quantile(u);
  }
  double quantile_complement(double q) const {
    require_1d("quantile");
    return loc_ + scale_ * std_quantile_complement(q);
  }

  // ---- sampling ----------------------------------------------------------
  /// Deterministic for fixed (count, seed) regardless of thread count:
  /// sample i is a pure function of the counter-based stream at index i.
  Mat sample(int count, uint64_t seed) const {
    const CounterRng rng(seed);
    Mat out(count, dim());
    switch (family_) {
      case Family::product:
        for (int j = 0; j < dim(); ++j) {
          const CounterRng sub = rng.substream(static_cast<uint64_t>(j) + 1);
          const Measure& f = factors_[j];
          for (int i = 0; i < count; ++i) out(i, j) = f.sample_one(sub, i);
        }
        break;
      case Family::empirical: {
        std::vector<double> cum(weights_.size());
        double acc = 0.0;
        for (int k = 0; k < weights_.size(); ++k) {
          acc += weights_[k];
          cum[static_cast<size_t>(k)] = acc;
        }
        cum.back() = 1.0;
        for (int i = 0; i < count; ++i) {
          const double u = rng.uniform(static_cast<uint64_t>(i));
          // lower_bound => ties broken by index order
          const auto it = std::lower_bound(cum.begin(), cum.end(), u);
          const auto k = static_cast<Eigen::Index>(it - cum.begin());
          out.row(i) = points_.row(std::min<Eigen::Index>(k, points_.rows() - 1));
        }
        break;
      }
      default:
        for (int i = 0; i < count; ++i) out(i, 0) = sample_one(rng, i);
        break;
    }
    return out;
  }

  double sample_one(const CounterRng& rng, int index) const {
    const double u = rng.uniform(static_cast<uint64_t>(index));
    // route through the well-conditioned tail channel
    return u <= 0.5 ? quantile(u) : quantile_complement(1.0 - u);
  }

  // ---- quadrature ---------------------------------------------------------
  /// Truncated interval covering the support up to kTruncationNats of
  /// log-density drop (1D leaves only).
  std::pair<double, double> quad_interval() const {
    require_1d("quad_interval");
    switch (family_) {
      case Family::gaussian: {
        const double r = std::sqrt(2.0 * kTruncationNats);
        return {loc_ - scale_ * r, loc_ + scale_ * r};
      }
      case Family::uniform_box: return {loc_ - scale_, loc_ + scale_};
      case Family::exponential_centered:
        return {loc_ - scale_, loc_ + scale_ * (kTruncationNats - 1.0)};
      case Family::quartic:
        return {loc_ - scale_ * quartic_->radius, loc_ + scale_ * quartic_->radius};
      default: throw error("integration failure: no quadrature interval");
    }
  }

  /// 1D composite Gauss-Legendre rule on the truncated support.
  QuadratureRule quad_rule(int panels = 160, int order = 16) const {
    auto [a, b] = quad_interval();
    return composite_gauss_legendre(a, b, panels, order);
  }

  /// Integrate f against the measure. Grid quadrature for d <= 2, Monte
  /// Carlo (fixed sample count and seed) for d >= 3, weighted sum for
  /// empirical clouds.
  double integrate(const std::function<double(const Vec&)>& f, int mc_samples = 200000,
                   uint64_t mc_seed = 20240901) const {
    const int d = dim();
    if (family_ == Family::empirical) {
      double s = 0.0;
      Vec x(d);
      for (int i = 0; i < points_.rows(); ++i) {
        x = points_.row(i).transpose();
        s += weights_[i] * f(x);
      }
      return s;
    }
    if (d == 1) {
      const auto rule = quad_rule();
      Vec x(1);
      double s = 0.0;
      for (size_t i = 0; i < rule.nodes.size(); ++i) {
        x[0] = rule.nodes[i];
        const double v = rule.weights[i] * density1(rule.nodes[i]) * f(x);
        if (!std::isfinite(v)) throw error("integration failure: non-finite integrand");
        s += v;
      }
      return s;
    }
    if (d == 2) {
      const auto ra = factors_[0].quad_rule(48, 12);
      const auto rb = factors_[1].quad_rule(48, 12);
      Vec x(2);
      double s = 0.0;
      for (size_t i = 0; i < ra.nodes.size(); ++i) {
        x[0] = ra.nodes[i];
        const double wa = ra.weights[i] * factors_[0].density1(ra.nodes[i]);
        double inner = 0.0;
        for (size_t j = 0; j < rb.nodes.size(); ++j) {
          x[1] = rb.nodes[j];
          inner += rb.weights[j] * factors_[1].density1(rb.nodes[j]) * f(x);
        }
        if (!std::isfinite(inner)) throw error("integration failure: non-finite integrand");
        s += wa * inner;
      }
      return s;
    }
    const Mat pts = sample(mc_samples, mc_seed);
    double s = 0.0;
    Vec x(d);
    for (int i = 0; i < pts.rows(); ++i) {
      x = pts.row(i).transpose();
      s += f(x);
    }
    return s / mc_samples;
  }

  // ---- moments and whitening ----------------------------------------------
  std::pair<Vec, Mat> moments() const {
    const int d = dim();
    Vec mean(d);
    Mat cov(d, d);
    if (family_ == Family::empirical) {
      mean = points_.transpose() * weights_;
      Mat centered = points_.rowwise() - mean.transpose();
      cov = centered.transpose() * weights_.asDiagonal() * centered;
    } else if (d == 1 || is_product()) {
      mean.setZero();
      cov.setZero();
      for (int j = 0; j < d; ++j) {
        const Measure& f = (d == 1 && !is_product()) ? *this : factors_[j];
        const auto rule = f.quad_rule();
        double m0 = 0.0, m1 = 0.0, m2 = 0.0;
        for (size_t i = 0; i < rule.nodes.size(); ++i) {
          const double w = rule.weights[i] * f.density1(rule.nodes[i]);
          m0 += w;
          m1 += w * rule.nodes[i];
          m2 += w * sqr(rule.nodes[i]);
        }
        if (!std::isfinite(m2)) throw error("integration failure: moments diverge");
        mean[j] = m1 / m0;
        cov(j, j) = m2 / m0 - sqr(m1 / m0);
      }
    } else {
      throw error("integration failure: unsupported measure for moments");
    }
    cov = 0.5 * (cov + cov.transpose()).eval();
    return {mean, cov};
  }

  /// Affine image A(mu - mean) with A = Cov^{-1/2}; centered and isotropic.
  Measure whiten() const;
  const Mat& whiten_matrix() const { return whiten_A_; }
  const Vec& whiten_shift() const { return whiten_shift_; }

  nlohmann::json to_spec() const;

 private:
  Family family_ = Family::gaussian;
  double loc_ = 0.0, scale_ = 1.0;  // leaf affine record
  std::shared_ptr<const detail::QuarticTable> quartic_;
  std::vector<Measure> factors_;
  Mat points_;
  Vec weights_;
  bool uniform_weights_ = false;
  bool centered_ = false, isotropic_ = false, autocentered_ = false;
  Mat whiten_A_;
  Vec whiten_shift_;

  static Measure leaf_measure(Family f, double loc, double scale) {
    Measure m;
    m.family_ = f;
    m.loc_ = loc;
    m.scale_ = scale;
    return m;
  }
  static Measure replicate(const Measure& leaf, int dim) {
    std::vector<Measure> fs(static_cast<size_t>(dim), leaf);
    return product(std::move(fs));
  }
  static Measure finish(Measure&& m) {
    m.compute_flags();
    return std::move(m);
  }
  void require_1d(const char* op) const {
    if (dim() != 1 || family_ == Family::empirical || family_ == Family::product)
      throw error(std::string("sampling unsupported: 1D analytic operation '") + op + "'");
  }

  static void check_full_rank(const Mat& pts, const Vec& w) {
    const Vec mean = pts.transpose() * w;
    Mat centered = pts.rowwise() - mean.transpose();
    Mat cov = centered.transpose() * w.asDiagonal() * centered;
    Eigen::SelfAdjointEigenSolver<Mat> es(cov);
    const double top = es.eigenvalues().maxCoeff();
    if (top <= 0.0 || es.eigenvalues().minCoeff() < 1e-12 * top)
      throw error("hyperplane support: empirical cloud has a degenerate covariance");
  }

  void compute_flags() {
    if (family_ == Family::empirical || dim() <= 2 || is_product()) {
      try {
        auto [mean, cov] = moments();
        centered_ = mean.norm() < 1e-8;
        isotropic_ = centered_ && (cov - Mat::Identity(dim(), dim())).cwiseAbs().maxCoeff() < 1e-6;
      } catch (const error&) {
        centered_ = isotropic_ = false;
      }
    }
  }

  // standard-form (loc=0, scale=1) family functions
  double std_density(double t) const {
    switch (family_) {
      case Family::gaussian: return std::exp(-0.5 * t * t) / std::sqrt(2.0 * kPi);
      case Family::uniform_box: return (t >= -1.0 && t <= 1.0) ? 0.5 : 0.0;
      case Family::exponential_centered: return t >= -1.0 ? std::exp(-(t + 1.0)) : 0.0;
      case Family::quartic: return quartic_->density(t);
      default: throw error("integration failure: no density");
    }
  }
  double std_log_density(double t) const {
    const double inf = std::numeric_limits<double>::infinity();
    switch (family_) {
      case Family::gaussian: return -0.5 * t * t - 0.5 * std::log(2.0 * kPi);
      case Family::uniform_box: return (t >= -1.0 && t <= 1.0) ? std::log(0.5) : -inf;
      case Family::exponential_centered: return t >= -1.0 ? -(t + 1.0) : -inf;
      case Family::quartic:
        return -0.5 * t * t - quartic_->alpha * t * t * t * t - quartic_->log_norm;
      default: throw error("integration failure: no density");
    }
  }
  double std_log_density_grad(double t) const {
    switch (family_) {
      case Family::gaussian: return -t;
      case Family::uniform_box: return 0.0;
      case Family::exponential_centered: return -1.0;
      case Family::quartic: return -t - 4.0 * quartic_->alpha * t * t * t;
      default: throw error("integration failure: no density");
    }
  }
  double std_cdf(double t) const {
    switch (family_) {
      case Family::gaussian: return normal_cdf(t);
      case Family::uniform_box: return std::clamp(0.5 * (t + 1.0), 0.0, 1.0);
      case Family::exponential_centered: return t >= -1.0 ? -std::expm1(-(t + 1.0)) : 0.0;
      case Family::quartic: return quartic_->cdf_at(t);
      default: throw error("sampling unsupported");
    }
  }
  double std_cdfc(double t) const {
    switch (family_) {
      case Family::gaussian: return normal_cdf_complement(t);
      case Family::uniform_box: return std::clamp(0.5 * (1.0 - t), 0.0, 1.0);
      case Family::exponential_centered: return t >= -1.0 ? std::exp(-(t + 1.0)) : 1.0;
      case Family::quartic: return quartic_->cdfc_at(t);
      default: throw error("sampling unsupported");
    }
  }
  double std_quantile(double u) const {
    u = std::clamp(u, 1e-300, 1.0 - 1e-16);
    switch (family_) {
      case Family::gaussian: return CounterRng::normal_quantile(u);
      case Family::uniform_box: return 2.0 * u - 1.0;
      case Family::exponential_centered: return -1.0 - std::log1p(-u);
      case Family::quartic: return quartic_->quantile(u);
      default: throw error("sampling unsupported");
    }
  }
  double std_quantile_complement(double q) const {
    q = std::clamp(q, 1e-300, 1.0 - 1e-16);
    switch (family_) {
      case Family::gaussian: return -CounterRng::normal_quantile(q);
      case Family::uniform_box: return 1.0 - 2.0 * q;
      case Family::exponential_centered: return -1.0 - std::log(q);
      case Family::quartic: return quartic_->quantile_complement(q);
      default: throw error("sampling unsupported");
    }
  }

  friend class MeasureAccess;
};

// ---- whitening --------------------------------------------------------------

inline Measure Measure::whiten() const {
  auto [mean, cov] = moments();
  const int d = dim();
  Eigen::SelfAdjointEigenSolver<Mat> es(cov);
  const double top = es.eigenvalues().maxCoeff();
  if (top <= 0.0 || es.eigenvalues().minCoeff() < 1e-12 * top)
    throw error("hyperplane support: singular covariance in whiten");
  const Mat a =
      es.eigenvectors() * es.eigenvalues().cwiseSqrt().cwiseInverse().asDiagonal() *
      es.eigenvectors().transpose();

  Measure out;
  if (family_ == Family::empirical) {
    Mat pts = (points_.rowwise() - mean.transpose()) * a.transpose();
    out = empirical(std::move(pts), weights_);
  } else if (is_product()) {
    std::vector<Measure> fs;
    fs.reserve(factors_.size());
    for (int j = 0; j < d; ++j) {
      const double sd = std::sqrt(cov(j, j));
      Measure f = factors_[j];
      f.loc_ = (f.loc_ - mean[j]) / sd;
      f.scale_ /= sd;
      f.compute_flags();
      fs.push_back(std::move(f));
    }
    out = product(std::move(fs));
  } else {
    out = *this;
    const double sd = std::sqrt(cov(0, 0));
    out.loc_ = (out.loc_ - mean[0]) / sd;
    out.scale_ /= sd;
    out.compute_flags();
  }
  // compose with any prior whitening record
  if (whiten_A_.size() > 0) {
    out.whiten_A_ = a * whiten_A_;
    out.whiten_shift_ = whiten_shift_ + whiten_A_.inverse() * mean;
  } else {
    out.whiten_A_ = a;
    out.whiten_shift_ = mean;
  }
  return out;
}

// ---- JSON / CSV ----------------------------------------------------------------

inline Measure Measure::from_spec(const nlohmann::json& spec) {
  const std::string fam = spec.value("family", "");
  const int d = spec.value("dim", 1);
  const auto params = spec.value("params", nlohmann::json::object());
  if (d < 1) throw error("unknown family: dim must be >= 1");
  if (fam == "gaussian") return gaussian(params.value("sigma2", 1.0), d);
  if (fam == "uniform_box") return uniform_box(params.value("lo", -1.0), params.value("hi", 1.0), d);
  if (fam == "exponential_centered") {
    if (d == 1) return exponential_centered();
    return replicate(exponential_centered(), d);
  }
  if (fam == "quartic") {
    Measure q = quartic(params.value("alpha", 0.25));
    return d == 1 ? q : replicate(q, d);
  }
  if (fam == "product") {
    std::vector<Measure> fs;
    for (const auto& f : params.at("factors")) fs.push_back(from_spec(f));
    return product(std::move(fs));
  }
  if (fam == "empirical") {
    if (params.contains("csv")) return from_csv(params.at("csv").get<std::string>());
    const auto& pts = params.at("points");
    const auto rows = static_cast<Eigen::Index>(pts.size());
    if (rows == 0) throw error("unknown family: empty cloud");
    const auto cols = static_cast<Eigen::Index>(pts[0].size());
    Mat p(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) p(i, j) = pts[i][j].get<double>();
    Vec w;
    if (params.contains("weights")) {
      w.resize(rows);
      for (Eigen::Index i = 0; i < rows; ++i) w[i] = params.at("weights")[i].get<double>();
    }
    return empirical(std::move(p), std::move(w));
  }
  throw error("unknown family: '" + fam + "'");
}

inline Measure Measure::from_spec_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("unknown family: cannot open spec file " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw error(std::string("parse error: ") + e.what());
  }
  return from_spec(j);
}

inline Measure Measure::from_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw error("parse error: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw error("parse error: empty CSV " + path);
  // header x1,...,xd,weight
  int cols = 1;
  for (char c : line)
    if (c == ',') ++cols;
  const int d = cols - 1;
  if (d < 1 || line.substr(0, 2) != "x1") throw error("parse error: CSV header must be x1,...,xd,weight");
  std::vector<double> vals;
  std::vector<double> ws;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        const double v = std::stod(cell);
        if (col < d)
          vals.push_back(v);
        else
          ws.push_back(v);
      } catch (...) {
        throw error("parse error: line " + std::to_string(lineno) + ", column " +
                    std::to_string(col + 1));
      }
      ++col;
    }
    if (col != cols)
      throw error("parse error: line " + std::to_string(lineno) + " has " + std::to_string(col) +
                  " fields, expected " + std::to_string(cols));
  }
  const auto n = static_cast<Eigen::Index>(ws.size());
  Mat pts(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) pts(i, j) = vals[static_cast<size_t>(i) * d + j];
  Vec w = Eigen::Map<Vec>(ws.data(), n);
  return empirical(std::move(pts), std::move(w));
}

inline nlohmann::json Measure::to_spec() const {
  nlohmann::json j;
  j["family"] = family_name(family_);
  j["dim"] = dim();
  nlohmann::json p = nlohmann::json::object();
  switch (family_) {
    case Family::gaussian: p["sigma2"] = scale_ * scale_; break;
    case Family::uniform_box:
      p["lo"] = loc_ - scale_;
      p["hi"] = loc_ + scale_;
      break;
    case Family::quartic:
      p["alpha"] = quartic_->alpha;
      p["scale"] = scale_;
      break;
    case Family::exponential_centered: p["scale"] = scale_; break;
    case Family::product: {
      nlohmann::json fs = nlohmann::json::array();
      for (const auto& f : factors_) fs.push_back(f.to_spec());
      p["factors"] = std::move(fs);
      break;
    }
    case Family::empirical: {
      nlohmann::json pts = nlohmann::json::array(), ws = nlohmann::json::array();
      for (Eigen::Index i = 0; i < points_.rows(); ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < points_.cols(); ++c) row.push_back(points_(i, c));
        pts.push_back(std::move(row));
        ws.push_back(weights_[i]);
      }
      p["points"] = std::move(pts);
      p["weights"] = std::move(ws);
      break;
    }
  }
  j["params"] = std::move(p);
  return j;
}

/// Spec-facing names for the module operations.
inline Measure make_measure(const nlohmann::json& spec) { return Measure::from_spec(spec); }
inline Measure whiten(const Measure& mu) { return mu.whiten(); }
inline Mat sample(const Measure& mu, int count, uint64_t seed) { return mu.sample(count, seed); }
inline std::pair<Vec, Mat> moments(const Measure& mu) { return mu.moments(); }

}  // namespace momentstein
