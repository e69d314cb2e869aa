#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "momentstein/quadrature.hpp"
#include "momentstein/rng.hpp"

using namespace momentstein;

TEST_CASE("normal quantile inverts the CDF across both tails") {
  for (double p : {1e-300, 1e-30, 1e-12, 1e-4, 0.3, 0.5, 0.7, 1.0 - 1e-4, 1.0 - 1e-12}) {
    const double x = CounterRng::normal_quantile(p);
    const double back = p < 0.5 ? normal_cdf(x) : normal_cdf_complement(x);
    const double want = p < 0.5 ? p : 1.0 - p;
    REQUIRE(back == Catch::Approx(want).epsilon(1e-12));
  }
  REQUIRE(CounterRng::normal_quantile(0.5) == 0.0);
  REQUIRE(CounterRng::normal_quantile(0.975) == Catch::Approx(1.959963984540054).epsilon(1e-13));
}

TEST_CASE("gauss-legendre composite rule integrates polynomials and gaussians") {
  const auto rule = composite_gauss_legendre(-1.0, 1.0, 4, 8);
  REQUIRE(rule.integrate([](double x) { return x * x; }) == Catch::Approx(2.0 / 3.0).epsilon(1e-14));
  const auto wide = composite_gauss_legendre(-9.6, 9.6, 128, 16);
  const double z = wide.integrate([](double x) { return std::exp(-0.5 * x * x); });
  REQUIRE(z == Catch::Approx(std::sqrt(2.0 * kPi)).epsilon(1e-12));
}

TEST_CASE("adaptive simpson handles smooth and peaked integrands") {
  REQUIRE(adaptive_simpson([](double x) { return std::sin(x); }, 0.0, kPi) ==
          Catch::Approx(2.0).epsilon(1e-10));
  const double g = adaptive_simpson([](double x) { return std::exp(-50.0 * x * x); }, -3.0, 3.0, 1e-13);
  REQUIRE(g == Catch::Approx(std::sqrt(kPi / 50.0)).epsilon(1e-9));
}

TEST_CASE("cumulative integral is 4th order") {
  const int n = 201;
  const double h = 1.0 / (n - 1);
  std::vector<double> y(n);
  for (int i = 0; i < n; ++i) y[static_cast<size_t>(i)] = std::exp(i * h);
  const auto c = cumulative_integral(y, h);
  for (int i : {50, 100, 200}) {
    const double exact = std::exp(i * h) - 1.0;
    REQUIRE(std::abs(c[static_cast<size_t>(i)] - exact) < 1e-10);
  }
}

TEST_CASE("counter rng is pure in (seed, index) and roughly uniform") {
  CounterRng a(42), b(42), c(43);
  REQUIRE(a.bits(7) == b.bits(7));
  REQUIRE(a.bits(7) != c.bits(7));
  REQUIRE(a.substream(1).bits(0) != a.substream(2).bits(0));

  double mean = 0.0, var = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) mean += a.uniform(static_cast<uint64_t>(i));
  mean /= n;
  for (int i = 0; i < n; ++i) var += sqr(a.uniform(static_cast<uint64_t>(i)) - mean);
  var /= n;
  REQUIRE(std::abs(mean - 0.5) < 0.005);
  REQUIRE(std::abs(var - 1.0 / 12.0) < 0.003);

  double nm = 0.0, nv = 0.0;
  for (int i = 0; i < n; ++i) nm += a.normal(static_cast<uint64_t>(i));
  nm /= n;
  for (int i = 0; i < n; ++i) nv += sqr(a.normal(static_cast<uint64_t>(i)) - nm);
  nv /= n;
  REQUIRE(std::abs(nm) < 0.02);
  REQUIRE(std::abs(nv - 1.0) < 0.02);
}
