#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>

#include "momentstein/measures.hpp"

using namespace momentstein;
using Catch::Approx;

TEST_CASE("make_measure: standard families and flags") {
  const Measure g = Measure::gaussian(1.0);
  Vec x(1);
  x[0] = 0.7;
  REQUIRE(g.density(x) == Approx(std::exp(-0.5 * 0.49) / std::sqrt(2 * kPi)).epsilon(1e-14));
  REQUIRE(g.centered());
  REQUIRE(g.isotropic());

  const Measure u = Measure::uniform_box(-1.0, 1.0);
  auto [mu, cu] = u.moments();
  REQUIRE(mu[0] == Approx(0.0).margin(1e-12));
  REQUIRE(cu(0, 0) == Approx(1.0 / 3.0).epsilon(1e-10));
  REQUIRE(u.centered());
  REQUIRE_FALSE(u.isotropic());

  Mat degenerate(2, 2);
  degenerate << 0, 0, 0, 0;
  REQUIRE_THROWS_WITH(Measure::empirical(degenerate, Vec()),
                      Catch::Matchers::ContainsSubstring("hyperplane support"));

  REQUIRE_THROWS_WITH(Measure::gaussian(-1.0),
                      Catch::Matchers::ContainsSubstring("nonpositive scale"));
  REQUIRE_THROWS_WITH(make_measure({{"family", "cauchy"}}),
                      Catch::Matchers::ContainsSubstring("unknown family"));
}

TEST_CASE("density integrates to one under the measure's quadrature") {
  auto mass = [](const Measure& m) {
    return m.integrate([](const Vec&) { return 1.0; });
  };
  REQUIRE(mass(Measure::gaussian(1.0)) == Approx(1.0).margin(1e-8));
  REQUIRE(mass(Measure::gaussian(4.0)) == Approx(1.0).margin(1e-8));
  REQUIRE(mass(Measure::uniform_box(-1, 1)) == Approx(1.0).margin(1e-8));
  REQUIRE(mass(Measure::exponential_centered()) == Approx(1.0).margin(1e-8));
  REQUIRE(mass(Measure::quartic(0.25)) == Approx(1.0).margin(1e-8));
  REQUIRE(mass(Measure::uniform_box(-1, 1, 2)) == Approx(1.0).margin(1e-5));
  REQUIRE(mass(Measure::gaussian(1.0, 2)) == Approx(1.0).margin(1e-5));
}

TEST_CASE("quartic numeric tables match independent quadrature oracles") {
  // scipy quad oracles for alpha = 0.25: Z, Var
  const Measure q = Measure::quartic(0.25);
  Vec x(1);
  x[0] = 0.0;
  REQUIRE(q.density(x) == Approx(1.0 / 1.935247818497).epsilon(1e-9));
  auto [m, c] = q.moments();
  REQUIRE(m[0] == Approx(0.0).margin(1e-10));
  REQUIRE(c(0, 0) == Approx(0.467919916974).epsilon(1e-8));
  // quantile/cdf are mutual inverses
  for (double u : {1e-8, 0.01, 0.3, 0.5, 0.77, 0.999}) {
    REQUIRE(q.cdf(q.quantile(u)) == Approx(u).margin(1e-10));
  }
  REQUIRE(q.quantile_complement(q.cdf_complement(2.5)) == Approx(2.5).margin(1e-9));
}

TEST_CASE("whiten rescales to unit covariance and is idempotent") {
  const Measure u = Measure::uniform_box(-1, 1).whiten();
  auto [m, c] = u.moments();
  REQUIRE(c(0, 0) == Approx(1.0).margin(1e-9));
  auto [lo, hi] = u.support_bounds();
  REQUIRE(hi[0] == Approx(std::sqrt(3.0)).epsilon(1e-9));

  const Measure g = Measure::gaussian(1.0).whiten();
  REQUIRE(g.whiten_matrix()(0, 0) == Approx(1.0).margin(1e-9));

  Mat pts(2, 1);
  pts << -2.0, 2.0;
  const Measure e = Measure::empirical(pts, Vec()).whiten();
  REQUIRE(e.points()(0, 0) == Approx(-1.0).margin(1e-12));
  REQUIRE(e.points()(1, 0) == Approx(1.0).margin(1e-12));

  // idempotence:  whitening twice changes the recorded transform < 1e-10
  const Measure w2 = u.whiten();
  REQUIRE((w2.whiten_matrix() - u.whiten_matrix()).cwiseAbs().maxCoeff() < 1e-10);

  Mat flat(3, 2);
  flat << 0, 0, 1, 1, 2, 2;  // rank-1 cloud
  REQUIRE_THROWS_WITH(Measure::empirical(flat, Vec()),
                      Catch::Matchers::ContainsSubstring("hyperplane support"));
}

TEST_CASE("sampling is deterministic and consistent with the law") {
  const Measure g = Measure::gaussian(1.0);
  const Mat a = g.sample(4, 7), b = g.sample(4, 7);
  REQUIRE(a == b);
  REQUIRE(g.sample(4, 8) != a);

  const Measure u = Measure::uniform_box(-1, 1);
  const Mat s = u.sample(100000, 99);
  const double mean = s.col(0).mean();
  const double var = (s.col(0).array() - mean).square().mean();
  REQUIRE(std::abs(var - 1.0 / 3.0) < 0.02);

  Mat pm(2, 1);
  pm << -1.0, 1.0;
  const Measure pm2 = Measure::empirical(pm, Vec());
  const Mat sp = pm2.sample(10000, 5);
  const double frac = (sp.col(0).array() > 0).cast<double>().mean();
  REQUIRE(std::abs(frac - 0.5) < 0.02);

  // product sampling: coordinates independent, deterministic
  const Measure prod = Measure::uniform_box(-1, 1, 2);
  const Mat q = prod.sample(2000, 11);
  REQUIRE(q == prod.sample(2000, 11));
  const double corr = ((q.col(0).array() - q.col(0).mean()) * (q.col(1).array() - q.col(1).mean()))
                          .mean();
  REQUIRE(std::abs(corr) < 0.02);
}

TEST_CASE("moments match closed forms") {
  auto [mg, cg] = Measure::gaussian(2.5).moments();
  REQUIRE(mg[0] == Approx(0.0).margin(1e-10));
  REQUIRE(cg(0, 0) == Approx(2.5).epsilon(1e-10));

  auto [me, ce] = Measure::exponential_centered().moments();
  REQUIRE(me[0] == Approx(0.0).margin(1e-8));
  REQUIRE(ce(0, 0) == Approx(1.0).epsilon(1e-8));

  auto [mi, ci] = Measure::uniform_box(-std::sqrt(3.0), std::sqrt(3.0)).moments();
  REQUIRE(mi[0] == Approx(0.0).margin(1e-12));
  REQUIRE(ci(0, 0) == Approx(1.0).epsilon(1e-10));
}

TEST_CASE("non-centered analytic input is auto-centered with a warning flag") {
  const Measure shifted = Measure::uniform_box(0.0, 2.0);
  REQUIRE(shifted.autocentered());
  REQUIRE(shifted.centered());
  auto [lo, hi] = shifted.support_bounds();
  REQUIRE(lo[0] == Approx(-1.0));
  REQUIRE(hi[0] == Approx(1.0));
}

TEST_CASE("exponential_centered tail channels stay accurate far out") {
  const Measure e = Measure::exponential_centered();
  REQUIRE(e.quantile_complement(1e-30) == Approx(-1.0 + 30 * std::log(10.0)).epsilon(1e-12));
  REQUIRE(e.cdf_complement(40.0) == Approx(std::exp(-41.0)).epsilon(1e-12));
}

TEST_CASE("CSV round trip for empirical clouds") {
  const char* path = "test_cloud.csv";
  {
    std::ofstream out(path);
    out << "x1,x2,weight\n";
    out << "0.5,-0.25,0.25\n";
    out << "-0.5,0.25,0.5\n";
    out << "1.5,0.75,0.25\n";
  }
  const Measure m = Measure::from_csv(path);
  REQUIRE(m.dim() == 2);
  REQUIRE(m.points().rows() == 3);
  REQUIRE(m.weights()[1] == Approx(0.5));
  REQUIRE(m.weights().sum() == Approx(1.0).margin(1e-12));
  std::remove(path);

  {
    std::ofstream out(path);
    out << "x1,weight\n1.0,0.5\nbogus,0.5\n";
  }
  REQUIRE_THROWS_WITH(Measure::from_csv(path), Catch::Matchers::ContainsSubstring("line 3"));
  std::remove(path);
}

TEST_CASE("measure specs round trip through JSON") {
  const auto spec = nlohmann::json{{"family", "product"},
                                   {"dim", 2},
                                   {"params",
                                    {{"factors",
                                      {{{"family", "gaussian"}, {"dim", 1}, {"params", {{"sigma2", 2.0}}}},
                                       {{"family", "uniform_box"},
                                        {"dim", 1},
                                        {"params", {{"lo", -1.0}, {"hi", 1.0}}}}}}}}};
  const Measure m = make_measure(spec);
  REQUIRE(m.dim() == 2);
  const Measure back = make_measure(m.to_spec());
  auto [m1, c1] = m.moments();
  auto [m2, c2] = back.moments();
  REQUIRE((c1 - c2).cwiseAbs().maxCoeff() < 1e-12);
}
