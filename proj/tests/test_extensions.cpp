#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "lvm/estimator.hpp"
#include "lvm/extensions.hpp"
#include "lvm/rng.hpp"

using namespace lvm;

namespace {

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void check_nonincreasing(const std::vector<double>& trace) {
  for (std::size_t i = 1; i < trace.size(); ++i) CHECK(trace[i] <= trace[i - 1] + 1e-8);
}

}  // namespace

TEST_CASE("equidistant mu candidates") {
  const auto mu = equidistant_mu(2, 10);
  REQUIRE(mu.size() == 10);
  for (std::size_t i = 0; i < 10; ++i) {
    REQUIRE(mu[i].size() == 1);
    CHECK(mu[i][0] == doctest::Approx((i + 1.0) / 11.0).epsilon(1e-12));
  }
  CHECK_THROWS_AS(equidistant_mu(3, 10), std::invalid_argument);
}

TEST_CASE("mixture recovers a planted two-point mixture") {
  std::mt19937_64 rng(60);
  std::normal_distribution<double> noise(0.0, 1e-3);
  const std::size_t n = 80, T = 2;
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = i < n / 2 ? -1.0 : 1.0;  // exact 50/50 split
    for (std::size_t t = 0; t < T; ++t) y(i, t) = m + noise(rng);
  }
  const auto cons = penalization_constraints(0.0, 10000.0);
  FitOptions fo;
  fo.seed = 5;
  fo.max_iterations = 40;
  fo.n_starts = 3;
  const auto fit = fit_mixture(y, 2, {{0.5}}, cons, fo, 10);
  REQUIRE(fit.component_means.size() == 2);
  // The simulated uniforms never split exactly 50/50, so a binomial share of
  // the grid slots is dragged toward the other component.
  CHECK(fit.component_means[0] == doctest::Approx(-1.0).epsilon(0.15));
  CHECK(fit.component_means[1] == doctest::Approx(1.0).epsilon(0.15));
  CHECK(fit.thresholds == std::vector<double>{0.5});
  CHECK(fit.probabilities[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(fit.component_means[0] <= fit.component_means[1]);
  check_nonincreasing(fit.objective_trace);
  for (const auto& comp : fit.grids)
    for (const auto& g : comp)
      for (std::size_t i = 1; i < g.values.size(); ++i)
        CHECK(g.values[i] >= g.values[i - 1] - 1e-9);
}

TEST_CASE("mixture objective is invariant to candidate order") {
  std::mt19937_64 rng(61);
  std::normal_distribution<double> nd;
  const std::size_t n = 30, T = 2;
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = (i % 3 == 0) ? -1.0 : 1.0;
    for (std::size_t t = 0; t < T; ++t) y(i, t) = m + 0.3 * nd(rng);
  }
  const auto cons = penalization_constraints(0.0, 10000.0);
  FitOptions fo;
  fo.seed = 2;
  fo.max_iterations = 25;
  const std::vector<std::vector<double>> fwd{{0.3}, {0.5}, {0.7}};
  const std::vector<std::vector<double>> rev{{0.7}, {0.5}, {0.3}};
  const auto a = fit_mixture(y, 2, fwd, cons, fo, 4);
  const auto b = fit_mixture(y, 2, rev, cons, fo, 4);
  CHECK(a.objective == b.objective);
  CHECK(a.thresholds == b.thresholds);
}

TEST_CASE("degenerate threshold collapses to one component") {
  std::mt19937_64 rng(62);
  std::normal_distribution<double> nd(0.5, 0.3);
  const std::size_t n = 40, T = 2;
  Mat y(n, T);
  for (auto& v : y.data()) v = nd(rng);
  const auto cons = penalization_constraints(0.0, 10000.0);
  FitOptions fo;
  fo.seed = 9;
  fo.max_iterations = 30;
  const auto fit = fit_mixture(y, 2, {{0.0}}, cons, fo, 4);
  // One component carries all the mass and tracks the single population.
  const std::size_t active = fit.probabilities[0] > fit.probabilities[1] ? 0 : 1;
  CHECK(fit.probabilities[active] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(fit.probabilities[1 - active] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(fit.component_means[active] == doctest::Approx(0.5).epsilon(0.4));
  CHECK_THROWS_AS(fit_mixture(y, 2, {}, cons, fo, 4), std::invalid_argument);
}

TEST_CASE("mixture separates gaussian components") {
  std::mt19937_64 rng(63);
  std::normal_distribution<double> nd;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 80, T = 3;
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    const double m = u(rng) < 0.5 ? -1.0 : 1.0;
    for (std::size_t t = 0; t < T; ++t) y(i, t) = m + nd(rng);
  }
  const auto cons = penalization_constraints(0.0, 10000.0);
  FitOptions fo;
  fo.seed = 14;
  fo.max_iterations = 30;
  fo.n_starts = 3;
  const auto fit = fit_mixture(y, 2, {{0.4}, {0.5}, {0.6}}, cons, fo, 10);
  CHECK(std::fabs(fit.component_means[0] + 1.0) < 0.45);
  CHECK(std::fabs(fit.component_means[1] - 1.0) < 0.45);
}

TEST_CASE("heteroskedastic fit with zero noise draws returns sorted demeaned outcomes") {
  std::mt19937_64 rng(70);
  std::normal_distribution<double> nd;
  const std::size_t n = 60;
  std::vector<double> y(n), s_tilde(n), zeros(n, 0.0);
  for (auto& v : y) v = nd(rng);
  for (auto& v : s_tilde) v = 0.5 + std::fabs(nd(rng));
  const auto cons = penalization_constraints(0.0, 10000.0, true);
  FitOptions fo;
  fo.seed = 3;
  const auto fit = fit_heteroskedastic(y, s_tilde, zeros, 10.0, cons,
                                       default_scale_space(s_tilde), fo);
  std::vector<double> sorted(y);
  std::sort(sorted.begin(), sorted.end());
  const double m = mean_of(sorted);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(fit.x1.values[i] == doctest::Approx(sorted[i] - m).epsilon(1e-6));
  CHECK(fit.objective ==
        doctest::Approx(fit.outcome_term + fit.lambda * fit.penalty_term).epsilon(1e-9));
  check_nonincreasing(fit.objective_trace);
}

TEST_CASE("heteroskedastic fit approaches the homoskedastic fit for large lambda") {
  auto rng = derive_stream(71, 0);
  std::normal_distribution<double> nd;
  const std::size_t n = 500;
  std::vector<double> x2(n), y(n), ones(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    x2[i] = nd(rng);
    y[i] = nd(rng) + x2[i];
  }
  const auto cons = penalization_constraints(0.0, 10000.0, true);

  Mat ym(n, 1);
  for (std::size_t i = 0; i < n; ++i) ym(i, 0) = y[i];
  ModelSpec spec;
  spec.loading = fixed_effects_loading(1);
  spec.constraints = {cons, penalization_constraints(0.0, 10000.0)};
  std::vector<FixedFactor> fixed{{1, x2}};
  FitOptions fa;
  fa.seed = 8;
  fa.sigma_draws = 10;
  const auto plain = fit_averaged(ym, spec, fa, fixed);

  // A single fit of either kind carries noise-pairing Monte Carlo error of
  // MAD ~ 0.15, so both sides are averaged over pairings before comparing.
  std::vector<double> het_mean(n, 0.0);
  const int n_seeds = 10;
  for (int s = 0; s < n_seeds; ++s) {
    FitOptions fo;
    fo.seed = 100 + s;
    const auto het = fit_heteroskedastic(y, ones, x2, 1000.0, cons, {0.5, 2.0}, fo);
    for (std::size_t i = 0; i < n; ++i) het_mean[i] += het.x1.values[i] / n_seeds;
    for (double sv : het.s) {
      CHECK(sv >= 0.5 - 1e-12);
      CHECK(sv <= 2.0 + 1e-12);
    }
  }
  double mad = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    mad += std::fabs(het_mean[i] - plain.averaged.grids[0].values[i]);
  mad /= static_cast<double>(n);
  CHECK(mad < 0.1);
}

TEST_CASE("scale space defaults and validation") {
  const auto sp = default_scale_space({1.0, 2.0, 4.0});
  CHECK(sp.lower == doctest::Approx(0.5));
  CHECK(sp.upper == doctest::Approx(8.0));
  CHECK_THROWS_AS(default_scale_space({1.0, 0.0}), std::invalid_argument);
  std::vector<double> y{1.0, 2.0}, s{1.0, -1.0}, e{0.0, 0.0};
  FitOptions fo;
  CHECK_THROWS_AS(fit_heteroskedastic(y, s, e, 10.0,
                                      penalization_constraints(0.0, 100.0),
                                      {0.5, 2.0}, fo),
                  std::invalid_argument);
}

TEST_CASE("random trends reproduces noiseless lines") {
  std::mt19937_64 rng(80);
  std::normal_distribution<double> nd;
  const std::size_t n = 6, T = 3;
  std::vector<double> alpha(n), beta(n);
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    alpha[i] = nd(rng);
    beta[i] = 0.5 * nd(rng);
    for (std::size_t t = 0; t < T; ++t)
      y(i, t) = alpha[i] + beta[i] * static_cast<double>(t);
  }
  FitOptions fo;
  fo.seed = 12;
  const auto fit = fit_random_trends(y, penalization_constraints(0.0, 10000.0, true), fo);
  CHECK(fit.objective <= 1e-10);
  for (const auto& g : fit.epsilon)
    for (double v : g.values) CHECK(std::fabs(v) < 1e-5);
  // The slope cloud is the planted slope multiset (slopes are invariant to
  // the time coding).
  std::vector<double> got(n);
  for (std::size_t i = 0; i < n; ++i) got[i] = fit.alpha_beta(i, 1);
  std::sort(got.begin(), got.end());
  std::sort(beta.begin(), beta.end());
  for (std::size_t i = 0; i < n; ++i)
    CHECK(got[i] == doctest::Approx(beta[i]).epsilon(1e-5));
  check_nonincreasing(fit.objective_trace);

  Mat too_short(4, 2, 0.0);
  CHECK_THROWS_AS(
      fit_random_trends(too_short, penalization_constraints(0.0, 100.0, true), fo),
      std::invalid_argument);
}

TEST_CASE("random trends nests the fixed-effects model") {
  auto rng = derive_stream(81, 0);
  std::normal_distribution<double> nd;
  const std::size_t n = 60, T = 4;
  std::vector<double> alpha(n);
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    alpha[i] = nd(rng);
    for (std::size_t t = 0; t < T; ++t) y(i, t) = alpha[i] + 0.3 * nd(rng);
  }
  FitOptions fo;
  fo.seed = 6;
  const auto trends =
      fit_random_trends(y, penalization_constraints(0.0, 10000.0, true), fo);

  ModelSpec spec;
  spec.loading = fixed_effects_loading(T);
  spec.constraints.assign(T + 1, penalization_constraints(0.0, 10000.0, true));
  const auto fe = fit(y, spec, fo, draw_sigmas(T + 1, n, fo.seed, 0));

  // Comparable objects: the per-unit mid-panel level of the trend fit and the
  // zero-mean common factor grid, both demeaned.
  std::vector<double> level(n);
  for (std::size_t i = 0; i < n; ++i)
    level[i] = trends.alpha_beta(i, 0) + trends.alpha_beta(i, 1) * (T + 1.0) / 2.0;
  std::sort(level.begin(), level.end());
  double ml = mean_of(level);
  double mf = 0.0;
  for (std::size_t i = 0; i < n; ++i) mf += fe.grids[0].values[i];
  mf /= static_cast<double>(n);
  double mad = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    mad += std::fabs((level[i] - ml) - (fe.grids[0].values[i] - mf));
  mad /= static_cast<double>(n);
  CHECK(mad < 0.2);
}

TEST_CASE("random trends recovers the slope variance") {
  const std::size_t n = 100, T = 4;
  const double beta_sd = 0.5;
  double var_sum = 0.0;
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    auto rng = derive_stream(82, static_cast<std::uint64_t>(r));
    std::normal_distribution<double> nd;
    Mat y(n, T);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = nd(rng), b = beta_sd * nd(rng);
      for (std::size_t t = 0; t < T; ++t)
        y(i, t) = a + b * static_cast<double>(t) + 0.3 * nd(rng);
    }
    FitOptions fo;
    fo.seed = 700 + r;
    const auto fit = fit_random_trends(y, penalization_constraints(0.0, 10000.0, true), fo);
    std::vector<double> b(n);
    for (std::size_t i = 0; i < n; ++i) b[i] = fit.alpha_beta(i, 1);
    const double m = mean_of(b);
    double ss = 0.0;
    for (double v : b) ss += (v - m) * (v - m);
    var_sum += ss / static_cast<double>(n - 1);
  }
  const double var_hat = var_sum / reps;
  CHECK(var_hat > 0.7 * beta_sd * beta_sd);
  CHECK(var_hat < 1.3 * beta_sd * beta_sd);
}
