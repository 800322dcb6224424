#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "lvm/estimator.hpp"
#include "lvm/rng.hpp"
#include "lvm/simlab.hpp"

using namespace lvm;

namespace {

ModelSpec fe_spec(std::size_t periods, double c_lower = 0.0, double c_upper = 10000.0) {
  ModelSpec spec;
  spec.loading = fixed_effects_loading(periods);
  spec.constraints.assign(periods + 1, penalization_constraints(c_lower, c_upper, true));
  return spec;
}

Mat simulate_fe(std::size_t n, std::size_t periods, std::uint64_t seed) {
  auto rng = derive_stream(seed, 7);
  DgpSpec dgp;
  dgp.family = DgpFamily::beta;
  std::vector<std::vector<double>> x(periods + 1);
  for (auto& xk : x) xk = draw_dgp(dgp, n, rng);
  Mat y(n, periods);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 0; t < periods; ++t) y(i, t) = x[0][i] + x[t + 1][i];
  return y;
}

double mean_of(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("wasserstein objective exact reproduction is zero") {
  const std::size_t n = 6, T = 2;
  LoadingMatrix a;
  a.a = Mat(T, T);
  a.a(0, 0) = a.a(1, 1) = 1.0;
  std::vector<QuantileGrid> grids(T);
  grids[0].values = {-2.0, -1.0, 0.0, 0.5, 1.0, 2.0};
  grids[1].values = {-1.5, -0.5, 0.0, 0.2, 0.9, 1.1};
  std::vector<Permutation> sigmas(T, identity_permutation(n));
  Mat y(n, T);
  for (std::size_t i = 0; i < n; ++i) {
    y(i, 0) = grids[0].values[i];
    y(i, 1) = grids[1].values[i];
  }
  CHECK(wasserstein_objective(y, grids, a, sigmas) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("scalar objective equals co-sorted sum of squares") {
  std::mt19937_64 rng(12);
  std::normal_distribution<double> nd;
  const std::size_t n = 40;
  LoadingMatrix a;
  a.a = Mat(1, 1);
  a.a(0, 0) = 1.0;
  std::vector<QuantileGrid> grids(1);
  grids[0].values.resize(n);
  Mat y(n, 1);
  std::vector<double> yv(n);
  for (std::size_t i = 0; i < n; ++i) {
    grids[0].values[i] = nd(rng);
    yv[i] = nd(rng);
    y(i, 0) = yv[i];
  }
  std::sort(grids[0].values.begin(), grids[0].values.end());
  std::vector<double> ys = yv;
  std::sort(ys.begin(), ys.end());
  double oracle = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    oracle += (ys[i] - grids[0].values[i]) * (ys[i] - grids[0].values[i]);
  std::vector<Permutation> sigmas{identity_permutation(n)};
  CHECK(wasserstein_objective(y, grids, a, sigmas) == doctest::Approx(oracle).epsilon(1e-9));
}

TEST_CASE("shift algebra raises the optimum by N c^2") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  const std::size_t n = 30;
  LoadingMatrix a;
  a.a = Mat(1, 1);
  a.a(0, 0) = 1.0;
  Mat y(n, 1), yc(n, 1);
  std::vector<QuantileGrid> grids(1);
  grids[0].values.resize(n);
  const double c = 0.8;
  for (std::size_t i = 0; i < n; ++i) {
    y(i, 0) = nd(rng);
    yc(i, 0) = y(i, 0) + c;
    grids[0].values[i] = y(i, 0);  // mean-matched to the original outcomes
  }
  std::sort(grids[0].values.begin(), grids[0].values.end());
  std::vector<Permutation> sigmas{identity_permutation(n)};
  const double base = wasserstein_objective(y, grids, a, sigmas);
  const double shifted = wasserstein_objective(yc, grids, a, sigmas);
  CHECK(shifted - base == doctest::Approx(n * c * c).epsilon(1e-9));
}

TEST_CASE("degenerate noise recovers sorted demeaned outcomes") {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> nd;
  const std::size_t n = 25;
  Mat y(n, 1);
  std::vector<double> yv(n);
  for (std::size_t i = 0; i < n; ++i) {
    yv[i] = nd(rng);
    y(i, 0) = yv[i];
  }
  ModelSpec spec;
  spec.loading = fixed_effects_loading(1);
  spec.constraints = {penalization_constraints(0.0, 10000.0, true),
                      penalization_constraints(0.0, 10000.0, false)};
  std::vector<FixedFactor> fixed{{1, std::vector<double>(n, 0.0)}};
  FitOptions fo;
  fo.seed = 3;
  const auto sigmas = draw_sigmas(2, n, fo.seed, 0, {false, true});
  const auto res = fit(y, spec, fo, sigmas, fixed);

  std::sort(yv.begin(), yv.end());
  const double m = mean_of(yv);
  CHECK(res.iterations <= 3);
  for (std::size_t i = 0; i < n; ++i)
    CHECK(res.grids[0].values[i] == doctest::Approx(yv[i] - m).epsilon(1e-10));
}

TEST_CASE("far start converges within a few iterations") {
  const Mat y = simulate_fe(100, 2, 99);
  const ModelSpec spec = fe_spec(2);
  FitOptions fo;
  fo.seed = 17;
  fo.start_scale = 3.0;  // deliberately dispersed starting grids
  fo.tolerance = 0.0;
  fo.max_iterations = 8;
  const auto sigmas = draw_sigmas(3, 100, fo.seed, 0);
  const auto res = fit(y, spec, fo, sigmas);
  REQUIRE(res.objective_trace.size() >= 5);
  CHECK(res.objective_trace[4] < 0.2 * res.objective_trace[0]);
}

TEST_CASE("fit beats 200 random feasible draws") {
  const Mat y = simulate_fe(8, 2, 5);
  const ModelSpec spec = fe_spec(2);
  FitOptions fo;
  fo.seed = 31;
  fo.n_starts = 5;
  fo.sigma_draws = 1;
  const auto best = fit_averaged(y, spec, fo);
  const auto sigmas = draw_sigmas(3, 8, fo.seed, 0);
  double best_objective = best.draws[0].objective;
  for (std::uint64_t draw = 0; draw < 200; ++draw) {
    const auto grids = random_start(spec, 8, 1234, draw + 10, 1.0, {});
    CHECK(best_objective <= wasserstein_objective(y, grids, spec.loading, sigmas) + 1e-9);
  }
}

TEST_CASE("descent, fixed point, determinism and scalar specialization") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Mat y = simulate_fe(40, 2, 1000 + seed);
    const ModelSpec spec = fe_spec(2);
    FitOptions fo;
    fo.seed = seed;
    const auto sigmas = draw_sigmas(3, 40, fo.seed, 0);
    const auto res = fit(y, spec, fo, sigmas);
    for (std::size_t i = 1; i < res.objective_trace.size(); ++i)
      CHECK(res.objective_trace[i] <= res.objective_trace[i - 1] + 1e-8);
    const double recomputed =
        wasserstein_objective(y, res.grids, spec.loading, sigmas);
    CHECK(res.objective == doctest::Approx(recomputed).epsilon(1e-7));

    const auto restarted = fit(y, spec, fo, sigmas, {}, &res.grids);
    CHECK(restarted.iterations <= 2);
    CHECK(std::fabs(restarted.objective - res.objective) <= 1e-8);

    const auto res2 = fit(y, spec, fo, sigmas);
    CHECK(res2.objective == res.objective);
    CHECK(res2.grids[0].values == res.grids[0].values);
  }

  // T = 1: the matching step must coincide with rank sorting bitwise.
  std::mt19937_64 rng(2);
  std::normal_distribution<double> nd;
  const std::size_t n = 30;
  Mat y(n, 1);
  for (auto& v : y.data()) v = nd(rng);
  ModelSpec spec;
  spec.loading = fixed_effects_loading(1);
  spec.constraints.assign(2, penalization_constraints(0.0, 10000.0));
  spec.constraints[0].zero_mean = true;
  FitOptions fo;
  fo.seed = 4;
  const auto sigmas = draw_sigmas(2, n, fo.seed, 0);
  const auto res = fit(y, spec, fo, sigmas);
  const Mat z = predict_outcomes(spec.loading, sigmas, res.grids);
  std::vector<double> pv(n), yv(n);
  for (std::size_t i = 0; i < n; ++i) {
    pv[i] = z(i, 0);
    yv[i] = y(i, 0);
  }
  CHECK(res.assignment.pi == sort_match(pv, yv).pi);
}

TEST_CASE("fit_averaged with one draw and one start equals fit") {
  const Mat y = simulate_fe(30, 2, 8);
  const ModelSpec spec = fe_spec(2);
  FitOptions fo;
  fo.seed = 77;
  const auto avg = fit_averaged(y, spec, fo);
  const auto sigmas = draw_sigmas(3, 30, fo.seed, 0);
  const auto start = random_start(spec, 30, fo.seed, 0, fo.start_scale, {});
  const auto single = fit(y, spec, fo, sigmas, {}, &start);
  CHECK(avg.averaged.grids[0].values == single.grids[0].values);
  CHECK(avg.draws[0].objective == single.objective);
}

TEST_CASE("averaged grids stay monotone") {
  const Mat y = simulate_fe(50, 2, 9);
  const ModelSpec spec = fe_spec(2);
  FitOptions fo;
  fo.seed = 5;
  fo.sigma_draws = 10;
  const auto avg = fit_averaged(y, spec, fo);
  for (const auto& g : avg.averaged.grids)
    for (std::size_t i = 1; i < g.values.size(); ++i)
      CHECK(g.values[i] >= g.values[i - 1] - 1e-12);
}

TEST_CASE("sigma averaging improves most ranks") {
  const std::size_t n = 100;
  DgpSpec dgp;
  dgp.family = DgpFamily::beta;
  std::vector<double> err1(n, 0.0), err10(n, 0.0);
  const int reps = 20;
  for (int r = 0; r < reps; ++r) {
    const Mat y = simulate_fe(n, 2, 40000 + r);
    const ModelSpec spec = fe_spec(2);
    FitOptions fo;
    fo.seed = 900 + r;
    fo.n_starts = 2;
    fo.sigma_draws = 1;
    const auto single = fit_averaged(y, spec, fo);
    fo.sigma_draws = 10;
    const auto averaged = fit_averaged(y, spec, fo);
    for (std::size_t i = 0; i < n; ++i) {
      const double truth = true_quantile(dgp, (i + 1.0) / (n + 1.0));
      err1[i] += std::fabs(single.averaged.grids[0].values[i] - truth);
      err10[i] += std::fabs(averaged.averaged.grids[0].values[i] - truth);
    }
  }
  int improved = 0;
  for (std::size_t i = 0; i < n; ++i)
    if (err10[i] <= err1[i]) ++improved;
  CHECK(improved >= 60);
}

TEST_CASE("mallows baseline") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> nd;
  const std::size_t n = 50;
  std::vector<double> y(n), zeros(n, 0.0);
  for (auto& v : y) v = nd(rng);
  std::sort(y.begin(), y.end());
  const auto g = mallows_fit(y, zeros, 100, 50, 11);
  for (std::size_t i = 0; i < n; ++i) CHECK(g.values[i] == doctest::Approx(y[i]).epsilon(1e-12));

  CHECK_THROWS_AS(mallows_fit(y, zeros, 50, 50, 1), std::invalid_argument);
  const auto g2 = mallows_fit(y, zeros, 100, 50, 11);
  CHECK(g.values == g2.values);  // seeded determinism
}

TEST_CASE("fit input validation") {
  Mat y(3, 2, 1.0);
  const ModelSpec spec = fe_spec(2);
  FitOptions fo;
  CHECK_THROWS_AS(fit(y, spec, fo, draw_sigmas(2, 3, 0, 0)), std::invalid_argument);
  y(1, 1) = std::nan("");
  CHECK_THROWS_AS(fit(y, spec, fo, draw_sigmas(4, 3, 0, 0)), std::invalid_argument);
  FitOptions bad;
  bad.max_iterations = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
