#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <omp.h>

#include <random>
#include <vector>

#include "doctest.h"
#include "lvm/assignment.hpp"
#include "lvm/estimator.hpp"
#include "lvm/post.hpp"
#include "lvm/simlab.hpp"

using namespace lvm;

namespace {

Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng) {
  std::normal_distribution<double> nd;
  Mat m(r, c);
  for (auto& v : m.data()) v = nd(rng);
  return m;
}

}  // namespace

TEST_CASE("build_cost is bit-identical across thread counts") {
  std::mt19937_64 rng(1);
  const Mat pred = random_mat(80, 3, rng);
  const Mat out = random_mat(80, 3, rng);
  omp_set_num_threads(1);
  const CostMatrix c1 = build_cost(pred, out);
  omp_set_num_threads(4);
  const CostMatrix c4 = build_cost(pred, out);
  const CostMatrix ref = build_cost_serial(pred, out);
  CHECK(c1.data() == ref.data());
  CHECK(c4.data() == ref.data());
}

TEST_CASE("kernel_density is bit-identical across thread counts") {
  std::mt19937_64 rng(2);
  QuantileGrid g;
  std::normal_distribution<double> nd;
  g.values.resize(200);
  for (auto& v : g.values) v = nd(rng);
  std::sort(g.values.begin(), g.values.end());
  std::vector<double> eval(301);
  for (std::size_t i = 0; i < eval.size(); ++i) eval[i] = -3.0 + 0.02 * i;

  omp_set_num_threads(1);
  const auto d1 = kernel_density(g, 0.3, eval);
  omp_set_num_threads(4);
  const auto d4 = kernel_density(g, 0.3, eval);
  const auto ref = kernel_density_serial(g, 0.3, eval);
  CHECK(d1.values == ref.values);
  CHECK(d4.values == ref.values);
}

TEST_CASE("fit_averaged is invariant to the thread count") {
  std::mt19937_64 rng(3);
  const std::size_t n = 40, T = 2;
  std::normal_distribution<double> nd;
  Mat y(n, T);
  for (auto& v : y.data()) v = nd(rng);
  ModelSpec spec;
  spec.loading = fixed_effects_loading(T);
  spec.constraints.assign(spec.loading.factors(),
                          penalization_constraints(0.0, 10000.0, true));
  FitOptions opt;
  opt.seed = 12;
  opt.n_starts = 3;
  opt.sigma_draws = 2;
  opt.max_iterations = 60;

  omp_set_num_threads(1);
  const auto a = fit_averaged(y, spec, opt);
  omp_set_num_threads(4);
  const auto b = fit_averaged(y, spec, opt);
  CHECK(a.averaged.objective == b.averaged.objective);
  REQUIRE(a.averaged.grids.size() == b.averaged.grids.size());
  for (std::size_t k = 0; k < a.averaged.grids.size(); ++k)
    CHECK(a.averaged.grids[k].values == b.averaged.grids[k].values);
}

TEST_CASE("run_mc is invariant to the thread count") {
  McOptions opt;
  opt.model = McModel::deconvolution;
  opt.n = 40;
  opt.reps = 4;
  opt.fit.seed = 21;
  const auto dgp = parse_dgp("beta(2,2)");
  omp_set_num_threads(1);
  const auto a = run_mc(dgp, opt);
  omp_set_num_threads(4);
  const auto b = run_mc(dgp, opt);
  CHECK(a.mise == b.mise);
  CHECK(a.miae == b.miae);
  CHECK(a.per_rep_ise == b.per_rep_ise);
  CHECK(a.density_mean == b.density_mean);
  CHECK(a.quantile_mean == b.quantile_mean);
  CHECK(a.per_rep_kde_integral == b.per_rep_kde_integral);
}
