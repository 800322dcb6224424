#include "lvm/estimator.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "lvm/rng.hpp"

namespace lvm {

namespace {

constexpr std::uint64_t kSigmaStream = 0x5100000000000000ULL;
constexpr std::uint64_t kStartStream = 0x5200000000000000ULL;

std::vector<bool> frozen_mask(std::size_t factors, const std::vector<FixedFactor>& fixed) {
  std::vector<bool> mask(factors, false);
  for (const auto& f : fixed) {
    if (f.factor < 0 || static_cast<std::size_t>(f.factor) >= factors)
      throw std::invalid_argument("fixed factor index out of range");
    mask[f.factor] = true;
  }
  return mask;
}

void check_data(const Mat& y) {
  for (double v : y.data())
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite outcome value");
}

std::vector<double> column(const Mat& m, std::size_t j) {
  std::vector<double> v(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) v[i] = m(i, j);
  return v;
}

}  // namespace

void FitOptions::validate() const {
  if (max_iterations < 1 || n_starts < 1 || sigma_draws < 1)
    throw std::invalid_argument("fit options: max_iterations, n_starts and M must be >= 1");
  if (!(tolerance >= 0.0)) throw std::invalid_argument("fit options: bad tolerance");
}

std::vector<Permutation> draw_sigmas(std::size_t factors, std::size_t n,
                                     std::uint64_t seed, std::uint64_t draw_index,
                                     const std::vector<bool>& frozen) {
  auto rng = derive_stream(seed, kSigmaStream ^ draw_index);
  std::vector<Permutation> sigmas(factors);
  for (std::size_t k = 0; k < factors; ++k) {
    sigmas[k] = identity_permutation(n);
    if (!frozen.empty() && frozen[k]) continue;
    std::shuffle(sigmas[k].begin(), sigmas[k].end(), rng);
  }
  return sigmas;
}

Assignment match_step(const Mat& y, const Mat& predicted) {
  if (y.cols() == 1) return sort_match(column(predicted, 0), column(y, 0));
  return solve_assignment(build_cost(predicted, y));
}

double wasserstein_objective(const Mat& y, const std::vector<QuantileGrid>& grids,
                             const LoadingMatrix& loading,
                             const std::vector<Permutation>& sigmas) {
  if (y.cols() != loading.periods())
    throw std::invalid_argument("wasserstein_objective: period mismatch");
  const Mat z = predict_outcomes(loading, sigmas, grids);
  return match_step(y, z).cost;
}

std::vector<QuantileGrid> random_start(const ModelSpec& spec, std::size_t n,
                                       std::uint64_t seed, std::uint64_t stream,
                                       double start_scale,
                                       const std::vector<FixedFactor>& fixed) {
  const std::size_t K = spec.loading.factors();
  auto rng = derive_stream(seed, kStartStream ^ stream);
  std::vector<QuantileGrid> grids(K);
  const auto frozen = frozen_mask(K, fixed);
  for (const auto& f : fixed) {
    grids[f.factor].factor = f.factor;
    grids[f.factor].values = f.values;
    std::sort(grids[f.factor].values.begin(), grids[f.factor].values.end());
  }
  std::uniform_real_distribution<double> mean_dist(-5.0 * start_scale, 5.0 * start_scale);
  std::uniform_int_distribution<int> comp(0, 4);
  std::normal_distribution<double> noise(0.0, start_scale);
  for (std::size_t k = 0; k < K; ++k) {
    if (frozen[k]) continue;
    double means[5];
    for (auto& m : means) m = mean_dist(rng);
    std::vector<double> draws(n);
    for (auto& d : draws) d = means[comp(rng)] + noise(rng);
    std::sort(draws.begin(), draws.end());
    std::vector<double> w(n, 1.0);
    grids[k] = bounded_isotonic_fit(draws, w, spec.constraints[k]);
    grids[k].factor = static_cast<int>(k);
  }
  return grids;
}

EstimationResult fit(const Mat& y, const ModelSpec& spec, const FitOptions& options,
                     const std::vector<Permutation>& sigmas,
                     const std::vector<FixedFactor>& fixed,
                     const std::vector<QuantileGrid>* start) {
  spec.validate();
  options.validate();
  check_data(y);
  const std::size_t N = y.rows();
  const std::size_t K = spec.loading.factors();
  if (y.cols() != spec.loading.periods())
    throw std::invalid_argument("fit: outcome periods do not match the loading matrix");
  if (N < K + 1)
    throw std::invalid_argument("fit: need at least K+1 observations");
  if (sigmas.size() != K) throw std::invalid_argument("fit: one sigma per factor required");

  // The rank condition applies to the free factors only; a frozen factor is
  // observed data and needs no identification argument.
  static std::atomic<bool> warned{false};
  if (fixed.empty() && !check_identification(spec.loading).identified &&
      !warned.exchange(true))
    std::cerr << "warning: loading matrix fails the identification rank condition\n";

  const auto frozen = frozen_mask(K, fixed);
  std::vector<QuantileGrid> grids =
      start ? *start : random_start(spec, N, options.seed, 0, options.start_scale, fixed);
  for (std::size_t k = 0; k < K; ++k)
    if (grids[k].size() != N) throw std::invalid_argument("fit: starting grid length mismatch");

  EstimationResult result;
  // Per-factor solver state carried across iterations: the projection targets
  // drift slowly once matching stabilizes, so resuming the inner solver where
  // it left off makes later iterations cheap.
  std::vector<ChainState> states(K);
  double prev_cost = std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    const Mat z = predict_outcomes(spec.loading, sigmas, grids);
    Assignment match = match_step(y, z);
    result.objective_trace.push_back(match.cost);
    result.iterations = iter;
    if (prev_cost - match.cost < options.tolerance || iter == options.max_iterations) {
      result.assignment = std::move(match);
      break;
    }
    prev_cost = match.cost;
    Mat y_matched(N, y.cols());
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < y.cols(); ++t) y_matched(i, t) = y(match.pi[i], t);
    grids = update_step(y_matched, spec.loading, sigmas, spec.constraints, std::move(grids),
                        frozen, options.update, &states);
    result.assignment = std::move(match);
  }
  result.grids = std::move(grids);
  result.objective = result.objective_trace.back();
  return result;
}

AveragedFit fit_averaged(const Mat& y, const ModelSpec& spec, const FitOptions& options,
                         const std::vector<FixedFactor>& fixed) {
  options.validate();
  const std::size_t K = spec.loading.factors();
  const std::size_t N = y.rows();
  const auto frozen = frozen_mask(K, fixed);
  const int M = options.sigma_draws;
  const int S = options.n_starts;

  AveragedFit out;
  out.draws.resize(M);
  out.start_objectives.assign(M, std::vector<double>(S, 0.0));
  std::vector<std::vector<Permutation>> all_sigmas(M);
  for (int m = 0; m < M; ++m)
    all_sigmas[m] = draw_sigmas(K, N, options.seed, static_cast<std::uint64_t>(m), frozen);

  std::vector<EstimationResult> runs(static_cast<std::size_t>(M) * S);
#pragma omp parallel for collapse(2) schedule(dynamic)
  for (int m = 0; m < M; ++m) {
    for (int s = 0; s < S; ++s) {
      const std::uint64_t stream =
          (static_cast<std::uint64_t>(m) << 20) | static_cast<std::uint64_t>(s);
      auto start = random_start(spec, N, options.seed, stream, options.start_scale, fixed);
      EstimationResult r = fit(y, spec, options, all_sigmas[m], fixed, &start);
      r.start_id = s;
      r.sigma_seed = static_cast<std::uint64_t>(m);
      runs[static_cast<std::size_t>(m) * S + s] = std::move(r);
    }
  }
  for (int m = 0; m < M; ++m) {
    int best = 0;
    for (int s = 0; s < S; ++s) {
      const auto& r = runs[static_cast<std::size_t>(m) * S + s];
      out.start_objectives[m][s] = r.objective;
      if (r.objective < runs[static_cast<std::size_t>(m) * S + best].objective) best = s;
    }
    out.draws[m] = runs[static_cast<std::size_t>(m) * S + best];
  }

  out.averaged.grids.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    out.averaged.grids[k].factor = static_cast<int>(k);
    out.averaged.grids[k].values.assign(N, 0.0);
    for (int m = 0; m < M; ++m)
      for (std::size_t i = 0; i < N; ++i)
        out.averaged.grids[k].values[i] += out.draws[m].grids[k].values[i];
    for (auto& v : out.averaged.grids[k].values) v /= static_cast<double>(M);
  }
  const Mat z = predict_outcomes(spec.loading, all_sigmas[0], out.averaged.grids);
  out.averaged.assignment = match_step(y, z);
  out.averaged.objective = out.averaged.assignment.cost;
  out.averaged.objective_trace = {out.averaged.objective};
  out.averaged.iterations = 0;
  return out;
}

QuantileGrid mallows_fit(const std::vector<double>& y_sorted,
                         const std::vector<double>& x2_sorted, int n_iter, int burn_in,
                         std::uint64_t seed) {
  const std::size_t N = y_sorted.size();
  if (x2_sorted.size() != N) throw std::invalid_argument("mallows_fit: size mismatch");
  if (n_iter <= burn_in || burn_in < 0)
    throw std::invalid_argument("mallows_fit: need n_iter > burn_in >= 0");
  auto rng = derive_stream(seed, 0x4d414c4cULL);

  std::vector<double> x1(y_sorted);
  std::vector<double> z(N), avg(N, 0.0);
  Permutation sigma = identity_permutation(N);
  std::vector<int> rank(N);
  for (int s = 0; s < n_iter; ++s) {
    std::shuffle(sigma.begin(), sigma.end(), rng);
    for (std::size_t i = 0; i < N; ++i) z[i] = x1[sigma[i]] + x2_sorted[i];
    std::iota(rank.begin(), rank.end(), 0);
    std::stable_sort(rank.begin(), rank.end(), [&](int a, int b) { return z[a] < z[b]; });
    // rank[r] = index of the r-th smallest prediction; match it to the r-th
    // smallest outcome.
    for (std::size_t r = 0; r < N; ++r) {
      const int i = rank[r];
      x1[sigma[i]] = y_sorted[r] - x2_sorted[i];
    }
    if (s >= burn_in) {
      std::vector<double> sorted = x1;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t i = 0; i < N; ++i) avg[i] += sorted[i];
    }
  }
  const double keep = static_cast<double>(n_iter - burn_in);
  for (auto& v : avg) v /= keep;
  QuantileGrid g;
  g.values = std::move(avg);
  return g;
}

}  // namespace lvm
