#include "lvm/extensions.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "lvm/assignment.hpp"
#include "lvm/rng.hpp"

namespace lvm {

namespace {

constexpr std::uint64_t kMixtureStream = 0x4d490000000000ULL;
constexpr std::uint64_t kHeteroStream = 0x48450000000000ULL;

/// Sorted draws from a dispersed five-component Gaussian mixture projected
/// onto the constraint set.
QuantileGrid random_grid(std::size_t n, const ShapeConstraints& cons, double scale,
                         std::mt19937_64& rng) {
  std::uniform_real_distribution<double> mean_dist(-5.0 * scale, 5.0 * scale);
  std::uniform_int_distribution<int> comp(0, 4);
  std::normal_distribution<double> noise(0.0, scale);
  double means[5];
  for (auto& m : means) m = mean_dist(rng);
  std::vector<double> draws(n);
  for (auto& d : draws) d = means[comp(rng)] + noise(rng);
  std::sort(draws.begin(), draws.end());
  std::vector<double> w(n, 1.0);
  return bounded_isotonic_fit(draws, w, cons);
}

int group_of(double v, const std::vector<double>& mu) {
  for (std::size_t g = 0; g < mu.size(); ++g)
    if (v <= mu[g]) return static_cast<int>(g);
  return static_cast<int>(mu.size());
}

struct MixtureInner {
  std::vector<std::vector<QuantileGrid>> grids;
  double objective = std::numeric_limits<double>::infinity();
  std::vector<double> trace;
  Permutation pi;
};

}  // namespace

std::vector<std::vector<double>> equidistant_mu(std::size_t groups, std::size_t points) {
  if (groups != 2)
    throw std::invalid_argument("equidistant_mu: only two-component grids are predefined");
  if (points == 0) throw std::invalid_argument("equidistant_mu: need at least one point");
  std::vector<std::vector<double>> out(points);
  for (std::size_t i = 0; i < points; ++i)
    out[i] = {static_cast<double>(i + 1) / static_cast<double>(points + 1)};
  return out;
}

MixtureFit fit_mixture(const Mat& y, std::size_t groups,
                       const std::vector<std::vector<double>>& mu_candidates,
                       const ShapeConstraints& cons, const FitOptions& options,
                       int prediction_draws) {
  options.validate();
  cons.validate();
  const std::size_t N = y.rows();
  const std::size_t T = y.cols();
  const std::size_t G = groups;
  const int R = prediction_draws;
  if (G < 2) throw std::invalid_argument("fit_mixture: need at least two components");
  if (G > N) throw std::invalid_argument("fit_mixture: more components than observations");
  if (T < 2) throw std::invalid_argument("fit_mixture: need repeated measurements (T >= 2)");
  if (mu_candidates.empty()) throw std::invalid_argument("fit_mixture: empty threshold grid");
  if (R < 1) throw std::invalid_argument("fit_mixture: need at least one prediction draw");
  for (const auto& mu : mu_candidates) {
    if (mu.size() != G - 1)
      throw std::invalid_argument("fit_mixture: candidate size must be G-1");
    double prev = 0.0;
    for (double m : mu) {
      if (m < prev || m > 1.0)
        throw std::invalid_argument("fit_mixture: thresholds must be nondecreasing in [0, 1]");
      prev = m;
    }
  }

  // Shared randomness: uniforms, permutations and starts are identical across
  // candidates, so the grid search is invariant to candidate order.
  std::vector<std::vector<double>> v(N, std::vector<double>(R));
  {
    auto rng = derive_stream(options.seed, kMixtureStream);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (auto& row : v)
      for (auto& val : row) val = u(rng);
  }
  // sigma[g][t][r] is a permutation of the grid rows.
  std::vector<std::vector<std::vector<Permutation>>> sigma(
      G, std::vector<std::vector<Permutation>>(T, std::vector<Permutation>(R)));
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t t = 0; t < T; ++t) {
      auto rng = derive_stream(options.seed, kMixtureStream + 1 + g * T + t);
      for (int r = 0; r < R; ++r) {
        sigma[g][t][r] = identity_permutation(N);
        std::shuffle(sigma[g][t][r].begin(), sigma[g][t][r].end(), rng);
      }
    }
  std::vector<std::vector<std::vector<QuantileGrid>>> starts(options.n_starts);
  for (int s = 0; s < options.n_starts; ++s) {
    auto rng = derive_stream(options.seed, kMixtureStream + 1000 + static_cast<std::uint64_t>(s));
    starts[s].assign(G, std::vector<QuantileGrid>(T));
    for (std::size_t g = 0; g < G; ++g)
      for (std::size_t t = 0; t < T; ++t)
        starts[s][g][t] = random_grid(N, cons, options.start_scale, rng);
  }

  const std::size_t M = N * static_cast<std::size_t>(R);
  Mat yr(M, T);
  for (std::size_t i = 0; i < N; ++i)
    for (int r = 0; r < R; ++r)
      for (std::size_t t = 0; t < T; ++t) yr(i * R + r, t) = y(i, t);

  const std::size_t n_cand = mu_candidates.size();
  const std::size_t n_runs = n_cand * static_cast<std::size_t>(options.n_starts);
  std::vector<MixtureInner> runs(n_runs);

#pragma omp parallel for schedule(dynamic)
  for (long long run = 0; run < static_cast<long long>(n_runs); ++run) {
    const std::size_t c = static_cast<std::size_t>(run) / options.n_starts;
    const int s = static_cast<int>(static_cast<std::size_t>(run) % options.n_starts);
    const auto& mu = mu_candidates[c];
    std::vector<std::vector<int>> z(N, std::vector<int>(R));
    for (std::size_t i = 0; i < N; ++i)
      for (int r = 0; r < R; ++r) z[i][r] = group_of(v[i][r], mu);

    MixtureInner inner;
    inner.grids = starts[s];
    Mat pred(M, T);
    std::vector<double> targets(N), weights(N);
    std::vector<double> sums(N);
    std::vector<int> counts(N);
    double prev = std::numeric_limits<double>::infinity();
    for (int iter = 1; iter <= options.max_iterations; ++iter) {
      for (std::size_t i = 0; i < N; ++i)
        for (int r = 0; r < R; ++r) {
          const int g = z[i][r];
          for (std::size_t t = 0; t < T; ++t)
            pred(i * R + r, t) = inner.grids[g][t].values[sigma[g][t][r][i]];
        }
      Assignment match = solve_assignment(build_cost(pred, yr));
      const double cost = match.cost / R;
      inner.trace.push_back(cost);
      inner.pi = match.pi;
      if (prev - cost < options.tolerance || iter == options.max_iterations) break;
      prev = cost;
      for (std::size_t g = 0; g < G; ++g)
        for (std::size_t t = 0; t < T; ++t) {
          std::fill(sums.begin(), sums.end(), 0.0);
          std::fill(counts.begin(), counts.end(), 0);
          for (std::size_t i = 0; i < N; ++i)
            for (int r = 0; r < R; ++r) {
              if (z[i][r] != static_cast<int>(g)) continue;
              const std::size_t j = sigma[g][t][r][i];
              sums[j] += yr(match.pi[i * R + r], t);
              ++counts[j];
            }
          for (std::size_t j = 0; j < N; ++j) {
            if (counts[j] > 0) {
              targets[j] = sums[j] / counts[j];
              weights[j] = counts[j];
            } else {
              // unmatched grid point: pin it (with negligible weight) where it is
              targets[j] = inner.grids[g][t].values[j];
              weights[j] = 1e-9;
            }
          }
          inner.grids[g][t] =
              bounded_isotonic_fit(targets, weights, cons, &inner.grids[g][t].values);
        }
    }
    inner.objective = inner.trace.back();
    runs[run] = std::move(inner);
  }

  std::size_t best = 0;
  for (std::size_t r = 1; r < n_runs; ++r)
    if (runs[r].objective < runs[best].objective) best = r;
  const auto& mu = mu_candidates[best / options.n_starts];
  const MixtureInner& win = runs[best];

  std::vector<double> prob(G);
  prob[0] = mu[0];
  for (std::size_t g = 1; g + 1 < G; ++g) prob[g] = mu[g] - mu[g - 1];
  prob[G - 1] = 1.0 - mu[G - 2];

  std::vector<double> means(G, 0.0);
  for (std::size_t g = 0; g < G; ++g) {
    for (std::size_t t = 0; t < T; ++t)
      means[g] += std::accumulate(win.grids[g][t].values.begin(),
                                  win.grids[g][t].values.end(), 0.0);
    means[g] /= static_cast<double>(T * N);
  }
  std::vector<std::size_t> order(G);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return means[a] < means[b]; });

  MixtureFit fit;
  fit.objective = win.objective;
  fit.objective_trace = win.trace;
  fit.grids.resize(G);
  fit.probabilities.resize(G);
  fit.component_means.resize(G);
  for (std::size_t g = 0; g < G; ++g) {
    fit.grids[g] = win.grids[order[g]];
    fit.probabilities[g] = prob[order[g]];
    fit.component_means[g] = means[order[g]];
  }
  fit.thresholds.resize(G - 1);
  double cum = 0.0;
  for (std::size_t g = 0; g + 1 < G; ++g) {
    cum += fit.probabilities[g];
    fit.thresholds[g] = cum;
  }
  return fit;
}

ScaleSpace default_scale_space(const std::vector<double>& s_tilde) {
  if (s_tilde.empty()) throw std::invalid_argument("scale space: empty sample");
  const auto [lo, hi] = std::minmax_element(s_tilde.begin(), s_tilde.end());
  if (!(*lo > 0.0)) throw std::invalid_argument("scale space: scales must be positive");
  return {*lo / 2.0, 2.0 * *hi};
}

HeteroFit fit_heteroskedastic(const std::vector<double>& y, const std::vector<double>& s_tilde,
                              const std::vector<double>& x2_draws, double lambda,
                              const ShapeConstraints& cons, const ScaleSpace& space,
                              const FitOptions& options) {
  options.validate();
  cons.validate();
  const std::size_t N = y.size();
  if (s_tilde.size() != N || x2_draws.size() != N)
    throw std::invalid_argument("fit_heteroskedastic: input length mismatch");
  if (!(lambda > 0.0)) throw std::invalid_argument("fit_heteroskedastic: lambda must be > 0");
  if (!(space.lower > 0.0) || !(space.upper >= space.lower))
    throw std::invalid_argument("fit_heteroskedastic: bad scale space");
  for (double s : s_tilde)
    if (!(s > 0.0))
      throw std::invalid_argument("fit_heteroskedastic: scale estimates must be positive");

  std::vector<double> e = x2_draws;
  {
    auto rng = derive_stream(options.seed, kHeteroStream);
    std::shuffle(e.begin(), e.end(), rng);
  }
  const double sqrt_lambda = std::sqrt(lambda);

  // Initial grid: constrained projection of the sorted outcomes. Each slot
  // starts with the scale estimate of the outcome holding its rank, so the
  // first assignment can keep the outcome-sorting match at zero scale cost.
  std::vector<std::size_t> y_order(N);
  std::iota(y_order.begin(), y_order.end(), 0);
  std::sort(y_order.begin(), y_order.end(),
            [&](std::size_t a, std::size_t b) { return y[a] < y[b]; });
  std::vector<double> y_sorted(N);
  for (std::size_t i = 0; i < N; ++i) y_sorted[i] = y[y_order[i]];
  std::vector<double> ones(N, 1.0);
  HeteroFit fit;
  fit.lambda = lambda;
  fit.x1 = bounded_isotonic_fit(y_sorted, ones, cons);
  fit.s.resize(N);
  for (std::size_t i = 0; i < N; ++i)
    fit.s[i] = std::clamp(s_tilde[y_order[i]], space.lower, space.upper);

  Mat pred(N, 2), obs(N, 2);
  for (std::size_t j = 0; j < N; ++j) {
    obs(j, 0) = y[j];
    obs(j, 1) = sqrt_lambda * s_tilde[j];
  }
  std::vector<double> targets(N);
  double prev = std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    for (std::size_t i = 0; i < N; ++i) {
      pred(i, 0) = fit.x1.values[i] + fit.s[i] * e[i];
      pred(i, 1) = sqrt_lambda * fit.s[i];
    }
    Assignment match = solve_assignment(build_cost(pred, obs));
    fit.objective_trace.push_back(match.cost);
    fit.pi = match.pi;
    if (prev - match.cost < options.tolerance || iter == options.max_iterations) break;
    prev = match.cost;
    for (int inner = 0; inner < 25; ++inner) {
      for (std::size_t i = 0; i < N; ++i)
        targets[i] = y[match.pi[i]] - fit.s[i] * e[i];
      fit.x1 = bounded_isotonic_fit(targets, ones, cons, &fit.x1.values);
      double change = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        const double c = y[match.pi[i]] - fit.x1.values[i];
        const double st = s_tilde[match.pi[i]];
        const double snew =
            std::clamp((c * e[i] + lambda * st) / (e[i] * e[i] + lambda), space.lower,
                       space.upper);
        change = std::max(change, std::abs(snew - fit.s[i]));
        fit.s[i] = snew;
      }
      if (change < 1e-12) break;
    }
  }
  fit.outcome_term = 0.0;
  fit.penalty_term = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double r = y[fit.pi[i]] - fit.x1.values[i] - fit.s[i] * e[i];
    const double q = s_tilde[fit.pi[i]] - fit.s[i];
    fit.outcome_term += r * r;
    fit.penalty_term += q * q;
  }
  fit.objective = fit.outcome_term + lambda * fit.penalty_term;
  return fit;
}

TrendsFit fit_random_trends(const Mat& y, const ShapeConstraints& noise_cons,
                            const FitOptions& options) {
  options.validate();
  noise_cons.validate();
  const std::size_t N = y.rows();
  const std::size_t T = y.cols();
  if (T < 3)
    throw std::invalid_argument("fit_random_trends: need T >= 3 periods");

  const auto sigmas = draw_sigmas(T, N, options.seed, 0);
  std::vector<double> ones(N, 1.0);

  TrendsFit fit;
  fit.alpha_beta = Mat(N, 2);
  fit.epsilon.resize(T);

  // Per-unit OLS of the raw rows for the trend start, noise grids from the
  // projected residual ranks.
  double st = 0.0, stt = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    st += static_cast<double>(t + 1);
    stt += static_cast<double>((t + 1) * (t + 1));
  }
  const double det = T * stt - st * st;
  auto unit_ols = [&](const auto& row_value, std::size_t i) {
    double sy = 0.0, sty = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
      const double v = row_value(i, t);
      sy += v;
      sty += static_cast<double>(t + 1) * v;
    }
    fit.alpha_beta(i, 0) = (stt * sy - st * sty) / det;
    fit.alpha_beta(i, 1) = (T * sty - st * sy) / det;
  };
  for (std::size_t i = 0; i < N; ++i)
    unit_ols([&](std::size_t a, std::size_t b) { return y(a, b); }, i);
  std::vector<double> targets(N);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < N; ++i)
      targets[sigmas[t][i]] =
          y(i, t) - fit.alpha_beta(i, 0) - fit.alpha_beta(i, 1) * static_cast<double>(t + 1);
    fit.epsilon[t] = bounded_isotonic_fit(targets, ones, noise_cons);
    fit.epsilon[t].factor = static_cast<int>(t);
  }

  Mat pred(N, T), ym(N, T);
  double prev = std::numeric_limits<double>::infinity();
  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < T; ++t)
        pred(i, t) = fit.alpha_beta(i, 0) + fit.alpha_beta(i, 1) * static_cast<double>(t + 1) +
                     fit.epsilon[t].values[sigmas[t][i]];
    Assignment match = solve_assignment(build_cost(pred, y));
    fit.objective_trace.push_back(match.cost);
    fit.pi = match.pi;
    if (prev - match.cost < options.tolerance || iter == options.max_iterations) break;
    prev = match.cost;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t t = 0; t < T; ++t) ym(i, t) = y(match.pi[i], t);
    for (int sweep = 0; sweep < 3; ++sweep) {
      for (std::size_t i = 0; i < N; ++i)
        unit_ols(
            [&](std::size_t a, std::size_t b) {
              return ym(a, b) - fit.epsilon[b].values[sigmas[b][a]];
            },
            i);
      for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < N; ++i)
          targets[sigmas[t][i]] = ym(i, t) - fit.alpha_beta(i, 0) -
                                  fit.alpha_beta(i, 1) * static_cast<double>(t + 1);
        fit.epsilon[t] =
            bounded_isotonic_fit(targets, ones, noise_cons, &fit.epsilon[t].values);
        fit.epsilon[t].factor = static_cast<int>(t);
      }
    }
  }
  fit.objective = fit.objective_trace.back();
  return fit;
}

}  // namespace lvm
