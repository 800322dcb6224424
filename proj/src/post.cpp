#include "lvm/post.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace lvm {

namespace {

constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gauss(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

/// Exact kernel density at a point from the stored sample and bandwidth.
double density_at(const DensityEstimate& d, double x) {
  double s = 0.0;
  for (double xi : d.sample) s += gauss((xi - x) / d.bandwidth);
  return s / (static_cast<double>(d.sample.size()) * d.bandwidth);
}

/// log of density_at via log-sum-exp, defined even when the direct sum
/// underflows.
double log_density_at(const DensityEstimate& d, double x) {
  const double b = d.bandwidth;
  double m = -std::numeric_limits<double>::infinity();
  for (double xi : d.sample) {
    const double e = -0.5 * ((xi - x) / b) * ((xi - x) / b);
    if (e > m) m = e;
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double xi : d.sample) s += std::exp(-0.5 * ((xi - x) / b) * ((xi - x) / b) - m);
  return m + std::log(s) + std::log(kInvSqrt2Pi / (static_cast<double>(d.sample.size()) * b));
}

}  // namespace

double quantile_sorted(const std::vector<double>& sorted, double p) {
  const std::size_t n = sorted.size();
  if (n == 0) throw std::invalid_argument("quantile: empty sample");
  double pos = p * static_cast<double>(n + 1);
  pos = std::clamp(pos, 1.0, static_cast<double>(n));
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - static_cast<double>(lo);
  if (lo >= n) return sorted[n - 1];
  return sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1]);
}

double quantile(std::vector<double> values, double p) {
  std::sort(values.begin(), values.end());
  return quantile_sorted(values, p);
}

double silverman_bandwidth(const std::vector<double>& values) {
  const std::size_t n = values.size();
  if (n < 2) throw std::invalid_argument("silverman_bandwidth: need N >= 2");
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));
  if (!(sd > 0.0)) throw std::invalid_argument("silverman_bandwidth: degenerate sample");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  const double spread = iqr > 0.0 ? std::min(sd, iqr / 1.34) : sd;
  return 1.144 * spread * std::pow(static_cast<double>(n), -0.2);
}

DensityEstimate kernel_density_serial(const QuantileGrid& grid, double bandwidth,
                                      const std::vector<double>& eval_points) {
  if (grid.size() == 0) throw std::invalid_argument("kernel_density: empty grid");
  if (!(bandwidth > 0.0)) throw std::invalid_argument("kernel_density: bandwidth must be > 0");
  DensityEstimate d;
  d.eval_points = eval_points;
  d.bandwidth = bandwidth;
  d.sample = grid.values;
  d.values.resize(eval_points.size());
  for (std::size_t j = 0; j < eval_points.size(); ++j)
    d.values[j] = density_at(d, eval_points[j]);
  return d;
}

DensityEstimate kernel_density(const QuantileGrid& grid, double bandwidth,
                               const std::vector<double>& eval_points) {
  if (grid.size() == 0) throw std::invalid_argument("kernel_density: empty grid");
  if (!(bandwidth > 0.0)) throw std::invalid_argument("kernel_density: bandwidth must be > 0");
  DensityEstimate d;
  d.eval_points = eval_points;
  d.bandwidth = bandwidth;
  d.sample = grid.values;
  d.values.resize(eval_points.size());
#pragma omp parallel for schedule(static)
  for (long long j = 0; j < static_cast<long long>(eval_points.size()); ++j)
    d.values[static_cast<std::size_t>(j)] =
        density_at(d, eval_points[static_cast<std::size_t>(j)]);
  return d;
}

std::vector<double> derivative_grid(const QuantileGrid& grid) {
  const std::size_t n = grid.size();
  std::vector<double> d(n > 0 ? n - 1 : 0);
  for (std::size_t i = 0; i + 1 < n; ++i)
    d[i] = static_cast<double>(n + 1) * (grid.values[i + 1] - grid.values[i]);
  return d;
}

ConditionalExpectation conditional_expectation(const LoadingMatrix& loading,
                                               const std::vector<QuantileGrid>& grids,
                                               const std::vector<DensityEstimate>& densities,
                                               const std::vector<double>& y, std::size_t k) {
  loading.validate();
  const std::size_t T = loading.periods();
  const std::size_t K = loading.factors();
  if (grids.size() != K || densities.size() != K)
    throw std::invalid_argument("conditional_expectation: need one grid and density per factor");
  if (y.size() != T) throw std::invalid_argument("conditional_expectation: y length mismatch");
  if (k >= K) throw std::invalid_argument("conditional_expectation: factor index out of range");
  const std::size_t N = grids[0].size();

  // Split the columns other than k into an invertible T x T block and the
  // complement (which contains column k). Column-pivoted QR picks the block.
  Eigen::MatrixXd others(T, K - 1);
  std::vector<std::size_t> other_idx;
  for (std::size_t c = 0; c < K; ++c) {
    if (c == k) continue;
    for (std::size_t t = 0; t < T; ++t) others(t, other_idx.size()) = loading.a(t, c);
    other_idx.push_back(c);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(others);
  if (qr.rank() < static_cast<Eigen::Index>(T))
    throw std::invalid_argument("conditional_expectation: no invertible T x T block (singular C_k)");
  std::vector<std::size_t> c_cols(T);
  std::vector<bool> in_c(K, false);
  for (std::size_t t = 0; t < T; ++t) {
    c_cols[t] = other_idx[qr.colsPermutation().indices()(static_cast<Eigen::Index>(t))];
    in_c[c_cols[t]] = true;
  }
  std::vector<std::size_t> b_cols;  // complement, includes k
  for (std::size_t c = 0; c < K; ++c)
    if (!in_c[c]) b_cols.push_back(c);

  Eigen::MatrixXd c_block(T, T);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t j = 0; j < T; ++j) c_block(t, j) = loading.a(t, c_cols[j]);
  Eigen::PartialPivLU<Eigen::MatrixXd> c_lu(c_block);

  std::vector<double> logw(N);
  double logw_max = -std::numeric_limits<double>::infinity();
  Eigen::VectorXd rhs(T);
  for (std::size_t i = 0; i < N; ++i) {
    double lw = 0.0;
    for (std::size_t t = 0; t < T; ++t) rhs(t) = y[t];
    for (std::size_t c : b_cols) {
      const double xv = grids[c].values[i];
      for (std::size_t t = 0; t < T; ++t) rhs(t) -= loading.a(t, c) * xv;
      if (c != k) lw += log_density_at(densities[c], xv);
    }
    const Eigen::VectorXd v = c_lu.solve(rhs);
    for (std::size_t j = 0; j < T; ++j) lw += log_density_at(densities[c_cols[j]], v(j));
    logw[i] = lw;
    logw_max = std::max(logw_max, lw);
  }

  ConditionalExpectation out;
  if (!std::isfinite(logw_max)) {
    out.degenerate_weights = true;
    out.value = std::accumulate(grids[k].values.begin(), grids[k].values.end(), 0.0) /
                static_cast<double>(N);
    return out;
  }
  double wsum = 0.0, vsum = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const double w = std::exp(logw[i] - logw_max);
    wsum += w;
    vsum += w * grids[k].values[i];
  }
  out.value = vsum / wsum;
  return out;
}

std::vector<double> constrained_predictor(const std::vector<double>& posterior_means,
                                          const QuantileGrid& grid) {
  const std::size_t n = grid.size();
  if (posterior_means.size() != n)
    throw std::invalid_argument("constrained_predictor: length mismatch");
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return posterior_means[a] < posterior_means[b];
  });
  std::vector<double> sorted_grid = grid.values;
  std::sort(sorted_grid.begin(), sorted_grid.end());
  std::vector<double> out(n);
  for (std::size_t r = 0; r < n; ++r) out[order[r]] = sorted_grid[r];
  return out;
}

double moment(const std::function<double(double)>& h, const QuantileGrid& grid) {
  if (grid.size() == 0) throw std::invalid_argument("moment: empty grid");
  double s = 0.0;
  for (double v : grid.values) s += h(v);
  return s / static_cast<double>(grid.size());
}

double cross_moment(const std::function<double(double, double)>& h,
                    const std::vector<QuantileGrid>& grids, const LoadingMatrix& loading,
                    std::size_t t, std::size_t k, const std::vector<Permutation>& sigmas) {
  const std::size_t N = grids.at(0).size();
  const std::size_t K = loading.factors();
  double s = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    double z = 0.0;
    for (std::size_t l = 0; l < K; ++l) z += loading.a(t, l) * grids[l].values[sigmas[l][i]];
    s += h(grids[k].values[sigmas[k][i]], z);
  }
  return s / static_cast<double>(N);
}

SummaryStats dispersion_skewness(const std::vector<double>& sample) {
  if (sample.size() < 10) throw std::invalid_argument("dispersion_skewness: need N >= 10");
  std::vector<double> sorted = sample;
  std::sort(sorted.begin(), sorted.end());
  SummaryStats s;
  s.p10 = quantile_sorted(sorted, 0.10);
  s.p50 = quantile_sorted(sorted, 0.50);
  s.p90 = quantile_sorted(sorted, 0.90);
  s.dispersion = s.p90 - s.p10;
  s.upper = s.p90 - s.p50;
  s.lower = s.p50 - s.p10;
  if (!(s.dispersion > 0.0))
    throw std::invalid_argument("dispersion_skewness: zero dispersion, skewness undefined");
  s.bowley_kelley = (s.upper - s.lower) / s.dispersion;
  return s;
}

OlsResult newey_west_ols(const std::vector<double>& y, const Mat& x, int lags) {
  const std::size_t n = x.rows();
  const std::size_t p = x.cols();
  if (y.size() != n) throw std::invalid_argument("newey_west_ols: row mismatch");
  if (n < p + 2) throw std::invalid_argument("newey_west_ols: need rows >= columns + 2");
  if (lags < 0) throw std::invalid_argument("newey_west_ols: lags must be >= 0");

  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd Y(n);
  for (std::size_t i = 0; i < n; ++i) {
    Y(i) = y[i];
    for (std::size_t j = 0; j < p; ++j) X(i, j) = x(i, j);
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < static_cast<Eigen::Index>(p))
    throw std::invalid_argument("newey_west_ols: rank-deficient design matrix");
  const Eigen::VectorXd beta = qr.solve(Y);
  const Eigen::VectorXd u = Y - X * beta;

  const Eigen::MatrixXd xtx_inv = (X.transpose() * X).ldlt().solve(
      Eigen::MatrixXd::Identity(p, p));
  Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
  for (std::size_t i = 0; i < n; ++i)
    meat += u(i) * u(i) * X.row(i).transpose() * X.row(i);
  for (int j = 1; j <= lags; ++j) {
    const double w = 1.0 - static_cast<double>(j) / static_cast<double>(lags + 1);
    Eigen::MatrixXd gamma = Eigen::MatrixXd::Zero(p, p);
    for (std::size_t i = j; i < n; ++i)
      gamma += u(i) * u(i - j) * X.row(i).transpose() * X.row(i - j);
    meat += w * (gamma + gamma.transpose());
  }
  const Eigen::MatrixXd v = xtx_inv * meat * xtx_inv;

  OlsResult out;
  out.coefficients.assign(beta.data(), beta.data() + p);
  out.std_errors.resize(p);
  for (std::size_t j = 0; j < p; ++j) out.std_errors[j] = std::sqrt(std::max(v(j, j), 0.0));
  out.residuals.assign(u.data(), u.data() + n);
  return out;
}

}  // namespace lvm
