#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lvm/mat.hpp"
#include "lvm/model.hpp"
#include "lvm/shape_ls.hpp"

namespace lvm {

struct DensityEstimate {
  std::vector<double> eval_points;  // sorted
  std::vector<double> values;       // >= 0
  std::vector<double> sample;       // pseudo-observations the estimate is built from
  double bandwidth = 0.0;
  std::string kernel = "gaussian";
};

struct SummaryStats {
  double p10 = 0.0, p50 = 0.0, p90 = 0.0;
  double dispersion = 0.0;     // p90 - p10
  double upper = 0.0;          // p90 - p50
  double lower = 0.0;          // p50 - p10
  double bowley_kelley = 0.0;  // (upper - lower) / dispersion
};

/// Empirical quantile: linear interpolation of the order statistics at
/// position p * (N + 1), clamped to [1, N].
double quantile(std::vector<double> values, double p);
double quantile_sorted(const std::vector<double>& sorted, double p);

/// Rule-of-thumb plug-in bandwidth b = 1.144 * min(sd, IQR / 1.34) * N^(-1/5),
/// using the maximal-smoothing constant: the pseudo-observations are noisier
/// than an iid sample, so the classic 0.9 factor undersmooths. Throws on
/// constant input.
double silverman_bandwidth(const std::vector<double>& values);

/// Gaussian kernel density of a pseudo-observation grid; parallel over
/// evaluation points (bit-identical to the serial reference).
DensityEstimate kernel_density(const QuantileGrid& grid, double bandwidth,
                               const std::vector<double>& eval_points);
DensityEstimate kernel_density_serial(const QuantileGrid& grid, double bandwidth,
                                      const std::vector<double>& eval_points);

/// Diagnostic derivative grid (N+1)(x[i+1] - x[i]).
std::vector<double> derivative_grid(const QuantileGrid& grid);

struct ConditionalExpectation {
  double value = 0.0;
  bool degenerate_weights = false;  // all weights underflowed; unweighted mean returned
};

/// Best predictor of factor k given an outcome vector: the self-normalized
/// density-weighted average of the pseudo-observations of factor k. In the
/// fixed-effects model the weights reduce to products of the noise densities
/// evaluated at y_t minus the candidate factor value.
ConditionalExpectation conditional_expectation(const LoadingMatrix& loading,
                                               const std::vector<QuantileGrid>& grids,
                                               const std::vector<DensityEstimate>& densities,
                                               const std::vector<double>& y, std::size_t k);

/// Grid values reassigned so their order matches the order of the posterior
/// means (rank matching; optimal by the rearrangement inequality).
std::vector<double> constrained_predictor(const std::vector<double>& posterior_means,
                                          const QuantileGrid& grid);

/// (1/N) sum_i h(x_i).
double moment(const std::function<double(double)>& h, const QuantileGrid& grid);

/// (1/N) sum_i h(x_k draw, predicted outcome t) under the given sigma draws.
double cross_moment(const std::function<double(double, double)>& h,
                    const std::vector<QuantileGrid>& grids, const LoadingMatrix& loading,
                    std::size_t t, std::size_t k, const std::vector<Permutation>& sigmas);

/// P90-P10 dispersion and Bowley-Kelley skewness. Requires N >= 10 and
/// nonzero dispersion.
SummaryStats dispersion_skewness(const std::vector<double>& sample);

struct OlsResult {
  std::vector<double> coefficients;
  std::vector<double> std_errors;  // Newey-West HAC (Bartlett kernel)
  std::vector<double> residuals;
};

/// OLS with heteroskedasticity-and-autocorrelation consistent standard
/// errors; lags = 0 gives White standard errors.
OlsResult newey_west_ols(const std::vector<double>& y, const Mat& x, int lags);

}  // namespace lvm
