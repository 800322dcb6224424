#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "lvm/estimator.hpp"
#include "lvm/model.hpp"
#include "lvm/post.hpp"

namespace lvm {

enum class DgpFamily { beta, normal, lognormal, efron_koenker_gu };

/// A latent-variable distribution. The beta and lognormal families are
/// standardized to mean zero and variance one; efron_koenker_gu is the
/// 6/7 N(0, 1/2) + 1/7 U[0, 6] mixture.
struct DgpSpec {
  DgpFamily family = DgpFamily::normal;
  double alpha = 2.0;  // beta shape parameters
  double beta = 2.0;

  void validate() const;
};

DgpSpec parse_dgp(const std::string& name);
std::string dgp_name(const DgpSpec& spec);

std::vector<double> draw_dgp(const DgpSpec& spec, std::size_t n, std::mt19937_64& rng);

double true_density(const DgpSpec& spec, double x);
double true_cdf(const DgpSpec& spec, double x);
double true_quantile(const DgpSpec& spec, double p);

/// Effective support of the true density: exact for bounded sides, the
/// 1e-7 / 1 - 1e-7 quantile otherwise.
std::pair<double, double> density_support(const DgpSpec& spec);

/// Equispaced integration grid over the support extended by 1 on each side.
std::vector<double> metric_grid(const DgpSpec& spec, std::size_t points = 512);

enum class McModel { fixed_effects, deconvolution };

struct McOptions {
  McModel model = McModel::fixed_effects;
  std::size_t n = 100;
  std::size_t periods = 2;  // fixed-effects outcomes per unit
  int reps = 100;
  double c_lower = 0.0;  // penalization constants
  double c_upper = 10000.0;
  FitOptions fit;
  std::size_t grid_points = 512;

  void validate() const;
};

struct McReport {
  DgpSpec dgp;
  McOptions options;
  double mise = 0.0;  // integrated errors of the density of the first factor
  double miae = 0.0;
  std::vector<double> per_rep_ise;
  std::vector<double> per_rep_iae;
  double quantile_mse_25 = 0.0;
  double quantile_mse_50 = 0.0;
  double quantile_mse_75 = 0.0;
  std::vector<double> per_rep_kde_integral;  // on [min - 5b, max + 5b], 2000 points
  double density_min = 0.0;                  // smallest density value across reps
  std::vector<double> grid;            // metric grid (density curves)
  std::vector<double> density_true;
  std::vector<double> density_mean;    // pointwise across replications
  std::vector<double> density_q10;
  std::vector<double> density_q90;
  std::vector<double> ranks;           // i/(N+1) (quantile curves)
  std::vector<double> quantile_true;
  std::vector<double> quantile_mean;
  std::vector<double> quantile_q10;
  std::vector<double> quantile_q90;
  int failed_reps = 0;
};

/// Monte Carlo study of the first-factor quantile and density estimates.
/// Replications run in parallel on independent seed streams and are
/// aggregated in replication order. Throws std::runtime_error past a 5%
/// replication failure rate.
McReport run_mc(const DgpSpec& dgp, const McOptions& options);

struct RateStudy {
  std::vector<std::size_t> sample_sizes;
  std::vector<double> probabilities;
  std::vector<std::vector<double>> mse;  // mse[q][n_index]
  std::vector<double> implied_rate;      // log-log OLS slope per probability
};

/// Quantile-level MSE of the deconvolution estimator across sample sizes,
/// with the implied convergence rate from a log-log regression.
RateStudy rate_study(const DgpSpec& dgp, const std::vector<std::size_t>& sample_sizes,
                     int reps, const std::vector<double>& probabilities,
                     const McOptions& base);

struct SweepPoint {
  double c_upper = 0.0;
  double mse_q25 = 0.0;
  double mse_q50 = 0.0;
  double mse_q75 = 0.0;
};

/// Median-quantile MSE as a function of the penalization constant, with
/// c_lower = 1 / c_upper.
std::vector<SweepPoint> penalization_sweep(const DgpSpec& dgp, std::size_t n,
                                           const std::vector<double>& c_upper_values,
                                           int reps, const McOptions& base);

/// Log-log OLS slope of mse on sample size.
double implied_rate(const std::vector<std::size_t>& sample_sizes,
                    const std::vector<double>& mse);

}  // namespace lvm
