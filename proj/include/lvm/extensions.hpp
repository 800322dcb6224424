#pragma once

#include <cstdint>
#include <vector>

#include "lvm/estimator.hpp"
#include "lvm/mat.hpp"
#include "lvm/model.hpp"
#include "lvm/shape_ls.hpp"

namespace lvm {

struct MixtureFit {
  std::vector<double> thresholds;               // nondecreasing in [0, 1], size G-1
  std::vector<double> probabilities;            // implied component weights, size G
  std::vector<std::vector<QuantileGrid>> grids; // grids[g][t]
  std::vector<double> component_means;          // increasing by construction
  double objective = 0.0;                       // per prediction draw
  std::vector<double> objective_trace;          // winning candidate's inner trace
};

/// Equidistant interior candidates for the first-group probability of a
/// two-component mixture.
std::vector<std::vector<double>> equidistant_mu(std::size_t groups, std::size_t points);

/// Finite mixture with G components estimated by grid search over the
/// threshold vector: each candidate runs the alternating algorithm on
/// replicated predictions (r prediction draws per observation), and the
/// minimal-objective candidate wins. Components are relabeled by increasing
/// means. Candidates are evaluated in parallel.
MixtureFit fit_mixture(const Mat& y, std::size_t groups,
                       const std::vector<std::vector<double>>& mu_candidates,
                       const ShapeConstraints& cons, const FitOptions& options,
                       int prediction_draws = 10);

struct HeteroFit {
  QuantileGrid x1;
  std::vector<double> s;      // per-slot scales, paired with x1 entries
  double lambda = 0.0;
  double objective = 0.0;
  double outcome_term = 0.0;  // objective = outcome_term + lambda * penalty_term
  double penalty_term = 0.0;
  std::vector<double> objective_trace;
  Permutation pi;
};

struct ScaleSpace {
  double lower = 0.0;
  double upper = 0.0;
};

/// Box bounds [min/2, 2 max] around the observed scale estimates.
ScaleSpace default_scale_space(const std::vector<double>& s_tilde);

/// Deconvolution with observation-specific noise scale: matches the joint
/// (outcome, sqrt(lambda) * scale estimate) rows and alternates a chain-
/// constrained update of the latent grid with a clipped closed-form update
/// of the scales.
HeteroFit fit_heteroskedastic(const std::vector<double>& y, const std::vector<double>& s_tilde,
                              const std::vector<double>& x2_draws, double lambda,
                              const ShapeConstraints& cons, const ScaleSpace& space,
                              const FitOptions& options);

struct TrendsFit {
  Mat alpha_beta;                     // N x 2 intercept/slope cloud, not order statistics
  std::vector<QuantileGrid> epsilon;  // one noise grid per period
  double objective = 0.0;
  std::vector<double> objective_trace;
  Permutation pi;
};

/// Random trends model: per-unit linear time trends plus independent
/// period-specific noise. Alternates assignment with an exact least squares
/// update of the (intercept, slope) pairs and constrained noise grids.
TrendsFit fit_random_trends(const Mat& y, const ShapeConstraints& noise_cons,
                            const FitOptions& options);

}  // namespace lvm
