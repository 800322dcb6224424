#pragma once

#include <cstdint>
#include <vector>

#include "lvm/assignment.hpp"
#include "lvm/mat.hpp"
#include "lvm/model.hpp"
#include "lvm/shape_ls.hpp"

namespace lvm {

struct FitOptions {
  int max_iterations = 200;
  double tolerance = 1e-8;   // absolute objective decrease
  int n_starts = 1;
  int sigma_draws = 1;       // number of independent sigma draws averaged over
  std::uint64_t seed = 0;
  double start_scale = 1.0;  // dispersion of the random starting mixtures
  UpdateOptions update;

  void validate() const;
};

struct EstimationResult {
  std::vector<QuantileGrid> grids;
  double objective = 0.0;                // squared empirical Wasserstein distance
  std::vector<double> objective_trace;   // matched objective per outer iteration
  Assignment assignment;
  int iterations = 0;
  int start_id = 0;
  std::uint64_t sigma_seed = 0;
};

/// A factor whose pseudo-observations are data (e.g. a known-noise sample in
/// deconvolution): the grid is frozen at the sorted values and matched with
/// the identity permutation.
struct FixedFactor {
  int factor = 0;
  std::vector<double> values;  // will be sorted
};

/// Random permutations for the free factors, identity for frozen ones.
std::vector<Permutation> draw_sigmas(std::size_t factors, std::size_t n,
                                     std::uint64_t seed, std::uint64_t draw_index,
                                     const std::vector<bool>& frozen = {});

/// Min-cost matching objective between outcomes and the model predictions
/// implied by the grids (rank sorting when T = 1).
double wasserstein_objective(const Mat& y, const std::vector<QuantileGrid>& grids,
                             const LoadingMatrix& loading,
                             const std::vector<Permutation>& sigmas);

Assignment match_step(const Mat& y, const Mat& predicted);

/// Random feasible starting grids: sorted draws from a widely dispersed
/// five-component Gaussian mixture, projected onto the constraint set.
std::vector<QuantileGrid> random_start(const ModelSpec& spec, std::size_t n,
                                       std::uint64_t seed, std::uint64_t stream,
                                       double start_scale,
                                       const std::vector<FixedFactor>& fixed = {});

/// Alternating matching / update descent from a single start.
EstimationResult fit(const Mat& y, const ModelSpec& spec, const FitOptions& options,
                     const std::vector<Permutation>& sigmas,
                     const std::vector<FixedFactor>& fixed = {},
                     const std::vector<QuantileGrid>* start = nullptr);

struct AveragedFit {
  EstimationResult averaged;                       // grids averaged across draws
  std::vector<EstimationResult> draws;             // best-of-starts per sigma draw
  std::vector<std::vector<double>> start_objectives;  // all start objectives per draw
};

/// Multi-start fits for each of M independent sigma draws; keeps the
/// minimum-objective run per draw and averages the grids elementwise.
AveragedFit fit_averaged(const Mat& y, const ModelSpec& spec, const FitOptions& options,
                         const std::vector<FixedFactor>& fixed = {});

/// Stochastic deconvolution baseline: redraw a random permutation each
/// iteration, rank-match, reassign, and average the retained sorted iterates.
QuantileGrid mallows_fit(const std::vector<double>& y_sorted,
                         const std::vector<double>& x2_sorted, int n_iter, int burn_in,
                         std::uint64_t seed);

}  // namespace lvm
