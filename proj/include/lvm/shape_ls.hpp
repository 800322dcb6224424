#pragma once

#include <vector>

#include "lvm/mat.hpp"
#include "lvm/model.hpp"

namespace lvm {

/// N sorted pseudo-observations of one factor: the estimated quantile
/// function at grid points i/(N+1).
struct QuantileGrid {
  int factor = 0;
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
};

/// Verifies the grid against its constraint set. Returns the largest
/// violation (0 when feasible within tol).
double feasibility_violation(const std::vector<double>& x, const ShapeConstraints& cons);

/// Opaque solver state carried between repeated projections of slowly moving
/// targets under one constraint set (the inner loop of the alternating
/// estimator). A default-constructed state means "cold"; reusing it warm
/// cuts the iterative solver's work by orders of magnitude.
struct ChainState {
  std::vector<signed char> act;  // last active set (-1 lower, 0 off, +1 upper)
  std::vector<double> z, u;      // splitting-solver fallback state
  double rho = 0.0;
};

/// Weighted least squares projection of targets onto the chain-constrained
/// set: monotone increments within the slope bounds, bounded levels,
/// optionally bounded second differences and a zero-mean restriction.
/// Throws std::invalid_argument when the constraint set is empty.
QuantileGrid bounded_isotonic_fit(const std::vector<double>& targets,
                                  const std::vector<double>& weights,
                                  const ShapeConstraints& cons,
                                  const std::vector<double>* warm_start = nullptr,
                                  ChainState* state = nullptr);

struct UpdateOptions {
  int max_sweeps = 500;
  double tol = 1e-9;  // relative objective decrease per sweep
};

/// Block coordinate descent over factors for the joint quadratic objective
///   sum_i sum_t (Y[i][t] - sum_k a_tk x_k[sigma_k(i)])^2
/// given matched (reordered) outcomes. Factors flagged frozen keep their
/// warm-start values. Each block is a chain-constrained weighted least
/// squares problem.
std::vector<QuantileGrid> update_step(const Mat& y_matched, const LoadingMatrix& loading,
                                      const std::vector<Permutation>& sigmas,
                                      const std::vector<ShapeConstraints>& constraints,
                                      std::vector<QuantileGrid> warm_start,
                                      const std::vector<bool>& frozen = {},
                                      const UpdateOptions& options = {},
                                      std::vector<ChainState>* states = nullptr);

/// Model predictions Z[i][t] = sum_k a_tk x_k[sigma_k(i)].
Mat predict_outcomes(const LoadingMatrix& loading, const std::vector<Permutation>& sigmas,
                     const std::vector<QuantileGrid>& grids);

/// Joint quadratic objective at given grids (no re-matching).
double matched_objective(const Mat& y_matched, const LoadingMatrix& loading,
                         const std::vector<Permutation>& sigmas,
                         const std::vector<QuantileGrid>& grids);

/// A feasible arithmetic-progression grid, used as projection fallback and
/// as a deterministic default start.
std::vector<double> feasible_point(std::size_t n, const ShapeConstraints& cons);

}  // namespace lvm
