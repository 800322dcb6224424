#pragma once

#include <vector>

#include "lvm/mat.hpp"

namespace lvm {

/// A bijection matching predictions to data rows, with the total squared
/// distance of the matched pairs. pi[i] is the data index matched to
/// prediction i.
struct Assignment {
  Permutation pi;
  double cost = 0.0;
};

/// N x N matrix of squared Euclidean distances, entry (i, j) between
/// prediction row i and outcome row j.
using CostMatrix = Mat;

/// OpenMP over prediction rows; entries are computed independently so the
/// result is bit-identical to the serial reference.
CostMatrix build_cost(const Mat& predictions, const Mat& outcomes);

/// Single-threaded reference used by tests and the benchmark.
CostMatrix build_cost_serial(const Mat& predictions, const Mat& outcomes);

/// Scalar case: ranks of predictions matched to equal ranks of outcomes
/// (comonotone sorting), ties broken by original index. Globally optimal.
Assignment sort_match(const std::vector<double>& predictions,
                      const std::vector<double>& outcomes);

/// Exact minimum-cost bijection by shortest augmenting paths
/// (Jonker-Volgenant / Hungarian class, O(N^3) worst case).
Assignment solve_assignment(const CostMatrix& cost);

/// Recomputes the cost of an assignment against a cost matrix.
double assignment_cost(const CostMatrix& cost, const Permutation& pi);

}  // namespace lvm
