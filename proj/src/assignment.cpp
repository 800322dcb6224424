#include "lvm/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace lvm {

namespace {

void check_dims(const Mat& predictions, const Mat& outcomes) {
  if (predictions.rows() != outcomes.rows() || predictions.cols() != outcomes.cols())
    throw std::invalid_argument("build_cost: predictions and outcomes must have equal shape");
  if (predictions.rows() == 0)
    throw std::invalid_argument("build_cost: empty input");
}

inline double sq_dist(const double* p, const double* y, std::size_t T) {
  double s = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    const double d = y[t] - p[t];
    s += d * d;
  }
  return s;
}

}  // namespace

CostMatrix build_cost_serial(const Mat& predictions, const Mat& outcomes) {
  check_dims(predictions, outcomes);
  const std::size_t N = predictions.rows();
  const std::size_t T = predictions.cols();
  CostMatrix cost(N, N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      cost(i, j) = sq_dist(predictions.row(i), outcomes.row(j), T);
  return cost;
}

CostMatrix build_cost(const Mat& predictions, const Mat& outcomes) {
  check_dims(predictions, outcomes);
  const std::size_t N = predictions.rows();
  const std::size_t T = predictions.cols();
  CostMatrix cost(N, N);
#pragma omp parallel for schedule(static)
  for (long long i = 0; i < static_cast<long long>(N); ++i)
    for (std::size_t j = 0; j < N; ++j)
      cost(static_cast<std::size_t>(i), j) =
          sq_dist(predictions.row(static_cast<std::size_t>(i)), outcomes.row(j), T);
  return cost;
}

Assignment sort_match(const std::vector<double>& predictions,
                      const std::vector<double>& outcomes) {
  if (predictions.size() != outcomes.size())
    throw std::invalid_argument("sort_match: size mismatch");
  const std::size_t N = predictions.size();
  std::vector<int> pred_order(N), out_order(N);
  std::iota(pred_order.begin(), pred_order.end(), 0);
  std::iota(out_order.begin(), out_order.end(), 0);
  std::stable_sort(pred_order.begin(), pred_order.end(),
                   [&](int a, int b) { return predictions[a] < predictions[b]; });
  std::stable_sort(out_order.begin(), out_order.end(),
                   [&](int a, int b) { return outcomes[a] < outcomes[b]; });
  Assignment result;
  result.pi.assign(N, 0);
  for (std::size_t r = 0; r < N; ++r) {
    const int i = pred_order[r];
    const int j = out_order[r];
    result.pi[i] = j;
    const double d = outcomes[j] - predictions[i];
    result.cost += d * d;
  }
  return result;
}

Assignment solve_assignment(const CostMatrix& cost) {
  if (cost.rows() != cost.cols() || cost.rows() == 0)
    throw std::invalid_argument("solve_assignment: cost matrix must be square and nonempty");
  const int n = static_cast<int>(cost.rows());
  for (std::size_t i = 0; i < cost.rows(); ++i)
    for (std::size_t j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost(i, j)))
        throw std::invalid_argument("solve_assignment: non-finite cost entry");

  const double inf = std::numeric_limits<double>::infinity();
  // Shortest augmenting path with dual potentials; 1-based with a virtual
  // column 0 holding the row currently being inserted.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      const double* row = cost.row(i0 - 1);
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = row[j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  Assignment result;
  result.pi.assign(n, 0);
  for (int j = 1; j <= n; ++j) result.pi[p[j] - 1] = j - 1;
  result.cost = assignment_cost(cost, result.pi);
  return result;
}

double assignment_cost(const CostMatrix& cost, const Permutation& pi) {
  double total = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) total += cost(i, pi[i]);
  return total;
}

}  // namespace lvm
