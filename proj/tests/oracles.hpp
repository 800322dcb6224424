#pragma once

// Independent reference implementations used only by the tests: a Gaussian
// elimination rank, exhaustive assignment search, and a projected-gradient
// quadratic programming oracle with Dykstra projection onto the chain
// constraint sets. None of these share code with the library solvers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <random>
#include <vector>

#include "lvm/mat.hpp"
#include "lvm/model.hpp"

namespace oracles {

inline int elimination_rank(std::vector<std::vector<double>> m, double tol = 1e-9) {
  if (m.empty()) return 0;
  const std::size_t rows = m.size(), cols = m[0].size();
  double scale = 0.0;
  for (const auto& r : m)
    for (double v : r) scale = std::max(scale, std::fabs(v));
  if (scale == 0.0) return 0;
  int rank = 0;
  std::size_t row = 0;
  for (std::size_t col = 0; col < cols && row < rows; ++col) {
    std::size_t pivot = row;
    for (std::size_t r = row + 1; r < rows; ++r)
      if (std::fabs(m[r][col]) > std::fabs(m[pivot][col])) pivot = r;
    if (std::fabs(m[pivot][col]) <= tol * scale) continue;
    std::swap(m[row], m[pivot]);
    for (std::size_t r = 0; r < rows; ++r) {
      if (r == row) continue;
      const double f = m[r][col] / m[row][col];
      for (std::size_t c = col; c < cols; ++c) m[r][c] -= f * m[row][c];
    }
    ++row;
    ++rank;
  }
  return rank;
}

/// Exhaustive minimum over all permutations; pi[i] = column matched to row i.
inline std::pair<lvm::Permutation, double> brute_force_assignment(const lvm::Mat& cost) {
  const std::size_t n = cost.rows();
  lvm::Permutation p = lvm::identity_permutation(n), best = p;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double c = 0.0;
    for (std::size_t i = 0; i < n; ++i) c += cost(i, p[i]);
    if (c < best_cost) {
      best_cost = c;
      best = p;
    }
  } while (std::next_permutation(p.begin(), p.end()));
  return {best, best_cost};
}

/// One interval constraint lo <= a'x <= hi with a sparse coefficient vector.
struct Slab {
  std::vector<std::pair<int, double>> a;
  double lo = 0.0, hi = 0.0;
  double norm2 = 0.0;
};

inline void add_slab(std::vector<Slab>& slabs, std::vector<std::pair<int, double>> a,
                     double lo, double hi) {
  Slab s;
  s.a = std::move(a);
  s.lo = lo;
  s.hi = hi;
  for (const auto& [j, v] : s.a) s.norm2 += v * v;
  slabs.push_back(std::move(s));
}

/// Slab list for one quantile-grid block occupying variables
/// [offset, offset + n) of the stacked vector.
inline std::vector<Slab> chain_slabs(const lvm::ShapeConstraints& cons, int n, int offset) {
  std::vector<Slab> slabs;
  const double np1 = n + 1.0;
  for (int i = 0; i < n; ++i)
    add_slab(slabs, {{offset + i, 1.0}}, -cons.level_bound, cons.level_bound);
  for (int i = 0; i + 1 < n; ++i)
    add_slab(slabs, {{offset + i + 1, 1.0}, {offset + i, -1.0}}, cons.slope_lower / np1,
             cons.slope_upper / np1);
  if (cons.second_diff_bound) {
    const double b = *cons.second_diff_bound / (np1 * np1);
    for (int i = 0; i + 2 < n; ++i)
      add_slab(slabs, {{offset + i + 2, 1.0}, {offset + i + 1, -2.0}, {offset + i, 1.0}},
               -b, b);
  }
  if (cons.zero_mean) {
    std::vector<std::pair<int, double>> a;
    for (int i = 0; i < n; ++i) a.push_back({offset + i, 1.0});
    add_slab(slabs, std::move(a), 0.0, 0.0);
  }
  return slabs;
}

/// Dykstra's alternating projection onto the intersection of the slabs.
inline std::vector<double> dykstra_project(std::vector<double> x,
                                           const std::vector<Slab>& slabs, int sweeps) {
  std::vector<std::vector<double>> corr(slabs.size());
  for (std::size_t s = 0; s < slabs.size(); ++s) corr[s].assign(slabs[s].a.size(), 0.0);
  for (int it = 0; it < sweeps; ++it) {
    double moved = 0.0;
    for (std::size_t s = 0; s < slabs.size(); ++s) {
      const Slab& sl = slabs[s];
      for (std::size_t j = 0; j < sl.a.size(); ++j) x[sl.a[j].first] += corr[s][j];
      double dot = 0.0;
      for (const auto& [j, v] : sl.a) dot += v * x[j];
      const double target = std::clamp(dot, sl.lo, sl.hi);
      const double step = (dot - target) / sl.norm2;
      for (std::size_t j = 0; j < sl.a.size(); ++j) {
        const double d = step * sl.a[j].second;
        x[sl.a[j].first] -= d;
        corr[s][j] = d;
        moved += d * d;
      }
    }
    if (moved < 1e-30) break;
  }
  return x;
}

inline double slab_violation(const std::vector<double>& x, const std::vector<Slab>& slabs) {
  double worst = 0.0;
  for (const Slab& sl : slabs) {
    double dot = 0.0;
    for (const auto& [j, v] : sl.a) dot += v * x[j];
    worst = std::max(worst, std::max(sl.lo - dot, dot - sl.hi));
  }
  return worst;
}

/// Minimizes ||y - M x||^2 over the slab intersection by FISTA with Dykstra
/// projections. Exact for convex problems given enough iterations; used as
/// the dense QP oracle.
inline std::vector<double> qp_oracle(const lvm::Mat& m, const std::vector<double>& y,
                                     const std::vector<Slab>& slabs, std::vector<double> x0,
                                     int iters = 4000, int dykstra_sweeps = 400) {
  const std::size_t rows = m.rows(), cols = m.cols();
  double fro2 = 0.0;
  for (double v : m.data()) fro2 += v * v;
  const double step = 1.0 / (2.0 * fro2);
  std::vector<double> x = dykstra_project(std::move(x0), slabs, dykstra_sweeps);
  std::vector<double> z = x, x_prev = x, r(rows), g(cols);
  double t = 1.0;
  for (int it = 0; it < iters; ++it) {
    for (std::size_t i = 0; i < rows; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += m(i, j) * z[j];
      r[i] = dot - y[i];
    }
    for (std::size_t j = 0; j < cols; ++j) {
      double dot = 0.0;
      for (std::size_t i = 0; i < rows; ++i) dot += m(i, j) * r[i];
      g[j] = 2.0 * dot;
    }
    x_prev = x;
    for (std::size_t j = 0; j < cols; ++j) x[j] = z[j] - step * g[j];
    x = dykstra_project(std::move(x), slabs, dykstra_sweeps);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    for (std::size_t j = 0; j < cols; ++j)
      z[j] = x[j] + (t - 1.0) / t_next * (x[j] - x_prev[j]);
    t = t_next;
  }
  return x;
}

inline double quadratic_value(const lvm::Mat& m, const std::vector<double>& y,
                              const std::vector<double>& x) {
  double f = 0.0;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) dot += m(i, j) * x[j];
    f += (dot - y[i]) * (dot - y[i]);
  }
  return f;
}

}  // namespace oracles
