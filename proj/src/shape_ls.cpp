#include "lvm/shape_ls.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <cstdio>
#include <optional>
#include <stdexcept>

namespace lvm {

namespace {

struct ChainBounds {
  // Raw (unscaled) bounds on levels, increments and second differences.
  double level;
  double d_lo;
  double d_hi;
  double dd;       // negative when absent
  bool zero_mean;
};

ChainBounds raw_bounds(std::size_t n, const ShapeConstraints& cons) {
  cons.validate();
  const double np1 = static_cast<double>(n + 1);
  ChainBounds b;
  b.level = cons.level_bound;
  b.d_lo = cons.slope_lower / np1;
  b.d_hi = cons.slope_upper / np1;
  b.dd = cons.second_diff_bound ? *cons.second_diff_bound / (np1 * np1) : -1.0;
  b.zero_mean = cons.zero_mean;
  return b;
}

void check_feasible(std::size_t n, const ChainBounds& b) {
  if (n >= 2 && b.d_lo * static_cast<double>(n - 1) > 2.0 * b.level * (1.0 + 1e-12))
    throw std::invalid_argument(
        "infeasible constraints: minimum slope span exceeds the level bounds");
}

/// Weighted pool-adjacent-violators: isotonic LS fit.
std::vector<double> pava(const std::vector<double>& t, const std::vector<double>& w) {
  const std::size_t n = t.size();
  std::vector<double> level(n), weight(n);
  std::vector<std::size_t> count(n);
  std::size_t blocks = 0;
  for (std::size_t i = 0; i < n; ++i) {
    level[blocks] = t[i];
    weight[blocks] = w[i];
    count[blocks] = 1;
    ++blocks;
    while (blocks >= 2 && level[blocks - 2] > level[blocks - 1]) {
      const double wsum = weight[blocks - 2] + weight[blocks - 1];
      level[blocks - 2] =
          (weight[blocks - 2] * level[blocks - 2] + weight[blocks - 1] * level[blocks - 1]) / wsum;
      weight[blocks - 2] = wsum;
      count[blocks - 2] += count[blocks - 1];
      --blocks;
    }
  }
  std::vector<double> x(n);
  std::size_t pos = 0;
  for (std::size_t bl = 0; bl < blocks; ++bl)
    for (std::size_t c = 0; c < count[bl]; ++c) x[pos++] = level[bl];
  return x;
}

// ---- banded SPD Cholesky, bandwidth 2 ------------------------------------

struct Band2 {
  std::size_t n = 0;
  // diag[d][i] = M(i + d, i), lower band, d = 0,1,2
  std::vector<double> b0, b1, b2;

  explicit Band2(std::size_t n_) : n(n_), b0(n_, 0.0), b1(n_, 0.0), b2(n_, 0.0) {}
};

Band2 cholesky(const Band2& m) {
  Band2 L(m.n);
  for (std::size_t j = 0; j < m.n; ++j) {
    double s = m.b0[j];
    if (j >= 1) s -= L.b1[j - 1] * L.b1[j - 1];
    if (j >= 2) s -= L.b2[j - 2] * L.b2[j - 2];
    if (s <= 0.0) throw std::runtime_error("chain QP: banded Cholesky breakdown");
    L.b0[j] = std::sqrt(s);
    if (j + 1 < m.n) {
      double v = m.b1[j];
      if (j >= 1) v -= L.b2[j - 1] * L.b1[j - 1];
      L.b1[j] = v / L.b0[j];
    }
    if (j + 2 < m.n) L.b2[j] = m.b2[j] / L.b0[j];
  }
  return L;
}

void solve_band(const Band2& L, std::vector<double>& x) {
  const std::size_t n = L.n;
  for (std::size_t i = 0; i < n; ++i) {
    double v = x[i];
    if (i >= 1) v -= L.b1[i - 1] * x[i - 1];
    if (i >= 2) v -= L.b2[i - 2] * x[i - 2];
    x[i] = v / L.b0[i];
  }
  for (std::size_t ii = n; ii-- > 0;) {
    double v = x[ii];
    if (ii + 1 < n) v -= L.b1[ii] * x[ii + 1];
    if (ii + 2 < n) v -= L.b2[ii] * x[ii + 2];
    x[ii] = v / L.b0[ii];
  }
}

// ---- ADMM on the chain-constrained weighted least squares ----------------

struct ChainProblem {
  std::size_t n;
  const std::vector<double>* t;
  const std::vector<double>* w;
  ChainBounds b;
  std::size_t m_diff;  // n - 1
  std::size_t m_curv;  // n - 2 when the curvature bound is present, else 0
  std::size_t m;       // n + m_diff + m_curv
};

void apply_a(const ChainProblem& p, const std::vector<double>& x, std::vector<double>& ax) {
  for (std::size_t i = 0; i < p.n; ++i) ax[i] = x[i];
  for (std::size_t i = 0; i + 1 < p.n; ++i) ax[p.n + i] = x[i + 1] - x[i];
  for (std::size_t i = 0; i < p.m_curv; ++i)
    ax[p.n + p.m_diff + i] = x[i + 2] - 2.0 * x[i + 1] + x[i];
}

void apply_at(const ChainProblem& p, const std::vector<double>& y, std::vector<double>& aty) {
  for (std::size_t i = 0; i < p.n; ++i) aty[i] = y[i];
  for (std::size_t i = 0; i + 1 < p.n; ++i) {
    aty[i] -= y[p.n + i];
    aty[i + 1] += y[p.n + i];
  }
  for (std::size_t i = 0; i < p.m_curv; ++i) {
    const double v = y[p.n + p.m_diff + i];
    aty[i] += v;
    aty[i + 1] -= 2.0 * v;
    aty[i + 2] += v;
  }
}

Band2 normal_matrix(const ChainProblem& p, double rho) {
  Band2 m(p.n);
  // 2W + rho * (I + D'D + D2'D2)
  for (std::size_t i = 0; i < p.n; ++i) m.b0[i] = 2.0 * (*p.w)[i] + rho;
  for (std::size_t i = 0; i + 1 < p.n; ++i) {
    m.b0[i] += rho;
    m.b0[i + 1] += rho;
    m.b1[i] -= rho;
  }
  for (std::size_t i = 0; i < p.m_curv; ++i) {
    m.b0[i] += rho;
    m.b0[i + 1] += 4.0 * rho;
    m.b0[i + 2] += rho;
    m.b1[i] -= 2.0 * rho;
    m.b1[i + 1] -= 2.0 * rho;
    m.b2[i] += rho;
  }
  return m;
}

void clip_rows(const ChainProblem& p, std::vector<double>& z) {
  for (std::size_t i = 0; i < p.n; ++i) z[i] = std::clamp(z[i], -p.b.level, p.b.level);
  for (std::size_t i = 0; i < p.m_diff; ++i)
    z[p.n + i] = std::clamp(z[p.n + i], p.b.d_lo, p.b.d_hi);
  for (std::size_t i = 0; i < p.m_curv; ++i)
    z[p.n + p.m_diff + i] = std::clamp(z[p.n + p.m_diff + i], -p.b.dd, p.b.dd);
}

std::vector<double> solve_admm(const ChainProblem& p, std::vector<double> x,
                               ChainState* state) {
  const double alpha = 1.6;
  double mean_w = std::accumulate(p.w->begin(), p.w->end(), 0.0) / static_cast<double>(p.n);
  double rho = 2.0 * std::max(mean_w, 1e-8);
  const bool resume = state && state->z.size() == p.m && state->u.size() == p.m &&
                      state->rho > 0.0;
  if (resume) rho = state->rho;
  Band2 chol = cholesky(normal_matrix(p, rho));

  std::vector<double> ones_sol;  // M^{-1} 1, for the zero-mean correction
  auto refresh_ones = [&]() {
    if (!p.b.zero_mean) return;
    ones_sol.assign(p.n, 1.0);
    solve_band(chol, ones_sol);
  };
  refresh_ones();

  std::vector<double> z(p.m), u(p.m, 0.0), ax(p.m), ax_rel(p.m), z_old(p.m), rhs(p.n), aty(p.n);
  if (resume) {
    z = state->z;
    u = state->u;
  } else {
    apply_a(p, x, z);
    clip_rows(p, z);
  }

  double scale = 1.0;
  for (double v : *p.t) scale = std::max(scale, std::abs(v));
  const double eps = 1e-9 * scale;
  const int max_iter = 200000;

  for (int iter = 1; iter <= max_iter; ++iter) {
    // x-update
    for (std::size_t i = 0; i < p.m; ++i) ax_rel[i] = z[i] - u[i];
    apply_at(p, ax_rel, aty);
    for (std::size_t i = 0; i < p.n; ++i) rhs[i] = 2.0 * (*p.w)[i] * (*p.t)[i] + rho * aty[i];
    x = rhs;
    solve_band(chol, x);
    if (p.b.zero_mean) {
      const double sx = std::accumulate(x.begin(), x.end(), 0.0);
      const double so = std::accumulate(ones_sol.begin(), ones_sol.end(), 0.0);
      const double shift = sx / so;
      for (std::size_t i = 0; i < p.n; ++i) x[i] -= shift * ones_sol[i];
    }
    // z-update with over-relaxation
    apply_a(p, x, ax);
    z_old = z;
    for (std::size_t i = 0; i < p.m; ++i) {
      ax_rel[i] = alpha * ax[i] + (1.0 - alpha) * z_old[i];
      z[i] = ax_rel[i] + u[i];
    }
    clip_rows(p, z);
    for (std::size_t i = 0; i < p.m; ++i) u[i] += ax_rel[i] - z[i];

    if (iter % 10 == 0 || iter == max_iter) {
      double pr = 0.0, dr = 0.0;
      for (std::size_t i = 0; i < p.m; ++i) pr = std::max(pr, std::abs(ax[i] - z[i]));
      for (std::size_t i = 0; i < p.m; ++i) ax_rel[i] = z[i] - z_old[i];
      apply_at(p, ax_rel, aty);
      for (std::size_t i = 0; i < p.n; ++i) dr = std::max(dr, rho * std::abs(aty[i]));
      if (pr < eps && dr < eps) break;
      if (iter % 50 == 0) {
        if (pr > 10.0 * dr && rho < 1e8) {
          rho *= 2.0;
          for (auto& v : u) v /= 2.0;
          chol = cholesky(normal_matrix(p, rho));
          refresh_ones();
        } else if (dr > 10.0 * pr && rho > 1e-8) {
          rho /= 2.0;
          for (auto& v : u) v *= 2.0;
          chol = cholesky(normal_matrix(p, rho));
          refresh_ones();
        }
      }
    }
  }
  // Report the clipped (feasible) point mapped back to x-space: use z's level
  // rows only when x itself is outside bounds by more than round-off.
  for (std::size_t i = 0; i < p.n; ++i) x[i] = std::clamp(x[i], -p.b.level, p.b.level);
  if (state) {
    state->z = z;
    state->u = u;
    state->rho = rho;
  }
  return x;
}

// ---- exact primal-dual active-set solver ----------------------------------
//
// Iterates on a guess of which bounds hold with equality: solve the
// equality-constrained least squares problem through a banded factorization
// of the reduced KKT system, activate violated bounds, release rows whose
// multiplier has the wrong sign, repeat until the guess is consistent.
// Exact up to round-off and O(n) per pass. Returns nullopt when the active
// set fails to settle or the reduced system degenerates; the caller then
// falls back to the splitting solver.

struct BandGen {
  std::size_t n = 0, kb = 0;
  std::vector<double> a;  // a[j * (kb + 1) + d] = M(j + d, j), 0 <= d <= kb

  BandGen(std::size_t n_, std::size_t kb_) : n(n_), kb(kb_), a(n_ * (kb_ + 1), 0.0) {}
  double& at(std::size_t i, std::size_t j) { return a[j * (kb + 1) + (i - j)]; }
  double get(std::size_t i, std::size_t j) const { return a[j * (kb + 1) + (i - j)]; }
};

// Rank-revealing banded Cholesky: rows whose pivot collapses are linearly
// dependent on earlier ones (the cheap redundancy guards cannot rule out
// every chain of dependencies); they are reported in `dropped` and replaced
// by decoupled identity rows so the factorization of the remaining
// independent rows goes through unchanged.
void cholesky_in_place(BandGen& m, double pivot_floor, std::vector<std::size_t>& dropped) {
  dropped.clear();
  for (std::size_t j = 0; j < m.n; ++j) {
    const std::size_t k0 = (j > m.kb) ? j - m.kb : 0;
    double s = m.at(j, j);
    for (std::size_t k = k0; k < j; ++k) s -= m.get(j, k) * m.get(j, k);
    const std::size_t imax = std::min(j + m.kb, m.n - 1);
    if (!(s > pivot_floor)) {
      dropped.push_back(j);
      m.at(j, j) = 1.0;
      for (std::size_t i = j + 1; i <= imax; ++i) m.at(i, j) = 0.0;
      continue;
    }
    const double d = std::sqrt(s);
    m.at(j, j) = d;
    for (std::size_t i = j + 1; i <= imax; ++i) {
      const std::size_t ik0 = (i > m.kb) ? i - m.kb : 0;
      double v = m.get(i, j);
      for (std::size_t k = std::max(k0, ik0); k < j; ++k) v -= m.get(i, k) * m.get(j, k);
      m.at(i, j) = v / d;
    }
  }
}

void solve_band_gen(const BandGen& L, std::vector<double>& x) {
  const std::size_t n = L.n, kb = L.kb;
  for (std::size_t i = 0; i < n; ++i) {
    double v = x[i];
    const std::size_t k0 = (i > kb) ? i - kb : 0;
    for (std::size_t k = k0; k < i; ++k) v -= L.get(i, k) * x[k];
    x[i] = v / L.get(i, i);
  }
  for (std::size_t j = n; j-- > 0;) {
    double v = x[j];
    const std::size_t imax = std::min(j + kb, n - 1);
    for (std::size_t i = j + 1; i <= imax; ++i) v -= L.get(i, j) * x[i];
    x[j] = v / L.get(j, j);
  }
}

struct PdasRow {
  std::size_t global;  // index into the act vector (ADMM row layout)
  std::size_t start;   // first x index the row touches
  int len;             // 1 (level), 2 (difference), 3 (second difference)
  double c[3];
  double bound;        // the bound held with equality
};

// Dual active-set solver (Goldfarb-Idnani scheme) on the chain QP. The
// iterate is always the optimum of the equality-constrained problem on the
// current working set with sign-feasible multipliers; violated bounds are
// enforced one at a time, releasing blocking rows through a dual ratio test
// when the entering row is blocked or linearly dependent. Each enforcement
// strictly increases the dual objective, so the method terminates; returns
// nullopt on the capped degenerate corner cases, where the caller falls
// back to the splitting solver.
std::optional<std::vector<double>> solve_pdas(const ChainProblem& p, ChainState* state) {
  const std::size_t n = p.n;
  const auto& t = *p.t;
  const auto& w = *p.w;
  std::vector<double> winv(n);
  for (std::size_t i = 0; i < n; ++i) winv[i] = 0.5 / w[i];
  double wsum_winv = 0.0;
  for (double v : winv) wsum_winv += v;

  double scale = 1.0;
  for (double v : t) scale = std::max(scale, std::abs(v));
  double wmax = 0.0;
  for (double v : w) wmax = std::max(wmax, v);
  const double tol_p = 1e-11 * scale;         // bound violation that triggers enforcement
  const double tol_d = 1e-10 * wmax * scale;  // multiplier sign slack
  const double accept = 1e-9 * scale;         // residual infeasibility accepted at exit

  auto bounds_of = [&](std::size_t r, double& lo, double& hi) {
    if (r < n) {
      lo = -p.b.level;
      hi = p.b.level;
    } else if (r < n + p.m_diff) {
      lo = p.b.d_lo;
      hi = p.b.d_hi;
    } else {
      lo = -p.b.dd;
      hi = p.b.dd;
    }
  };
  auto value_of = [&](std::size_t r, const std::vector<double>& xv) {
    if (r < n) return xv[r];
    if (r < n + p.m_diff) {
      const std::size_t i = r - n;
      return xv[i + 1] - xv[i];
    }
    const std::size_t i = r - n - p.m_diff;
    return xv[i + 2] - 2.0 * xv[i + 1] + xv[i];
  };
  auto row_of = [&](std::size_t r) {
    PdasRow a;
    a.global = r;
    double lo, hi;
    bounds_of(r, lo, hi);
    a.bound = 0.0;  // set by caller where needed
    if (r < n) {
      a.start = r;
      a.len = 1;
      a.c[0] = 1.0;
      a.c[1] = a.c[2] = 0.0;
    } else if (r < n + p.m_diff) {
      a.start = r - n;
      a.len = 2;
      a.c[0] = -1.0;
      a.c[1] = 1.0;
      a.c[2] = 0.0;
    } else {
      a.start = r - n - p.m_diff;
      a.len = 3;
      a.c[0] = 1.0;
      a.c[1] = -2.0;
      a.c[2] = 1.0;
    }
    return a;
  };

  std::vector<signed char> act(p.m, 0);
  if (state && state->act.size() == p.m) act = state->act;
  // Bounds that coincide are equalities: kept active with a free-sign
  // multiplier.
  std::vector<char> eq(p.m, 0);
  for (std::size_t r = 0; r < p.m; ++r) {
    double lo, hi;
    bounds_of(r, lo, hi);
    if (hi - lo <= tol_p) {
      eq[r] = 1;
      act[r] = 1;
    }
  }

  // Working-set representation: rows sorted by first touched index, the
  // scaled Gram factorization, and the bordered (Schur) data for the dense
  // zero-mean equality.
  std::vector<PdasRow> rows;
  std::vector<int> local(p.m);
  BandGen g(0, 0);
  std::size_t ma = 0;
  std::vector<double> sdiag, avec, qv, rhs, atv(n), x(n), lam_g(p.m, 0.0);
  std::vector<std::size_t> dropped;
  double denom = wsum_winv;
  double nu = 0.0;

  auto solve_G = [&](std::vector<double>& v) {
    for (std::size_t r = 0; r < ma; ++r) v[r] *= sdiag[r];
    solve_band_gen(g, v);
    for (std::size_t r = 0; r < ma; ++r) v[r] *= sdiag[r];
  };

  // Assemble and factorize the working set; rows made redundant by pinned
  // neighbors (a difference between two pinned levels, a second difference
  // between two pinned differences) or revealed as dependent by a collapsing
  // pivot are deactivated and the set reassembled.
  auto refactor = [&]() -> bool {
    for (int round = 0; round < 20; ++round) {
      rows.clear();
      std::fill(local.begin(), local.end(), -1);
      auto push = [&](std::size_t r) {
        double lo, hi;
        bounds_of(r, lo, hi);
        PdasRow row = row_of(r);
        row.bound = act[r] > 0 ? hi : lo;
        local[r] = static_cast<int>(rows.size());
        rows.push_back(row);
      };
      auto diff_pinned = [&](std::size_t j) {
        return act[n + j] != 0 || (act[j] != 0 && act[j + 1] != 0);
      };
      for (std::size_t i = 0; i < n; ++i) {
        if (act[i] != 0) push(i);
        if (i + 1 < n) {
          const std::size_t r = n + i;
          if (act[r] != 0) {
            if (act[i] != 0 && act[i + 1] != 0) {
              act[r] = 0;
              lam_g[r] = 0.0;
            } else {
              push(r);
            }
          }
        }
        if (p.m_curv > 0 && i + 2 < n) {
          const std::size_t r = n + p.m_diff + i;
          if (act[r] != 0) {
            if (diff_pinned(i) && diff_pinned(i + 1)) {
              act[r] = 0;
              lam_g[r] = 0.0;
            } else {
              push(r);
            }
          }
        }
      }
      ma = rows.size();
      if (ma == 0) {
        denom = wsum_winv;
        return true;
      }
      // Spans of two rows overlap only when their start indices are within
      // 2, so the Gram matrix G = A (2W)^{-1} A' is banded in this order.
      std::size_t kb = 0;
      for (std::size_t r = 0; r < ma; ++r)
        for (std::size_t q = r; q-- > 0;) {
          if (rows[q].start + 2 < rows[r].start) break;
          kb = std::max(kb, r - q);
        }
      g = BandGen(ma, kb);
      avec.assign(ma, 0.0);
      for (std::size_t r = 0; r < ma; ++r) {
        for (int a = 0; a < rows[r].len; ++a)
          avec[r] += rows[r].c[a] * winv[rows[r].start + a];
        for (std::size_t q = r + 1; q-- > 0;) {
          if (rows[q].start + 2 < rows[r].start) break;
          double s = 0.0;
          for (int a = 0; a < rows[r].len; ++a)
            for (int b = 0; b < rows[q].len; ++b)
              if (rows[r].start + a == rows[q].start + b)
                s += rows[r].c[a] * rows[q].c[b] * winv[rows[r].start + a];
          g.at(r, q) = s;
        }
      }
      // Weights span many orders of magnitude (unmatched slots are pinned
      // with a tiny weight), so scale to unit diagonal: the dependent-row
      // test becomes relative to each row's own magnitude and the
      // factorization stays well conditioned.
      sdiag.assign(ma, 0.0);
      for (std::size_t r = 0; r < ma; ++r) sdiag[r] = 1.0 / std::sqrt(g.get(r, r));
      for (std::size_t r = 0; r < ma; ++r)
        for (std::size_t q = r + 1; q-- > 0;) {
          if (rows[q].start + 2 < rows[r].start) break;
          g.at(r, q) *= sdiag[r] * sdiag[q];
        }
      cholesky_in_place(g, 1e-14, dropped);
      if (!dropped.empty()) {
        for (std::size_t j : dropped) {
          act[rows[j].global] = 0;
          lam_g[rows[j].global] = 0.0;
        }
        continue;
      }
      if (p.b.zero_mean) {
        qv = avec;
        solve_G(qv);
        double aq = 0.0;
        for (std::size_t r = 0; r < ma; ++r) aq += avec[r] * qv[r];
        denom = wsum_winv - aq;
        if (!(denom > 1e-12 * wsum_winv)) return false;  // mean pinned by the set
      }
      return true;
    }
    return false;
  };

  // Exact solve of the equality-constrained problem on the working set;
  // refreshes x, the multipliers and the zero-mean multiplier nu.
  auto solve_eq = [&]() {
    rhs.assign(ma, 0.0);
    for (std::size_t r = 0; r < ma; ++r) {
      for (int a = 0; a < rows[r].len; ++a) rhs[r] += rows[r].c[a] * t[rows[r].start + a];
      rhs[r] -= rows[r].bound;
    }
    solve_G(rhs);  // lambda without the zero-mean correction
    std::fill(atv.begin(), atv.end(), 0.0);
    for (std::size_t r = 0; r < ma; ++r)
      for (int a = 0; a < rows[r].len; ++a) atv[rows[r].start + a] += rows[r].c[a] * rhs[r];
    for (std::size_t i = 0; i < n; ++i) x[i] = t[i] - winv[i] * atv[i];
    nu = 0.0;
    if (p.b.zero_mean) {
      std::fill(atv.begin(), atv.end(), 0.0);
      for (std::size_t r = 0; r < ma; ++r)
        for (int a = 0; a < rows[r].len; ++a) atv[rows[r].start + a] += rows[r].c[a] * qv[r];
      double gx = 0.0;
      for (double v : x) gx += v;
      nu = gx / denom;
      for (std::size_t i = 0; i < n; ++i) x[i] -= nu * winv[i] * (1.0 - atv[i]);
      for (std::size_t r = 0; r < ma; ++r) rhs[r] -= nu * qv[r];
    }
    std::fill(lam_g.begin(), lam_g.end(), 0.0);
    for (std::size_t r = 0; r < ma; ++r) lam_g[rows[r].global] = rhs[r];
  };

  if (!refactor()) return std::nullopt;

  // Establish dual feasibility: release every active row whose multiplier
  // has the wrong sign. Released rows re-enter, if at all, only through the
  // ratio-tested enforcement below.
  for (std::size_t pass = 0;; ++pass) {
    if (pass > p.m) return std::nullopt;
    solve_eq();
    bool released = false;
    for (std::size_t q = 0; q < ma; ++q) {
      const std::size_t rq = rows[q].global;
      if (eq[rq]) continue;
      if (static_cast<double>(act[rq]) * lam_g[rq] < -tol_d) {
        act[rq] = 0;
        lam_g[rq] = 0.0;
        released = true;
      }
    }
    if (!released) break;
    if (!refactor()) return std::nullopt;
  }

  // Enforce violated bounds one at a time. An episode pushes the entering
  // row to its bound along the constrained direction s; active rows whose
  // multiplier would cross zero block the step and are released first.
  std::vector<double> v_ov, alpha, svec(n);
  const std::size_t max_episodes = 4 * p.m + 16;
  for (std::size_t episode = 0;; ++episode) {
    std::size_t enter = p.m;
    int side = 0;
    double worst = tol_p;
    for (std::size_t r = 0; r < p.m; ++r) {
      if (act[r] != 0) continue;
      double lo, hi;
      bounds_of(r, lo, hi);
      const double v = value_of(r, x);
      if (v - hi > worst) {
        worst = v - hi;
        enter = r;
        side = 1;
      }
      if (lo - v > worst) {
        worst = lo - v;
        enter = r;
        side = -1;
      }
    }
    if (enter == p.m) break;
    if (episode >= max_episodes) return std::nullopt;

    const PdasRow arow = row_of(enter);
    double lo_a, hi_a;
    bounds_of(enter, lo_a, hi_a);
    const double b_a = side > 0 ? hi_a : lo_a;
    double ad = 0.0;
    for (int a = 0; a < arow.len; ++a) ad += arow.c[a] * arow.c[a] * winv[arow.start + a];
    double tau = 0.0;
    bool done = false;
    for (std::size_t step = 0; step <= p.m + 1 && !done; ++step) {
      // overlap vector v = A (2W)^{-1} a' and its bordered solve
      v_ov.assign(ma, 0.0);
      double g1 = 0.0;
      for (int a = 0; a < arow.len; ++a) g1 += arow.c[a] * winv[arow.start + a];
      for (std::size_t q = 0; q < ma; ++q) {
        if (rows[q].start > arow.start + 2 || rows[q].start + 2 < arow.start) continue;
        double s = 0.0;
        for (int a = 0; a < arow.len; ++a)
          for (int b = 0; b < rows[q].len; ++b)
            if (arow.start + a == rows[q].start + b)
              s += arow.c[a] * rows[q].c[b] * winv[arow.start + a];
        v_ov[q] = s;
      }
      alpha = v_ov;
      if (ma > 0) solve_G(alpha);
      double alpha_nu = 0.0;
      if (p.b.zero_mean) {
        double qvv = 0.0;
        for (std::size_t q = 0; q < ma; ++q) qvv += qv[q] * v_ov[q];
        alpha_nu = (g1 - qvv) / denom;
        for (std::size_t q = 0; q < ma; ++q) alpha[q] -= alpha_nu * qv[q];
      }
      // step direction in x-space keeping the working set at its bounds
      std::fill(atv.begin(), atv.end(), 0.0);
      for (std::size_t q = 0; q < ma; ++q)
        for (int a = 0; a < rows[q].len; ++a)
          atv[rows[q].start + a] += rows[q].c[a] * alpha[q];
      for (std::size_t i = 0; i < n; ++i) svec[i] = -winv[i] * (atv[i] + alpha_nu);
      for (int a = 0; a < arow.len; ++a)
        svec[arow.start + a] += winv[arow.start + a] * arow.c[a];
      double r2 = ad - alpha_nu * g1;
      for (std::size_t q = 0; q < ma; ++q) r2 -= v_ov[q] * alpha[q];

      const double c_now = value_of(enter, x);
      const double viol = static_cast<double>(side) * (c_now - b_a);
      if (viol <= tol_p) break;  // releases resolved it without activation
      const double u_full = (r2 > 1e-8 * ad) ? viol / r2 : -1.0;
      double u_blk = -1.0;
      std::size_t blk = p.m;
      for (std::size_t q = 0; q < ma; ++q) {
        const std::size_t rq = rows[q].global;
        if (eq[rq]) continue;
        const double beta = static_cast<double>(side) * static_cast<double>(act[rq]) * alpha[q];
        if (beta <= 1e-10) continue;
        const double uq = std::max(0.0, static_cast<double>(act[rq]) * lam_g[rq] / beta);
        if (u_blk < 0.0 || uq < u_blk) {
          u_blk = uq;
          blk = rq;
        }
      }
      if (u_full >= 0.0 && (u_blk < 0.0 || u_full <= u_blk)) {
        // full step: enforce the entering bound
        for (std::size_t i = 0; i < n; ++i) x[i] -= side * u_full * svec[i];
        for (std::size_t q = 0; q < ma; ++q) lam_g[rows[q].global] -= side * u_full * alpha[q];
        nu -= side * u_full * alpha_nu;
        act[enter] = static_cast<signed char>(side);
        lam_g[enter] = side * (tau + u_full);
        if (!refactor()) return std::nullopt;
        solve_eq();  // resynchronize against accumulated round-off
        done = true;
      } else {
        if (blk == p.m) return std::nullopt;  // unbounded dual ray
        for (std::size_t i = 0; i < n; ++i) x[i] -= side * u_blk * svec[i];
        for (std::size_t q = 0; q < ma; ++q) lam_g[rows[q].global] -= side * u_blk * alpha[q];
        nu -= side * u_blk * alpha_nu;
        tau += u_blk;
        act[blk] = 0;
        lam_g[blk] = 0.0;
        if (!refactor()) return std::nullopt;
      }
      if (step == p.m + 1) return std::nullopt;  // episode failed to close
    }
  }

  double viol = 0.0;
  for (std::size_t r = 0; r < p.m; ++r) {
    double lo, hi;
    bounds_of(r, lo, hi);
    const double v = value_of(r, x);
    viol = std::max(viol, std::max(lo - v, v - hi));
  }
  if (viol > accept) return std::nullopt;
  for (std::size_t i = 0; i < n; ++i) x[i] = std::clamp(x[i], -p.b.level, p.b.level);
  if (state) state->act = act;
  return x;
}

std::vector<double> solve_chain_qp(const std::vector<double>& targets,
                                   const std::vector<double>& weights,
                                   const ShapeConstraints& cons,
                                   const std::vector<double>* warm,
                                   ChainState* state = nullptr) {
  const std::size_t n = targets.size();
  if (n == 0) throw std::invalid_argument("chain QP: empty targets");
  if (weights.size() != n) throw std::invalid_argument("chain QP: weight size mismatch");
  for (double w : weights)
    if (!(w > 0.0)) throw std::invalid_argument("chain QP: weights must be positive");
  const ChainBounds b = raw_bounds(n, cons);
  check_feasible(n, b);

  if (n == 1) {
    double x = b.zero_mean ? 0.0 : std::clamp(targets[0], -b.level, b.level);
    return {x};
  }

  const bool equal_weights =
      std::all_of(weights.begin(), weights.end(), [&](double w) { return w == weights[0]; });

  // Fast path: with no lower slope bound the isotonic fit solves the relaxed
  // problem; accept it whenever it happens to satisfy the remaining bounds.
  if (b.d_lo == 0.0 && (equal_weights || !b.zero_mean)) {
    std::vector<double> t = targets;
    if (b.zero_mean) {
      const double mean = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(n);
      for (auto& v : t) v -= mean;
    }
    std::vector<double> x = pava(t, weights);
    double viol = 0.0;
    for (double v : x) viol = std::max(viol, std::abs(v) - b.level);
    for (std::size_t i = 0; i + 1 < n; ++i)
      viol = std::max(viol, (x[i + 1] - x[i]) - b.d_hi);
    if (b.dd > 0.0)
      for (std::size_t i = 0; i + 2 < n; ++i)
        viol = std::max(viol, std::abs(x[i + 2] - 2.0 * x[i + 1] + x[i]) - b.dd);
    if (viol <= 1e-12) return x;
  }

  ChainProblem p;
  p.n = n;
  p.t = &targets;
  p.w = &weights;
  p.b = b;
  p.m_diff = n - 1;
  p.m_curv = (b.dd > 0.0 && n >= 3) ? n - 2 : 0;
  p.m = p.n + p.m_diff + p.m_curv;

  std::vector<double> x;
  if (auto exact = solve_pdas(p, state)) {
    x = std::move(*exact);
  } else {
    std::vector<double> start = (warm && warm->size() == n) ? *warm : feasible_point(n, cons);
    x = solve_admm(p, std::move(start), state);
  }

  // The solver stops at a finite residual, so a warm start sitting at (or
  // past) the optimum could otherwise come back very slightly worse; keep it
  // when it is feasible and strictly better.
  if (warm && warm->size() == n && feasibility_violation(*warm, cons) <= 1e-10) {
    double obj_x = 0.0, obj_w = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      obj_x += weights[i] * (x[i] - targets[i]) * (x[i] - targets[i]);
      obj_w += weights[i] * ((*warm)[i] - targets[i]) * ((*warm)[i] - targets[i]);
    }
    if (obj_w < obj_x) return *warm;
  }
  return x;
}

}  // namespace

Mat predict_outcomes(const LoadingMatrix& loading, const std::vector<Permutation>& sigmas,
                     const std::vector<QuantileGrid>& grids) {
  const std::size_t K = loading.factors();
  const std::size_t T = loading.periods();
  const std::size_t N = grids.at(0).size();
  Mat z(N, T);
  for (std::size_t k = 0; k < K; ++k) {
    const auto& g = grids[k].values;
    const auto& s = sigmas[k];
    for (std::size_t i = 0; i < N; ++i) {
      const double v = g[s[i]];
      for (std::size_t t = 0; t < T; ++t) z(i, t) += loading.a(t, k) * v;
    }
  }
  return z;
}

double feasibility_violation(const std::vector<double>& x, const ShapeConstraints& cons) {
  const ChainBounds b = raw_bounds(x.size(), cons);
  double viol = 0.0;
  for (double v : x) viol = std::max(viol, std::abs(v) - b.level);
  for (std::size_t i = 0; i + 1 < x.size(); ++i) {
    const double d = x[i + 1] - x[i];
    viol = std::max(viol, b.d_lo - d);
    viol = std::max(viol, d - b.d_hi);
  }
  if (b.dd > 0.0)
    for (std::size_t i = 0; i + 2 < x.size(); ++i)
      viol = std::max(viol, std::abs(x[i + 2] - 2.0 * x[i + 1] + x[i]) - b.dd);
  if (b.zero_mean)
    viol = std::max(viol, std::abs(std::accumulate(x.begin(), x.end(), 0.0)) /
                              static_cast<double>(x.size()));
  return std::max(viol, 0.0);
}

std::vector<double> feasible_point(std::size_t n, const ShapeConstraints& cons) {
  const ChainBounds b = raw_bounds(n, cons);
  check_feasible(n, b);
  std::vector<double> x(n);
  const double slope = b.d_lo;
  const double mid = static_cast<double>(n - 1) / 2.0;
  for (std::size_t i = 0; i < n; ++i) x[i] = slope * (static_cast<double>(i) - mid);
  return x;
}

QuantileGrid bounded_isotonic_fit(const std::vector<double>& targets,
                                  const std::vector<double>& weights,
                                  const ShapeConstraints& cons,
                                  const std::vector<double>* warm_start,
                                  ChainState* state) {
  QuantileGrid g;
  g.values = solve_chain_qp(targets, weights, cons, warm_start, state);
  return g;
}

double matched_objective(const Mat& y_matched, const LoadingMatrix& loading,
                         const std::vector<Permutation>& sigmas,
                         const std::vector<QuantileGrid>& grids) {
  const Mat z = predict_outcomes(loading, sigmas, grids);
  double obj = 0.0;
  for (std::size_t i = 0; i < y_matched.rows(); ++i)
    for (std::size_t t = 0; t < y_matched.cols(); ++t) {
      const double d = y_matched(i, t) - z(i, t);
      obj += d * d;
    }
  return obj;
}

std::vector<QuantileGrid> update_step(const Mat& y_matched, const LoadingMatrix& loading,
                                      const std::vector<Permutation>& sigmas,
                                      const std::vector<ShapeConstraints>& constraints,
                                      std::vector<QuantileGrid> warm_start,
                                      const std::vector<bool>& frozen,
                                      const UpdateOptions& options,
                                      std::vector<ChainState>* states) {
  const std::size_t N = y_matched.rows();
  const std::size_t T = y_matched.cols();
  const std::size_t K = loading.factors();
  if (loading.periods() != T) throw std::invalid_argument("update_step: period mismatch");
  if (sigmas.size() != K || warm_start.size() != K || constraints.size() != K)
    throw std::invalid_argument("update_step: per-factor argument size mismatch");
  for (std::size_t k = 0; k < K; ++k)
    if (sigmas[k].size() != N || warm_start[k].size() != N)
      throw std::invalid_argument("update_step: grid or permutation length mismatch");

  std::vector<double> col_weight(K, 0.0);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t t = 0; t < T; ++t) col_weight[k] += loading.a(t, k) * loading.a(t, k);

  std::vector<Permutation> inv_sigma(K, Permutation(N));
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < N; ++i) inv_sigma[k][sigmas[k][i]] = static_cast<int>(i);

  // Residuals with all factor contributions removed, maintained incrementally.
  Mat resid = y_matched;
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t i = 0; i < N; ++i) {
      const double v = warm_start[k].values[sigmas[k][i]];
      for (std::size_t t = 0; t < T; ++t) resid(i, t) -= loading.a(t, k) * v;
    }

  auto objective = [&]() {
    double s = 0.0;
    for (double v : resid.data()) s += v * v;
    return s;
  };

  std::size_t n_free = 0;
  for (std::size_t k = 0; k < K; ++k)
    if (frozen.empty() || !frozen[k]) ++n_free;
  if (states && states->size() != K)
    throw std::invalid_argument("update_step: one solver state per factor required");

  std::vector<double> targets(N), weights(N);
  double prev_obj = objective();
  for (int sweep = 0; sweep < options.max_sweeps; ++sweep) {
    for (std::size_t k = 0; k < K; ++k) {
      if (!frozen.empty() && frozen[k]) continue;
      const double wk = col_weight[k];
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t i = inv_sigma[k][j];
        double proj = 0.0;
        for (std::size_t t = 0; t < T; ++t) proj += loading.a(t, k) * resid(i, t);
        targets[j] = warm_start[k].values[j] + proj / wk;
        weights[j] = wk;
      }
      std::vector<double> updated =
          solve_chain_qp(targets, weights, constraints[k], &warm_start[k].values,
                         states ? &(*states)[k] : nullptr);
      for (std::size_t i = 0; i < N; ++i) {
        const double delta = updated[sigmas[k][i]] - warm_start[k].values[sigmas[k][i]];
        if (delta != 0.0)
          for (std::size_t t = 0; t < T; ++t) resid(i, t) -= loading.a(t, k) * delta;
      }
      warm_start[k].values = std::move(updated);
      warm_start[k].factor = static_cast<int>(k);
    }
    // A single free block is solved exactly in one pass; further sweeps
    // would only repeat the same projection.
    if (n_free <= 1) break;
    const double obj = objective();
    if (prev_obj - obj < options.tol * (1.0 + std::abs(prev_obj))) break;
    prev_obj = obj;
  }
  return warm_start;
}

}  // namespace lvm
