#pragma once

#include <optional>
#include <string>
#include <vector>

#include "lvm/mat.hpp"

namespace lvm {

/// T x K factor loading matrix of a linear independent factor model Y = A X.
struct LoadingMatrix {
  Mat a;  // a(t, k)

  std::size_t periods() const { return a.rows(); }
  std::size_t factors() const { return a.cols(); }

  /// Throws std::invalid_argument on non-finite entries, empty dimensions,
  /// or an all-zero column.
  void validate() const;
};

/// Bounds defining the feasible set of a quantile grid: levels, scaled first
/// differences, optionally scaled second differences, and a zero-mean flag.
struct ShapeConstraints {
  double level_bound = 0.0;                    // bound on |x_i|
  double slope_lower = 0.0;                    // lower bound on (N+1) increments
  double slope_upper = 0.0;                    // upper bound on (N+1) increments
  std::optional<double> second_diff_bound;     // bound on (N+1)^2 second differences
  bool zero_mean = false;

  void validate() const;
};

struct ModelSpec {
  LoadingMatrix loading;
  std::vector<ShapeConstraints> constraints;   // one per factor column
  std::vector<std::string> factor_labels;      // optional, one per factor

  void validate() const;
};

struct IdentificationReport {
  bool identified = false;
  int rank = 0;
  int required_rank = 0;
};

/// T x (T+1) loading of the fixed-effects model: common factor plus one
/// period-specific noise factor per outcome.
LoadingMatrix fixed_effects_loading(std::size_t periods);

/// T x (2T-1) loading of the permanent-transitory model in first differences:
/// T permanent innovations followed by T-1 transitory first-difference columns.
LoadingMatrix permanent_transitory_loading(std::size_t periods);

/// Checks linear independence of the vectors vec(A_k A_k') by the numeric
/// rank of the stacked T^2 x K matrix (threshold 1e-10 times the largest
/// singular value).
IdentificationReport check_identification(const LoadingMatrix& loading);

/// Truncated-normal default bounds scaled by a factor standard deviation and
/// a tuning constant c.
ShapeConstraints default_constraints(double sigma_hat, double c);

/// Constraints from a pair of penalization constants: levels, scaled
/// increments and scaled second differences all bounded by c_upper, with
/// c_lower the increment floor. The "strong" preset is (0.1, 10), the "weak"
/// preset (0, 10000).
ShapeConstraints penalization_constraints(double c_lower, double c_upper,
                                          bool zero_mean = false);

}  // namespace lvm
