#include "lvm/model.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>

namespace lvm {

void LoadingMatrix::validate() const {
  if (a.rows() == 0 || a.cols() == 0)
    throw std::invalid_argument("loading matrix must have positive dimensions");
  for (std::size_t t = 0; t < a.rows(); ++t)
    for (std::size_t k = 0; k < a.cols(); ++k)
      if (!std::isfinite(a(t, k)))
        throw std::invalid_argument("loading matrix has non-finite entry");
  for (std::size_t k = 0; k < a.cols(); ++k) {
    bool all_zero = true;
    for (std::size_t t = 0; t < a.rows(); ++t)
      if (a(t, k) != 0.0) { all_zero = false; break; }
    if (all_zero)
      throw std::invalid_argument("loading matrix has an all-zero column");
  }
}

void ShapeConstraints::validate() const {
  if (!(level_bound > 0.0))
    throw std::invalid_argument("level_bound must be positive");
  if (slope_lower < 0.0 || !(slope_lower < slope_upper))
    throw std::invalid_argument("need 0 <= slope_lower < slope_upper");
  if (second_diff_bound && !(*second_diff_bound > 0.0))
    throw std::invalid_argument("second_diff_bound must be positive when set");
}

void ModelSpec::validate() const {
  loading.validate();
  if (constraints.size() != loading.factors())
    throw std::invalid_argument("one constraint set per factor required");
  for (const auto& c : constraints) c.validate();
  if (!factor_labels.empty() && factor_labels.size() != loading.factors())
    throw std::invalid_argument("factor label count mismatch");
}

LoadingMatrix fixed_effects_loading(std::size_t periods) {
  if (periods == 0) throw std::invalid_argument("fixed_effects_loading: T must be >= 1");
  LoadingMatrix m;
  m.a = Mat(periods, periods + 1);
  for (std::size_t t = 0; t < periods; ++t) {
    m.a(t, 0) = 1.0;
    m.a(t, t + 1) = 1.0;
  }
  return m;
}

LoadingMatrix permanent_transitory_loading(std::size_t periods) {
  if (periods < 2)
    throw std::invalid_argument("permanent_transitory_loading: T must be >= 2");
  LoadingMatrix m;
  m.a = Mat(periods, 2 * periods - 1);
  for (std::size_t t = 0; t < periods; ++t) m.a(t, t) = 1.0;
  for (std::size_t j = 0; j + 1 < periods; ++j) {
    m.a(j, periods + j) = 1.0;
    m.a(j + 1, periods + j) = -1.0;
  }
  return m;
}

IdentificationReport check_identification(const LoadingMatrix& loading) {
  loading.validate();
  const std::size_t T = loading.periods();
  const std::size_t K = loading.factors();
  Eigen::MatrixXd stacked(T * T, K);
  for (std::size_t k = 0; k < K; ++k)
    for (std::size_t s = 0; s < T; ++s)
      for (std::size_t t = 0; t < T; ++t)
        stacked(s * T + t, k) = loading.a(t, k) * loading.a(s, k);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(stacked);
  const auto& sv = svd.singularValues();
  const double thresh = 1e-10 * sv(0);
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > thresh) ++rank;
  IdentificationReport report;
  report.rank = rank;
  report.required_rank = static_cast<int>(K);
  report.identified = rank == report.required_rank;
  return report;
}

ShapeConstraints default_constraints(double sigma_hat, double c) {
  if (!(sigma_hat > 0.0) || !(c > 0.0))
    throw std::invalid_argument("default_constraints: sigma_hat and c must be positive");
  ShapeConstraints cons;
  cons.level_bound = 2.3 * c * sigma_hat;
  cons.slope_lower = 2.5 / c * sigma_hat;
  cons.slope_upper = 37.0 * c * sigma_hat;
  cons.second_diff_bound = 3275.0 * c * sigma_hat;
  return cons;
}

ShapeConstraints penalization_constraints(double c_lower, double c_upper, bool zero_mean) {
  ShapeConstraints cons;
  cons.level_bound = c_upper;
  cons.slope_lower = c_lower;
  cons.slope_upper = c_upper;
  cons.second_diff_bound = c_upper;
  cons.zero_mean = zero_mean;
  cons.validate();
  return cons;
}

}  // namespace lvm
