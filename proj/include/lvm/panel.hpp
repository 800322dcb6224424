#pragma once

#include <string>
#include <vector>

#include "lvm/mat.hpp"
#include "lvm/post.hpp"
#include "lvm/shape_ls.hpp"
#include "lvm/simlab.hpp"

namespace lvm {

struct PanelData {
  std::vector<std::string> unit_ids;
  Mat outcomes;                          // N x T, balanced
  std::vector<std::string> time_labels;  // length T
  std::vector<std::string> covariate_names;
  std::vector<std::vector<std::string>> covariates;  // covariates[c][i], categorical codes
  std::size_t dropped_units = 0;         // units removed by the balance filter
};

/// Reads a wide (unit,y1..yT) or long (unit,time,y[,covariates...]) CSV.
/// Long panels are balanced: units with any missing outcome are dropped and
/// counted. Throws on malformed rows and duplicate (unit, time) keys.
PanelData load_panel_csv(const std::string& path);

void write_panel_csv(const std::string& path, const PanelData& panel);

/// OLS residuals of y on an intercept plus one dummy per non-reference level
/// of each categorical covariate. Throws a collinearity error naming the
/// offending columns when the design is rank deficient.
std::vector<double> residualize(const std::vector<double>& y,
                                const std::vector<std::vector<std::string>>& covariates,
                                const std::vector<std::string>& names = {});

/// N x (T-1) panel of one-period outcome differences.
PanelData first_difference(const PanelData& panel);

void write_quantile_grids_csv(const std::string& path, const std::vector<QuantileGrid>& grids);
std::vector<QuantileGrid> read_quantile_grids_csv(const std::string& path);
void write_density_csv(const std::string& path, const DensityEstimate& density);

/// CSV tables plus a manifest for a Monte Carlo report directory.
void write_mc_report(const McReport& report, const std::string& dir);

}  // namespace lvm
