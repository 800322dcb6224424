#include "lvm/panel.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "lvm/csv.hpp"

namespace lvm {

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::stringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(field);
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

bool missing(const std::string& s) {
  if (s.empty()) return true;
  std::string t = s;
  std::transform(t.begin(), t.end(), t.begin(), ::tolower);
  return t == "na" || t == "nan" || t == ".";
}

double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw std::invalid_argument("malformed numeric field '" + s + "' in " + context);
  }
}

}  // namespace

void write_csv(const std::string& path, const CsvTable& table) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  for (std::size_t j = 0; j < table.header.size(); ++j)
    f << (j ? "," : "") << table.header[j];
  f << "\n";
  for (const auto& row : table.rows) {
    for (std::size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << row[j];
    f << "\n";
  }
}

CsvTable read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open: " + path);
  CsvTable t;
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("empty CSV: " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split_line(line);
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto row = split_line(line);
    if (row.size() != t.header.size())
      throw std::runtime_error("ragged CSV row in " + path);
    t.rows.push_back(std::move(row));
  }
  return t;
}

PanelData load_panel_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.header.empty() || t.header[0] != "unit")
    throw std::invalid_argument("panel CSV must start with a 'unit' column");
  PanelData p;
  const bool is_long =
      t.header.size() >= 3 && t.header[1] == "time" && t.header[2] == "y";

  if (!is_long) {
    const std::size_t T = t.header.size() - 1;
    if (T == 0) throw std::invalid_argument("wide panel has no outcome columns");
    p.time_labels.assign(t.header.begin() + 1, t.header.end());
    std::vector<std::vector<double>> rows;
    std::set<std::string> seen;
    for (const auto& r : t.rows) {
      if (!seen.insert(r[0]).second)
        throw std::invalid_argument("duplicate unit id: " + r[0]);
      bool any_missing = false;
      std::vector<double> vals(T);
      for (std::size_t j = 0; j < T; ++j) {
        if (missing(r[j + 1])) {
          any_missing = true;
          break;
        }
        vals[j] = parse_double(r[j + 1], "unit " + r[0]);
      }
      if (any_missing) {
        ++p.dropped_units;
        continue;
      }
      p.unit_ids.push_back(r[0]);
      rows.push_back(std::move(vals));
    }
    p.outcomes = Mat(rows.size(), T);
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < T; ++j) p.outcomes(i, j) = rows[i][j];
    return p;
  }

  // Long format: unit,time,y[,covariates...]
  const std::size_t n_cov = t.header.size() - 3;
  p.covariate_names.assign(t.header.begin() + 3, t.header.end());
  std::vector<std::string> time_order;
  std::map<std::string, std::size_t> time_index;
  struct UnitRec {
    std::map<std::size_t, double> obs;
    std::vector<std::string> covs;
    bool incomplete = false;
  };
  std::vector<std::string> unit_order;
  std::map<std::string, UnitRec> units;
  for (const auto& r : t.rows) {
    if (time_index.find(r[1]) == time_index.end()) {
      time_index[r[1]] = time_order.size();
      time_order.push_back(r[1]);
    }
    auto it = units.find(r[0]);
    if (it == units.end()) {
      unit_order.push_back(r[0]);
      it = units.emplace(r[0], UnitRec{}).first;
      it->second.covs.assign(r.begin() + 3, r.end());
    }
    const std::size_t ti = time_index[r[1]];
    if (it->second.obs.count(ti))
      throw std::invalid_argument("duplicate (unit, time) key: " + r[0] + "," + r[1]);
    if (missing(r[2])) {
      it->second.incomplete = true;
      continue;
    }
    it->second.obs[ti] = parse_double(r[2], "unit " + r[0] + " time " + r[1]);
  }
  const std::size_t T = time_order.size();
  p.time_labels = time_order;
  p.covariates.assign(n_cov, {});
  std::vector<std::vector<double>> rows;
  for (const auto& id : unit_order) {
    const auto& rec = units[id];
    if (rec.incomplete || rec.obs.size() != T) {
      ++p.dropped_units;
      continue;
    }
    p.unit_ids.push_back(id);
    std::vector<double> vals(T);
    for (std::size_t ti = 0; ti < T; ++ti) vals[ti] = rec.obs.at(ti);
    rows.push_back(std::move(vals));
    for (std::size_t c = 0; c < n_cov; ++c) p.covariates[c].push_back(rec.covs[c]);
  }
  p.outcomes = Mat(rows.size(), T);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < T; ++j) p.outcomes(i, j) = rows[i][j];
  return p;
}

void write_panel_csv(const std::string& path, const PanelData& panel) {
  CsvTable t;
  t.header.push_back("unit");
  for (const auto& lbl : panel.time_labels) t.header.push_back(lbl);
  for (std::size_t i = 0; i < panel.outcomes.rows(); ++i) {
    std::vector<std::string> row;
    row.push_back(i < panel.unit_ids.size() ? panel.unit_ids[i] : std::to_string(i));
    for (std::size_t j = 0; j < panel.outcomes.cols(); ++j)
      row.push_back(format_full(panel.outcomes(i, j)));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::vector<double> residualize(const std::vector<double>& y,
                                const std::vector<std::vector<std::string>>& covariates,
                                const std::vector<std::string>& names) {
  const std::size_t n = y.size();
  if (n == 0) throw std::invalid_argument("residualize: empty sample");
  std::vector<std::string> col_names{"intercept"};
  std::vector<std::vector<double>> cols{std::vector<double>(n, 1.0)};
  for (std::size_t c = 0; c < covariates.size(); ++c) {
    if (covariates[c].size() != n)
      throw std::invalid_argument("residualize: covariate length mismatch");
    std::vector<std::string> levels = covariates[c];
    std::sort(levels.begin(), levels.end());
    levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
    const std::string cname = c < names.size() ? names[c] : "cov" + std::to_string(c);
    for (std::size_t l = 1; l < levels.size(); ++l) {  // first level is the reference
      std::vector<double> d(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        if (covariates[c][i] == levels[l]) d[i] = 1.0;
      cols.push_back(std::move(d));
      col_names.push_back(cname + "=" + levels[l]);
    }
  }
  const std::size_t p = cols.size();
  Eigen::MatrixXd X(n, p);
  Eigen::VectorXd Y(n);
  for (std::size_t i = 0; i < n; ++i) {
    Y(i) = y[i];
    for (std::size_t j = 0; j < p; ++j) X(i, j) = cols[j][i];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < static_cast<Eigen::Index>(p)) {
    std::string offending;
    const auto& perm = qr.colsPermutation().indices();
    for (Eigen::Index j = qr.rank(); j < static_cast<Eigen::Index>(p); ++j)
      offending += (offending.empty() ? "" : ", ") + col_names[perm(j)];
    throw std::invalid_argument("residualize: collinear design, offending columns: " +
                                offending);
  }
  const Eigen::VectorXd resid = Y - X * qr.solve(Y);
  return std::vector<double>(resid.data(), resid.data() + n);
}

PanelData first_difference(const PanelData& panel) {
  const std::size_t T = panel.outcomes.cols();
  if (T < 2) throw std::invalid_argument("first_difference: need T >= 2");
  PanelData out = panel;
  out.outcomes = Mat(panel.outcomes.rows(), T - 1);
  for (std::size_t i = 0; i < panel.outcomes.rows(); ++i)
    for (std::size_t t = 0; t + 1 < T; ++t)
      out.outcomes(i, t) = panel.outcomes(i, t + 1) - panel.outcomes(i, t);
  out.time_labels.clear();
  for (std::size_t t = 0; t + 1 < T; ++t)
    out.time_labels.push_back("d_" + panel.time_labels[t + 1]);
  return out;
}

void write_quantile_grids_csv(const std::string& path,
                              const std::vector<QuantileGrid>& grids) {
  if (grids.empty()) throw std::invalid_argument("no grids to write");
  const std::size_t n = grids[0].size();
  CsvTable t;
  t.header.push_back("rank");
  for (const auto& g : grids) {
    if (g.size() != n) throw std::invalid_argument("grid length mismatch");
    t.header.push_back("factor_" + std::to_string(g.factor));
  }
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::string> row;
    row.push_back(format_full(static_cast<double>(i + 1) / static_cast<double>(n + 1)));
    for (const auto& g : grids) row.push_back(format_full(g.values[i]));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::vector<QuantileGrid> read_quantile_grids_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  if (t.header.size() < 2 || t.header[0] != "rank")
    throw std::invalid_argument("not a quantile grid CSV: " + path);
  std::vector<QuantileGrid> grids(t.header.size() - 1);
  for (std::size_t k = 0; k + 1 < t.header.size(); ++k) {
    const std::string& h = t.header[k + 1];
    if (h.rfind("factor_", 0) == 0) grids[k].factor = std::stoi(h.substr(7));
    grids[k].values.reserve(t.rows.size());
  }
  for (const auto& row : t.rows)
    for (std::size_t k = 0; k + 1 < t.header.size(); ++k)
      grids[k].values.push_back(parse_double(row[k + 1], path));
  return grids;
}

void write_density_csv(const std::string& path, const DensityEstimate& density) {
  CsvTable t;
  t.header = {"x", "density"};
  for (std::size_t i = 0; i < density.eval_points.size(); ++i)
    t.rows.push_back({format_full(density.eval_points[i]), format_full(density.values[i])});
  write_csv(path, t);
}

void write_mc_report(const McReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  CsvTable metrics;
  metrics.header = {"metric", "value"};
  metrics.rows = {
      {"mise", format_report(report.mise)},
      {"miae", format_report(report.miae)},
      {"quantile_mse_25", format_report(report.quantile_mse_25)},
      {"quantile_mse_50", format_report(report.quantile_mse_50)},
      {"quantile_mse_75", format_report(report.quantile_mse_75)},
      {"density_min", format_report(report.density_min)},
      {"failed_reps", std::to_string(report.failed_reps)},
      {"reps", std::to_string(report.options.reps)},
  };
  write_csv(dir + "/metrics.csv", metrics);

  CsvTable per_rep;
  per_rep.header = {"rep", "ise", "iae", "kde_integral"};
  for (std::size_t r = 0; r < report.per_rep_ise.size(); ++r)
    per_rep.rows.push_back({std::to_string(r), format_report(report.per_rep_ise[r]),
                            format_report(report.per_rep_iae[r]),
                            format_report(report.per_rep_kde_integral[r])});
  write_csv(dir + "/per_rep.csv", per_rep);

  CsvTable dens;
  dens.header = {"x", "true", "mean", "q10", "q90"};
  for (std::size_t j = 0; j < report.grid.size(); ++j)
    dens.rows.push_back({format_full(report.grid[j]), format_full(report.density_true[j]),
                         format_full(report.density_mean[j]),
                         format_full(report.density_q10[j]),
                         format_full(report.density_q90[j])});
  write_csv(dir + "/density_envelope.csv", dens);

  CsvTable quant;
  quant.header = {"rank", "true", "mean", "q10", "q90"};
  for (std::size_t i = 0; i < report.ranks.size(); ++i)
    quant.rows.push_back({format_full(report.ranks[i]), format_full(report.quantile_true[i]),
                          format_full(report.quantile_mean[i]),
                          format_full(report.quantile_q10[i]),
                          format_full(report.quantile_q90[i])});
  write_csv(dir + "/quantile_envelope.csv", quant);

  nlohmann::ordered_json manifest;
  manifest["dgp"] = dgp_name(report.dgp);
  manifest["model"] =
      report.options.model == McModel::fixed_effects ? "fixed-effects" : "deconvolution";
  manifest["n"] = report.options.n;
  manifest["periods"] = report.options.periods;
  manifest["reps"] = report.options.reps;
  manifest["c_lower"] = report.options.c_lower;
  manifest["c_upper"] = report.options.c_upper;
  manifest["seed"] = report.options.fit.seed;
  manifest["n_starts"] = report.options.fit.n_starts;
  manifest["sigma_draws"] = report.options.fit.sigma_draws;
  manifest["grid_points"] = report.options.grid_points;
  std::ofstream mf(dir + "/manifest.json", std::ios::binary);
  mf << manifest.dump(2) << "\n";
}

}  // namespace lvm
