#include <omp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "lvm/csv.hpp"
#include "lvm/estimator.hpp"
#include "lvm/extensions.hpp"
#include "lvm/model.hpp"
#include "lvm/panel.hpp"
#include "lvm/post.hpp"
#include "lvm/simlab.hpp"

namespace {

using nlohmann::json;
using namespace lvm;

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out = "out";
  std::string preset = "weak";
};

std::pair<double, double> preset_bounds(const std::string& preset) {
  if (preset == "strong") return {0.1, 10.0};
  if (preset == "weak") return {0.0, 10000.0};
  throw CLI::ValidationError("--preset", "unknown preset: " + preset);
}

/// Pre-scan for --config and return the parsed file, checking keys against
/// the subcommand's schema.
json load_config(int argc, char** argv, const std::set<std::string>& allowed) {
  std::string path;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") path = argv[i + 1];
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config: " + path);
  json cfg = json::parse(f);
  for (const auto& [key, _] : cfg.items())
    if (!allowed.count(key)) throw std::runtime_error("unknown config key: " + key);
  return cfg;
}

template <typename T>
void from_config(const json& cfg, const std::string& key, T& value) {
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

void write_run_manifest(const std::string& dir, const json& config, std::uint64_t seed,
                        double seconds) {
  nlohmann::ordered_json m;
  m["seed"] = seed;
  m["config"] = config;
  m["config_hash"] = std::hash<std::string>{}(config.dump());
  m["elapsed_seconds"] = seconds;
  std::filesystem::create_directories(dir);
  std::ofstream f(dir + "/manifest.json", std::ios::binary);
  f << m.dump(2) << "\n";
}

void write_trace(const std::string& path, const std::vector<double>& trace) {
  CsvTable t;
  t.header = {"iteration", "objective"};
  for (std::size_t i = 0; i < trace.size(); ++i)
    t.rows.push_back({std::to_string(i + 1), format_full(trace[i])});
  write_csv(path, t);
}

/// Covariance-based scale estimates for the default-c2 constraint preset in
/// the fixed-effects model: cov(Y_1, Y_2) identifies the common factor
/// variance, the remainders the per-period noise variances.
std::vector<double> fixed_effects_sigmas(const Mat& y) {
  const std::size_t n = y.rows(), T = y.cols();
  std::vector<double> mean(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < n; ++i) mean[t] += y(i, t);
    mean[t] /= n;
  }
  double cov01 = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    cov01 += (y(i, 0) - mean[0]) * (y(i, 1) - mean[1]);
  cov01 /= (n - 1);
  std::vector<double> sig(T + 1);
  sig[0] = std::sqrt(std::max(cov01, 1e-8));
  for (std::size_t t = 0; t < T; ++t) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (y(i, t) - mean[t]) * (y(i, t) - mean[t]);
    var /= (n - 1);
    sig[t + 1] = std::sqrt(std::max(var - cov01, 1e-8));
  }
  return sig;
}

ModelSpec build_spec(const std::string& kind, const Mat& y, const std::string& preset,
                     bool zero_mean) {
  ModelSpec spec;
  const std::size_t T = y.cols();
  if (kind == "fixed-effects")
    spec.loading = fixed_effects_loading(T);
  else if (kind == "permanent-transitory")
    spec.loading = permanent_transitory_loading(T);
  else if (kind == "deconvolution")
    spec.loading = fixed_effects_loading(1);
  else
    throw std::runtime_error("unknown model kind: " + kind);
  const std::size_t K = spec.loading.factors();
  if (preset == "default-c2") {
    if (kind == "fixed-effects") {
      const auto sig = fixed_effects_sigmas(y);
      for (std::size_t k = 0; k < K; ++k) {
        auto c = default_constraints(sig[k], 2.0);
        c.zero_mean = zero_mean;
        spec.constraints.push_back(c);
      }
    } else {
      double s = 0.0, m = 0.0;
      for (double v : y.data()) m += v;
      m /= y.data().size();
      for (double v : y.data()) s += (v - m) * (v - m);
      s = std::sqrt(s / (y.data().size() - 1) / 2.0);
      auto c = default_constraints(std::max(s, 1e-8), 2.0);
      c.zero_mean = zero_mean;
      spec.constraints.assign(K, c);
    }
  } else {
    const auto [lo, hi] = preset_bounds(preset);
    spec.constraints.assign(K, penalization_constraints(lo, hi, zero_mean));
  }
  return spec;
}

int cmd_simulate(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string dgp = "beta(2,2)", model = "fixed-effects";
  static std::size_t n = 100, periods = 2, grid_points = 512;
  static int reps = 100, starts = 10, sigma_draws = 10, max_iterations = 200;
  const std::set<std::string> keys = {"dgp",    "model",       "n",     "periods",
                                      "reps",   "starts",      "sigma_draws",
                                      "max_iterations", "grid_points", "preset", "seed", "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "dgp", dgp);
  from_config(cfg, "model", model);
  from_config(cfg, "n", n);
  from_config(cfg, "periods", periods);
  from_config(cfg, "reps", reps);
  from_config(cfg, "starts", starts);
  from_config(cfg, "sigma_draws", sigma_draws);
  from_config(cfg, "max_iterations", max_iterations);
  from_config(cfg, "grid_points", grid_points);
  from_config(cfg, "preset", common.preset);
  from_config(cfg, "seed", common.seed);
  from_config(cfg, "out", common.out);
  app->add_option("--dgp", dgp);
  app->add_option("--model", model);
  app->add_option("--n", n);
  app->add_option("--periods", periods);
  app->add_option("--reps", reps);
  app->add_option("--starts", starts);
  app->add_option("--sigma-draws", sigma_draws);
  app->add_option("--grid-points", grid_points);

  app->callback([&, app]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    McOptions opt;
    opt.model = model == "deconvolution" ? McModel::deconvolution : McModel::fixed_effects;
    opt.n = n;
    opt.periods = periods;
    opt.reps = reps;
    std::tie(opt.c_lower, opt.c_upper) = preset_bounds(common.preset);
    opt.grid_points = grid_points;
    opt.fit.seed = common.seed;
    opt.fit.n_starts = starts;
    opt.fit.sigma_draws = sigma_draws;
    opt.fit.max_iterations = max_iterations;
    const McReport report = run_mc(parse_dgp(dgp), opt);
    write_mc_report(report, common.out);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "simulate"}, {"dgp", dgp},   {"model", model},
           {"n", n},                   {"reps", reps}, {"preset", common.preset}};
    write_run_manifest(common.out, c, common.seed, secs);
    std::cout << "mise " << format_report(report.mise) << " miae "
              << format_report(report.miae) << "\n";
  });
  return 0;
}

int cmd_estimate(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string data, model = "fixed-effects", noise_csv;
  static int starts = 10, sigma_draws = 10, max_iterations = 200;
  static bool no_zero_mean = false;
  const std::set<std::string> keys = {"data",   "model",       "noise",
                                      "starts", "sigma_draws", "max_iterations",
                                      "preset", "seed",        "out", "no_zero_mean"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "data", data);
  from_config(cfg, "model", model);
  from_config(cfg, "noise", noise_csv);
  from_config(cfg, "starts", starts);
  from_config(cfg, "sigma_draws", sigma_draws);
  from_config(cfg, "max_iterations", max_iterations);
  from_config(cfg, "preset", common.preset);
  from_config(cfg, "seed", common.seed);
  from_config(cfg, "out", common.out);
  from_config(cfg, "no_zero_mean", no_zero_mean);
  app->add_option("--data", data);
  app->add_option("--model", model);
  app->add_option("--noise", noise_csv);
  app->add_option("--starts", starts);
  app->add_option("--sigma-draws", sigma_draws);
  app->add_flag("--no-zero-mean", no_zero_mean);

  app->callback([&, app]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    if (data.empty()) throw CLI::ValidationError("--data", "estimate needs a panel CSV");
    PanelData panel = load_panel_csv(data);
    if (panel.dropped_units > 0)
      std::cerr << "dropped " << panel.dropped_units << " unbalanced units\n";
    Mat y = panel.outcomes;
    std::string kind = model;
    if (model == "permanent-transitory") {
      panel = first_difference(panel);
      y = panel.outcomes;
    }
    std::vector<FixedFactor> fixed;
    if (model == "deconvolution") {
      if (noise_csv.empty())
        throw CLI::ValidationError("--noise", "deconvolution needs a noise sample CSV");
      const CsvTable t = read_csv(noise_csv);
      FixedFactor f;
      f.factor = 1;
      for (const auto& row : t.rows) f.values.push_back(std::stod(row[0]));
      fixed.push_back(std::move(f));
      if (y.cols() != 1)
        throw std::runtime_error("deconvolution expects a single outcome column");
    }
    const bool zero_mean = !no_zero_mean && model != "deconvolution";
    const ModelSpec spec = build_spec(kind, y, common.preset, zero_mean);
    FitOptions opt;
    opt.seed = common.seed;
    opt.n_starts = starts;
    opt.sigma_draws = sigma_draws;
    opt.max_iterations = max_iterations;
    const AveragedFit fit = fit_averaged(y, spec, opt, fixed);
    std::filesystem::create_directories(common.out);
    write_quantile_grids_csv(common.out + "/grids.csv", fit.averaged.grids);
    write_trace(common.out + "/trace.csv", fit.draws[0].objective_trace);
    CsvTable obj;
    obj.header = {"metric", "value"};
    obj.rows = {{"objective", format_full(fit.averaged.objective)}};
    write_csv(common.out + "/objective.csv", obj);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "estimate"}, {"data", data}, {"model", model},
           {"preset", common.preset},  {"starts", starts}, {"sigma_draws", sigma_draws}};
    write_run_manifest(common.out, c, common.seed, secs);
    std::cout << "objective " << format_full(fit.averaged.objective) << "\n";
  });
  return 0;
}

int cmd_density(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string grids_csv;
  static int factor = 0;
  static std::size_t points = 512;
  static double bandwidth = 0.0, pad = 1.0;
  const std::set<std::string> keys = {"grids", "factor", "points", "bandwidth",
                                      "pad",   "seed",   "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "grids", grids_csv);
  from_config(cfg, "factor", factor);
  from_config(cfg, "points", points);
  from_config(cfg, "bandwidth", bandwidth);
  from_config(cfg, "out", common.out);
  app->add_option("--grids", grids_csv);
  app->add_option("--factor", factor);
  app->add_option("--points", points);
  app->add_option("--bandwidth", bandwidth);
  app->add_option("--pad", pad);

  app->callback([&]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    const auto grids = read_quantile_grids_csv(grids_csv);
    const QuantileGrid* g = nullptr;
    for (const auto& gr : grids)
      if (gr.factor == factor) g = &gr;
    if (!g) throw std::runtime_error("factor not found in grid file");
    const double b = bandwidth > 0.0 ? bandwidth : silverman_bandwidth(g->values);
    const double lo = g->values.front() - pad, hi = g->values.back() + pad;
    std::vector<double> eval(points);
    for (std::size_t i = 0; i < points; ++i)
      eval[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
    std::filesystem::create_directories(common.out);
    write_density_csv(common.out + "/density.csv", kernel_density(*g, b, eval));
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "density"}, {"grids", grids_csv}, {"factor", factor}};
    write_run_manifest(common.out, c, common.seed, secs);
  });
  return 0;
}

int cmd_predict(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string grids_csv, data;
  static int factor = 0;
  const std::set<std::string> keys = {"grids", "data", "factor", "seed", "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "grids", grids_csv);
  from_config(cfg, "data", data);
  from_config(cfg, "factor", factor);
  from_config(cfg, "out", common.out);
  app->add_option("--grids", grids_csv);
  app->add_option("--data", data);
  app->add_option("--factor", factor);

  app->callback([&]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    const auto grids = read_quantile_grids_csv(grids_csv);
    const PanelData panel = load_panel_csv(data);
    const Mat& y = panel.outcomes;
    const LoadingMatrix loading = fixed_effects_loading(y.cols());
    if (grids.size() != loading.factors())
      throw std::runtime_error("grid file does not match a fixed-effects model for this panel");
    std::vector<DensityEstimate> densities(grids.size());
    for (std::size_t k = 0; k < grids.size(); ++k)
      densities[k] =
          kernel_density(grids[k], silverman_bandwidth(grids[k].values), grids[k].values);
    std::vector<double> posterior(y.rows());
    for (std::size_t i = 0; i < y.rows(); ++i) {
      std::vector<double> row(y.cols());
      for (std::size_t t = 0; t < y.cols(); ++t) row[t] = y(i, t);
      posterior[i] =
          conditional_expectation(loading, grids, densities, row, factor).value;
    }
    // The rank-matched predictor needs one grid value per observation; reuse
    // the posterior ranks against the factor's quantile grid when N matches.
    CsvTable t;
    t.header = {"unit", "posterior_mean"};
    std::vector<double> constrained;
    const bool same_n = grids[factor].size() == y.rows();
    if (same_n) {
      constrained = constrained_predictor(posterior, grids[factor]);
      t.header.push_back("constrained");
    }
    for (std::size_t i = 0; i < y.rows(); ++i) {
      std::vector<std::string> row{
          i < panel.unit_ids.size() ? panel.unit_ids[i] : std::to_string(i),
          format_full(posterior[i])};
      if (same_n) row.push_back(format_full(constrained[i]));
      t.rows.push_back(std::move(row));
    }
    std::filesystem::create_directories(common.out);
    write_csv(common.out + "/predictions.csv", t);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "predict"}, {"grids", grids_csv}, {"data", data}};
    write_run_manifest(common.out, c, common.seed, secs);
  });
  return 0;
}

int cmd_cyclicality(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string grids_dir, macro_csv;
  static int factor = 0, lags = 1;
  const std::set<std::string> keys = {"grids_dir", "macro", "factor", "lags", "seed", "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "grids_dir", grids_dir);
  from_config(cfg, "macro", macro_csv);
  from_config(cfg, "factor", factor);
  from_config(cfg, "lags", lags);
  from_config(cfg, "out", common.out);
  app->add_option("--grids-dir", grids_dir);
  app->add_option("--macro", macro_csv);
  app->add_option("--factor", factor);
  app->add_option("--lags", lags);

  app->callback([&]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> files;
    for (const auto& e : std::filesystem::directory_iterator(grids_dir))
      if (e.path().extension() == ".csv") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
    const CsvTable macro = read_csv(macro_csv);
    if (macro.rows.size() != files.size())
      throw std::runtime_error("macro series length does not match the number of grid files");
    std::vector<SummaryStats> stats;
    for (const auto& f : files) {
      const auto grids = read_quantile_grids_csv(f);
      const QuantileGrid* g = nullptr;
      for (const auto& gr : grids)
        if (gr.factor == factor) g = &gr;
      if (!g) throw std::runtime_error("factor not found in " + f);
      stats.push_back(dispersion_skewness(g->values));
    }
    const std::size_t n = stats.size();
    Mat x(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      x(i, 0) = 1.0;
      x(i, 1) = std::stod(macro.rows[i].back());
    }
    CsvTable out;
    out.header = {"statistic", "coefficient", "std_error"};
    const auto add = [&](const std::string& name, auto getter) {
      std::vector<double> yv(n);
      for (std::size_t i = 0; i < n; ++i) yv[i] = getter(stats[i]);
      const OlsResult r = newey_west_ols(yv, x, lags);
      out.rows.push_back(
          {name, format_report(r.coefficients[1]), format_report(r.std_errors[1])});
    };
    add("dispersion", [](const SummaryStats& s) { return s.dispersion; });
    add("skewness", [](const SummaryStats& s) { return s.bowley_kelley; });
    add("upper", [](const SummaryStats& s) { return s.upper; });
    add("lower", [](const SummaryStats& s) { return s.lower; });
    std::filesystem::create_directories(common.out);
    write_csv(common.out + "/cyclicality.csv", out);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "cyclicality"}, {"grids_dir", grids_dir}, {"macro", macro_csv}};
    write_run_manifest(common.out, c, common.seed, secs);
  });
  return 0;
}

int cmd_rate_study(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string dgp = "beta(2,2)";
  static std::vector<std::size_t> sizes = {100, 200, 400, 800};
  static int reps = 200;
  const std::set<std::string> keys = {"dgp", "sizes", "reps", "preset", "seed", "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "dgp", dgp);
  from_config(cfg, "sizes", sizes);
  from_config(cfg, "reps", reps);
  from_config(cfg, "preset", common.preset);
  from_config(cfg, "seed", common.seed);
  from_config(cfg, "out", common.out);
  app->add_option("--dgp", dgp);
  app->add_option("--sizes", sizes);
  app->add_option("--reps", reps);

  app->callback([&]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    McOptions base;
    std::tie(base.c_lower, base.c_upper) = preset_bounds(common.preset);
    base.fit.seed = common.seed;
    base.fit.n_starts = 1;
    base.fit.sigma_draws = 1;
    const RateStudy study =
        rate_study(parse_dgp(dgp), sizes, reps, {0.25, 0.50, 0.75}, base);
    CsvTable t;
    t.header = {"probability"};
    for (auto n : sizes) t.header.push_back("mse_n" + std::to_string(n));
    t.header.push_back("implied_rate");
    for (std::size_t q = 0; q < study.probabilities.size(); ++q) {
      std::vector<std::string> row{format_report(study.probabilities[q])};
      for (std::size_t ni = 0; ni < sizes.size(); ++ni)
        row.push_back(format_report(study.mse[q][ni]));
      row.push_back(format_report(study.implied_rate[q]));
      t.rows.push_back(std::move(row));
    }
    std::filesystem::create_directories(common.out);
    write_csv(common.out + "/rate_study.csv", t);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "rate-study"}, {"dgp", dgp}, {"reps", reps}};
    write_run_manifest(common.out, c, common.seed, secs);
  });
  return 0;
}

int cmd_sweep(int argc, char** argv, CLI::App* app, Common& common) {
  static std::string dgp = "beta(2,2)";
  static std::size_t n = 100;
  static int reps = 100;
  static std::vector<double> c_values = {2.0, 10.0, 100.0, 1000.0, 10000.0};
  const std::set<std::string> keys = {"dgp", "n", "reps", "c_values", "seed", "out"};
  json cfg = load_config(argc, argv, keys);
  from_config(cfg, "dgp", dgp);
  from_config(cfg, "n", n);
  from_config(cfg, "reps", reps);
  from_config(cfg, "c_values", c_values);
  from_config(cfg, "seed", common.seed);
  from_config(cfg, "out", common.out);
  app->add_option("--dgp", dgp);
  app->add_option("--n", n);
  app->add_option("--reps", reps);
  app->add_option("--c-values", c_values);

  app->callback([&]() {
    if (common.threads > 0) omp_set_num_threads(common.threads);
    const auto t0 = std::chrono::steady_clock::now();
    McOptions base;
    base.fit.seed = common.seed;
    base.fit.n_starts = 1;
    base.fit.sigma_draws = 1;
    const auto points = penalization_sweep(parse_dgp(dgp), n, c_values, reps, base);
    CsvTable t;
    t.header = {"c_upper", "mse_q25", "mse_q50", "mse_q75"};
    for (const auto& p : points)
      t.rows.push_back({format_report(p.c_upper), format_report(p.mse_q25),
                        format_report(p.mse_q50), format_report(p.mse_q75)});
    std::filesystem::create_directories(common.out);
    write_csv(common.out + "/sweep.csv", t);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json c{{"subcommand", "sweep"}, {"dgp", dgp}, {"n", n}, {"reps", reps}};
    write_run_manifest(common.out, c, common.seed, secs);
  });
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Latent-variable distribution recovery by matching"};
  app.require_subcommand(1);

  Common common;
  app.add_option("--config", common.config_path, "structured config file (flags win)");
  app.add_option("--seed", common.seed, "master seed");
  app.add_option("--threads", common.threads, "worker pool size (default: all cores)");
  app.add_option("--out", common.out, "output directory");
  app.add_option("--preset", common.preset, "strong | weak | default-c2");

  try {
    cmd_simulate(argc, argv, app.add_subcommand("simulate", "Monte Carlo study"), common);
    cmd_estimate(argc, argv, app.add_subcommand("estimate", "fit a panel CSV"), common);
    cmd_density(argc, argv, app.add_subcommand("density", "kernel density of a grid"),
                common);
    cmd_predict(argc, argv, app.add_subcommand("predict", "posterior factor predictions"),
                common);
    cmd_cyclicality(argc, argv,
                    app.add_subcommand("cyclicality", "regress grid statistics on a series"),
                    common);
    cmd_rate_study(argc, argv, app.add_subcommand("rate-study", "MSE versus sample size"),
                   common);
    cmd_sweep(argc, argv, app.add_subcommand("sweep", "MSE versus penalization"), common);

    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
