#include "lvm/simlab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "lvm/rng.hpp"

namespace lvm {

namespace {

constexpr double kSqrt2Pi = 2.5066282746310005024;
constexpr std::uint64_t kDataStream = 0x4d430000000000ULL;

double lognormal_scale() { return std::sqrt(std::exp(1.0) * (std::exp(1.0) - 1.0)); }

double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.7071067811865475244); }

/// Acklam's rational approximation refined by one Newton step.
double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("normal_quantile: p must be in (0, 1)");
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5, r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double pdf = std::exp(-0.5 * x * x) / kSqrt2Pi;
  return x - e / pdf;
}

/// Regularized incomplete beta by Lentz's continued fraction.
double betacf(double a, double b, double x) {
  const double eps = 1e-15, fpmin = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0, d = 1.0 - qab * x / qap;
  if (std::fabs(d) < fpmin) d = fpmin;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= 300; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < fpmin) d = fpmin;
    c = 1.0 + aa / c;
    if (std::fabs(c) < fpmin) c = fpmin;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < eps) break;
  }
  return h;
}

double incbeta(double a, double b, double x) {
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  const double lbeta = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  const double front = std::exp(a * std::log(x) + b * std::log(1.0 - x) - lbeta);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * betacf(a, b, x) / a;
  return 1.0 - std::exp(b * std::log(1.0 - x) + a * std::log(x) - lbeta) *
                   betacf(b, a, 1.0 - x) / b;
}

struct BetaMoments {
  double mean, sd;
};

BetaMoments beta_moments(const DgpSpec& spec) {
  const double a = spec.alpha, b = spec.beta;
  const double mean = a / (a + b);
  const double var = a * b / ((a + b) * (a + b) * (a + b + 1.0));
  return {mean, std::sqrt(var)};
}

double cdf_bisect(const DgpSpec& spec, double p, double lo, double hi) {
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (true_cdf(spec, mid) < p)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

constexpr double kEkgSd = 0.70710678118654752440;  // sd of the N(0, 1/2) component

}  // namespace

void DgpSpec::validate() const {
  if (family == DgpFamily::beta && (!(alpha > 0.0) || !(beta > 0.0)))
    throw std::invalid_argument("dgp: beta shape parameters must be positive");
}

DgpSpec parse_dgp(const std::string& name) {
  DgpSpec spec;
  double a = 0.0, b = 0.0;
  if (name == "normal") {
    spec.family = DgpFamily::normal;
  } else if (name == "lognormal") {
    spec.family = DgpFamily::lognormal;
  } else if (name == "efron-koenker-gu" || name == "ekg") {
    spec.family = DgpFamily::efron_koenker_gu;
  } else if (std::sscanf(name.c_str(), "beta(%lf,%lf)", &a, &b) == 2) {
    spec.family = DgpFamily::beta;
    spec.alpha = a;
    spec.beta = b;
  } else {
    throw std::invalid_argument("unknown dgp family: " + name);
  }
  spec.validate();
  return spec;
}

std::string dgp_name(const DgpSpec& spec) {
  switch (spec.family) {
    case DgpFamily::normal: return "normal";
    case DgpFamily::lognormal: return "lognormal";
    case DgpFamily::efron_koenker_gu: return "efron-koenker-gu";
    case DgpFamily::beta: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "beta(%g,%g)", spec.alpha, spec.beta);
      return buf;
    }
  }
  throw std::invalid_argument("unknown dgp family tag");
}

std::vector<double> draw_dgp(const DgpSpec& spec, std::size_t n, std::mt19937_64& rng) {
  spec.validate();
  std::vector<double> out(n);
  switch (spec.family) {
    case DgpFamily::beta: {
      const auto m = beta_moments(spec);
      std::gamma_distribution<double> ga(spec.alpha, 1.0), gb(spec.beta, 1.0);
      for (auto& v : out) {
        const double x = ga(rng);
        const double z = x / (x + gb(rng));
        v = (z - m.mean) / m.sd;
      }
      break;
    }
    case DgpFamily::normal: {
      std::normal_distribution<double> nd(0.0, 1.0);
      for (auto& v : out) v = nd(rng);
      break;
    }
    case DgpFamily::lognormal: {
      std::normal_distribution<double> nd(0.0, 1.0);
      const double s = lognormal_scale();
      for (auto& v : out) v = (std::exp(nd(rng)) - std::exp(0.5)) / s;
      break;
    }
    case DgpFamily::efron_koenker_gu: {
      std::uniform_real_distribution<double> u(0.0, 1.0);
      std::normal_distribution<double> nd(0.0, kEkgSd);
      for (auto& v : out) v = u(rng) < 6.0 / 7.0 ? nd(rng) : 6.0 * u(rng);
      break;
    }
  }
  return out;
}

double true_density(const DgpSpec& spec, double x) {
  switch (spec.family) {
    case DgpFamily::beta: {
      const auto m = beta_moments(spec);
      const double z = m.mean + m.sd * x;
      if (z <= 0.0 || z >= 1.0) return 0.0;
      const double lbeta =
          std::lgamma(spec.alpha) + std::lgamma(spec.beta) - std::lgamma(spec.alpha + spec.beta);
      return m.sd * std::exp((spec.alpha - 1.0) * std::log(z) +
                             (spec.beta - 1.0) * std::log(1.0 - z) - lbeta);
    }
    case DgpFamily::normal:
      return std::exp(-0.5 * x * x) / kSqrt2Pi;
    case DgpFamily::lognormal: {
      const double s = lognormal_scale();
      const double w = std::exp(0.5) + s * x;
      if (w <= 0.0) return 0.0;
      const double lw = std::log(w);
      return s * std::exp(-0.5 * lw * lw) / (w * kSqrt2Pi);
    }
    case DgpFamily::efron_koenker_gu: {
      const double z = x / kEkgSd;
      double f = (6.0 / 7.0) * std::exp(-0.5 * z * z) / (kSqrt2Pi * kEkgSd);
      if (x >= 0.0 && x <= 6.0) f += 1.0 / 42.0;
      return f;
    }
  }
  throw std::invalid_argument("unknown dgp family tag");
}

double true_cdf(const DgpSpec& spec, double x) {
  switch (spec.family) {
    case DgpFamily::beta: {
      const auto m = beta_moments(spec);
      return incbeta(spec.alpha, spec.beta, std::clamp(m.mean + m.sd * x, 0.0, 1.0));
    }
    case DgpFamily::normal:
      return normal_cdf(x);
    case DgpFamily::lognormal: {
      const double w = std::exp(0.5) + lognormal_scale() * x;
      if (w <= 0.0) return 0.0;
      return normal_cdf(std::log(w));
    }
    case DgpFamily::efron_koenker_gu:
      return (6.0 / 7.0) * normal_cdf(x / kEkgSd) +
             (1.0 / 7.0) * std::clamp(x / 6.0, 0.0, 1.0);
  }
  throw std::invalid_argument("unknown dgp family tag");
}

double true_quantile(const DgpSpec& spec, double p) {
  if (!(p > 0.0 && p < 1.0))
    throw std::invalid_argument("true_quantile: p must be in (0, 1)");
  switch (spec.family) {
    case DgpFamily::normal:
      return normal_quantile(p);
    case DgpFamily::lognormal:
      return (std::exp(normal_quantile(p)) - std::exp(0.5)) / lognormal_scale();
    case DgpFamily::beta: {
      const auto m = beta_moments(spec);
      return cdf_bisect(spec, p, -m.mean / m.sd, (1.0 - m.mean) / m.sd);
    }
    case DgpFamily::efron_koenker_gu:
      return cdf_bisect(spec, p, -10.0, 7.0);
  }
  throw std::invalid_argument("unknown dgp family tag");
}

std::pair<double, double> density_support(const DgpSpec& spec) {
  switch (spec.family) {
    case DgpFamily::beta: {
      const auto m = beta_moments(spec);
      return {-m.mean / m.sd, (1.0 - m.mean) / m.sd};
    }
    case DgpFamily::normal:
      return {true_quantile(spec, 1e-7), true_quantile(spec, 1.0 - 1e-7)};
    case DgpFamily::lognormal:
      return {-std::exp(0.5) / lognormal_scale(), true_quantile(spec, 1.0 - 1e-7)};
    case DgpFamily::efron_koenker_gu:
      return {true_quantile(spec, 1e-7), 6.0};
  }
  throw std::invalid_argument("unknown dgp family tag");
}

std::vector<double> metric_grid(const DgpSpec& spec, std::size_t points) {
  if (points < 2) throw std::invalid_argument("metric_grid: need at least 2 points");
  const auto [lo, hi] = density_support(spec);
  const double a = lo - 1.0, b = hi + 1.0;
  std::vector<double> g(points);
  for (std::size_t i = 0; i < points; ++i)
    g[i] = a + (b - a) * static_cast<double>(i) / static_cast<double>(points - 1);
  return g;
}

void McOptions::validate() const {
  if (reps < 1) throw std::invalid_argument("mc: reps must be >= 1");
  if (n < 2) throw std::invalid_argument("mc: n must be >= 2");
  if (model == McModel::fixed_effects && periods < 2)
    throw std::invalid_argument("mc: fixed-effects study needs periods >= 2");
  if (grid_points < 8) throw std::invalid_argument("mc: grid too small");
  if (c_lower < 0.0 || !(c_upper > c_lower))
    throw std::invalid_argument("mc: need 0 <= c_lower < c_upper");
  fit.validate();
}

namespace {

struct RepDraws {
  Mat y;
  std::vector<FixedFactor> fixed;
};

RepDraws simulate_rep(const DgpSpec& dgp, const McOptions& opt, int rep) {
  auto rng = derive_stream(opt.fit.seed, kDataStream + static_cast<std::uint64_t>(rep));
  RepDraws d;
  if (opt.model == McModel::fixed_effects) {
    const std::size_t T = opt.periods;
    std::vector<std::vector<double>> x(T + 1);
    for (auto& xk : x) xk = draw_dgp(dgp, opt.n, rng);
    d.y = Mat(opt.n, T);
    for (std::size_t i = 0; i < opt.n; ++i)
      for (std::size_t t = 0; t < T; ++t) d.y(i, t) = x[0][i] + x[t + 1][i];
  } else {
    // Scalar deconvolution: the noise factor is an observed sample with the
    // same marginal distribution, held fixed during estimation.
    auto x1 = draw_dgp(dgp, opt.n, rng);
    auto x2 = draw_dgp(dgp, opt.n, rng);
    d.y = Mat(opt.n, 1);
    for (std::size_t i = 0; i < opt.n; ++i) d.y(i, 0) = x1[i] + x2[i];
    d.fixed.push_back({1, std::move(x2)});
  }
  return d;
}

ModelSpec mc_model_spec(const McOptions& opt) {
  ModelSpec spec;
  if (opt.model == McModel::fixed_effects) {
    spec.loading = fixed_effects_loading(opt.periods);
    spec.constraints.assign(opt.periods + 1,
                            penalization_constraints(opt.c_lower, opt.c_upper, true));
  } else {
    spec.loading = fixed_effects_loading(1);
    spec.constraints.assign(2, penalization_constraints(opt.c_lower, opt.c_upper, false));
  }
  return spec;
}

/// One replication: simulate, fit with per-replication seed, return the
/// averaged first-factor grid.
QuantileGrid fit_rep(const DgpSpec& dgp, const McOptions& opt, int rep) {
  const RepDraws d = simulate_rep(dgp, opt, rep);
  const ModelSpec spec = mc_model_spec(opt);
  FitOptions fo = opt.fit;
  fo.seed = splitmix64(opt.fit.seed ^ (0xf17000000000ULL + static_cast<std::uint64_t>(rep)));
  const AveragedFit res = fit_averaged(d.y, spec, fo, d.fixed);
  return res.averaged.grids[0];
}

double trapezoid(const std::vector<double>& grid, const std::vector<double>& f) {
  double s = 0.0;
  for (std::size_t i = 0; i + 1 < grid.size(); ++i)
    s += 0.5 * (f[i] + f[i + 1]) * (grid[i + 1] - grid[i]);
  return s;
}

std::vector<double> pointwise(const std::vector<std::vector<double>>& curves,
                              const std::function<double(std::vector<double>&)>& agg) {
  if (curves.empty()) return {};
  std::vector<double> out(curves[0].size());
  std::vector<double> col(curves.size());
  for (std::size_t j = 0; j < out.size(); ++j) {
    for (std::size_t r = 0; r < curves.size(); ++r) col[r] = curves[r][j];
    out[j] = agg(col);
  }
  return out;
}

}  // namespace

McReport run_mc(const DgpSpec& dgp, const McOptions& options) {
  dgp.validate();
  options.validate();
  const int R = options.reps;
  const std::size_t N = options.n;

  McReport rep;
  rep.dgp = dgp;
  rep.options = options;
  rep.grid = metric_grid(dgp, options.grid_points);
  rep.density_true.resize(rep.grid.size());
  for (std::size_t j = 0; j < rep.grid.size(); ++j)
    rep.density_true[j] = true_density(dgp, rep.grid[j]);
  rep.ranks.resize(N);
  rep.quantile_true.resize(N);
  for (std::size_t i = 0; i < N; ++i) {
    rep.ranks[i] = static_cast<double>(i + 1) / static_cast<double>(N + 1);
    rep.quantile_true[i] = true_quantile(dgp, rep.ranks[i]);
  }

  std::vector<QuantileGrid> grids(R);
  std::vector<char> ok(R, 0);
#pragma omp parallel for schedule(dynamic)
  for (int r = 0; r < R; ++r) {
    try {
      grids[r] = fit_rep(dgp, options, r);
      ok[r] = 1;
    } catch (const std::exception&) {
      ok[r] = 0;
    }
  }

  std::vector<std::vector<double>> density_curves, quantile_curves;
  const double q25 = true_quantile(dgp, 0.25);
  const double q50 = true_quantile(dgp, 0.50);
  const double q75 = true_quantile(dgp, 0.75);
  for (int r = 0; r < R; ++r) {
    if (!ok[r]) {
      ++rep.failed_reps;
      continue;
    }
    const auto& g = grids[r];
    const double b = silverman_bandwidth(g.values);
    const DensityEstimate dens = kernel_density(g, b, rep.grid);
    {
      // Hygiene diagnostic: the kernel estimate must carry unit mass on the
      // range extended five bandwidths past the pseudo-observations.
      const double lo = g.values.front() - 5.0 * b, hi = g.values.back() + 5.0 * b;
      std::vector<double> wide(2000);
      for (std::size_t j = 0; j < wide.size(); ++j)
        wide[j] = lo + (hi - lo) * static_cast<double>(j) / static_cast<double>(wide.size() - 1);
      const DensityEstimate hd = kernel_density(g, b, wide);
      rep.per_rep_kde_integral.push_back(trapezoid(wide, hd.values));
      double dmin = dens.values[0];
      for (double v : dens.values) dmin = std::min(dmin, v);
      for (double v : hd.values) dmin = std::min(dmin, v);
      if (density_curves.empty())
        rep.density_min = dmin;
      else
        rep.density_min = std::min(rep.density_min, dmin);
    }
    std::vector<double> sq(rep.grid.size()), ab(rep.grid.size());
    for (std::size_t j = 0; j < rep.grid.size(); ++j) {
      const double e = dens.values[j] - rep.density_true[j];
      sq[j] = e * e;
      ab[j] = std::fabs(e);
    }
    rep.per_rep_ise.push_back(trapezoid(rep.grid, sq));
    rep.per_rep_iae.push_back(trapezoid(rep.grid, ab));
    const double e25 = quantile_sorted(g.values, 0.25) - q25;
    const double e50 = quantile_sorted(g.values, 0.50) - q50;
    const double e75 = quantile_sorted(g.values, 0.75) - q75;
    rep.quantile_mse_25 += e25 * e25;
    rep.quantile_mse_50 += e50 * e50;
    rep.quantile_mse_75 += e75 * e75;
    density_curves.push_back(dens.values);
    quantile_curves.push_back(g.values);
  }
  if (rep.failed_reps > 0.05 * R)
    throw std::runtime_error("run_mc: more than 5% of replications failed");
  const double kept = static_cast<double>(R - rep.failed_reps);
  rep.mise = std::accumulate(rep.per_rep_ise.begin(), rep.per_rep_ise.end(), 0.0) / kept;
  rep.miae = std::accumulate(rep.per_rep_iae.begin(), rep.per_rep_iae.end(), 0.0) / kept;
  rep.quantile_mse_25 /= kept;
  rep.quantile_mse_50 /= kept;
  rep.quantile_mse_75 /= kept;

  const auto mean = [](std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  const auto q10 = [](std::vector<double>& v) { return quantile(v, 0.10); };
  const auto q90 = [](std::vector<double>& v) { return quantile(v, 0.90); };
  rep.density_mean = pointwise(density_curves, mean);
  rep.density_q10 = pointwise(density_curves, q10);
  rep.density_q90 = pointwise(density_curves, q90);
  rep.quantile_mean = pointwise(quantile_curves, mean);
  rep.quantile_q10 = pointwise(quantile_curves, q10);
  rep.quantile_q90 = pointwise(quantile_curves, q90);
  return rep;
}

double implied_rate(const std::vector<std::size_t>& sample_sizes,
                    const std::vector<double>& mse) {
  if (sample_sizes.size() != mse.size() || sample_sizes.size() < 2)
    throw std::invalid_argument("implied_rate: need matching lists of >= 2 points");
  const std::size_t n = sample_sizes.size();
  double mx = 0.0, my = 0.0;
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    lx[i] = std::log(static_cast<double>(sample_sizes[i]));
    ly[i] = std::log(mse[i]);
    mx += lx[i];
    my += ly[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

RateStudy rate_study(const DgpSpec& dgp, const std::vector<std::size_t>& sample_sizes,
                     int reps, const std::vector<double>& probabilities,
                     const McOptions& base) {
  if (sample_sizes.size() < 3)
    throw std::invalid_argument("rate_study: need at least 3 sample sizes");
  RateStudy out;
  out.sample_sizes = sample_sizes;
  out.probabilities = probabilities;
  out.mse.assign(probabilities.size(), std::vector<double>(sample_sizes.size(), 0.0));

  for (std::size_t ni = 0; ni < sample_sizes.size(); ++ni) {
    McOptions opt = base;
    opt.model = McModel::deconvolution;
    opt.n = sample_sizes[ni];
    opt.reps = reps;
    std::vector<QuantileGrid> grids(reps);
#pragma omp parallel for schedule(dynamic)
    for (int r = 0; r < reps; ++r) grids[r] = fit_rep(dgp, opt, r);
    for (std::size_t q = 0; q < probabilities.size(); ++q) {
      const double truth = true_quantile(dgp, probabilities[q]);
      double s = 0.0;
      for (int r = 0; r < reps; ++r) {
        const double e = quantile_sorted(grids[r].values, probabilities[q]) - truth;
        s += e * e;
      }
      out.mse[q][ni] = s / reps;
    }
  }
  out.implied_rate.resize(probabilities.size());
  for (std::size_t q = 0; q < probabilities.size(); ++q)
    out.implied_rate[q] = implied_rate(sample_sizes, out.mse[q]);
  return out;
}

std::vector<SweepPoint> penalization_sweep(const DgpSpec& dgp, std::size_t n,
                                           const std::vector<double>& c_upper_values,
                                           int reps, const McOptions& base) {
  if (c_upper_values.empty())
    throw std::invalid_argument("penalization_sweep: empty penalization list");
  std::vector<SweepPoint> out;
  for (double cu : c_upper_values) {
    if (!(cu > 1.0))
      throw std::invalid_argument("penalization_sweep: penalization constants must exceed 1");
    McOptions opt = base;
    opt.model = McModel::deconvolution;
    opt.n = n;
    opt.reps = reps;
    opt.c_upper = cu;
    opt.c_lower = 1.0 / cu;
    std::vector<QuantileGrid> grids(reps);
#pragma omp parallel for schedule(dynamic)
    for (int r = 0; r < reps; ++r) grids[r] = fit_rep(dgp, opt, r);
    SweepPoint p;
    p.c_upper = cu;
    const double t25 = true_quantile(dgp, 0.25);
    const double t50 = true_quantile(dgp, 0.50);
    const double t75 = true_quantile(dgp, 0.75);
    for (int r = 0; r < reps; ++r) {
      const double e25 = quantile_sorted(grids[r].values, 0.25) - t25;
      const double e50 = quantile_sorted(grids[r].values, 0.50) - t50;
      const double e75 = quantile_sorted(grids[r].values, 0.75) - t75;
      p.mse_q25 += e25 * e25;
      p.mse_q50 += e50 * e50;
      p.mse_q75 += e75 * e75;
    }
    p.mse_q25 /= reps;
    p.mse_q50 /= reps;
    p.mse_q75 /= reps;
    out.push_back(p);
  }
  return out;
}

}  // namespace lvm
