#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lvm/assignment.hpp"
#include "lvm/post.hpp"
#include "lvm/shape_ls.hpp"

namespace {

using Clock = std::chrono::steady_clock;

double time_ms(const std::function<void()>& fn, int iters) {
  fn();  // warm up
  const auto t0 = Clock::now();
  for (int i = 0; i < iters; ++i) fn();
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count() / iters;
}

}  // namespace

int main(int argc, char** argv) {
  std::size_t n = argc > 1 ? std::stoul(argv[1]) : 2000;
  std::mt19937_64 rng(12345);
  std::normal_distribution<double> nd;

  lvm::Mat a(n, 3), b(n, 3);
  for (auto& v : a.data()) v = nd(rng);
  for (auto& v : b.data()) v = nd(rng);

  lvm::QuantileGrid g;
  g.values.resize(n);
  for (auto& v : g.values) v = nd(rng);
  std::sort(g.values.begin(), g.values.end());
  std::vector<double> eval(4096);
  for (std::size_t i = 0; i < eval.size(); ++i) eval[i] = -4.0 + 8.0 * i / (eval.size() - 1);

  std::printf("threads: %d, n: %zu\n", omp_get_max_threads(), n);

  const double cost_omp = time_ms([&] { lvm::build_cost(a, b); }, 5);
  const double cost_ser = time_ms([&] { lvm::build_cost_serial(a, b); }, 5);
  std::printf("build_cost      omp %8.2f ms   serial %8.2f ms   speedup %.2fx\n", cost_omp,
              cost_ser, cost_ser / cost_omp);

  const double kde_omp = time_ms([&] { lvm::kernel_density(g, 0.1, eval); }, 5);
  const double kde_ser = time_ms([&] { lvm::kernel_density_serial(g, 0.1, eval); }, 5);
  std::printf("kernel_density  omp %8.2f ms   serial %8.2f ms   speedup %.2fx\n", kde_omp,
              kde_ser, kde_ser / kde_omp);

  // Agreement check: the parallel kernels must be bit-identical.
  const auto c1 = lvm::build_cost(a, b);
  const auto c2 = lvm::build_cost_serial(a, b);
  const auto d1 = lvm::kernel_density(g, 0.1, eval);
  const auto d2 = lvm::kernel_density_serial(g, 0.1, eval);
  const bool same = c1 == c2 && d1.values == d2.values;
  std::printf("bitwise agreement: %s\n", same ? "yes" : "NO");
  return same ? 0 : 1;
}
