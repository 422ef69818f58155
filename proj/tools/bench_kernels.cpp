// Serial vs OpenMP throughput of the row-parallel kernels: factor build,
// factor derivative assembly, and the gradient gathers. The parallel and
// serial paths must agree bit for bit; this binary checks that too.

#include <chrono>
#include <cstdio>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nsgp/factor.hpp"
#include "nsgp/geometry.hpp"
#include "nsgp/rng.hpp"

using namespace nsgp;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <typename F>
double time_best_of(F&& f, int reps) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    auto t0 = Clock::now();
    f();
    best = std::min(best, seconds_since(t0));
  }
  return best;
}

CovParams random_params(int n, Rng& rng, bool elliptic) {
  CovParams p;
  p.kernel = Kernel::exponential;
  p.dim = 2;
  p.sigma = Eigen::VectorXd::Ones(n);
  if (!elliptic) {
    p.alpha.resize(n);
    for (int i = 0; i < n; ++i) p.alpha[i] = std::exp(std::log(0.3) + 0.3 * rng.normal());
    return p;
  }
  p.elliptic = true;
  p.A.resize(n, 3);
  p.detA.resize(n);
  for (int s = 0; s < n; ++s) {
    double e11, e21, e22;
    sym2_exp(std::log(0.3) + 0.3 * rng.normal(), 0.2 * rng.normal(),
             std::log(0.3) + 0.3 * rng.normal(), e11, e21, e22);
    p.A(s, 0) = e11;
    p.A(s, 1) = e21;
    p.A(s, 2) = e22;
    p.detA[s] = e11 * e22 - e21 * e21;
  }
  return p;
}

void bench_case(int n, int m, bool elliptic) {
  Rng rng(7);
  Eigen::MatrixXd coords(n, 2);
  for (int i = 0; i < n; ++i) {
    coords(i, 0) = rng.uniform(0.0, 5.0);
    coords(i, 1) = rng.uniform(0.0, 5.0);
  }
  NeighborDag dag = build_dag(coords, m);
  CovParams p = random_params(n, rng, elliptic);

  const int reps = n <= 2000 ? 5 : 3;
  double t_build_s = time_best_of([&] { build_factor_serial(dag, coords, p); }, reps);
  double t_build_p = time_best_of([&] { build_factor(dag, coords, p); }, reps);
  SparseTriFactor f = build_factor(dag, coords, p);
  double t_der_s = time_best_of(
      [&] { factor_derivative_all_serial(dag, coords, p, f, 1e-6); }, reps);
  double t_der_p =
      time_best_of([&] { factor_derivative_all(dag, coords, p, f, 1e-6); }, reps);
  FactorDerivativeSet ds = factor_derivative_all(dag, coords, p, f, 1e-6);
  Eigen::VectorXd u(n), v(n);
  for (int i = 0; i < n; ++i) {
    u[i] = rng.normal();
    v[i] = rng.normal();
  }
  double t_sw =
      time_best_of([&] { derivative_sandwich(dag, ds, f, u, v); }, reps);

  SparseTriFactor fs = build_factor_serial(dag, coords, p);
  FactorDerivativeSet dss = factor_derivative_all_serial(dag, coords, p, fs, 1e-6);
  const bool identical = f.vals == fs.vals && ds.store == dss.store;

  std::printf(
      "n=%-6d m=%-3d %-9s build %8.3f / %8.3f ms  deriv %8.3f / %8.3f ms  "
      "sandwich %7.3f ms  speedup %4.2fx/%4.2fx  bitwise %s\n",
      n, m, elliptic ? "elliptic" : "scalar", 1e3 * t_build_s, 1e3 * t_build_p,
      1e3 * t_der_s, 1e3 * t_der_p, 1e3 * t_sw, t_build_s / t_build_p,
      t_der_s / t_der_p, identical ? "equal" : "DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
  int threads = 0;
  if (argc > 1) threads = std::stoi(argv[1]);
#ifdef _OPENMP
  if (threads > 0) omp_set_num_threads(threads);
  std::printf("openmp threads: %d (serial / parallel columns)\n",
              threads > 0 ? threads : omp_get_max_threads());
#else
  std::printf("built without openmp; both columns run serial code\n");
#endif
  for (int n : {500, 2000, 8000}) {
    bench_case(n, 5, false);
    bench_case(n, 5, true);
  }
  bench_case(2000, 10, false);
  return 0;
}
