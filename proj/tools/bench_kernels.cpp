// Compares the OpenMP-parallel production kernels against the serial
// reference implementations: chain value/gradient, ramp-table versus
// direct quadrature, and parallel versus serial Monte Carlo moments.

#include <chrono>
#include <cstdio>

#include <omp.h>

#include "bilevel/kernels.hpp"
#include "bilevel/oracles.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/reference.hpp"
#include "bilevel/rng.hpp"

namespace {

using bilevel::ChainConfig;

double now() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

template <typename F>
double time_it(F&& f, int reps) {
  const double t0 = now();
  for (int i = 0; i < reps; ++i) f();
  return (now() - t0) / reps;
}

Eigen::VectorXd random_state(const ChainConfig& cfg, std::uint64_t seed) {
  Eigen::VectorXd x(cfg.dim);
  for (int i = 0; i < cfg.dim; ++i)
    x[i] = cfg.epsilon * (2.0 * bilevel::rng::u01(seed, i) - 1.0);
  return x;
}

}  // namespace

int main() {
  std::printf("threads: %d\n\n", omp_get_max_threads());

  {
    const ChainConfig cfg(0.02, 2500);
    const Eigen::VectorXd x = random_state(cfg, 1);
    Eigen::VectorXd grad;
    volatile double sink = 0.0;
    const double t_par = time_it(
        [&] { sink = bilevel::chain_value_grad(x, cfg, grad); }, 50);
    const double t_ser = time_it(
        [&] { sink = bilevel::reference::chain_value_grad(x, cfg).sum(); }, 50);
    (void)sink;
    std::printf("chain gradient, dim %d: parallel %.3f ms, serial %.3f ms "
                "(x%.2f)\n",
                cfg.dim, 1e3 * t_par, 1e3 * t_ser, t_ser / t_par);
  }

  {
    volatile double sink = 0.0;
    const double t_tab = time_it(
        [&] {
          double s = 0.0;
          for (int i = 0; i < 2000; ++i) s += bilevel::ramp(0.25 + i * 1.25e-4);
          sink = s;
        },
        20);
    const double t_quad = time_it(
        [&] {
          double s = 0.0;
          for (int i = 0; i < 2000; ++i)
            s += bilevel::reference::ramp(0.25 + i * 1.25e-4, 1e-10);
          sink = s;
        },
        1);
    (void)sink;
    std::printf("ramp, 2000 evaluations: table %.3f ms, quadrature %.1f ms "
                "(x%.0f)\n",
                1e3 * t_tab, 1e3 * t_quad, t_quad / t_tab);
  }

  {
    const ChainConfig cfg(0.2, 25);
    const bilevel::ChainHardInstance instance(cfg);
    bilevel::OracleConfig ocfg;
    ocfg.model = bilevel::NoiseModel::kZeroChain;
    ocfg.p = 0.05;
    ocfg.r = instance.r_eps();
    const bilevel::ZeroChainOracle oracle(instance, ocfg);
    const Eigen::VectorXd x = random_state(cfg, 7);
    const Eigen::VectorXd y = instance.y_star(x);

    const int saved = omp_get_max_threads();
    const double t_par = time_it(
        [&] { bilevel::estimate_moments(oracle, x, y, 20000); }, 3);
    omp_set_num_threads(1);
    const double t_ser = time_it(
        [&] { bilevel::estimate_moments(oracle, x, y, 20000); }, 3);
    omp_set_num_threads(saved);
    std::printf("oracle moments, 2e4 samples: parallel %.1f ms, serial %.1f ms "
                "(x%.2f)\n",
                1e3 * t_par, 1e3 * t_ser, t_ser / t_par);
  }
  return 0;
}
