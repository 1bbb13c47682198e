#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bilevel/kernels.hpp"
#include "bilevel/reference.hpp"
#include "bilevel/rng.hpp"

using namespace bilevel;

namespace {

constexpr double kE = 2.718281828459045235;
constexpr double kSqrtE = 1.6487212707001281468;

bool close(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max(1.0, std::abs(b));
}

double u(std::uint64_t k, std::uint64_t c) { return rng::u01(k, c); }

}  // namespace

TEST_CASE("psi matches its defining expression") {
  CHECK(psi(0.5) == 0.0);
  CHECK(psi(-3.0) == 0.0);
  CHECK(psi(1.0) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(psi(0.75) == doctest::Approx(std::exp(-3.0)).epsilon(1e-14));
  // saturates toward e
  CHECK(psi(1e6) == doctest::Approx(kE).epsilon(1e-10));
}

TEST_CASE("phi_gauss value and derivative anchors") {
  const double at0 = std::sqrt(kE * M_PI / 2.0);
  CHECK(phi_gauss(0.0) == doctest::Approx(at0).epsilon(1e-13));
  CHECK(close(phi_gauss(0.0), 2.066366, 1e-6));
  CHECK(std::abs(phi_gauss(50.0) - std::sqrt(2.0 * M_PI * kE)) < 1e-12);
  CHECK(phi_gauss_deriv(0.0, 1) == doctest::Approx(kSqrtE).epsilon(1e-15));
}

TEST_CASE("phi_gauss agrees with the quadrature oracle") {
  for (double t : {-8.0, -2.0, -0.5, 0.0, 0.3, 1.0, 2.5, 6.0}) {
    const double quad = reference::phi_gauss(t);
    CHECK(phi_gauss(t) == doctest::Approx(quad).epsilon(1e-11));
  }
}

TEST_CASE("clip_smooth identity region and symmetry") {
  CHECK(clip_smooth(0.3) == 0.3);
  CHECK(clip_smooth(-0.5) == -0.5);
  CHECK(clip_smooth(0.0) == 0.0);
  for (double t : {0.7, 1.3, 4.0, 25.0})
    CHECK(clip_smooth(-t) == doctest::Approx(-clip_smooth(t)).epsilon(1e-15));
}

TEST_CASE("clip_smooth beyond the identity region: quadrature oracle and frozen value") {
  // regression constant computed once by adaptive quadrature of psi
  const double kClipAt10 = 1.3599232787386755;
  CHECK(clip_smooth(10.0) == doctest::Approx(kClipAt10).epsilon(1e-10));
  CHECK(clip_smooth(10.0) > 0.5);
  CHECK(clip_smooth(10.0) < 2.0);
  for (double t : {0.6, 0.9, 1.5, 3.0, 10.0, 200.0}) {
    const double quad = reference::clip_smooth(t);
    CHECK(clip_smooth(t) == doctest::Approx(quad).epsilon(1e-10));
  }
}

TEST_CASE("scalar kernel bounds on a dense grid") {
  const int n = 20001;
  for (int i = 0; i < n; ++i) {
    const double t = -10.0 + 20.0 * i / (n - 1);
    const double v = psi(t);
    CHECK(v >= 0.0);
    CHECK(v <= kE * (1 + 1e-12));
    const double d1 = psi_deriv(t, 1);
    CHECK(d1 >= 0.0);
    CHECK(d1 <= std::sqrt(54.0 / kE) + 1e-9);
    CHECK(std::abs(psi_deriv(t, 2)) <= 32.5);

    const double p = phi_gauss(t);
    CHECK(p >= 0.0);
    CHECK(p <= std::sqrt(2.0 * M_PI * kE) + 1e-12);
    const double p1 = phi_gauss_deriv(t, 1);
    CHECK(p1 >= 0.0);
    CHECK(p1 <= kSqrtE);
    CHECK(std::abs(phi_gauss_deriv(t, 2)) <= 1.0 + 1e-12);

    const double c = clip_smooth(t);
    CHECK(std::abs(c) < 2.0);
    const double c1 = clip_smooth_deriv(t, 1);
    CHECK(c1 >= 0.0);
    CHECK(c1 <= 1.0);
    CHECK(std::abs(clip_smooth_deriv(t, 2)) <= std::sqrt(54.0 / (kE * kE * kE)) + 1e-9);
    CHECK(std::abs(clip_smooth_deriv(t, 3)) <= 32.5 / kE + 1e-9);
  }
}

TEST_CASE("psi(t) * phi'(u) >= 1 for t >= 1, |u| <= 1") {
  for (int i = 0; i <= 100; ++i)
    for (int j = 0; j <= 100; ++j) {
      const double t = 1.0 + 4.0 * i / 100.0;
      const double uu = -1.0 + 2.0 * j / 100.0;
      CHECK(psi(t) * phi_gauss_deriv(uu, 1) >= 1.0 - 1e-12);
    }
}

TEST_CASE("analytic derivatives match central differences") {
  const std::uint64_t key = rng::key_of(42, 1);
  int checked = 0;
  for (int i = 0; i < 100; ++i) {
    // stay away from the branch point at 1/2 where FD stencils straddle
    const double t = 0.56 + 2.5 * u(key, i);
    CHECK(close(reference::central_diff([](double s) { return psi(s); }, t),
                psi_deriv(t, 1), 1e-5));
    CHECK(close(
        reference::central_diff([](double s) { return psi_deriv(s, 1); }, t),
        psi_deriv(t, 2), 1e-5));
    const double tt = -3.0 + 6.0 * u(key, 1000 + i);
    CHECK(close(
        reference::central_diff([](double s) { return phi_gauss(s); }, tt),
        phi_gauss_deriv(tt, 1), 1e-5));
    CHECK(close(reference::central_diff(
                    [](double s) { return clip_smooth_deriv(s, 1); }, t),
                clip_smooth_deriv(t, 2), 1e-5));
    CHECK(close(reference::central_diff(
                    [](double s) { return clip_smooth_deriv(s, 2); }, t),
                clip_smooth_deriv(t, 3), 1e-4));
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("ramp endpoints, monotonicity, quadrature agreement") {
  CHECK(ramp(0.25) == 0.0);
  CHECK(ramp(0.1) == 0.0);
  CHECK(ramp(0.5) == 1.0);
  CHECK(ramp(1.0) == 1.0);
  CHECK(QuadratureTable::instance().normalizer() > 0.0);

  double prev = -1.0;
  for (int i = 0; i <= 400; ++i) {
    const double t = 0.25 + 0.25 * i / 400.0;
    const double v = ramp(t);
    CHECK(v >= prev - 1e-15);
    prev = v;
  }
  // relative fidelity wherever the value is representable on the
  // table's absolute scale; the super-exponential tail below 1e-3 is
  // held to an absolute floor instead
  for (int i = 1; i < 250; ++i) {
    const double t = 0.2501 + (0.4999 - 0.2501) * i / 250.0;
    const double tab = ramp(t);
    const double quad = reference::ramp(t);
    if (quad >= 1e-3)
      CHECK(std::abs(tab - quad) <= 1e-10 * quad);
    else
      CHECK(std::abs(tab - quad) <= 1e-12);
  }
}

TEST_CASE("progress index") {
  Eigen::VectorXd zero = Eigen::VectorXd::Zero(4);
  CHECK(progress_index(zero, 0.5) == 0);
  Eigen::VectorXd a(2);
  a << 0.3, 0.1;
  CHECK(progress_index(a, 0.2) == 1);
  Eigen::VectorXd b(3);
  b << 0.3, 0.25, 0.0;
  CHECK(progress_index(b, 0.2) == 2);
  // monotone non-increasing in the threshold
  const std::uint64_t key = rng::key_of(3, 9);
  for (int i = 0; i < 200; ++i) {
    Eigen::VectorXd x(6);
    for (int j = 0; j < 6; ++j) x[j] = 2.0 * u(key, 6 * i + j) - 1.0;
    int prev = progress_index(x, 0.0);
    for (double alpha : {0.1, 0.3, 0.5, 0.9}) {
      const int cur = progress_index(x, alpha);
      CHECK(cur <= prev);
      prev = cur;
    }
  }
}

TEST_CASE("chain terms at zero") {
  const ChainConfig cfg(0.1, 8);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(8);
  CHECK(chain_term(2, zero, cfg) == 0.0);
  const double expect = std::sqrt(kE * M_PI / 2.0);
  CHECK(chain_term(1, zero, cfg) == doctest::Approx(expect).epsilon(1e-13));
  CHECK(chain_value(zero, cfg) ==
        doctest::Approx(cfg.epsilon * cfg.epsilon * expect).epsilon(1e-13));
  CHECK_THROWS(chain_term(0, zero, cfg));
  CHECK_THROWS(chain_term(9, zero, cfg));
}

TEST_CASE("chain gradients match finite differences") {
  const ChainConfig cfg(0.25, 8);
  const std::uint64_t key = rng::key_of(17, 0);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd x(8);
    for (int j = 0; j < 8; ++j)
      x[j] = cfg.epsilon * (2.0 * u(key, 8 * trial + j) - 1.0);

    for (int i : {1, 4, 8}) {
      const Eigen::VectorXd g = chain_term_grad(i, x, cfg);
      const Eigen::VectorXd fd = reference::central_diff_grad(
          [&](const Eigen::VectorXd& p) { return chain_term(i, p, cfg); }, x,
          1e-6);
      CHECK((g - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));
    }
    Eigen::VectorXd grad;
    chain_value_grad(x, cfg, grad);
    const Eigen::VectorXd fd = reference::central_diff_grad(
        [&](const Eigen::VectorXd& p) { return chain_value(p, cfg); }, x, 1e-6);
    CHECK((grad - fd).norm() <= 1e-6 * std::max(1.0, fd.norm()));
  }
}

TEST_CASE("parallel chain evaluation equals the serial reference") {
  const ChainConfig cfg(0.04, 625);
  const std::uint64_t key = rng::key_of(5, 5);
  Eigen::VectorXd x(cfg.dim);
  for (int j = 0; j < cfg.dim; ++j)
    x[j] = cfg.epsilon * (2.0 * u(key, j) - 1.0);
  Eigen::VectorXd grad;
  const double F = chain_value_grad(x, cfg, grad);
  CHECK(F == doctest::Approx(reference::chain_value(x, cfg)).epsilon(1e-13));
  CHECK((grad - reference::chain_value_grad(x, cfg)).norm() <=
        1e-13 * grad.norm());
}

TEST_CASE("chain gradient sup-norm bound 23 eps") {
  const ChainConfig cfg(0.2, 25);
  const std::uint64_t key = rng::key_of(23, 1);
  Eigen::VectorXd x(cfg.dim), grad;
  for (int trial = 0; trial < 10000; ++trial) {
    for (int j = 0; j < cfg.dim; ++j)
      x[j] = cfg.epsilon * (2.0 * u(key, std::uint64_t(trial) * cfg.dim + j) - 1.0);
    chain_value_grad(x, cfg, grad);
    CHECK(grad.lpNorm<Eigen::Infinity>() <= 23.0 * cfg.epsilon);
  }
}

TEST_CASE("large-coordinate gradient lower bound") {
  // whenever |x_i| >= eps and |x_{i+1}| < eps, coordinate i+1's entry of
  // the gradient exceeds eps in magnitude
  const ChainConfig cfg(0.2, 10);
  const std::uint64_t key = rng::key_of(29, 2);
  Eigen::VectorXd x(cfg.dim), grad;
  int found = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    for (int j = 0; j < cfg.dim; ++j)
      x[j] = 2.0 * cfg.epsilon * (2.0 * u(key, std::uint64_t(trial) * cfg.dim + j) - 1.0);
    chain_value_grad(x, cfg, grad);
    for (int i = 0; i + 1 < cfg.dim; ++i) {
      if (std::abs(x[i]) >= cfg.epsilon && std::abs(x[i + 1]) < cfg.epsilon) {
        CHECK(std::abs(grad[i + 1]) > cfg.epsilon);
        ++found;
      }
    }
  }
  CHECK(found > 100);
}

TEST_CASE("value gap at the origin against a coarse grid search") {
  const ChainConfig cfg(0.3, 5);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(5);
  const double f0 = chain_value(zero, cfg);
  double lowest = f0;
  Eigen::VectorXd x(5);
  const double levels[] = {-2.0, -1.0, 0.0, 1.0, 2.0};
  for (int a = 0; a < 5; ++a)
    for (int b = 0; b < 5; ++b)
      for (int c = 0; c < 5; ++c)
        for (int d = 0; d < 5; ++d)
          for (int e = 0; e < 5; ++e) {
            x << levels[a] * cfg.epsilon, levels[b] * cfg.epsilon,
                levels[c] * cfg.epsilon, levels[d] * cfg.epsilon,
                levels[e] * cfg.epsilon;
            lowest = std::min(lowest, chain_value(x, cfg));
          }
  CHECK(f0 - lowest <= 12.0 * cfg.epsilon * cfg.epsilon * cfg.dim);
}

TEST_CASE("smooth indicator sandwich and endpoints") {
  const ChainConfig cfg(0.2, 6);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(6);

  // all coordinates at or below eps/4 from position i on: exactly 1
  x << 0.3, 0.2, 0.04, 0.0, 0.05, 0.01;
  CHECK(smooth_indicator(3, x, cfg) == 1.0);
  // some coordinate at or above eps/2 from position i on: exactly 0
  x << 0.0, 0.0, 0.0, 0.11, 0.0, 0.0;
  CHECK(smooth_indicator(2, x, cfg) == 0.0);

  const std::uint64_t key = rng::key_of(31, 3);
  for (int trial = 0; trial < 500; ++trial) {
    for (int j = 0; j < 6; ++j)
      x[j] = 1.2 * cfg.epsilon * (2.0 * u(key, 6 * trial + j) - 1.0);
    const int p4 = progress_index(x, cfg.epsilon / 4.0, cfg.epsilon);
    const int p2 = progress_index(x, cfg.epsilon / 2.0, cfg.epsilon);
    Eigen::VectorXd h;
    smooth_indicator_all(x, cfg, h);
    for (int i = 1; i <= 6; ++i) {
      const double lo = (i > p4) ? 1.0 : 0.0;
      const double hi = (i > p2) ? 1.0 : 0.0;
      CHECK(h[i - 1] >= lo - 1e-15);
      CHECK(h[i - 1] <= hi + 1e-15);
      CHECK(h[i - 1] == smooth_indicator(i, x, cfg));
    }
  }
}

TEST_CASE("smooth indicator gradient matches finite differences") {
  const ChainConfig cfg(0.25, 5);
  const std::uint64_t key = rng::key_of(37, 4);
  int tested = 0;
  for (int trial = 0; trial < 200 && tested < 100; ++trial) {
    Eigen::VectorXd x(5);
    bool ok = true;
    for (int j = 0; j < 5; ++j) {
      x[j] = 1.2 * cfg.epsilon * (2.0 * u(key, 5 * trial + j) - 1.0);
      if (std::abs(x[j]) < 1e-3) ok = false;  // |.| kink at zero
    }
    if (!ok) continue;
    for (int i = 1; i <= 5; ++i) {
      const Eigen::VectorXd g = smooth_indicator_grad(i, x, cfg);
      const Eigen::VectorXd fd = reference::central_diff_grad(
          [&](const Eigen::VectorXd& p) { return smooth_indicator(i, p, cfg); },
          x, 1e-7);  // small step: third derivatives blow up near the ramp edges
      CHECK((g - fd).norm() <= 1e-5 * std::max(1.0, fd.norm()));
    }
    ++tested;
  }
  CHECK(tested >= 50);
}

TEST_CASE("masked chain derivatives vanish exactly off the active front") {
  const ChainConfig cfg(0.2, 8);
  const std::uint64_t key = rng::key_of(41, 5);
  Eigen::VectorXd x(8), h;
  for (int trial = 0; trial < 1000; ++trial) {
    for (int j = 0; j < 8; ++j)
      x[j] = 1.2 * cfg.epsilon * (2.0 * u(key, 8 * trial + j) - 1.0);
    const int front = progress_index(x, cfg.epsilon / 2.0, cfg.epsilon) + 1;
    smooth_indicator_all(x, cfg, h);
    for (int i = 1; i <= 8; ++i) {
      if (i == front) continue;
      for (int a = 0; a <= 3; ++a)
        for (int b = 0; a + b <= 3; ++b)
          CHECK(chain_term_partial(i, a, b, x, cfg) * h[i - 1] == 0.0);
    }
  }
}
