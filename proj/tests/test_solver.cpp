#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <atomic>
#include <cmath>

#include "bilevel/analysis.hpp"
#include "bilevel/oracles.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/rng.hpp"
#include "bilevel/solver.hpp"

using namespace bilevel;

namespace {

Eigen::VectorXd rand_vec(std::uint64_t key, std::uint64_t ctr, int dim,
                         double scale) {
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i)
    v[i] = scale * (2.0 * rng::u01(key, ctr + std::uint64_t(i)) - 1.0);
  return v;
}

// mirrors the deterministic mean of the outer estimator
Eigen::VectorXd mean_outer_gradient(const BilevelProblem& p,
                                    const Eigen::VectorXd& x,
                                    const Eigen::VectorXd& y,
                                    const Eigen::VectorXd& z, double lambda) {
  return p.grad_f_x(x, y) + lambda * (p.grad_g_x(x, y) - p.grad_g_x(x, z));
}

SolverConfig base_config(const QuadraticInstance& q, double eps, bool smooth) {
  const DerivedConstants dc = derived_constants(q.profile());
  SolverConfig cfg;
  cfg.epsilon = eps;
  cfg.lambda = dc.lambda0 / eps;
  cfg.r_lambda = dc.r_lambda(cfg.lambda);
  cfg.alpha = 0.4 / dc.L_surrogate;
  cfg.gamma = GammaSchedule{false, 0.2};
  cfg.T = 30;
  cfg.M = 2;
  cfg.K = 10;
  cfg.smooth_path = smooth;
  return cfg;
}

}  // namespace

TEST_CASE("ball projection") {
  Eigen::VectorXd p(2), c(2);
  p << 3.0, 4.0;
  c << 0.0, 0.0;
  const Eigen::VectorXd proj = project_ball(p, c, 1.0);
  CHECK(proj[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(proj[1] == doctest::Approx(0.8).epsilon(1e-15));

  Eigen::VectorXd inside(2);
  inside << 0.2, -0.1;
  CHECK((project_ball(inside, c, 1.0) - inside).norm() == 0.0);
  CHECK((project_ball(p, c, kInf) - p).norm() == 0.0);
  CHECK_THROWS(project_ball(p, c, 0.0));
}

TEST_CASE("projection onto a ball shrinks the distance to interior points") {
  const std::uint64_t key = rng::key_of(51, 0);
  for (int trial = 0; trial < 10000; ++trial) {
    const Eigen::VectorXd v = rand_vec(key, 16 * trial, 5, 3.0);
    Eigen::VectorXd u = rand_vec(key, 16 * trial + 8, 5, 3.0);
    const double t =
        v.norm() * (0.05 + 0.95 * rng::u01(key, 200000 + trial));
    if (u.norm() > t) u *= (t / u.norm()) * rng::u01(key, 300000 + trial);
    // now |u| <= t <= |v|
    const Eigen::VectorXd proj = (t / v.norm()) * v;
    CHECK((proj - u).norm() <= (v - u).norm() * (1.0 + 1e-12));
  }
}

TEST_CASE("schedules fill the contract") {
  SmoothnessProfile prof;
  prof.l_f0 = 1.0;
  prof.l_f1 = 1.0;
  prof.l_g1 = 1.0;
  prof.mu_g = 1.0;
  prof.l_g1_tilde = 1.0;
  const double lambda0 = derived_constants(prof).lambda0;  // = 4

  SUBCASE("coupled schedule at eps = 0.1 with unit constants") {
    const double r = 5.0;
    const SolverConfig cfg =
        schedule_for_target(ScheduleKind::kCoupled, 0.1, prof, {}, r);
    CHECK(cfg.lambda ==
          doctest::Approx(std::max(lambda0 * 10.0, 6.0 / (1.0 * r))));
    CHECK(cfg.T == 100);
    CHECK(cfg.M == 100);
    CHECK(cfg.K == 100);
    CHECK(cfg.gamma.at(0) == doctest::Approx(0.01));
    CHECK(cfg.gamma.at(7) == doctest::Approx(0.01));  // constant step
    CHECK(cfg.smooth_path);
    CHECK(cfg.r_lambda == doctest::Approx(prof.l_f0 / (prof.mu_g * cfg.lambda)));
    CHECK_NOTHROW(cfg.validate(prof));
  }

  SUBCASE("infinite radius removes the radius floor") {
    const SolverConfig cfg =
        schedule_for_target(ScheduleKind::kCoupled, 0.1, prof, {}, kInf);
    CHECK(cfg.lambda == doctest::Approx(lambda0 / 0.1));
  }

  SUBCASE("uncoupled schedule scales inner work as eps^-4") {
    const SolverConfig cfg =
        schedule_for_target(ScheduleKind::kUncoupled, 0.25, prof, {}, kInf);
    CHECK(cfg.T == 256);
    CHECK(cfg.M == 256);
    CHECK(cfg.K == 16);
    CHECK_FALSE(cfg.smooth_path);
    // diminishing step beta / (1 + t)
    const double beta =
        2.0 / prof.mu_g + cfg.lambda / (prof.l_f1 + cfg.lambda * prof.l_g1);
    CHECK(cfg.gamma.at(0) == doctest::Approx(beta));
    CHECK(cfg.gamma.at(3) == doctest::Approx(beta / 4.0));
    CHECK_NOTHROW(cfg.validate(prof));
  }

  SUBCASE("invariant violations are rejected") {
    SolverConfig cfg = schedule_for_target(ScheduleKind::kCoupled, 0.1, prof);
    cfg.lambda *= 0.5;  // below the floor
    CHECK_THROWS(cfg.validate(prof));
    cfg = schedule_for_target(ScheduleKind::kCoupled, 0.1, prof);
    cfg.r_lambda *= 2.0;  // breaks the tie to lambda
    CHECK_THROWS(cfg.validate(prof));
    cfg = schedule_for_target(ScheduleKind::kCoupled, 0.1, prof);
    cfg.alpha = 10.0;  // above 1/(2L)
    CHECK_THROWS(cfg.validate(prof));
  }
}

TEST_CASE("fully stationary start is a fixed point") {
  // b = 0: the anchor, both inner minimizers, and the hypergradient all
  // vanish at the origin, so nothing moves under zero noise
  const Eigen::MatrixXd A = 0.5 * Eigen::MatrixXd::Identity(3, 3);
  const QuadraticInstance q(A, Eigen::VectorXd::Zero(3));
  OracleConfig ocfg;
  const GaussianOracle oracle(q, ocfg);
  SolverConfig cfg = base_config(q, 0.1, true);
  cfg.lambda = std::max(cfg.lambda, 1.0);  // lambda0 = 0 when l_f0 = 0
  cfg.r_lambda = q.profile().l_f0 / cfg.lambda;
  // r_lambda = 0 is not a usable trust region when l_f0 = 0; keep the
  // uncoupled branch instead
  cfg.smooth_path = false;
  cfg.K = 3;
  PenaltySolver solver(q, oracle, cfg);
  const RunRecord rec = solver.run(make_measure(q, 0.1));
  CHECK(rec.x_final.norm() == 0.0);
  CHECK(rec.y_final.norm() == 0.0);
  CHECK(rec.z_final.norm() == 0.0);
}

TEST_CASE("zero-noise inner loop contracts geometrically") {
  const auto q = QuadraticInstance::seeded(4, 4, 3, 0.2, 0.5, 1.0);
  OracleConfig ocfg;  // zero noise
  const GaussianOracle oracle(q, ocfg);

  SolverConfig cfg = base_config(q, 0.1, false);
  cfg.K = 1;
  cfg.M = 1;
  const double gamma = cfg.gamma.value;  // 0.2 constant
  const double mu_g = q.profile().mu_g;

  auto terminal_error = [&](int T) {
    SolverConfig c = cfg;
    c.T = T;
    PenaltySolver s(q, oracle, c);
    const RunRecord rec = s.run();
    const Eigen::VectorXd x0 = Eigen::VectorXd::Zero(4);
    return (rec.y_final - q.y_star_lambda(x0, c.lambda)).norm();
  };
  // the anchor equals y*, so the initial error is |y* - y*_lambda|
  const double err0 =
      (q.y_star_lambda(Eigen::VectorXd::Zero(4), cfg.lambda) -
       q.y_star(Eigen::VectorXd::Zero(4)))
          .norm();
  for (int T : {5, 10, 20}) {
    const double bound = std::pow(1.0 - mu_g * gamma / 2.0, T) * err0;
    CHECK(terminal_error(T) <= bound * (1.0 + 1e-9));
  }
}

TEST_CASE("coupled path keeps v inside the trust region and contracts toward v*") {
  const auto q = QuadraticInstance::seeded(5, 5, 11, 0.2, 0.5, 1.0);
  OracleConfig ocfg;
  ocfg.sigma_f = 0.05;
  ocfg.sigma_g = 0.05;
  ocfg.seed = 17;
  const GaussianOracle oracle(q, ocfg);

  SolverConfig cfg = base_config(q, 0.1, true);
  cfg.K = 5;
  PenaltySolver solver(q, oracle, cfg);

  // v*(x) = -b / lambda for this family, independent of x
  const Eigen::VectorXd v_star = -q.b() / cfg.lambda;
  int observed = 0;
  solver.inner_observer = [&](int, int, const Eigen::VectorXd&,
                              const Eigen::VectorXd& v_bar,
                              const Eigen::VectorXd& v_next) {
    CHECK((v_next - v_star).norm() <=
          (v_bar - v_star).norm() * (1.0 + 1e-12));
    CHECK(v_next.norm() <= cfg.r_lambda * (1.0 + 1e-9));
    ++observed;
  };
  solver.run();
  CHECK(observed == cfg.K * cfg.T);
}

TEST_CASE("randomness coupling contract per path") {
  const auto q = QuadraticInstance::seeded(3, 3, 7, 0.2, 0.5, 1.0);
  OracleConfig ocfg;
  ocfg.sigma_g = 0.1;
  GaussianOracle oracle(q, ocfg);

  for (bool smooth : {true, false}) {
    SolverConfig cfg = base_config(q, 0.1, smooth);
    cfg.K = 2;
    int shared_pairs = 0, indep_pairs = 0, singles = 0;
    oracle.on_query = [&](int n, bool shared) {
      if (n == 2 && shared) ++shared_pairs;
      if (n == 2 && !shared) ++indep_pairs;
      if (n == 1) ++singles;
    };
    PenaltySolver solver(q, oracle, cfg);
    solver.run();
    oracle.on_query = nullptr;

    // the lower-level pair always shares its draw; the outer difference
    // pair shares exactly on the coupled path
    CHECK(singles == cfg.K * cfg.M);
    if (smooth) {
      CHECK(shared_pairs == cfg.K * (cfg.T + cfg.M));
      CHECK(indep_pairs == 0);
    } else {
      CHECK(shared_pairs == cfg.K * cfg.T);
      CHECK(indep_pairs == cfg.K * cfg.M);
    }
  }
}

TEST_CASE("oracle-call accounting is exact") {
  const auto q = QuadraticInstance::seeded(3, 3, 7, 0.2, 0.5, 1.0);
  OracleConfig ocfg;
  ocfg.sigma_g = 0.1;
  const GaussianOracle oracle(q, ocfg);
  SolverConfig cfg = base_config(q, 0.1, true);
  cfg.K = 4;
  cfg.T = 13;
  cfg.M = 5;
  PenaltySolver solver(q, oracle, cfg);
  const RunRecord rec = solver.run(make_measure(q, 0.1));
  CHECK(rec.oracle_calls ==
        std::uint64_t(cfg.K) * (2 * std::uint64_t(cfg.T) + 3 * std::uint64_t(cfg.M)));
  // the trace bills cumulative calls per outer step
  CHECK(rec.trace.front().oracle_calls == 0);
  CHECK(rec.trace.back().oracle_calls == rec.oracle_calls);
  CHECK(rec.trace[1].oracle_calls == rec.oracle_calls / 4);
}

TEST_CASE("identical config and seed give bit-identical runs") {
  const auto q = QuadraticInstance::seeded(4, 4, 9, 0.2, 0.5, 1.0);
  OracleConfig ocfg;
  ocfg.sigma_f = 0.1;
  ocfg.sigma_g = 0.1;
  ocfg.seed = 1234;
  SolverConfig cfg = base_config(q, 0.1, true);
  cfg.K = 6;

  auto run_once = [&](std::uint64_t seed) {
    OracleConfig oc = ocfg;
    oc.seed = seed;
    const GaussianOracle oracle(q, oc);
    PenaltySolver solver(q, oracle, cfg);
    return solver.run(make_measure(q, 0.1));
  };
  const RunRecord a = run_once(1234), b = run_once(1234), c = run_once(99);
  CHECK((a.x_final - b.x_final).norm() == 0.0);
  for (std::size_t k = 0; k < a.trace.size(); ++k)
    CHECK(a.trace[k].grad_F_norm == b.trace[k].grad_F_norm);
  CHECK((a.x_final - c.x_final).norm() > 0.0);
}

TEST_CASE("batching a deterministic oracle is a no-op") {
  const auto q = QuadraticInstance::seeded(4, 4, 10, 0.2, 0.5, 1.0);
  const GaussianOracle oracle(q, OracleConfig{});  // sigma = 0, r = inf

  auto run_with_M = [&](int M) {
    SolverConfig cfg = base_config(q, 0.1, true);
    cfg.K = 8;
    cfg.M = M;
    PenaltySolver solver(q, oracle, cfg);
    return solver.run();
  };
  const RunRecord m1 = run_with_M(1), m8 = run_with_M(8);
  for (std::size_t k = 0; k < m1.iterates.size(); ++k)
    CHECK((m1.iterates[k] - m8.iterates[k]).norm() <=
          1e-11 * std::max(1.0, m1.iterates[k].norm()));
}

TEST_CASE("outer estimator variance stays inside the envelopes") {
  const auto q = QuadraticInstance::seeded(5, 5, 12, 0.2, 0.5, 1.0);
  const SmoothnessProfile prof = q.profile();
  const double lambda = 40.0;
  const double r_lambda = prof.l_f0 / (prof.mu_g * lambda);

  OracleConfig ocfg;
  ocfg.sigma_f = 0.3;
  ocfg.sigma_g = 0.3;
  ocfg.seed = 5;
  const GaussianOracle oracle(q, ocfg);

  const std::uint64_t key = rng::key_of(60, 1);
  const Eigen::VectorXd x = rand_vec(key, 0, 5, 1.0);
  // admissible state: y near the penalized minimizer, z within the
  // trust region of y
  const Eigen::VectorXd y = q.y_star_lambda(x, lambda);
  const Eigen::VectorXd z =
      y - r_lambda * rng::unit_vector(rng::key_of(61, 1), 0, 5);
  const Eigen::VectorXd mean = mean_outer_gradient(q, x, y, z, lambda);

  const int n = 100000;
  for (bool shared : {true, false}) {
    double sum_sq = 0.0;
    for (int i = 0; i < n; ++i) {
      QueryPoint fp{&x, &y, true, false, false, false, false};
      OracleResponse fr;
      oracle.query(&fp, 1, false, {std::uint64_t(i), 0, 10}, &fr);
      QueryPoint gp[2] = {{&x, &y, false, false, true, false, false},
                          {&x, &z, false, false, true, false, false}};
      OracleResponse gr[2];
      oracle.query(gp, 2, shared, {std::uint64_t(i), 1, 10}, gr);
      const Eigen::VectorXd h =
          fr.grad_f_x + lambda * (gr[0].grad_g_x - gr[1].grad_g_x);
      sum_sq += (h - mean).squaredNorm();
    }
    const double var = sum_sq / n;  // M = 1 estimator
    const double env_uncoupled =
        2.0 * ocfg.sigma_f * ocfg.sigma_f +
        8.0 * lambda * lambda * ocfg.sigma_g * ocfg.sigma_g;
    CHECK(var <= env_uncoupled);
    if (shared) {
      const double env_coupled =
          2.0 * ocfg.sigma_f * ocfg.sigma_f +
          8.0 * prof.l_g1_tilde * prof.l_g1_tilde * prof.l_f0 * prof.l_f0 /
              (prof.mu_g * prof.mu_g);
      CHECK(var <= env_coupled);
    }
  }
}

TEST_CASE("deterministic run reaches tight stationarity") {
  const auto q = QuadraticInstance::seeded(5, 5, 2024, 0.15, 0.3, 0.5);
  const GaussianOracle oracle(q, OracleConfig{});
  SolverConfig cfg = base_config(q, 0.01, true);
  cfg.lambda = 1e4;
  cfg.r_lambda = q.profile().l_f0 / cfg.lambda;
  cfg.T = 60;
  cfg.M = 1;
  cfg.K = 500;
  cfg.x0 = Eigen::VectorXd::Constant(5, 1.0);
  PenaltySolver solver(q, oracle, cfg);
  const RunRecord rec = solver.run(make_measure(q, 0.01));
  double lowest = kInf;
  for (const auto& row : rec.trace) lowest = std::min(lowest, row.grad_F_norm);
  CHECK(lowest <= 1e-3);
}

TEST_CASE("solver rejects a radius wider than the oracle's") {
  const auto q = QuadraticInstance::seeded(3, 3, 1, 0.2, 0.5, 1.0);
  OracleConfig ocfg;
  ocfg.r = 1.0;
  const GaussianOracle oracle(q, ocfg);
  SolverConfig cfg = base_config(q, 0.1, true);
  cfg.r = 2.0;
  cfg.lambda = std::max(cfg.lambda,
                        6.0 * q.profile().l_f0 / (q.profile().mu_g * cfg.r));
  cfg.r_lambda = q.profile().l_f0 / (q.profile().mu_g * cfg.lambda);
  CHECK_THROWS(PenaltySolver(q, oracle, cfg));
}

TEST_CASE("finite-radius run stays feasible and in-region") {
  const auto q = QuadraticInstance::seeded(4, 4, 77, 0.2, 0.5, 1.0);
  const SmoothnessProfile prof = q.profile();
  const DerivedConstants dc = derived_constants(prof);

  const double eps = 0.1;
  // radius chosen so the floor keeps lambda at lambda0/eps and
  // r_lambda <= r/12; every projected query then stays within r
  const double r = 12.0 * prof.l_f0 / (prof.mu_g * (dc.lambda0 / eps));

  OracleConfig ocfg;
  ocfg.sigma_f = 0.05;
  ocfg.sigma_g = 0.05;
  ocfg.r = r;
  ocfg.seed = 4;

  // instrumented oracle records the worst query excursion from y*(x)
  struct Watch final : GaussianOracle {
    Watch(const BilevelProblem& p, OracleConfig c) : GaussianOracle(p, c) {}
    mutable std::atomic<double> worst{0.0};
    void respond(const QueryPoint& pt, std::uint64_t zeta, std::uint64_t xi,
                 OracleResponse& out) const override {
      const double d = (*pt.y - problem().y_star(*pt.x)).norm() / config().r;
      double cur = worst.load();
      while (d > cur && !worst.compare_exchange_weak(cur, d)) {
      }
      GaussianOracle::respond(pt, zeta, xi, out);
    }
  } oracle(q, ocfg);

  for (bool smooth : {true, false}) {
    SolverConfig cfg = base_config(q, eps, smooth);
    cfg.r = r;
    cfg.K = 5;
    PenaltySolver solver(q, oracle, cfg);
    CHECK_NOTHROW(solver.run());
  }
  CHECK(oracle.worst.load() <= 1.0);
}
