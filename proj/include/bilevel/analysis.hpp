#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "bilevel/oracles.hpp"
#include "bilevel/problems.hpp"
#include "bilevel/solver.hpp"

namespace bilevel {

// ---- ground-truth stationarity -------------------------------------------

// Gradient of the penalty surrogate at x:
//   grad_x f(x, y_l) + lambda (grad_x g(x, y_l) - grad_x g(x, y_s)),
// with y_l, y_s the penalized / plain inner minimizers solved to `tol`.
// Requires lambda >= 2 l_f1 / mu_g.
Eigen::VectorXd surrogate_gradient(const BilevelProblem& p,
                                   const Eigen::VectorXd& x, double lambda,
                                   double tol = 1e-10);

// |L_lambda(x, y_l) - F(x)|; bounded by D0 / lambda.
double surrogate_value_gap(const BilevelProblem& p, const Eigen::VectorXd& x,
                           double lambda, double tol = 1e-10);

// |y_lambda*(x) - y*(x)|; bounded by 2 l_f0 / (lambda mu_g).
double v_star_gap(const BilevelProblem& p, const Eigen::VectorXd& x,
                  double lambda, double tol = 1e-10);

struct StationarityReport {
  Eigen::VectorXd x;
  double grad_F_norm = 0.0;
  double grad_surrogate_norm = 0.0;
  double lambda = 0.0;
  double inner_residual = 0.0;  // gradient norm left by the inner solves
};

StationarityReport stationarity_report(const BilevelProblem& p,
                                       const Eigen::VectorXd& x, double lambda,
                                       double tol = 1e-10);

// Measurement hooks for solver runs. grad_norm uses the closed-form
// hypergradient when available, otherwise the surrogate at a large
// penalty (1e4 * lambda0 / epsilon, inner tol 1e-12). Never consumes
// solver-billed oracle calls.
Measure make_measure(const BilevelProblem& p, double epsilon);

// Running average of |grad surrogate|^2 along recorded iterates plus
// the min-over-k gradient norm.
struct ErgodicReport {
  std::vector<double> running_avg_sq;
  double min_grad_F = 0.0;
};
ErgodicReport ergodic_stationarity(const BilevelProblem& p,
                                   const std::vector<Eigen::VectorXd>& xs,
                                   double lambda, double tol = 1e-10);

// ---- bias bounds ------------------------------------------------------------

struct BiasCheckResult {
  double actual = 0.0;           // |grad surrogate - G|
  double bound_uncoupled = 0.0;  // (l_f1 + lambda l_g1)(y-err + z-err)
  double bound_coupled = 0.0;    // l_y y-err + lambda l_g1 v-err + l_f0 l_y/(mu lambda)
  double residual_uncoupled() const { return bound_uncoupled - actual; }
  double residual_coupled() const { return bound_coupled - actual; }
};

BiasCheckResult bias_check(const BilevelProblem& p, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y_next,
                           const Eigen::VectorXd& z_next, double lambda,
                           double tol = 1e-10);

// ---- projected SGD rate certification ----------------------------------------

enum class StepMode { kFixed, kDiminishing };

struct PsgdOptions {
  int dim = 10;
  double mu = 1.0;
  double L = 10.0;
  StepMode mode = StepMode::kFixed;
  int T = 200;
  int seeds = 1000;
  double sigma = 1.0;        // total noise std: E|noise|^2 = sigma^2
  double alpha = 0.0;        // fixed mode; 0 -> 1/(mu+L)
  double gamma_offset = 0.0; // diminishing mode; 0 -> (mu+L)^2/(2 mu L) + 2
  double ball_radius = kInf; // projection ball around the minimizer
  double x0_scale = 1.0;
  std::uint64_t seed = 7;
};

struct PsgdReport {
  struct Row {
    int t;
    double mean_sq_err;
    double bound;
    double std_err;
  };
  std::vector<Row> rows;
  bool pass = false;
};

// Checks the strongly-convex PSGD error bounds on a diagonal quadratic:
// fixed step:        E|x_t - x*|^2 <= (1 - mu a)^t |x_0 - x*|^2 + a s^2/mu,
// diminishing step:  E|x_t - x*|^2 <= nu / (gamma + t).
PsgdReport psgd_rate_check(const PsgdOptions& opts);

// ---- zero-chain stall experiment ----------------------------------------------

// A probe queries the zero-chain oracle once per iteration and may
// move its point based only on past responses (zero-respecting).
class ZeroChainProbe {
 public:
  virtual ~ZeroChainProbe() = default;
  virtual void reset(const ChainConfig& cfg) = 0;
  virtual const Eigen::VectorXd& position() const = 0;
  virtual void observe(const OracleResponse& resp) = 0;
};

// Activates coordinate j (sets x_j = eps) as soon as a returned
// x-gradient has support reaching j. One informative response per
// activation; with progression probability 1 it completes in dim steps.
class GreedyCoordinateProbe final : public ZeroChainProbe {
 public:
  void reset(const ChainConfig& cfg) override;
  const Eigen::VectorXd& position() const override { return x_; }
  void observe(const OracleResponse& resp) override;

 private:
  Eigen::VectorXd x_;
  double epsilon_ = 0.0;
  int active_ = 0;
};

struct StallOptions {
  ChainConfig chain;
  double p = 0.01;
  std::uint64_t budget = 10000;
  int seeds = 20;
  std::uint64_t seed = 11;
};

struct StallReport {
  std::vector<std::vector<int>> prog_trace;      // per seed, per iteration
  std::vector<std::uint64_t> full_activation;    // budget+1 when censored
  std::uint64_t budget = 0;
  int dim = 0;

  int seeds_not_full_at(std::uint64_t t) const;
  double median_full_activation() const;  // censored entries count as budget+1
  bool any_censored() const;
};

StallReport stall_experiment(
    const StallOptions& opts,
    const std::function<std::unique_ptr<ZeroChainProbe>()>& make_probe = {});

// ---- oracle-complexity rate fits -----------------------------------------------

struct RateFitOptions {
  std::vector<double> epsilons;
  int seeds = 10;
  std::uint64_t master_seed = 1;
  ScheduleKind kind = ScheduleKind::kCoupled;
  ScheduleConstants constants = {};
  double sigma_f = 0.0, sigma_g = 0.0;
  double r = kInf;
  Eigen::VectorXd x0;
  // deterministic-regime overrides (used by the zero-noise baseline)
  std::optional<int> fixed_T, fixed_M;
  std::optional<double> fixed_gamma;
  int bootstrap = 200;
};

struct RateFit {
  std::vector<double> epsilons;
  std::vector<double> median_calls;
  std::vector<std::vector<std::int64_t>> calls;  // per eps, per seed; -1 censored
  double slope = 0.0;
  double ci_lo = 0.0, ci_hi = 0.0;
  int censored = 0;  // a nonzero count invalidates slope acceptance
};

RateFit fit_rate(const BilevelProblem& problem, const RateFitOptions& opts);

// First row of a run whose measured gradient norm is <= eps; the
// oracle-call count at that row, or -1 if never reached.
std::int64_t first_hit_calls(const RunRecord& rec, double eps);

}  // namespace bilevel
