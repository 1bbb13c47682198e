#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "bilevel/oracles.hpp"
#include "bilevel/problems.hpp"

namespace bilevel {

// Euclidean projection onto the ball B(center, radius). Infinite
// radius is the identity.
Eigen::VectorXd project_ball(const Eigen::VectorXd& point,
                             const Eigen::VectorXd& center, double radius);

// Inner step size: either a constant or beta / (1 + t).
struct GammaSchedule {
  bool diminishing = false;
  double value = 0.0;
  double at(int t) const { return diminishing ? value / (1.0 + t) : value; }
};

struct SolverConfig {
  double epsilon = 0.0;   // accuracy target the schedule was built for
  double lambda = 0.0;    // penalty parameter
  double alpha = 0.0;     // outer step size
  GammaSchedule gamma;
  int T = 1;              // inner iterations per outer step
  int M = 1;              // outer batch size
  int K = 1;              // outer steps
  double r = kInf;        // oracle reliability radius
  double r_lambda = 0.0;  // trust region for y - z on the coupled path
  bool smooth_path = false;  // coupled-randomness branch
  bool check_feasibility = true;
  Eigen::VectorXd x0;     // empty -> zeros

  // Enforces the parameter contract: lambda above its floor, r_lambda
  // tied to lambda, alpha below 1/(2 L), positive loop counts.
  void validate(const SmoothnessProfile& profile) const;
};

// Optional measurement hooks; evaluated outside the oracle budget.
struct Measure {
  std::function<double(const Eigen::VectorXd&)> grad_norm;  // |grad F(x)|
  std::function<int(const Eigen::VectorXd&)> progress;      // -1 if absent
};

struct TraceRow {
  int iter = 0;
  std::uint64_t oracle_calls = 0;
  double grad_F_norm = 0.0;
  int prog = -1;
};

struct RunRecord {
  std::vector<TraceRow> trace;          // rows 0..K
  std::vector<Eigen::VectorXd> iterates;  // x^0..x^K
  std::uint64_t oracle_calls = 0;       // total billed to this run
  Eigen::VectorXd x_final, y_final, z_final;
};

// Penalty solver with lower-level coupling: T inner steps track the
// penalized and plain lower-level minimizers (y, z) under anchor-
// centered projections, then one batched gradient step updates x.
class PenaltySolver {
 public:
  PenaltySolver(const BilevelProblem& problem, const Oracle& oracle,
                SolverConfig cfg);

  RunRecord run(const Measure& measure = {});

  // Instrumentation: called after every inner projection pair with
  // (k, t, x^k, v_bar = y_bar - z_bar, v_next = y^{t+1} - z^{t+1}).
  std::function<void(int, int, const Eigen::VectorXd&, const Eigen::VectorXd&,
                     const Eigen::VectorXd&)>
      inner_observer;

  const SolverConfig& config() const { return cfg_; }

 private:
  struct InnerScratch {
    OracleResponse resp[2];
    Eigen::VectorXd h_y, y_bar, z_bar, y_next, z_next;
  };
  void inner_step(int k, int t, const Eigen::VectorXd& x,
                  const Eigen::VectorXd& anchor, Eigen::VectorXd& y,
                  Eigen::VectorXd& z, InnerScratch& scratch);
  Eigen::VectorXd outer_direction(int k, const Eigen::VectorXd& x,
                                  const Eigen::VectorXd& y_next,
                                  const Eigen::VectorXd& z_next) const;

  const BilevelProblem& problem_;
  const Oracle& oracle_;
  SolverConfig cfg_;
};

// Parameter schedules in terms of the target accuracy.
// kUncoupled: variance-bounded oracles; diminishing inner steps,
//             T and M scale as eps^-4, K as eps^-2.
// kCoupled:   mean-squared-smooth oracles; constant inner step
//             gamma ~ eps^2, T, M, K all scale as eps^-2.
enum class ScheduleKind { kUncoupled, kCoupled };

struct ScheduleConstants {
  double c_gamma = 1.0;
  double c_T = 1.0;
  double c_M = 1.0;
  double c_K = 1.0;
  double alpha_fraction = 0.4;  // alpha = fraction / L_surrogate, < 1/2
};

SolverConfig schedule_for_target(ScheduleKind kind, double epsilon,
                                 const SmoothnessProfile& profile,
                                 const ScheduleConstants& constants = {},
                                 double r = kInf);

}  // namespace bilevel
