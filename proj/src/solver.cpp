#include "bilevel/solver.hpp"

#include <cmath>
#include <stdexcept>

#include "bilevel/parallel.hpp"

namespace bilevel {

Eigen::VectorXd project_ball(const Eigen::VectorXd& point,
                             const Eigen::VectorXd& center, double radius) {
  if (!(radius > 0.0)) throw std::invalid_argument("project_ball: radius <= 0");
  if (!std::isfinite(radius)) return point;
  const Eigen::VectorXd d = point - center;
  const double n = d.norm();
  if (n <= radius) return point;
  return center + (radius / n) * d;
}

void SolverConfig::validate(const SmoothnessProfile& profile) const {
  profile.validate();
  if (!(epsilon > 0.0)) throw std::invalid_argument("solver: epsilon must be > 0");
  if (T < 1 || M < 1 || K < 1)
    throw std::invalid_argument("solver: T, M, K must be >= 1");
  if (!(r > 0.0)) throw std::invalid_argument("solver: r must be > 0");
  const DerivedConstants dc = derived_constants(profile);
  const double floor_r = std::isfinite(r)
                             ? 6.0 * profile.l_f0 / (profile.mu_g * r)
                             : 0.0;
  const double lambda_floor = std::max(dc.lambda0 / epsilon, floor_r);
  if (lambda < lambda_floor * (1.0 - 1e-12))
    throw std::invalid_argument(
        "solver: lambda below its floor max(lambda0/epsilon, 6 l_f0/(mu_g r))");
  const double want_rl = dc.r_lambda(lambda);
  if (std::abs(r_lambda - want_rl) > 1e-9 * std::max(1.0, want_rl))
    throw std::invalid_argument(
        "solver: r_lambda must equal l_f0 / (mu_g * lambda)");
  if (!(alpha > 0.0) || alpha >= 0.5 / dc.L_surrogate)
    throw std::invalid_argument("solver: alpha must lie in (0, 1/(2L))");
  if (gamma.value <= 0.0)
    throw std::invalid_argument("solver: gamma must be positive");
}

PenaltySolver::PenaltySolver(const BilevelProblem& problem,
                             const Oracle& oracle, SolverConfig cfg)
    : problem_(problem), oracle_(oracle), cfg_(std::move(cfg)) {
  cfg_.validate(problem.profile());
  if (std::isfinite(cfg_.r) && std::isfinite(oracle.config().r) &&
      cfg_.r > oracle.config().r)
    throw std::invalid_argument("solver: r exceeds the oracle's radius");
}

namespace {

void check_within(const Eigen::VectorXd& v, const Eigen::VectorXd& center,
                  double radius, const char* what) {
  if (!std::isfinite(radius)) return;
  if ((v - center).norm() > radius * (1.0 + 1e-9) + 1e-12)
    throw std::logic_error(std::string("feasibility violated: ") + what);
}

}  // namespace

void PenaltySolver::inner_step(int k, int t, const Eigen::VectorXd& x,
                               const Eigen::VectorXd& anchor,
                               Eigen::VectorXd& y, Eigen::VectorXd& z,
                               InnerScratch& s) {
  // one batch answers both lower-level estimators with one shared draw
  QueryPoint pts[2];
  pts[0] = QueryPoint{&x, &y, false, true, false, true, false};
  pts[1] = QueryPoint{&x, &z, false, false, false, true, false};
  oracle_.query(pts, 2, /*shared=*/true,
                RandomnessTag{std::uint64_t(k), std::uint64_t(t), 1}, s.resp);

  const double gamma_t = cfg_.gamma.at(t);
  s.h_y.noalias() = s.resp[0].grad_f_y / cfg_.lambda + s.resp[0].grad_g_y;
  s.y_bar.noalias() = y - gamma_t * s.h_y;
  s.z_bar.noalias() = z - gamma_t * s.resp[1].grad_g_y;

  s.y_next = project_ball(s.y_bar, anchor, 2.0 * cfg_.r / 3.0);
  if (cfg_.smooth_path) {
    // shift z by the projection displacement, then trust-region project
    s.z_next = project_ball(s.z_bar + (s.y_next - s.y_bar), s.y_next,
                            cfg_.r_lambda);
  } else {
    s.z_next = project_ball(s.z_bar, anchor, cfg_.r / 2.0);
  }

  if (inner_observer)
    inner_observer(k, t, x, s.y_bar - s.z_bar, s.y_next - s.z_next);
  if (cfg_.check_feasibility) {
    check_within(s.y_next, anchor, 2.0 * cfg_.r / 3.0, "y within anchor ball");
    if (cfg_.smooth_path)
      check_within(s.z_next, s.y_next, cfg_.r_lambda, "z within trust region");
    else
      check_within(s.z_next, anchor, cfg_.r / 2.0, "z within anchor ball");
  }
  y.swap(s.y_next);
  z.swap(s.z_next);
}

Eigen::VectorXd PenaltySolver::outer_direction(
    int k, const Eigen::VectorXd& x, const Eigen::VectorXd& y_next,
    const Eigen::VectorXd& z_next) const {
  struct Sum {
    Eigen::VectorXd v;
    OracleResponse fr, gr[2];  // per-chunk scratch, reused across samples
  };
  Sum init;
  init.v = Eigen::VectorXd::Zero(x.size());
  Sum total = parallel_chunked(
      std::uint64_t(cfg_.M), init,
      [&](Sum& s, std::uint64_t m) {
        QueryPoint fp{&x, &y_next, true, false, false, false, false};
        oracle_.query(&fp, 1, false, RandomnessTag{std::uint64_t(k), m, 2},
                      &s.fr);

        QueryPoint gp[2];
        gp[0] = QueryPoint{&x, &y_next, false, false, true, false, false};
        gp[1] = QueryPoint{&x, &z_next, false, false, true, false, false};
        oracle_.query(gp, 2, /*shared=*/cfg_.smooth_path,
                      RandomnessTag{std::uint64_t(k), m, 3}, s.gr);

        s.v += s.fr.grad_f_x +
               cfg_.lambda * (s.gr[0].grad_g_x - s.gr[1].grad_g_x);
      },
      [](Sum& a, const Sum& b) { a.v += b.v; });
  return total.v / double(cfg_.M);
}

RunRecord PenaltySolver::run(const Measure& measure) {
  const std::uint64_t calls_at_start = oracle_.calls();
  const int dx = problem_.dim_x();

  Eigen::VectorXd x = cfg_.x0.size() > 0 ? cfg_.x0 : Eigen::VectorXd::Zero(dx);
  if (x.size() != dx) throw std::invalid_argument("solver: x0 dimension mismatch");

  Eigen::VectorXd y = oracle_.y_hat(x);
  Eigen::VectorXd z = y;
  InnerScratch scratch;

  RunRecord rec;
  rec.trace.reserve(cfg_.K + 1);
  rec.iterates.reserve(cfg_.K + 1);
  auto record = [&](int k) {
    TraceRow row;
    row.iter = k;
    row.oracle_calls = oracle_.calls() - calls_at_start;
    row.grad_F_norm = measure.grad_norm ? measure.grad_norm(x) : std::nan("");
    row.prog = measure.progress ? measure.progress(x) : -1;
    rec.trace.push_back(row);
    rec.iterates.push_back(x);
  };
  record(0);

  for (int k = 0; k < cfg_.K; ++k) {
    const Eigen::VectorXd anchor = oracle_.y_hat(x);

    // warm start: carry the previous terminal iterates, re-projected
    Eigen::VectorXd y0 = project_ball(y, anchor, 2.0 * cfg_.r / 3.0);
    const Eigen::VectorXd delta_y = y0 - y;
    Eigen::VectorXd z0 =
        cfg_.smooth_path ? project_ball(z + delta_y, y0, cfg_.r_lambda)
                         : project_ball(z, anchor, cfg_.r / 2.0);
    y = std::move(y0);
    z = std::move(z0);

    for (int t = 0; t < cfg_.T; ++t) inner_step(k, t, x, anchor, y, z, scratch);

    x -= cfg_.alpha * outer_direction(k, x, y, z);
    record(k + 1);
  }

  rec.oracle_calls = oracle_.calls() - calls_at_start;
  rec.x_final = x;
  rec.y_final = y;
  rec.z_final = z;
  return rec;
}

SolverConfig schedule_for_target(ScheduleKind kind, double epsilon,
                                 const SmoothnessProfile& profile,
                                 const ScheduleConstants& constants,
                                 double r) {
  if (!(epsilon > 0.0))
    throw std::invalid_argument("schedule: epsilon must be > 0");
  profile.validate();
  const DerivedConstants dc = derived_constants(profile);

  SolverConfig cfg;
  cfg.epsilon = epsilon;
  cfg.r = r;
  const double floor_r =
      std::isfinite(r) ? 6.0 * profile.l_f0 / (profile.mu_g * r) : 0.0;
  cfg.lambda = std::max(dc.lambda0 / epsilon, floor_r);
  cfg.r_lambda = dc.r_lambda(cfg.lambda);
  cfg.alpha = constants.alpha_fraction / dc.L_surrogate;

  const double inv2 = 1.0 / (epsilon * epsilon);
  const double inv4 = inv2 * inv2;
  cfg.K = static_cast<int>(std::ceil(constants.c_K * inv2));
  if (kind == ScheduleKind::kCoupled) {
    cfg.smooth_path = true;
    cfg.gamma = GammaSchedule{false, constants.c_gamma * epsilon * epsilon};
    cfg.T = static_cast<int>(std::ceil(constants.c_T * inv2));
    cfg.M = static_cast<int>(std::ceil(constants.c_M * inv2));
  } else {
    cfg.smooth_path = false;
    const double c_inner = profile.l_f1 + cfg.lambda * profile.l_g1;
    cfg.gamma =
        GammaSchedule{true, 2.0 / profile.mu_g + cfg.lambda / c_inner};
    cfg.T = static_cast<int>(std::ceil(constants.c_T * inv4));
    cfg.M = static_cast<int>(std::ceil(constants.c_M * inv4));
  }
  return cfg;
}

}  // namespace bilevel
