#include "bilevel/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "bilevel/parallel.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {
namespace {

std::uint64_t double_bits(double v) {
  std::uint64_t u;
  std::memcpy(&u, &v, sizeof(u));
  return u;
}

void require_lambda(const SmoothnessProfile& prof, double lambda) {
  if (!(lambda >= 2.0 * prof.l_f1 / prof.mu_g))
    throw std::invalid_argument("lambda must be >= 2 l_f1 / mu_g");
}

double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double ls_slope(const std::vector<double>& xs, const std::vector<double>& ys) {
  const std::size_t n = xs.size();
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= double(n);
  my /= double(n);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < n; ++i) {
    num += (xs[i] - mx) * (ys[i] - my);
    den += (xs[i] - mx) * (xs[i] - mx);
  }
  return num / den;
}

}  // namespace

Eigen::VectorXd surrogate_gradient(const BilevelProblem& p,
                                   const Eigen::VectorXd& x, double lambda,
                                   double tol) {
  require_lambda(p.profile(), lambda);
  const Eigen::VectorXd yl = solve_y_star_lambda(p, x, lambda, tol);
  const Eigen::VectorXd ys = solve_y_star(p, x, tol);
  return p.grad_f_x(x, yl) + lambda * (p.grad_g_x(x, yl) - p.grad_g_x(x, ys));
}

double surrogate_value_gap(const BilevelProblem& p, const Eigen::VectorXd& x,
                           double lambda, double tol) {
  require_lambda(p.profile(), lambda);
  const Eigen::VectorXd yl = solve_y_star_lambda(p, x, lambda, tol);
  const Eigen::VectorXd ys = solve_y_star(p, x, tol);
  const double surrogate =
      p.f(x, yl) + lambda * (p.g(x, yl) - p.g(x, ys));
  const double hyper = p.has_hyper_objective() ? p.hyper_value(x) : p.f(x, ys);
  return std::abs(surrogate - hyper);
}

double v_star_gap(const BilevelProblem& p, const Eigen::VectorXd& x,
                  double lambda, double tol) {
  require_lambda(p.profile(), lambda);
  return (solve_y_star_lambda(p, x, lambda, tol) - solve_y_star(p, x, tol))
      .norm();
}

StationarityReport stationarity_report(const BilevelProblem& p,
                                       const Eigen::VectorXd& x, double lambda,
                                       double tol) {
  StationarityReport rep;
  rep.x = x;
  rep.lambda = lambda;
  const Eigen::VectorXd yl = solve_y_star_lambda(p, x, lambda, tol);
  const Eigen::VectorXd ys = solve_y_star(p, x, tol);
  rep.inner_residual = std::max(
      (p.grad_g_y(x, yl) + p.grad_f_y(x, yl) / lambda).norm() * lambda,
      p.grad_g_y(x, ys).norm());
  rep.grad_surrogate_norm =
      (p.grad_f_x(x, yl) + lambda * (p.grad_g_x(x, yl) - p.grad_g_x(x, ys)))
          .norm();
  rep.grad_F_norm = p.has_hyper_objective() ? p.hyper_grad(x).norm()
                                            : rep.grad_surrogate_norm;
  return rep;
}

Measure make_measure(const BilevelProblem& p, double epsilon) {
  Measure m;
  if (p.has_hyper_objective()) {
    m.grad_norm = [&p](const Eigen::VectorXd& x) {
      return p.hyper_grad(x).norm();
    };
  } else {
    const double lambda_big =
        1e4 * derived_constants(p.profile()).lambda0 / epsilon;
    m.grad_norm = [&p, lambda_big](const Eigen::VectorXd& x) {
      return surrogate_gradient(p, x, lambda_big, 1e-12).norm();
    };
  }
  return m;
}

ErgodicReport ergodic_stationarity(const BilevelProblem& p,
                                   const std::vector<Eigen::VectorXd>& xs,
                                   double lambda, double tol) {
  ErgodicReport rep;
  rep.running_avg_sq.reserve(xs.size());
  double sum = 0.0;
  double min_grad = kInf;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const StationarityReport r = stationarity_report(p, xs[k], lambda, tol);
    sum += r.grad_surrogate_norm * r.grad_surrogate_norm;
    rep.running_avg_sq.push_back(sum / double(k + 1));
    min_grad = std::min(min_grad, r.grad_F_norm);
  }
  rep.min_grad_F = min_grad;
  return rep;
}

BiasCheckResult bias_check(const BilevelProblem& p, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& y_next,
                           const Eigen::VectorXd& z_next, double lambda,
                           double tol) {
  const SmoothnessProfile prof = p.profile();
  require_lambda(prof, lambda);
  const DerivedConstants dc = derived_constants(prof);

  const Eigen::VectorXd yl = solve_y_star_lambda(p, x, lambda, tol);
  const Eigen::VectorXd ys = solve_y_star(p, x, tol);
  const Eigen::VectorXd surrogate =
      p.grad_f_x(x, yl) + lambda * (p.grad_g_x(x, yl) - p.grad_g_x(x, ys));
  const Eigen::VectorXd G =
      p.grad_f_x(x, y_next) +
      lambda * (p.grad_g_x(x, y_next) - p.grad_g_x(x, z_next));

  BiasCheckResult res;
  res.actual = (surrogate - G).norm();
  const double y_err = (y_next - yl).norm();
  const double z_err = (z_next - ys).norm();
  const double v_err = ((y_next - z_next) - (yl - ys)).norm();
  res.bound_uncoupled = (prof.l_f1 + lambda * prof.l_g1) * (y_err + z_err);
  res.bound_coupled = dc.l_y * y_err + lambda * prof.l_g1 * v_err +
                      prof.l_f0 * dc.l_y / (prof.mu_g * lambda);
  return res;
}

// ---- PSGD -------------------------------------------------------------------

PsgdReport psgd_rate_check(const PsgdOptions& opts) {
  if (!(opts.mu > 0.0) || opts.L < opts.mu)
    throw std::invalid_argument("psgd: need 0 < mu <= L");
  const int d = opts.dim;
  Eigen::VectorXd curvature(d);
  for (int i = 0; i < d; ++i)
    curvature[i] =
        d == 1 ? opts.mu
               : opts.mu + (opts.L - opts.mu) * double(i) / double(d - 1);

  const double alpha_fixed =
      opts.alpha > 0.0 ? opts.alpha : 1.0 / (opts.mu + opts.L);
  const double rho = 2.0 * opts.mu * opts.L / (opts.mu + opts.L);
  const double beta = (opts.mu + opts.L) / (opts.mu * opts.L);
  const double gamma0 =
      opts.gamma_offset > 0.0
          ? opts.gamma_offset
          : std::pow(opts.mu + opts.L, 2) / (2.0 * opts.mu * opts.L) + 2.0;

  const Eigen::VectorXd x0 = Eigen::VectorXd::Constant(d, opts.x0_scale);
  const double x0_sq = x0.squaredNorm();
  const double comp_sigma = opts.sigma / std::sqrt(double(d));
  const Eigen::VectorXd origin = Eigen::VectorXd::Zero(d);

  struct Acc {
    std::vector<double> sum, sumsq;
  };
  Acc init;
  init.sum.assign(opts.T + 1, 0.0);
  init.sumsq.assign(opts.T + 1, 0.0);

  Acc acc = parallel_chunked(
      std::uint64_t(opts.seeds), init,
      [&](Acc& a, std::uint64_t s) {
        const std::uint64_t key = rng::key_of(opts.seed, 0x959d, s);
        Eigen::VectorXd x = x0;
        for (int t = 0; t <= opts.T; ++t) {
          const double sq = x.squaredNorm();
          a.sum[t] += sq;
          a.sumsq[t] += sq * sq;
          if (t == opts.T) break;
          const double step = opts.mode == StepMode::kFixed
                                  ? alpha_fixed
                                  : beta / (gamma0 + t);
          Eigen::VectorXd g = curvature.asDiagonal() * x;
          for (int i = 0; i < d; ++i)
            g[i] += comp_sigma *
                    rng::gaussian(key, std::uint64_t(t) * d + i);
          x = project_ball(x - step * g, origin, opts.ball_radius);
        }
      },
      [](Acc& a, const Acc& b) {
        for (std::size_t i = 0; i < a.sum.size(); ++i) {
          a.sum[i] += b.sum[i];
          a.sumsq[i] += b.sumsq[i];
        }
      });

  const double nu =
      std::max(beta * beta * opts.sigma * opts.sigma * opts.L /
                   (2.0 * (beta * rho - 1.0)),
               gamma0 * x0_sq);

  PsgdReport rep;
  rep.pass = true;
  const double n = double(opts.seeds);
  for (int t = 0; t <= opts.T; ++t) {
    PsgdReport::Row row;
    row.t = t;
    row.mean_sq_err = acc.sum[t] / n;
    const double var =
        std::max(0.0, acc.sumsq[t] / n - row.mean_sq_err * row.mean_sq_err);
    row.std_err = std::sqrt(var / n);
    row.bound = opts.mode == StepMode::kFixed
                    ? std::pow(1.0 - opts.mu * alpha_fixed, t) * x0_sq +
                          alpha_fixed * opts.sigma * opts.sigma / opts.mu
                    : nu / (gamma0 + t);
    if (row.mean_sq_err > row.bound + 3.0 * row.std_err) rep.pass = false;
    rep.rows.push_back(row);
  }
  return rep;
}

// ---- stall experiment ----------------------------------------------------------

void GreedyCoordinateProbe::reset(const ChainConfig& cfg) {
  x_ = Eigen::VectorXd::Zero(cfg.dim);
  epsilon_ = cfg.epsilon;
  active_ = 0;
}

void GreedyCoordinateProbe::observe(const OracleResponse& resp) {
  const int revealed = progress_index(resp.grad_g_x, 0.0);
  if (revealed > active_ && revealed <= x_.size()) {
    // support extended: activate the newly revealed coordinate
    for (int j = active_ + 1; j <= revealed; ++j) x_[j - 1] = epsilon_;
    active_ = revealed;
  }
}

int StallReport::seeds_not_full_at(std::uint64_t t) const {
  int n = 0;
  for (const auto& f : full_activation) n += (f > t) ? 1 : 0;
  return n;
}

double StallReport::median_full_activation() const {
  std::vector<double> v(full_activation.begin(), full_activation.end());
  return median_of(std::move(v));
}

bool StallReport::any_censored() const {
  for (const auto& f : full_activation)
    if (f > budget) return true;
  return false;
}

StallReport stall_experiment(
    const StallOptions& opts,
    const std::function<std::unique_ptr<ZeroChainProbe>()>& make_probe) {
  const ChainHardInstance instance(opts.chain);
  StallReport rep;
  rep.budget = opts.budget;
  rep.dim = opts.chain.dim;
  rep.prog_trace.assign(opts.seeds, {});
  rep.full_activation.assign(opts.seeds, opts.budget + 1);

#pragma omp parallel for schedule(dynamic)
  for (int s = 0; s < opts.seeds; ++s) {
    OracleConfig ocfg;
    ocfg.model = NoiseModel::kZeroChain;
    ocfg.p = opts.p;
    ocfg.r = instance.r_eps();
    ocfg.seed = rng::key_of(opts.seed, 0x57a1, std::uint64_t(s));
    ZeroChainOracle oracle(instance, ocfg);

    std::unique_ptr<ZeroChainProbe> probe =
        make_probe ? make_probe()
                   : std::make_unique<GreedyCoordinateProbe>();
    probe->reset(opts.chain);

    std::vector<int>& trace = rep.prog_trace[s];
    trace.reserve(opts.budget);
    const double quarter = opts.chain.epsilon / 4.0;
    std::uint64_t iters = 0;
    for (std::uint64_t t = 0; t < opts.budget; ++t) {
      const Eigen::VectorXd& x = probe->position();
      const int prog = progress_index(x, quarter, opts.chain.epsilon);
      trace.push_back(prog);
      if (prog >= opts.chain.dim) {
        rep.full_activation[s] = t;
        break;
      }
      const Eigen::VectorXd y = oracle.y_hat(x);
      const OracleResponse resp =
          oracle.query_one(x, y, RandomnessTag{t, 0, 0});
      probe->observe(resp);
      ++iters;
    }
    if (oracle.calls() != iters)
      throw std::logic_error("stall_experiment: probe bypassed the oracle");
  }
  return rep;
}

// ---- rate fits -------------------------------------------------------------------

std::int64_t first_hit_calls(const RunRecord& rec, double eps) {
  for (const TraceRow& row : rec.trace)
    if (row.grad_F_norm <= eps) return static_cast<std::int64_t>(row.oracle_calls);
  return -1;
}

RateFit fit_rate(const BilevelProblem& problem, const RateFitOptions& opts) {
  if (opts.epsilons.size() < 3)
    throw std::invalid_argument("fit_rate: need a grid of >= 3 epsilons");
  const int ne = static_cast<int>(opts.epsilons.size());
  const SmoothnessProfile prof = problem.profile();

  RateFit fit;
  fit.epsilons = opts.epsilons;
  fit.calls.assign(ne, std::vector<std::int64_t>(opts.seeds, -1));

  const int cells = ne * opts.seeds;
#pragma omp parallel for schedule(dynamic)
  for (int cell = 0; cell < cells; ++cell) {
    const int ei = cell / opts.seeds;
    const int si = cell % opts.seeds;
    const double eps = opts.epsilons[ei];

    SolverConfig cfg = schedule_for_target(opts.kind, eps, prof,
                                           opts.constants, opts.r);
    if (opts.fixed_T) cfg.T = *opts.fixed_T;
    if (opts.fixed_M) cfg.M = *opts.fixed_M;
    if (opts.fixed_gamma) cfg.gamma = GammaSchedule{false, *opts.fixed_gamma};
    cfg.x0 = opts.x0;

    OracleConfig ocfg;
    ocfg.model = NoiseModel::kGaussian;
    ocfg.sigma_f = opts.sigma_f;
    ocfg.sigma_g = opts.sigma_g;
    ocfg.r = opts.r;
    // cells are keyed by the epsilon value, not its grid position, so
    // extending the grid never perturbs existing cells
    ocfg.seed = rng::key_of(opts.master_seed, double_bits(eps),
                            std::uint64_t(si));
    GaussianOracle oracle(problem, ocfg);

    PenaltySolver solver(problem, oracle, cfg);
    const RunRecord rec = solver.run(make_measure(problem, eps));
    fit.calls[ei][si] = first_hit_calls(rec, eps);
  }

  std::vector<double> log_inv_eps, log_median;
  for (int ei = 0; ei < ne; ++ei) {
    std::vector<double> per_seed;
    for (std::int64_t c : fit.calls[ei]) {
      if (c < 0)
        ++fit.censored;
      else
        per_seed.push_back(double(c));
    }
    const double med = median_of(per_seed);
    fit.median_calls.push_back(med);
    if (!per_seed.empty()) {
      log_inv_eps.push_back(std::log(1.0 / opts.epsilons[ei]));
      log_median.push_back(std::log(med));
    }
  }
  if (log_inv_eps.size() >= 2) fit.slope = ls_slope(log_inv_eps, log_median);

  // bootstrap over seeds, medians recomputed per resample
  if (opts.bootstrap > 0 && fit.censored == 0 && opts.seeds > 1) {
    std::vector<double> slopes;
    slopes.reserve(opts.bootstrap);
    const std::uint64_t key = rng::key_of(opts.master_seed, 0xb007);
    for (int b = 0; b < opts.bootstrap; ++b) {
      std::vector<double> li, lm;
      for (int ei = 0; ei < ne; ++ei) {
        std::vector<double> sample(opts.seeds);
        for (int j = 0; j < opts.seeds; ++j) {
          const auto pick = static_cast<int>(
              rng::u01(key, (std::uint64_t(b) * ne + ei) * opts.seeds + j) *
              opts.seeds);
          sample[j] = double(fit.calls[ei][std::min(pick, opts.seeds - 1)]);
        }
        li.push_back(std::log(1.0 / opts.epsilons[ei]));
        lm.push_back(std::log(median_of(std::move(sample))));
      }
      slopes.push_back(ls_slope(li, lm));
    }
    std::sort(slopes.begin(), slopes.end());
    const auto lo = static_cast<std::size_t>(0.025 * (slopes.size() - 1));
    const auto hi = static_cast<std::size_t>(0.975 * (slopes.size() - 1));
    fit.ci_lo = slopes[lo];
    fit.ci_hi = slopes[hi];
  }
  return fit;
}

}  // namespace bilevel
