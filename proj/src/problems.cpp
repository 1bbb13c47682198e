#include "bilevel/problems.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Cholesky>
#include <Eigen/QR>
#include <Eigen/SVD>

#include "bilevel/rng.hpp"

namespace bilevel {

void SmoothnessProfile::validate() const {
  if (!(mu_g > 0.0)) throw std::invalid_argument("profile: mu_g must be > 0");
  if (l_g1 < mu_g) throw std::invalid_argument("profile: l_g1 >= mu_g required");
  if (l_g1_tilde < l_g1)
    throw std::invalid_argument("profile: l_g1_tilde >= l_g1 required");
  if (l_f0 < 0 || l_f1 < 0 || l_g2 < 0 || sigma_f < 0 || sigma_g < 0)
    throw std::invalid_argument("profile: negative constant");
}

DerivedConstants derived_constants(const SmoothnessProfile& p) {
  if (!(p.mu_g > 0.0)) throw std::invalid_argument("derived_constants: mu_g <= 0");
  DerivedConstants c{};
  c.lambda0 = 4.0 * p.l_f0 * p.l_g1 / (p.mu_g * p.mu_g) *
              (p.l_f1 + 2.0 * p.l_f0 * p.l_g2 / p.mu_g);
  c.L_surrogate = 6.0 * p.l_g1 / p.mu_g *
                  (p.l_f1 + p.l_g1 * p.l_g1 / p.mu_g +
                   p.l_f0 * p.l_g1 * p.l_g2 / (p.mu_g * p.mu_g));
  c.D0 = (p.l_f1 + p.l_f1 * p.l_f1 / p.mu_g) * p.l_f1 / p.mu_g;
  c.l_y = p.l_f1 + p.l_g2 * p.l_f0 / p.mu_g;
  c.l_v = p.l_g1 + p.l_f0 * p.l_g2 / p.mu_g;
  c.l_f0_over_mu = p.l_f0 / p.mu_g;
  return c;
}

Eigen::MatrixXd BilevelProblem::hess_g_xy(const Eigen::VectorXd&,
                                          const Eigen::VectorXd&) const {
  throw std::logic_error("second-derivative evaluators not provided");
}
Eigen::MatrixXd BilevelProblem::hess_g_yy(const Eigen::VectorXd&,
                                          const Eigen::VectorXd&) const {
  throw std::logic_error("second-derivative evaluators not provided");
}
Eigen::VectorXd BilevelProblem::y_star(const Eigen::VectorXd&) const {
  throw std::logic_error("closed-form y* not provided");
}
Eigen::VectorXd BilevelProblem::y_star_lambda(const Eigen::VectorXd&, double) const {
  throw std::logic_error("closed-form penalized minimizer not provided");
}
double BilevelProblem::hyper_value(const Eigen::VectorXd&) const {
  throw std::logic_error("closed-form hyperobjective not provided");
}
Eigen::VectorXd BilevelProblem::hyper_grad(const Eigen::VectorXd&) const {
  throw std::logic_error("closed-form hypergradient not provided");
}

Eigen::VectorXd hypergradient_closed_form(const BilevelProblem& problem,
                                          const Eigen::VectorXd& x) {
  if (!problem.has_second_order() || !problem.has_y_star())
    throw std::logic_error(
        "hypergradient_closed_form: needs second derivatives and y*");
  const Eigen::VectorXd ys = problem.y_star(x);
  const Eigen::MatrixXd hyy = problem.hess_g_yy(x, ys);
  Eigen::LLT<Eigen::MatrixXd> llt(hyy);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(
        "hypergradient_closed_form: inner Hessian not positive definite");
  const Eigen::VectorXd corr = llt.solve(problem.grad_f_y(x, ys));
  return problem.grad_f_x(x, ys) - problem.hess_g_xy(x, ys) * corr;
}

namespace {

Eigen::VectorXd descend(const BilevelProblem& p, const Eigen::VectorXd& x,
                        double lambda_inv, double lambda, double step,
                        double tol, int max_iters, Eigen::VectorXd y) {
  // gradient descent on g + lambda_inv * f (lambda_inv = 0 solves for y*)
  for (int it = 0; it < max_iters; ++it) {
    Eigen::VectorXd grad = p.grad_g_y(x, y);
    if (lambda_inv != 0.0) grad += lambda_inv * p.grad_f_y(x, y);
    if (grad.norm() <= tol) return y;
    y -= step * grad;
  }
  (void)lambda;
  throw std::runtime_error("inner solve failed to reach tolerance");
}

}  // namespace

Eigen::VectorXd solve_y_star(const BilevelProblem& p, const Eigen::VectorXd& x,
                             double tol, int max_iters) {
  if (p.has_y_star()) return p.y_star(x);
  const auto prof = p.profile();
  return descend(p, x, 0.0, 0.0, 1.0 / prof.l_g1, tol, max_iters,
                 Eigen::VectorXd::Zero(p.dim_y()));
}

Eigen::VectorXd solve_y_star_lambda(const BilevelProblem& p,
                                    const Eigen::VectorXd& x, double lambda,
                                    double tol, int max_iters) {
  if (p.has_y_star_lambda()) return p.y_star_lambda(x, lambda);
  const auto prof = p.profile();
  const double step = 1.0 / (prof.l_f1 / lambda + prof.l_g1);
  // scaled objective g + f/lambda keeps the step size O(1) in lambda;
  // its gradient norm target must scale accordingly
  Eigen::VectorXd y0 = solve_y_star(p, x, tol, max_iters);
  return descend(p, x, 1.0 / lambda, lambda, step, tol, max_iters,
                 std::move(y0));
}

// ---- QuadraticInstance ----------------------------------------------------

QuadraticInstance::QuadraticInstance(Eigen::MatrixXd A, Eigen::VectorXd b)
    : A_(std::move(A)), b_(std::move(b)) {
  if (b_.size() != A_.rows())
    throw std::invalid_argument("QuadraticInstance: dim mismatch");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A_);
  sv_max_ = svd.singularValues()[0];
}

QuadraticInstance QuadraticInstance::seeded(int dim_x, int dim_y,
                                            std::uint64_t seed, double sv_lo,
                                            double sv_hi, double b_norm) {
  const auto key = rng::key_of(seed, 0x51);
  Eigen::MatrixXd left = random_orthonormal(dim_y, std::min(dim_x, dim_y),
                                            rng::combine(key, 1));
  Eigen::MatrixXd right = random_orthonormal(dim_x, std::min(dim_x, dim_y),
                                             rng::combine(key, 2));
  const int k = std::min(dim_x, dim_y);
  Eigen::VectorXd sv(k);
  for (int i = 0; i < k; ++i)
    sv[i] = (k == 1) ? sv_hi : sv_lo + (sv_hi - sv_lo) * i / double(k - 1);
  Eigen::MatrixXd A = left * sv.asDiagonal() * right.transpose();
  Eigen::VectorXd b(dim_y);
  rng::gaussian_fill(rng::combine(key, 3), 0, b);
  b *= b_norm / b.norm();
  return QuadraticInstance(std::move(A), std::move(b));
}

double QuadraticInstance::f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return 0.5 * x.squaredNorm() + b_.dot(y);
}
Eigen::VectorXd QuadraticInstance::grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
  return x;
}
Eigen::VectorXd QuadraticInstance::grad_f_y(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return b_;
}
double QuadraticInstance::g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return 0.5 * (y - A_ * x).squaredNorm();
}
Eigen::VectorXd QuadraticInstance::grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return -A_.transpose() * (y - A_ * x);
}
Eigen::VectorXd QuadraticInstance::grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return y - A_ * x;
}
Eigen::MatrixXd QuadraticInstance::hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return -A_.transpose();
}
Eigen::MatrixXd QuadraticInstance::hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return Eigen::MatrixXd::Identity(dim_y(), dim_y());
}
Eigen::VectorXd QuadraticInstance::y_star_lambda(const Eigen::VectorXd& x, double lambda) const {
  return A_ * x - b_ / lambda;
}
double QuadraticInstance::hyper_value(const Eigen::VectorXd& x) const {
  return 0.5 * x.squaredNorm() + b_.dot(A_ * x);
}
Eigen::VectorXd QuadraticInstance::hyper_grad(const Eigen::VectorXd& x) const {
  return x + A_.transpose() * b_;
}
SmoothnessProfile QuadraticInstance::profile() const {
  SmoothnessProfile p;
  p.l_f0 = b_.norm();
  p.l_f1 = 1.0;
  p.l_g1 = 1.0 + sv_max_ * sv_max_;
  p.l_g2 = 0.0;
  p.mu_g = 1.0;
  p.l_g1_tilde = p.l_g1;
  return p;
}

// ---- CubicPerturbedInstance -------------------------------------------------

CubicPerturbedInstance::CubicPerturbedInstance(Eigen::MatrixXd A,
                                               Eigen::VectorXd b, double eta,
                                               double kappa)
    : A_(std::move(A)), b_(std::move(b)), eta_(eta), kappa_(kappa) {
  if (b_.size() != A_.rows())
    throw std::invalid_argument("CubicPerturbedInstance: dim mismatch");
  if (!(eta > 0.0 && eta < 0.5))
    throw std::invalid_argument("CubicPerturbedInstance: eta in (0, 1/2)");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A_);
  sv_max_ = svd.singularValues()[0];
}

CubicPerturbedInstance CubicPerturbedInstance::seeded(int dim_x, int dim_y,
                                                      std::uint64_t seed) {
  auto base = QuadraticInstance::seeded(dim_x, dim_y, seed, 0.3, 0.8, 1.0);
  return CubicPerturbedInstance(base.A(), base.b());
}

double CubicPerturbedInstance::invert_m(double target) const {
  // y + eta c'(y) = target; monotone since 1 + eta c'' >= 1 - eta > 0
  double y = target;
  for (int it = 0; it < 200; ++it) {
    const double val = y + eta_ * cp(y) - target;
    if (std::abs(val) < 1e-15 * std::max(1.0, std::abs(target))) break;
    y -= val / (1.0 + eta_ * cpp(y));
  }
  return y;
}

double CubicPerturbedInstance::f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return 0.5 * x.squaredNorm() + b_.dot(y);
}
Eigen::VectorXd CubicPerturbedInstance::grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
  return x;
}
Eigen::VectorXd CubicPerturbedInstance::grad_f_y(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return b_;
}
double CubicPerturbedInstance::g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  double pert = 0.0;
  for (Eigen::Index j = 0; j < y.size(); ++j)
    pert += std::cos(kappa_ * y[j]) / (kappa_ * kappa_);
  return 0.5 * (y - A_ * x).squaredNorm() + eta_ * pert;
}
Eigen::VectorXd CubicPerturbedInstance::grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return -A_.transpose() * (y - A_ * x);
}
Eigen::VectorXd CubicPerturbedInstance::grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  Eigen::VectorXd g = y - A_ * x;
  for (Eigen::Index j = 0; j < y.size(); ++j) g[j] += eta_ * cp(y[j]);
  return g;
}
Eigen::MatrixXd CubicPerturbedInstance::hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return -A_.transpose();
}
Eigen::MatrixXd CubicPerturbedInstance::hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd& y) const {
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(dim_y(), dim_y());
  for (int j = 0; j < dim_y(); ++j) h(j, j) += eta_ * cpp(y[j]);
  return h;
}
Eigen::VectorXd CubicPerturbedInstance::y_star(const Eigen::VectorXd& x) const {
  const Eigen::VectorXd ax = A_ * x;
  Eigen::VectorXd y(dim_y());
  for (int j = 0; j < dim_y(); ++j) y[j] = invert_m(ax[j]);
  return y;
}
double CubicPerturbedInstance::hyper_value(const Eigen::VectorXd& x) const {
  return 0.5 * x.squaredNorm() + b_.dot(y_star(x));
}
Eigen::VectorXd CubicPerturbedInstance::hyper_grad(const Eigen::VectorXd& x) const {
  // d y*_j / d (Ax)_j = 1 / (1 + eta c''(y*_j))
  const Eigen::VectorXd ys = y_star(x);
  Eigen::VectorXd w(dim_y());
  for (int j = 0; j < dim_y(); ++j) w[j] = b_[j] / (1.0 + eta_ * cpp(ys[j]));
  return x + A_.transpose() * w;
}
SmoothnessProfile CubicPerturbedInstance::profile() const {
  SmoothnessProfile p;
  p.l_f0 = b_.norm();
  p.l_f1 = 1.0;
  p.l_g1 = 1.0 + sv_max_ * sv_max_ + eta_;
  p.l_g2 = eta_ * kappa_;
  p.mu_g = 1.0 - eta_;
  p.l_g1_tilde = p.l_g1;
  return p;
}

// ---- ChainHardInstance -------------------------------------------------------

ChainHardInstance::ChainHardInstance(ChainConfig cfg) : cfg_(cfg) {
  profile_ = SmoothnessProfile{};
  profile_.l_f0 = 1.0;
  profile_.l_f1 = 0.0;
  profile_.mu_g = 2.0;
  // representative constants for the construction near the reliable
  // region; the stochastic-oracle smoothness floor is 100
  profile_.l_g1 = 10.0;
  profile_.l_g2 = 10.0;
  profile_.l_g1_tilde = 100.0;
}

double ChainHardInstance::f(const Eigen::VectorXd&, const Eigen::VectorXd& y) const {
  return y[0];
}
Eigen::VectorXd ChainHardInstance::grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
  return Eigen::VectorXd::Zero(x.size());
}
Eigen::VectorXd ChainHardInstance::grad_f_y(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return Eigen::VectorXd::Ones(1);
}
double ChainHardInstance::g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  const double d = y[0] - chain_value(x, cfg_);
  return d * d;
}
Eigen::VectorXd ChainHardInstance::grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  Eigen::VectorXd grad;
  const double F = chain_value_grad(x, cfg_, grad);
  return -2.0 * (y[0] - F) * grad;
}
Eigen::VectorXd ChainHardInstance::grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  Eigen::VectorXd g(1);
  g[0] = 2.0 * (y[0] - chain_value(x, cfg_));
  return g;
}
Eigen::MatrixXd ChainHardInstance::hess_g_xy(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
  Eigen::VectorXd grad;
  chain_value_grad(x, cfg_, grad);
  return -2.0 * grad;
}
Eigen::MatrixXd ChainHardInstance::hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return 2.0 * Eigen::MatrixXd::Identity(1, 1);
}
Eigen::VectorXd ChainHardInstance::y_star(const Eigen::VectorXd& x) const {
  Eigen::VectorXd y(1);
  y[0] = chain_value(x, cfg_);
  return y;
}
Eigen::VectorXd ChainHardInstance::y_star_lambda(const Eigen::VectorXd& x, double lambda) const {
  Eigen::VectorXd y(1);
  y[0] = chain_value(x, cfg_) - 0.5 / lambda;
  return y;
}
double ChainHardInstance::hyper_value(const Eigen::VectorXd& x) const {
  return chain_value(x, cfg_);
}
Eigen::VectorXd ChainHardInstance::hyper_grad(const Eigen::VectorXd& x) const {
  Eigen::VectorXd grad;
  chain_value_grad(x, cfg_, grad);
  return grad;
}
SmoothnessProfile ChainHardInstance::profile() const { return profile_; }

Eigen::VectorXd ChainHardInstance::clipped_mean_gradient(const Eigen::VectorXd& x,
                                                         double y) const {
  Eigen::VectorXd grad;
  const double F = chain_value_grad(x, cfg_, grad);
  const double re = r_eps();
  const double u = (y - F) / re;
  return -2.0 * re * clip_smooth(u) * clip_smooth_deriv(u, 1) * grad;
}

// ---- embedding ---------------------------------------------------------------

void embed_rho(const Eigen::VectorXd& x, double R, Eigen::VectorXd& rho,
               Eigen::MatrixXd& jacobian) {
  if (!(R > 0.0)) throw std::invalid_argument("embed_rho: R must be > 0");
  const double s = std::sqrt(1.0 + x.squaredNorm() / (R * R));
  rho = x / s;
  jacobian = Eigen::MatrixXd::Identity(x.size(), x.size()) / s -
             x * x.transpose() / (R * R * s * s * s);
}

Eigen::MatrixXd random_orthonormal(int rows, int cols, std::uint64_t seed) {
  if (cols > rows)
    throw std::invalid_argument("random_orthonormal: cols > rows");
  Eigen::MatrixXd G(rows, cols);
  const auto key = rng::key_of(seed, 0x0e);
  for (int j = 0; j < cols; ++j)
    for (int i = 0; i < rows; ++i)
      G(i, j) = rng::gaussian(key, std::uint64_t(j) * rows + i);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(rows, cols);
  const double err =
      (Q.transpose() * Q - Eigen::MatrixXd::Identity(cols, cols)).norm();
  if (err > 1e-10)
    throw std::runtime_error("random_orthonormal: orthonormality check failed");
  return Q;
}

EmbeddedInstance::EmbeddedInstance(const EmbeddedInstanceConfig& cfg)
    : EmbeddedInstance(
          random_orthonormal(cfg.ambient_dim, cfg.chain.dim, cfg.seed),
          cfg.chain, cfg.radius()) {}

EmbeddedInstance::EmbeddedInstance(Eigen::MatrixXd U, ChainConfig chain,
                                   double R)
    : U_(std::move(U)), R_(R), inner_(chain) {
  if (!(R_ > 0.0)) throw std::invalid_argument("EmbeddedInstance: R must be > 0");
  const double err =
      (U_.transpose() * U_ -
       Eigen::MatrixXd::Identity(U_.cols(), U_.cols())).norm();
  if (err > 1e-10)
    throw std::invalid_argument("EmbeddedInstance: U is not orthonormal");
  if (U_.cols() != chain.dim)
    throw std::invalid_argument("EmbeddedInstance: U columns != chain dim");
}

Eigen::VectorXd EmbeddedInstance::pullback(const Eigen::VectorXd& x) const {
  const double s = std::sqrt(1.0 + x.squaredNorm() / (R_ * R_));
  return U_.transpose() * (x / s);
}

double EmbeddedInstance::f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return y[0] + 0.1 * x.squaredNorm();
}
Eigen::VectorXd EmbeddedInstance::grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd&) const {
  return 0.2 * x;
}
Eigen::VectorXd EmbeddedInstance::grad_f_y(const Eigen::VectorXd&, const Eigen::VectorXd&) const {
  return Eigen::VectorXd::Ones(1);
}
double EmbeddedInstance::g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return inner_.g(pullback(x), y);
}
Eigen::VectorXd EmbeddedInstance::grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  Eigen::VectorXd rho;
  Eigen::MatrixXd J;
  embed_rho(x, R_, rho, J);
  return J.transpose() * (U_ * inner_.grad_g_x(U_.transpose() * rho, y));
}
Eigen::VectorXd EmbeddedInstance::grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const {
  return inner_.grad_g_y(pullback(x), y);
}
Eigen::VectorXd EmbeddedInstance::y_star(const Eigen::VectorXd& x) const {
  return inner_.y_star(pullback(x));
}
double EmbeddedInstance::hyper_value(const Eigen::VectorXd& x) const {
  return inner_.hyper_value(pullback(x)) + 0.1 * x.squaredNorm();
}
Eigen::VectorXd EmbeddedInstance::hyper_grad(const Eigen::VectorXd& x) const {
  Eigen::VectorXd rho;
  Eigen::MatrixXd J;
  embed_rho(x, R_, rho, J);
  return J.transpose() * (U_ * inner_.hyper_grad(U_.transpose() * rho)) +
         0.2 * x;
}
SmoothnessProfile EmbeddedInstance::profile() const {
  SmoothnessProfile p = inner_.profile();
  p.l_f1 = std::max(p.l_f1, 0.2);
  return p;
}

}  // namespace bilevel
