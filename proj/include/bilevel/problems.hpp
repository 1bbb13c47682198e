#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>

#include <Eigen/Core>

#include "bilevel/kernels.hpp"

namespace bilevel {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Smoothness and noise constants characterizing a problem/oracle pair.
struct SmoothnessProfile {
  double l_f0 = 0.0;   // bound on |grad_y f|
  double l_f1 = 0.0;   // joint smoothness of f
  double l_g1 = 0.0;   // joint smoothness of g
  double l_g2 = 0.0;   // Lipschitz constant of g's second derivatives
  double mu_g = 0.0;   // strong convexity of g in y
  double l_g1_tilde = kInf;  // mean-squared smoothness of the g oracle
  double sigma_f = 0.0;
  double sigma_g = 0.0;

  void validate() const;  // mu_g > 0, l_g1 >= mu_g, l_g1_tilde >= l_g1
};

// Constants derived from a profile: penalty floor, surrogate
// smoothness, value-gap constant, and the bias/contraction moduli.
struct DerivedConstants {
  double lambda0;      // penalty floor scale: lambda >= lambda0 / epsilon
  double L_surrogate;  // smoothness of the surrogate objective
  double D0;           // |surrogate value - hyperobjective| <= D0 / lambda
  double l_y;          // bias modulus for the y-error term
  double l_v;          // contraction modulus for v = y - z
  double l_f0_over_mu; // r_lambda numerator

  double r_lambda(double lambda) const { return l_f0_over_mu / lambda; }
};

DerivedConstants derived_constants(const SmoothnessProfile& p);

// Deterministic evaluation interface for one bilevel problem
//   min_x f(x, y*(x))  s.t.  y*(x) = argmin_y g(x, y).
// Second derivatives and closed forms are optional; query the has_*
// flags before use. Instances are immutable after construction and all
// evaluators are pure.
class BilevelProblem {
 public:
  virtual ~BilevelProblem() = default;

  virtual int dim_x() const = 0;
  virtual int dim_y() const = 0;

  virtual double f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd grad_f_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;

  virtual double g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;
  virtual Eigen::VectorXd grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const = 0;

  virtual bool has_second_order() const { return false; }
  // d^2 g / dx dy, shaped dim_x x dim_y.
  virtual Eigen::MatrixXd hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const;
  virtual Eigen::MatrixXd hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const;

  virtual bool has_y_star() const { return false; }
  virtual Eigen::VectorXd y_star(const Eigen::VectorXd&) const;

  virtual bool has_y_star_lambda() const { return false; }
  virtual Eigen::VectorXd y_star_lambda(const Eigen::VectorXd&, double lambda) const;

  virtual bool has_hyper_objective() const { return false; }
  virtual double hyper_value(const Eigen::VectorXd&) const;
  virtual Eigen::VectorXd hyper_grad(const Eigen::VectorXd&) const;

  virtual SmoothnessProfile profile() const = 0;
};

// Hypergradient assembled from the implicit-function expression
//   grad_x f - hess_xy g [hess_yy g]^{-1} grad_y f   at y = y*(x).
// Throws if second derivatives / y* are unavailable or the inner
// Hessian is not positive definite.
Eigen::VectorXd hypergradient_closed_form(const BilevelProblem& problem,
                                          const Eigen::VectorXd& x);

// Deterministic inner solves (gradient descent to tolerance). Used by
// measurement code only, never by the stochastic solver.
Eigen::VectorXd solve_y_star(const BilevelProblem& p, const Eigen::VectorXd& x,
                             double tol = 1e-10, int max_iters = 2'000'000);
Eigen::VectorXd solve_y_star_lambda(const BilevelProblem& p,
                                    const Eigen::VectorXd& x, double lambda,
                                    double tol = 1e-10,
                                    int max_iters = 2'000'000);

// ---- analytic quadratic family ------------------------------------------
//
// f(x,y) = 0.5 |x|^2 + b.y,  g(x,y) = 0.5 |y - A x|^2.
// Everything is available in closed form: y* = Ax, y*_lambda = Ax - b/lambda,
// hypergradient x + A^T b.
class QuadraticInstance final : public BilevelProblem {
 public:
  QuadraticInstance(Eigen::MatrixXd A, Eigen::VectorXd b);
  // A seeded with singular values on [sv_lo, sv_hi], |b| = b_norm.
  static QuadraticInstance seeded(int dim_x, int dim_y, std::uint64_t seed,
                                  double sv_lo = 0.15, double sv_hi = 0.3,
                                  double b_norm = 0.5);

  int dim_x() const override { return static_cast<int>(A_.cols()); }
  int dim_y() const override { return static_cast<int>(A_.rows()); }

  double f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  double g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;

  bool has_second_order() const override { return true; }
  Eigen::MatrixXd hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;
  Eigen::MatrixXd hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;

  bool has_y_star() const override { return true; }
  Eigen::VectorXd y_star(const Eigen::VectorXd& x) const override { return A_ * x; }
  bool has_y_star_lambda() const override { return true; }
  Eigen::VectorXd y_star_lambda(const Eigen::VectorXd& x, double lambda) const override;

  bool has_hyper_objective() const override { return true; }
  double hyper_value(const Eigen::VectorXd& x) const override;
  Eigen::VectorXd hyper_grad(const Eigen::VectorXd& x) const override;

  SmoothnessProfile profile() const override;

  const Eigen::MatrixXd& A() const { return A_; }
  const Eigen::VectorXd& b() const { return b_; }

 private:
  Eigen::MatrixXd A_;
  Eigen::VectorXd b_;
  double sv_max_;
};

// ---- cubic-perturbed family ----------------------------------------------
//
// Same f as the quadratic family; g gains a bounded-third-derivative
// term in y so the l_g2-dependent estimates are exercised:
//   g(x,y) = 0.5 |y - A x|^2 + eta * sum_j cos(kappa y_j) / kappa^2.
// Strong convexity is kept by eta <= mu_g / 2 relative to the base
// curvature. y*(x) solves the separable equation y + eta c'(y) = Ax
// coordinatewise (monotone Newton); y*_lambda is left to the generic
// inner solve.
class CubicPerturbedInstance final : public BilevelProblem {
 public:
  CubicPerturbedInstance(Eigen::MatrixXd A, Eigen::VectorXd b,
                         double eta = 1.0 / 3.0, double kappa = 2.0);
  static CubicPerturbedInstance seeded(int dim_x, int dim_y,
                                       std::uint64_t seed);

  int dim_x() const override { return static_cast<int>(A_.cols()); }
  int dim_y() const override { return static_cast<int>(A_.rows()); }

  double f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  double g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;

  bool has_second_order() const override { return true; }
  Eigen::MatrixXd hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;
  Eigen::MatrixXd hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;

  bool has_y_star() const override { return true; }
  Eigen::VectorXd y_star(const Eigen::VectorXd& x) const override;

  bool has_hyper_objective() const override { return true; }
  double hyper_value(const Eigen::VectorXd& x) const override;
  Eigen::VectorXd hyper_grad(const Eigen::VectorXd& x) const override;

  SmoothnessProfile profile() const override;

 private:
  double cp(double s) const { return -std::sin(kappa_ * s) / kappa_; }
  double cpp(double s) const { return -std::cos(kappa_ * s); }
  double invert_m(double target) const;  // solves y + eta c'(y) = target

  Eigen::MatrixXd A_;
  Eigen::VectorXd b_;
  double eta_, kappa_, sv_max_;
};

// ---- chain hard instance ---------------------------------------------------
//
// f(x,y) = y,  g(x,y) = (y - F(x))^2 with F the chain value; so
// y*(x) = F(x) and the hypergradient equals the chain gradient.
class ChainHardInstance final : public BilevelProblem {
 public:
  explicit ChainHardInstance(ChainConfig cfg);

  int dim_x() const override { return cfg_.dim; }
  int dim_y() const override { return 1; }

  double f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  double g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;

  bool has_second_order() const override { return true; }
  Eigen::MatrixXd hess_g_xy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;
  Eigen::MatrixXd hess_g_yy(const Eigen::VectorXd&, const Eigen::VectorXd&) const override;

  bool has_y_star() const override { return true; }
  Eigen::VectorXd y_star(const Eigen::VectorXd& x) const override;
  bool has_y_star_lambda() const override { return true; }
  Eigen::VectorXd y_star_lambda(const Eigen::VectorXd& x, double lambda) const override;

  bool has_hyper_objective() const override { return true; }
  double hyper_value(const Eigen::VectorXd& x) const override;
  Eigen::VectorXd hyper_grad(const Eigen::VectorXd& x) const override;

  SmoothnessProfile profile() const override;

  const ChainConfig& chain() const { return cfg_; }
  // reliability radius of the matching oracle construction
  double r_eps() const { return 100.0 * cfg_.epsilon; }

  // Mean clipped gradient: grad_x of r_eps^2 * clip((y - F(x))/r_eps)^2.
  // Coincides with the exact grad_x g on |y - F(x)| <= r_eps / 2.
  Eigen::VectorXd clipped_mean_gradient(const Eigen::VectorXd& x,
                                        double y) const;

 private:
  ChainConfig cfg_;
  SmoothnessProfile profile_;
};

// ---- randomized embedding ---------------------------------------------------

// rho(x) = x / sqrt(1 + |x|^2 / R^2) together with its Jacobian
// I/s - x x^T / (R^2 s^3); |rho| < R everywhere, |J| <= 1.
void embed_rho(const Eigen::VectorXd& x, double R, Eigen::VectorXd& rho,
               Eigen::MatrixXd& jacobian);

struct EmbeddedInstanceConfig {
  int ambient_dim;         // dimension d of the embedded x (d >> chain dim)
  ChainConfig chain;
  double radius_scale = 250.0;  // R = radius_scale * eps * sqrt(chain dim)
  std::uint64_t seed = 0;

  double radius() const {
    return radius_scale * chain.epsilon * std::sqrt(double(chain.dim));
  }
};

// Chain instance composed with a seeded orthonormal embedding U:
//   f_U(x,y) = y + |x|^2 / 10,  g_U(x,y) = (y - F(U^T rho(x)))^2.
class EmbeddedInstance final : public BilevelProblem {
 public:
  explicit EmbeddedInstance(const EmbeddedInstanceConfig& cfg);
  EmbeddedInstance(Eigen::MatrixXd U, ChainConfig chain, double R);

  int dim_x() const override { return static_cast<int>(U_.rows()); }
  int dim_y() const override { return 1; }

  double f(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_f_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  double g(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_x(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;
  Eigen::VectorXd grad_g_y(const Eigen::VectorXd& x, const Eigen::VectorXd& y) const override;

  bool has_y_star() const override { return true; }
  Eigen::VectorXd y_star(const Eigen::VectorXd& x) const override;

  bool has_hyper_objective() const override { return true; }
  double hyper_value(const Eigen::VectorXd& x) const override;
  Eigen::VectorXd hyper_grad(const Eigen::VectorXd& x) const override;

  SmoothnessProfile profile() const override;

  const Eigen::MatrixXd& U() const { return U_; }
  double radius() const { return R_; }
  const ChainHardInstance& inner() const { return inner_; }
  // U^T rho(x)
  Eigen::VectorXd pullback(const Eigen::VectorXd& x) const;

 private:
  Eigen::MatrixXd U_;
  double R_;
  ChainHardInstance inner_;
};

// Orthonormalized seeded Gaussian matrix (rows x cols, cols <= rows);
// orthonormality is asserted, not assumed.
Eigen::MatrixXd random_orthonormal(int rows, int cols, std::uint64_t seed);

}  // namespace bilevel
