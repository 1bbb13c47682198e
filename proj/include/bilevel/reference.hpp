#pragma once

#include <functional>

#include <Eigen/Core>

#include "bilevel/kernels.hpp"

namespace bilevel::reference {

// Serial, quadrature-first implementations of the scalar kernels and
// chain sums. These are the independent oracles the test suites check
// the production paths against, and the baseline side of the
// kernel benchmark. Nothing here is used by the solver.

// Adaptive Simpson with Richardson acceptance; absolute tolerance.
double integrate(const std::function<double(double)>& f, double a, double b,
                 double tol = 1e-12);

// phi_gauss via its defining integral, truncated at -40.
double phi_gauss(double t, double tol = 1e-12);

// ramp via direct quadrature of the bump on [1/4, min(t, 1/2)].
double ramp(double t, double tol = 1e-12);

// clip_smooth via the defining expression t -/+ (1/e) * int psi.
double clip_smooth(double t, double tol = 1e-12);

// Serial chain evaluation (no OpenMP, term-ordered accumulation).
double chain_value(const Eigen::VectorXd& x, const ChainConfig& cfg);
Eigen::VectorXd chain_value_grad(const Eigen::VectorXd& x,
                                 const ChainConfig& cfg);

// Central finite differences, the gradient oracle used across tests.
double central_diff(const std::function<double(double)>& f, double t,
                    double h = 1e-5);
Eigen::VectorXd central_diff_grad(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double h = 1e-5);

}  // namespace bilevel::reference
