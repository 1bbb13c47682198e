#include "bilevel/reference.hpp"

#include <cmath>

namespace bilevel::reference {
namespace {

double simpson(double a, double fa, double b, double fb, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

double simpson_rec(const std::function<double(double)>& f, double a, double fa,
                   double b, double fb, double m, double fm, double whole,
                   double tol, int depth) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(a, fa, m, fm, flm);
  const double right = simpson(m, fm, b, fb, frm);
  const double delta = left + right - whole;
  if (depth <= 0 || !(std::abs(delta) > 15.0 * tol))
    return left + right + delta / 15.0;
  return simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1) +
         simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1);
}

}  // namespace

double integrate(const std::function<double(double)>& f, double a, double b,
                 double tol) {
  if (a == b) return 0.0;
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  return simpson_rec(f, a, fa, b, fb, m, fm, simpson(a, fa, b, fb, fm), tol,
                     52);
}

double phi_gauss(double t, double tol) {
  const double lo = -40.0;
  if (t <= lo) return 0.0;
  constexpr double kSqrtE = 1.6487212707001281468;
  return kSqrtE *
         integrate([](double tau) { return std::exp(-0.5 * tau * tau); }, lo,
                   t, tol);
}

double ramp(double t, double tol) {
  if (t <= 0.25) return 0.0;
  const double z = integrate(bilevel::bump, 0.25, 0.5, tol * 1e-2);
  if (t >= 0.5) return 1.0;
  return integrate(bilevel::bump, 0.25, t, tol * 1e-2) / z;
}

double clip_smooth(double t, double tol) {
  const double a = std::abs(t);
  if (a <= 0.5) return t;
  constexpr double kInvE = 0.36787944117144232160;
  const double v = a - kInvE * integrate(bilevel::psi, 0.5, a, tol);
  return t < 0.0 ? -v : v;
}

double chain_value(const Eigen::VectorXd& x, const ChainConfig& cfg) {
  double sum = 0.0;
  for (int i = 1; i <= cfg.dim; ++i) sum += chain_term(i, x, cfg);
  return cfg.epsilon * cfg.epsilon * sum;
}

Eigen::VectorXd chain_value_grad(const Eigen::VectorXd& x,
                                 const ChainConfig& cfg) {
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(cfg.dim);
  for (int i = 1; i <= cfg.dim; ++i) grad += chain_term_grad(i, x, cfg);
  return cfg.epsilon * cfg.epsilon * grad;
}

double central_diff(const std::function<double(double)>& f, double t,
                    double h) {
  return (f(t + h) - f(t - h)) / (2.0 * h);
}

Eigen::VectorXd central_diff_grad(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd p = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    p[i] = xi + h;
    const double up = f(p);
    p[i] = xi - h;
    const double dn = f(p);
    p[i] = xi;
    g[i] = (up - dn) / (2.0 * h);
  }
  return g;
}

}  // namespace bilevel::reference
