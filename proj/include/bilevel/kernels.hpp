#pragma once

#include <vector>

#include <Eigen/Core>

namespace bilevel {

// Configuration of the chain construction: accuracy target and chain
// length. All chain functions treat the phantom coordinate x_0 as
// identically `epsilon`.
struct ChainConfig {
  double epsilon;
  int dim;

  ChainConfig(double eps, int d);
  // dim defaults to floor(eps^-2).
  static ChainConfig for_epsilon(double eps);
};

// ---- scalar kernels --------------------------------------------------
//
// psi:  0 for t <= 1/2, exp(1 - 1/(2t-1)^2) otherwise.
// phi_gauss: sqrt(e) * integral_{-inf}^{t} exp(-tau^2/2) dtau.
// clip_smooth: odd smooth clipping function, identity on [-1/2, 1/2],
//              |value| < 2 everywhere, derivative in [0, 1].
//
// *_deriv(t, k) returns the k-th derivative, k = 0..3. All are total
// functions of a finite argument.

double psi(double t);
double psi_deriv(double t, int k);

double phi_gauss(double t);
double phi_gauss_deriv(double t, int k);

double clip_smooth(double t);
double clip_smooth_deriv(double t, int k);

// Compactly supported bump on (1/4, 1/2) used to build the smooth
// indicator ramp.
double bump(double t);

// Precomputed antiderivative of `bump` on [1/4, 1/2]: 4096 nodes,
// per-interval Gauss-Legendre accumulation, cubic Hermite evaluation.
// Built once, read-only afterward.
class QuadratureTable {
 public:
  static const QuadratureTable& instance();

  // integral of `bump` over [1/4, 1/2]
  double normalizer() const { return normalizer_; }
  // ramp(t): 0 for t <= 1/4, 1 for t >= 1/2, strictly increasing between
  double ramp(double t) const;
  double ramp_deriv(double t) const;

 private:
  QuadratureTable();
  static constexpr int kNodes = 4096;
  double lo_, hi_, step_;
  double normalizer_;
  std::vector<double> antideriv_;  // A(t_j), A(lo) = 0
  std::vector<double> density_;    // bump(t_j)
};

inline double ramp(double t) { return QuadratureTable::instance().ramp(t); }
inline double ramp_deriv(double t) {
  return QuadratureTable::instance().ramp_deriv(t);
}

// ---- progress measure ------------------------------------------------

// Largest index i >= 0 with |x_i| > alpha, counting the phantom
// coordinate x_0 = phantom. Returns 0 when no coordinate qualifies.
int progress_index(const Eigen::VectorXd& x, double alpha,
                   double phantom = 1.0);

// ---- chain construction ----------------------------------------------
//
// chain_term(i):  f_i(x) = psi(x_{i-1}/eps) phi(x_i/eps)
//                        - psi(-x_{i-1}/eps) phi(-x_i/eps),   1 <= i <= dim,
// chain_value:    F(x) = eps^2 * sum_i f_i(x).

double chain_term(int i, const Eigen::VectorXd& x, const ChainConfig& cfg);

// Mixed partial d^{a+b} f_i / d x_{i-1}^a d x_i^b, a + b <= 3.
double chain_term_partial(int i, int a, int b, const Eigen::VectorXd& x,
                          const ChainConfig& cfg);

// Gradient of f_i with respect to the full vector x (two nonzeros).
Eigen::VectorXd chain_term_grad(int i, const Eigen::VectorXd& x,
                                const ChainConfig& cfg);

double chain_value(const Eigen::VectorXd& x, const ChainConfig& cfg);

// Returns F(x) and fills grad with its gradient. Parallel over
// coordinates for long chains; see reference::chain_value for the
// serial oracle.
double chain_value_grad(const Eigen::VectorXd& x, const ChainConfig& cfg,
                        Eigen::VectorXd& grad);

// As above, additionally writing the per-term values f_1..f_dim.
double chain_value_grad_terms(const Eigen::VectorXd& x, const ChainConfig& cfg,
                              Eigen::VectorXd& grad, Eigen::VectorXd& terms);

// ---- smooth progress indicator ----------------------------------------
//
// h_i(x) = ramp(1 - sqrt(sum_{j >= i} ramp^2(|x_j|/eps))), sandwiched
// between the indicators of {i > progress at eps/4} and
// {i > progress at eps/2}.

double smooth_indicator(int i, const Eigen::VectorXd& x,
                        const ChainConfig& cfg);

// All of h_1..h_dim in one suffix-sum pass.
void smooth_indicator_all(const Eigen::VectorXd& x, const ChainConfig& cfg,
                          Eigen::VectorXd& h);

Eigen::VectorXd smooth_indicator_grad(int i, const Eigen::VectorXd& x,
                                      const ChainConfig& cfg);

}  // namespace bilevel
