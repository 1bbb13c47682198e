#include "bilevel/kernels.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace bilevel {
namespace {

constexpr double kSqrtE = 1.6487212707001281468;      // sqrt(e)
constexpr double kInvE = 0.36787944117144232160;      // 1/e

// 15-point Gauss-Legendre nodes/weights on [-1, 1].
constexpr std::array<double, 15> kGlNodes = {
    -0.9879925180204854284, -0.9372733924007059043, -0.8482065834104272162,
    -0.7244177313601700474, -0.5709721726085388475, -0.3941513470775633699,
    -0.2011940939974345223, 0.0,                    0.2011940939974345223,
    0.3941513470775633699,  0.5709721726085388475,  0.7244177313601700474,
    0.8482065834104272162,  0.9372733924007059043,  0.9879925180204854284};
constexpr std::array<double, 15> kGlWeights = {
    0.0307532419961172684, 0.0703660474881081247, 0.1071592204671719351,
    0.1395706779261543144, 0.1662692058169939336, 0.1861610000155622110,
    0.1984314853271115765, 0.2025782419255612729, 0.1984314853271115765,
    0.1861610000155622110, 0.1662692058169939336, 0.1395706779261543144,
    0.1071592204671719351, 0.0703660474881081247, 0.0307532419961172684};

template <typename F>
double gauss15(F&& f, double a, double b) {
  const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
  double s = 0.0;
  for (int i = 0; i < 15; ++i) s += kGlWeights[i] * f(mid + half * kGlNodes[i]);
  return s * half;
}

template <typename F>
double adaptive_step(F&& f, double a, double b, double whole, double tol,
                     int depth) {
  const double m = 0.5 * (a + b);
  const double left = gauss15(f, a, m), right = gauss15(f, m, b);
  // NaN-safe acceptance: anything but a clear miss stops the recursion
  if (depth <= 0 || !(std::abs(left + right - whole) > tol))
    return left + right;
  return adaptive_step(f, a, m, left, 0.5 * tol, depth - 1) +
         adaptive_step(f, m, b, right, 0.5 * tol, depth - 1);
}

// Adaptive panel-doubling quadrature; plenty for the analytic
// integrands below. tol is absolute.
template <typename F>
double integrate(F&& f, double a, double b, double tol = 1e-13) {
  if (a == b) return 0.0;
  return adaptive_step(f, a, b, gauss15(f, a, b), tol, 48);
}

// Antiderivative of the clip tail density. With u = 1/(2 tau - 1) the
// mass integral_t^inf (1 - psi(tau)/e) dtau becomes A(1/(2t-1)) where
// A(v) = integral_0^v -expm1(-u^2)/(2 u^2) du; compactifying once more
// by s = v/(1+v) = 1/(2t) puts the whole half-line on [0, 1]. The
// density in s is smooth with limits 1/2 at both ends, so a cubic
// Hermite table reproduces A to near machine accuracy.
class ClipTailTable {
 public:
  static const ClipTailTable& instance() {
    static const ClipTailTable table;
    return table;
  }

  // A as a function of s in [0, 1]
  double at(double s) const {
    if (s <= 0.0) return 0.0;
    if (s >= 1.0) return antideriv_.back();
    const double pos = s * (kNodes - 1);
    int j = static_cast<int>(pos);
    if (j >= kNodes - 1) j = kNodes - 2;
    const double u = pos - j;
    const double h = 1.0 / (kNodes - 1);
    const double p0 = antideriv_[j], p1 = antideriv_[j + 1];
    const double m0 = density_[j] * h, m1 = density_[j + 1] * h;
    const double u2 = u * u, u3 = u2 * u;
    return (2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0 +
           (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1;
  }

  double total() const { return antideriv_.back(); }

 private:
  static double density(double s) {
    // -expm1(-u^2) / (2 u^2) * du/ds with u = s / (1 - s)
    if (s < 1e-8) return 0.5;
    if (s > 1.0 - 1e-9) return 0.5 / (s * s);
    const double u = s / (1.0 - s);
    return -std::expm1(-u * u) / (2.0 * s * s);
  }

  ClipTailTable() : antideriv_(kNodes), density_(kNodes) {
    const double h = 1.0 / (kNodes - 1);
    antideriv_[0] = 0.0;
    density_[0] = density(0.0);
    for (int j = 1; j < kNodes; ++j) {
      antideriv_[j] = antideriv_[j - 1] + gauss15(density, (j - 1) * h, j * h);
      density_[j] = density(j * h);
    }
  }

  static constexpr int kNodes = 4096;
  std::vector<double> antideriv_, density_;
};

}  // namespace

ChainConfig::ChainConfig(double eps, int d) : epsilon(eps), dim(d) {
  if (!(eps > 0.0)) throw std::invalid_argument("ChainConfig: epsilon must be > 0");
  if (d < 1) throw std::invalid_argument("ChainConfig: dim must be >= 1");
}

ChainConfig ChainConfig::for_epsilon(double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("ChainConfig: epsilon must be > 0");
  return ChainConfig(eps, static_cast<int>(std::floor(1.0 / (eps * eps))));
}

// ---- psi ----------------------------------------------------------------

double psi(double t) {
  if (t <= 0.5) return 0.0;
  const double w = 1.0 / (2.0 * t - 1.0);
  const double q = 1.0 - w * w;
  return q < -745.0 ? 0.0 : std::exp(q);
}

double psi_deriv(double t, int k) {
  if (k == 0) return psi(t);
  if (t <= 0.5) return 0.0;
  const double w = 1.0 / (2.0 * t - 1.0);
  const double w2 = w * w;
  if (w2 > 780.0) return 0.0;  // value underflows before the polynomial matters
  const double v = std::exp(1.0 - w2);
  const double w3 = w2 * w;
  switch (k) {
    case 1:
      return v * 4.0 * w3;
    case 2:
      return v * (16.0 * w3 * w3 - 24.0 * w2 * w2);
    case 3: {
      const double w5 = w3 * w2, w7 = w5 * w2, w9 = w7 * w2;
      return v * (64.0 * w9 - 288.0 * w7 + 192.0 * w5);
    }
    default:
      throw std::invalid_argument("psi_deriv: k must be in 0..3");
  }
}

// ---- phi_gauss ----------------------------------------------------------

double phi_gauss(double t) {
  // sqrt(e) * sqrt(pi/2) * erfc(-t/sqrt(2)); erfc avoids cancellation
  // for very negative t.
  constexpr double kSqrtPiOver2 = 1.2533141373155002512;
  return kSqrtE * kSqrtPiOver2 * std::erfc(-t * 0.70710678118654752440);
}

double phi_gauss_deriv(double t, int k) {
  if (k == 0) return phi_gauss(t);
  const double d1 = kSqrtE * std::exp(-0.5 * t * t);
  switch (k) {
    case 1:
      return d1;
    case 2:
      return -t * d1;
    case 3:
      return (t * t - 1.0) * d1;
    default:
      throw std::invalid_argument("phi_gauss_deriv: k must be in 0..3");
  }
}

// ---- clip_smooth --------------------------------------------------------

double clip_smooth(double t) {
  const double a = std::abs(t);
  if (a <= 0.5) return t;
  // t - (1/e) * int_{1/2}^{t} psi  ==  1/2 + int_{1/2}^{t} (1 - psi/e),
  // evaluated through the tabulated tail mass so large arguments stay
  // well conditioned
  const auto& tab = ClipTailTable::instance();
  const double v = 0.5 + (tab.total() - tab.at(0.5 / a));
  return t < 0.0 ? -v : v;
}

double clip_smooth_deriv(double t, int k) {
  const double a = std::abs(t);
  switch (k) {
    case 0:
      return clip_smooth(t);
    case 1:
      return a <= 0.5 ? 1.0 : 1.0 - kInvE * psi(a);
    case 2: {
      if (a <= 0.5) return 0.0;
      const double d = -kInvE * psi_deriv(a, 1);
      return t < 0.0 ? -d : d;
    }
    case 3:
      return a <= 0.5 ? 0.0 : -kInvE * psi_deriv(a, 2);
    default:
      throw std::invalid_argument("clip_smooth_deriv: k must be in 0..3");
  }
}

// ---- bump / ramp table ----------------------------------------------------

double bump(double t) {
  if (t <= 0.25 || t >= 0.5) return 0.0;
  const double q = 100.0 * (t - 0.25) * (0.5 - t);
  return std::exp(-1.0 / q);
}

QuadratureTable::QuadratureTable()
    : lo_(0.25), hi_(0.5), antideriv_(kNodes), density_(kNodes) {
  step_ = (hi_ - lo_) / (kNodes - 1);
  antideriv_[0] = 0.0;
  density_[0] = 0.0;
  for (int j = 1; j < kNodes; ++j) {
    const double a = lo_ + (j - 1) * step_, b = lo_ + j * step_;
    antideriv_[j] = antideriv_[j - 1] + gauss15(bump, a, b);
    density_[j] = bump(b);
  }
  normalizer_ = antideriv_[kNodes - 1];
}

const QuadratureTable& QuadratureTable::instance() {
  static const QuadratureTable table;
  return table;
}

double QuadratureTable::ramp(double t) const {
  if (t <= lo_) return 0.0;
  if (t >= hi_) return 1.0;
  const double s = (t - lo_) / step_;
  int j = static_cast<int>(s);
  if (j >= kNodes - 1) j = kNodes - 2;
  const double u = s - j;
  // cubic Hermite on [t_j, t_{j+1}] with exact endpoint derivatives
  const double h = step_;
  const double p0 = antideriv_[j], p1 = antideriv_[j + 1];
  const double m0 = density_[j] * h, m1 = density_[j + 1] * h;
  const double u2 = u * u, u3 = u2 * u;
  const double value = (2 * u3 - 3 * u2 + 1) * p0 + (u3 - 2 * u2 + u) * m0 +
                       (-2 * u3 + 3 * u2) * p1 + (u3 - u2) * m1;
  return value / normalizer_;
}

double QuadratureTable::ramp_deriv(double t) const {
  if (t <= lo_ || t >= hi_) return 0.0;
  // derivative of the interpolant, not of the exact antiderivative, so
  // gradients stay consistent with the evaluated ramp
  const double s = (t - lo_) / step_;
  int j = static_cast<int>(s);
  if (j >= kNodes - 1) j = kNodes - 2;
  const double u = s - j;
  const double h = step_;
  const double p0 = antideriv_[j], p1 = antideriv_[j + 1];
  const double m0 = density_[j] * h, m1 = density_[j + 1] * h;
  const double u2 = u * u;
  const double slope = (6 * u2 - 6 * u) * p0 + (3 * u2 - 4 * u + 1) * m0 +
                       (-6 * u2 + 6 * u) * p1 + (3 * u2 - 2 * u) * m1;
  return slope / (h * normalizer_);
}

// ---- progress ------------------------------------------------------------

int progress_index(const Eigen::VectorXd& x, double alpha, double phantom) {
  if (alpha < 0.0) throw std::invalid_argument("progress_index: alpha must be >= 0");
  for (int i = static_cast<int>(x.size()); i >= 1; --i)
    if (std::abs(x[i - 1]) > alpha) return i;
  // only the phantom coordinate (index 0) can qualify now; whether it
  // does or not, the largest qualifying index is 0
  (void)phantom;
  return 0;
}

// ---- chain ---------------------------------------------------------------

namespace {

inline double chain_coord(const Eigen::VectorXd& x, int i, double eps) {
  return i == 0 ? eps : x[i - 1];
}

void check_chain_index(int i, const ChainConfig& cfg) {
  if (i < 1 || i > cfg.dim)
    throw std::out_of_range("chain term index out of range");
}

}  // namespace

double chain_term(int i, const Eigen::VectorXd& x, const ChainConfig& cfg) {
  check_chain_index(i, cfg);
  const double u = chain_coord(x, i - 1, cfg.epsilon) / cfg.epsilon;
  const double v = chain_coord(x, i, cfg.epsilon) / cfg.epsilon;
  return psi(u) * phi_gauss(v) - psi(-u) * phi_gauss(-v);
}

double chain_term_partial(int i, int a, int b, const Eigen::VectorXd& x,
                          const ChainConfig& cfg) {
  check_chain_index(i, cfg);
  if (a < 0 || b < 0 || a + b > 3)
    throw std::invalid_argument("chain_term_partial: need a,b >= 0, a+b <= 3");
  const double u = chain_coord(x, i - 1, cfg.epsilon) / cfg.epsilon;
  const double v = chain_coord(x, i, cfg.epsilon) / cfg.epsilon;
  const double sign = ((a + b) % 2 == 0) ? 1.0 : -1.0;
  const double scale = std::pow(cfg.epsilon, -(a + b));
  return (psi_deriv(u, a) * phi_gauss_deriv(v, b) -
          sign * psi_deriv(-u, a) * phi_gauss_deriv(-v, b)) *
         scale;
}

Eigen::VectorXd chain_term_grad(int i, const Eigen::VectorXd& x,
                                const ChainConfig& cfg) {
  check_chain_index(i, cfg);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
  if (i >= 2) g[i - 2] = chain_term_partial(i, 1, 0, x, cfg);
  g[i - 1] = chain_term_partial(i, 0, 1, x, cfg);
  return g;
}

double chain_value(const Eigen::VectorXd& x, const ChainConfig& cfg) {
  if (x.size() != cfg.dim)
    throw std::invalid_argument("chain_value: dimension mismatch");
  const double eps = cfg.epsilon;
  double sum = 0.0;
#pragma omp parallel for reduction(+ : sum) schedule(static) \
    if (cfg.dim >= 512)
  for (int i = 1; i <= cfg.dim; ++i) sum += chain_term(i, x, cfg);
  return eps * eps * sum;
}

double chain_value_grad(const Eigen::VectorXd& x, const ChainConfig& cfg,
                        Eigen::VectorXd& grad) {
  if (x.size() != cfg.dim)
    throw std::invalid_argument("chain_value_grad: dimension mismatch");
  const double eps2 = cfg.epsilon * cfg.epsilon;
  grad.resize(cfg.dim);
  double sum = 0.0;
#pragma omp parallel for reduction(+ : sum) schedule(static) \
    if (cfg.dim >= 512)
  for (int j = 1; j <= cfg.dim; ++j) {
    sum += chain_term(j, x, cfg);
    double gj = chain_term_partial(j, 0, 1, x, cfg);
    if (j + 1 <= cfg.dim) gj += chain_term_partial(j + 1, 1, 0, x, cfg);
    grad[j - 1] = eps2 * gj;
  }
  return eps2 * sum;
}

double chain_value_grad_terms(const Eigen::VectorXd& x, const ChainConfig& cfg,
                              Eigen::VectorXd& grad, Eigen::VectorXd& terms) {
  if (x.size() != cfg.dim)
    throw std::invalid_argument("chain_value_grad_terms: dimension mismatch");
  const double eps2 = cfg.epsilon * cfg.epsilon;
  grad.resize(cfg.dim);
  terms.resize(cfg.dim);
  double sum = 0.0;
  for (int j = 1; j <= cfg.dim; ++j) {
    terms[j - 1] = chain_term(j, x, cfg);
    sum += terms[j - 1];
    double gj = chain_term_partial(j, 0, 1, x, cfg);
    if (j + 1 <= cfg.dim) gj += chain_term_partial(j + 1, 1, 0, x, cfg);
    grad[j - 1] = eps2 * gj;
  }
  return eps2 * sum;
}

// ---- smooth indicator ------------------------------------------------------

double smooth_indicator(int i, const Eigen::VectorXd& x,
                        const ChainConfig& cfg) {
  check_chain_index(i, cfg);
  double s = 0.0;
  for (int j = i; j <= cfg.dim; ++j) {
    const double r = ramp(std::abs(x[j - 1]) / cfg.epsilon);
    s += r * r;
  }
  return ramp(1.0 - std::sqrt(s));
}

void smooth_indicator_all(const Eigen::VectorXd& x, const ChainConfig& cfg,
                          Eigen::VectorXd& h) {
  if (x.size() != cfg.dim)
    throw std::invalid_argument("smooth_indicator_all: dimension mismatch");
  h.resize(cfg.dim);
  double suffix = 0.0;
  for (int i = cfg.dim; i >= 1; --i) {
    const double r = ramp(std::abs(x[i - 1]) / cfg.epsilon);
    suffix += r * r;
    h[i - 1] = ramp(1.0 - std::sqrt(suffix));
  }
}

Eigen::VectorXd smooth_indicator_grad(int i, const Eigen::VectorXd& x,
                                      const ChainConfig& cfg) {
  check_chain_index(i, cfg);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(x.size());
  double s = 0.0;
  for (int j = i; j <= cfg.dim; ++j) {
    const double r = ramp(std::abs(x[j - 1]) / cfg.epsilon);
    s += r * r;
  }
  if (s == 0.0) return g;  // every inner ramp is flat at 0
  const double root = std::sqrt(s);
  const double outer = ramp_deriv(1.0 - root);
  if (outer == 0.0) return g;
  for (int j = i; j <= cfg.dim; ++j) {
    const double u = std::abs(x[j - 1]) / cfg.epsilon;
    const double rj = ramp(u), dj = ramp_deriv(u);
    if (rj == 0.0 || dj == 0.0) continue;
    const double sgn = x[j - 1] < 0.0 ? -1.0 : 1.0;
    g[j - 1] = -outer * rj * dj * sgn / (cfg.epsilon * root);
  }
  return g;
}

}  // namespace bilevel
