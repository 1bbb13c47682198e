#include "bilevel/oracles.hpp"

#include <cmath>
#include <stdexcept>

#include "bilevel/parallel.hpp"
#include "bilevel/rng.hpp"

namespace bilevel {
namespace {

constexpr std::uint64_t kSaltF = 0xf00d;
constexpr std::uint64_t kSaltG = 0x6ead;
constexpr std::uint64_t kSaltAnchor = 0xa0c8;

}  // namespace

void OracleConfig::validate() const {
  if (!(r > 0.0)) throw std::invalid_argument("oracle: r must be > 0");
  if (!(p > 0.0 && p <= 1.0))
    throw std::invalid_argument("oracle: p must be in (0, 1]");
  if (batch_capability < 2)
    throw std::invalid_argument("oracle: batch capability N must be >= 2");
  if (sigma_f < 0.0 || sigma_g < 0.0)
    throw std::invalid_argument("oracle: negative noise level");
}

Oracle::Oracle(OracleConfig cfg) : cfg_(cfg) { cfg_.validate(); }

void Oracle::query(const QueryPoint* points, int n, bool shared,
                   RandomnessTag tag, OracleResponse* out) const {
  if (n < 1 || n > cfg_.batch_capability)
    throw std::invalid_argument("oracle: batch size exceeds capability N");
  const std::uint64_t base = rng::key_of(cfg_.seed, tag.a, tag.b, tag.c);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t pt = shared ? 0 : std::uint64_t(i) + 1;
    const std::uint64_t zeta = rng::combine(rng::combine(base, kSaltF), pt);
    const std::uint64_t xi = rng::combine(rng::combine(base, kSaltG), pt);
    respond(points[i], zeta, xi, out[i]);
  }
  calls_.fetch_add(std::uint64_t(n), std::memory_order_relaxed);
  if (on_query) on_query(n, shared);
}

OracleResponse Oracle::query_one(const Eigen::VectorXd& x,
                                 const Eigen::VectorXd& y,
                                 RandomnessTag tag) const {
  QueryPoint pt;
  pt.x = &x;
  pt.y = &y;
  OracleResponse resp;
  query(&pt, 1, false, tag, &resp);
  return resp;
}

// ---- GaussianOracle ---------------------------------------------------------

GaussianOracle::GaussianOracle(const BilevelProblem& problem, OracleConfig cfg)
    : Oracle(cfg), problem_(problem) {
  const double inv_sqrt_dim =
      1.0 / std::sqrt(double(problem.dim_x() + problem.dim_y()));
  comp_sigma_f_ = cfg_.sigma_f * inv_sqrt_dim;
  comp_sigma_g_ = cfg_.sigma_g * inv_sqrt_dim;
}

Eigen::VectorXd GaussianOracle::y_star_of(const Eigen::VectorXd& x) const {
  return problem_.has_y_star() ? problem_.y_star(x)
                               : solve_y_star(problem_, x, 1e-10);
}

Eigen::VectorXd GaussianOracle::y_hat(const Eigen::VectorXd& x) const {
  Eigen::VectorXd ys = y_star_of(x);
  if (!std::isfinite(cfg_.r)) return ys;
  // exactly r/4 off in a per-x deterministic direction, so the anchor
  // slack is actually exercised
  const std::uint64_t key =
      rng::key_of(cfg_.seed, kSaltAnchor, rng::hash_vector(x));
  return ys + (cfg_.r / 4.0) *
                  rng::unit_vector(key, 0, static_cast<int>(ys.size()));
}

void GaussianOracle::respond(const QueryPoint& pt, std::uint64_t zeta_key,
                             std::uint64_t xi_key, OracleResponse& out) const {
  const Eigen::VectorXd& x = *pt.x;
  const Eigen::VectorXd& y = *pt.y;
  const int dx = problem_.dim_x(), dy = problem_.dim_y();

  bool reliable = true;
  if (std::isfinite(cfg_.r)) reliable = (y - y_star_of(x)).norm() <= cfg_.r;

  if (!reliable) {
    const double c = cfg_.adversarial_magnitude;
    if (pt.need_f_x) out.grad_f_x = Eigen::VectorXd::Constant(dx, c);
    if (pt.need_f_y) out.grad_f_y = Eigen::VectorXd::Constant(dy, c);
    if (pt.need_g_x) out.grad_g_x = Eigen::VectorXd::Constant(dx, c);
    if (pt.need_g_y) out.grad_g_y = Eigen::VectorXd::Constant(dy, c);
  } else {
    // noise counters are block-stable: x-block uses [0, dx), y-block
    // [dx, dx+dy), so partial requests reproduce the same bits
    if (pt.need_f_x) {
      out.grad_f_x = problem_.grad_f_x(x, y);
      for (int i = 0; i < dx; ++i)
        out.grad_f_x[i] += comp_sigma_f_ * rng::gaussian(zeta_key, i);
    }
    if (pt.need_f_y) {
      out.grad_f_y = problem_.grad_f_y(x, y);
      for (int i = 0; i < dy; ++i)
        out.grad_f_y[i] += comp_sigma_f_ * rng::gaussian(zeta_key, dx + i);
    }
    if (pt.need_g_x) {
      out.grad_g_x = problem_.grad_g_x(x, y);
      for (int i = 0; i < dx; ++i)
        out.grad_g_x[i] += comp_sigma_g_ * rng::gaussian(xi_key, i);
    }
    if (pt.need_g_y) {
      out.grad_g_y = problem_.grad_g_y(x, y);
      for (int i = 0; i < dy; ++i)
        out.grad_g_y[i] += comp_sigma_g_ * rng::gaussian(xi_key, dx + i);
    }
  }
  if (pt.need_y_hat) out.y_hat = y_hat(x);
}

// ---- ZeroChainOracle --------------------------------------------------------

ZeroChainOracle::ZeroChainOracle(const ChainHardInstance& instance,
                                 OracleConfig cfg)
    : Oracle(cfg), instance_(instance) {}

Eigen::VectorXd ZeroChainOracle::y_hat(const Eigen::VectorXd& x) const {
  const ChainConfig& c = instance_.chain();
  const int upto = progress_index(x, c.epsilon / 2.0, c.epsilon);
  double sum = 0.0;
  for (int i = 1; i <= upto; ++i) sum += chain_term(i, x, c);
  Eigen::VectorXd v(1);
  v[0] = c.epsilon * c.epsilon * sum;
  return v;
}

Eigen::VectorXd ZeroChainOracle::grad_x_given(const Eigen::VectorXd& x,
                                              double y, bool xi) const {
  const ChainConfig& c = instance_.chain();
  Eigen::VectorXd g = instance_.clipped_mean_gradient(x, y);
  Eigen::VectorXd h;
  smooth_indicator_all(x, c, h);
  const double pull = (xi ? 1.0 / cfg_.p : 0.0) - 1.0;
  for (int i = 0; i < c.dim; ++i) g[i] *= 1.0 + h[i] * pull;
  return g;
}

double ZeroChainOracle::grad_y_given(const Eigen::VectorXd& x, double y,
                                     bool xi) const {
  const ChainConfig& c = instance_.chain();
  Eigen::VectorXd h;
  smooth_indicator_all(x, c, h);
  const double pull = (xi ? 1.0 / cfg_.p : 0.0) - 1.0;
  double sum = 0.0;
  for (int i = 1; i <= c.dim; ++i)
    sum += chain_term(i, x, c) * (1.0 + h[i - 1] * pull);
  return 2.0 * (y - c.epsilon * c.epsilon * sum);
}

void ZeroChainOracle::evaluate(const Eigen::VectorXd& x, double y, bool xi,
                               const QueryPoint& needs,
                               OracleResponse& out) const {
  const ChainConfig& c = instance_.chain();
  // f is deterministic for this construction
  if (needs.need_f_x) out.grad_f_x = Eigen::VectorXd::Zero(x.size());
  if (needs.need_f_y) out.grad_f_y = Eigen::VectorXd::Ones(1);
  if (!needs.need_g_x && !needs.need_g_y && !needs.need_y_hat) return;

  // one chain pass serves every requested block
  Eigen::VectorXd grad, terms, h;
  const double F = chain_value_grad_terms(x, c, grad, terms);
  smooth_indicator_all(x, c, h);
  const double pull = (xi ? 1.0 / cfg_.p : 0.0) - 1.0;
  const double eps2 = c.epsilon * c.epsilon;

  if (needs.need_g_x) {
    const double re = instance_.r_eps();
    const double u = (y - F) / re;
    out.grad_g_x =
        -2.0 * re * clip_smooth(u) * clip_smooth_deriv(u, 1) * grad;
    for (int i = 0; i < c.dim; ++i)
      out.grad_g_x[i] *= 1.0 + h[i] * pull;
  }
  if (needs.need_g_y) {
    double sum = 0.0;
    for (int i = 1; i <= c.dim; ++i)
      sum += terms[i - 1] * (1.0 + h[i - 1] * pull);
    out.grad_g_y.resize(1);
    out.grad_g_y[0] = 2.0 * (y - eps2 * sum);
  }
  if (needs.need_y_hat) {
    const int upto = progress_index(x, c.epsilon / 2.0, c.epsilon);
    double partial = 0.0;
    for (int i = 1; i <= upto; ++i) partial += terms[i - 1];
    out.y_hat.resize(1);
    out.y_hat[0] = eps2 * partial;
  }
}

void ZeroChainOracle::respond(const QueryPoint& pt, std::uint64_t /*zeta_key*/,
                              std::uint64_t xi_key, OracleResponse& out) const {
  const bool xi = rng::bernoulli(xi_key, 0, cfg_.p);
  evaluate(*pt.x, (*pt.y)[0], xi, pt, out);
}

// ---- EmbeddedZeroChainOracle -------------------------------------------------

EmbeddedZeroChainOracle::EmbeddedZeroChainOracle(
    const EmbeddedInstance& instance, OracleConfig cfg)
    : Oracle(cfg), instance_(instance), base_(instance.inner(), cfg) {}

Eigen::VectorXd EmbeddedZeroChainOracle::y_hat(const Eigen::VectorXd& x) const {
  return base_.y_hat(instance_.pullback(x));
}

void EmbeddedZeroChainOracle::respond(const QueryPoint& pt,
                                      std::uint64_t /*zeta_key*/,
                                      std::uint64_t xi_key,
                                      OracleResponse& out) const {
  const Eigen::VectorXd& x = *pt.x;
  const double y = (*pt.y)[0];
  const Eigen::VectorXd inner_x = instance_.pullback(x);
  const bool xi = rng::bernoulli(xi_key, 0, cfg_.p);

  QueryPoint inner_needs = pt;
  inner_needs.need_f_x = false;
  inner_needs.need_f_y = false;
  base_.evaluate(inner_x, y, xi, inner_needs, out);

  if (pt.need_f_x) out.grad_f_x = instance_.grad_f_x(x, *pt.y);
  if (pt.need_f_y) out.grad_f_y = Eigen::VectorXd::Ones(1);
  if (pt.need_g_x) {
    Eigen::VectorXd rho;
    Eigen::MatrixXd J;
    embed_rho(x, instance_.radius(), rho, J);
    out.grad_g_x = J.transpose() * (instance_.U() * out.grad_g_x);
  }
}

double default_progression_probability(double epsilon, double sigma,
                                       double l_g1_tilde) {
  double p = 0.0;
  if (sigma > 0.0) p = std::max(p, std::pow(epsilon, 4) / (sigma * sigma));
  if (std::isfinite(l_g1_tilde) && l_g1_tilde > 0.0)
    p = std::max(p, epsilon * epsilon / (l_g1_tilde * l_g1_tilde));
  if (p <= 0.0 || p > 1.0) p = 1.0;
  return p;
}

// ---- moments ------------------------------------------------------------------

MomentReport estimate_moments(const Oracle& oracle, const Eigen::VectorXd& x,
                              const Eigen::VectorXd& y, std::uint64_t n,
                              RandomnessTag base) {
  if (n < 2) throw std::invalid_argument("estimate_moments: n must be >= 2");
  const int dim = static_cast<int>(x.size() + y.size());

  struct Sums {
    Eigen::VectorXd f, g;
    double qf = 0, qg = 0;    // sum of squared deviations (pass 2)
    double qf2 = 0, qg2 = 0;  // sum of squared squared-deviations
  };
  Sums init;
  init.f = Eigen::VectorXd::Zero(dim);
  init.g = Eigen::VectorXd::Zero(dim);

  auto draw = [&](std::uint64_t i, Eigen::VectorXd& f, Eigen::VectorXd& g) {
    const OracleResponse r =
        oracle.query_one(x, y, RandomnessTag{base.a, base.b, base.c + 1 + i});
    f.head(x.size()) = r.grad_f_x;
    f.tail(y.size()) = r.grad_f_y;
    g.head(x.size()) = r.grad_g_x;
    g.tail(y.size()) = r.grad_g_y;
  };

  // pass 1: means (draws are counter-indexed, so pass 2 replays them)
  Sums mean = parallel_chunked(
      n, init,
      [&](Sums& s, std::uint64_t i) {
        Eigen::VectorXd f(dim), g(dim);
        draw(i, f, g);
        s.f += f;
        s.g += g;
      },
      [](Sums& a, const Sums& b) {
        a.f += b.f;
        a.g += b.g;
      });
  const Eigen::VectorXd mf = mean.f / double(n), mg = mean.g / double(n);

  Sums dev = parallel_chunked(
      n, init,
      [&](Sums& s, std::uint64_t i) {
        Eigen::VectorXd f(dim), g(dim);
        draw(i, f, g);
        const double qf = (f - mf).squaredNorm(), qg = (g - mg).squaredNorm();
        s.qf += qf;
        s.qg += qg;
        s.qf2 += qf * qf;
        s.qg2 += qg * qg;
      },
      [](Sums& a, const Sums& b) {
        a.qf += b.qf;
        a.qg += b.qg;
        a.qf2 += b.qf2;
        a.qg2 += b.qg2;
      });

  MomentReport rep;
  rep.samples = n;
  rep.mean_f = mf;
  rep.mean_g = mg;
  rep.cov_trace_f = dev.qf / double(n - 1);
  rep.cov_trace_g = dev.qg / double(n - 1);
  const double nf = double(n);
  rep.se_mean_f = std::sqrt(rep.cov_trace_f / nf);
  rep.se_mean_g = std::sqrt(rep.cov_trace_g / nf);
  rep.se_trace_f = std::sqrt(
      std::max(0.0, dev.qf2 / nf - std::pow(dev.qf / nf, 2)) / nf);
  rep.se_trace_g = std::sqrt(
      std::max(0.0, dev.qg2 / nf - std::pow(dev.qg / nf, 2)) / nf);
  return rep;
}

}  // namespace bilevel
