#pragma once

#include <atomic>
#include <cstdint>
#include <functional>

#include <Eigen/Core>

#include "bilevel/problems.hpp"

namespace bilevel {

enum class NoiseModel { kGaussian, kZeroChain };

struct OracleConfig {
  double r = kInf;                 // reliability radius
  NoiseModel model = NoiseModel::kGaussian;
  double sigma_f = 0.0;
  double sigma_g = 0.0;
  double p = 1.0;                  // zero-chain progression probability
  int batch_capability = 2;        // N, simultaneous query points
  std::uint64_t seed = 0;
  double adversarial_magnitude = 1e3;  // constant returned outside the radius

  void validate() const;
};

// Stream coordinates supplied by the caller; together with the oracle
// seed they determine every draw, so batches may be issued from any
// thread in any order without changing results.
struct RandomnessTag {
  std::uint64_t a = 0, b = 0, c = 0;
};

// One query point plus flags for the blocks the caller will read.
// Unrequested blocks are left empty; the bits of requested blocks do
// not depend on which other blocks were requested.
struct QueryPoint {
  const Eigen::VectorXd* x = nullptr;
  const Eigen::VectorXd* y = nullptr;
  bool need_f_x = true;
  bool need_f_y = true;
  bool need_g_x = true;
  bool need_g_y = true;
  bool need_y_hat = true;
};

struct OracleResponse {
  Eigen::VectorXd grad_f_x, grad_f_y, grad_g_x, grad_g_y, y_hat;
};

// Stochastic first-order oracle with an anchor estimate y_hat(x) that
// is always within r/2 of y*(x). Gradient estimates are unbiased only
// for queries with |y - y*(x)| <= r.
class Oracle {
 public:
  explicit Oracle(OracleConfig cfg);
  virtual ~Oracle() = default;

  // Answers `n` points (n <= batch_capability). With `shared` set, all
  // points are built from the same randomness draw.
  void query(const QueryPoint* points, int n, bool shared, RandomnessTag tag,
             OracleResponse* out) const;
  OracleResponse query_one(const Eigen::VectorXd& x, const Eigen::VectorXd& y,
                           RandomnessTag tag) const;

  // Anchor estimate; not billed against the call counter (the counter
  // tracks gradient queries only).
  virtual Eigen::VectorXd y_hat(const Eigen::VectorXd& x) const = 0;

  std::uint64_t calls() const { return calls_.load(std::memory_order_relaxed); }
  void reset_calls() { calls_.store(0, std::memory_order_relaxed); }

  const OracleConfig& config() const { return cfg_; }

  // test instrumentation: observes (batch size, shared flag) per query
  std::function<void(int, bool)> on_query;

 protected:
  virtual void respond(const QueryPoint& pt, std::uint64_t zeta_key,
                       std::uint64_t xi_key, OracleResponse& out) const = 0;

  OracleConfig cfg_;
  mutable std::atomic<std::uint64_t> calls_{0};
};

// Additive isotropic Gaussian noise with per-component variance
// sigma^2 / (dim_x + dim_y), so the total matches the variance budget.
// Outside the reliability region every gradient estimate is replaced
// by a large constant vector, which makes illegal queries loud.
class GaussianOracle : public Oracle {
 public:
  GaussianOracle(const BilevelProblem& problem, OracleConfig cfg);

  Eigen::VectorXd y_hat(const Eigen::VectorXd& x) const override;
  const BilevelProblem& problem() const { return problem_; }

 protected:
  void respond(const QueryPoint& pt, std::uint64_t zeta_key,
               std::uint64_t xi_key, OracleResponse& out) const override;

 private:
  Eigen::VectorXd y_star_of(const Eigen::VectorXd& x) const;
  const BilevelProblem& problem_;
  double comp_sigma_f_, comp_sigma_g_;
};

// Probabilistic zero-chain oracle for the chain hard instance. A
// Bernoulli(p) draw gates the coordinate that would reveal new
// progress; the masked mean is the clipped gradient, so estimates are
// unbiased for it everywhere and for the true gradient within r_eps.
class ZeroChainOracle final : public Oracle {
 public:
  ZeroChainOracle(const ChainHardInstance& instance, OracleConfig cfg);

  Eigen::VectorXd y_hat(const Eigen::VectorXd& x) const override;
  const ChainHardInstance& instance() const { return instance_; }

  // fixed-outcome evaluators used by the certification suites
  Eigen::VectorXd grad_x_given(const Eigen::VectorXd& x, double y,
                               bool xi) const;
  double grad_y_given(const Eigen::VectorXd& x, double y, bool xi) const;

  // fills the blocks requested in `needs` for a fixed draw; one chain
  // pass serves all of them. Not billed.
  void evaluate(const Eigen::VectorXd& x, double y, bool xi,
                const QueryPoint& needs, OracleResponse& out) const;

 protected:
  void respond(const QueryPoint& pt, std::uint64_t zeta_key,
               std::uint64_t xi_key, OracleResponse& out) const override;

 private:
  const ChainHardInstance& instance_;
};

// Zero-chain oracle pushed through the orthonormal embedding:
// x-gradients are mapped by J(x)^T U, y-gradients and the anchor are
// evaluated at the pulled-back point.
class EmbeddedZeroChainOracle final : public Oracle {
 public:
  EmbeddedZeroChainOracle(const EmbeddedInstance& instance, OracleConfig cfg);

  Eigen::VectorXd y_hat(const Eigen::VectorXd& x) const override;
  const EmbeddedInstance& instance() const { return instance_; }

 protected:
  void respond(const QueryPoint& pt, std::uint64_t zeta_key,
               std::uint64_t xi_key, OracleResponse& out) const override;

 private:
  const EmbeddedInstance& instance_;
  ZeroChainOracle base_;
};

// Default progression probability max(eps^4 / sigma^2, eps^2 / l~^2),
// clamped to (0, 1].
double default_progression_probability(double epsilon, double sigma,
                                       double l_g1_tilde);

// Monte Carlo moments of the oracle's estimates at one query point.
// Deterministic for fixed (oracle seed, tag, n) regardless of thread
// count; samples are indexed draws tag + (0..n-1).
struct MomentReport {
  Eigen::VectorXd mean_f, mean_g;       // stacked (x, y) gradient means
  double cov_trace_f = 0.0, cov_trace_g = 0.0;
  double se_mean_f = 0.0, se_mean_g = 0.0;    // per-component worst SE
  double se_trace_f = 0.0, se_trace_g = 0.0;
  std::uint64_t samples = 0;
};

MomentReport estimate_moments(const Oracle& oracle, const Eigen::VectorXd& x,
                              const Eigen::VectorXd& y, std::uint64_t n,
                              RandomnessTag base = {0x3a0e5, 0, 0});

}  // namespace bilevel
