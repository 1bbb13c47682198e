#pragma once

#include <cstdint>
#include <cmath>

#include <Eigen/Core>

namespace bilevel {

// Counter-based randomness: every draw is a pure function of
// (key, counter), so concurrent callers never share mutable generator
// state and results do not depend on evaluation order.
namespace rng {

inline std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t a, std::uint64_t b) {
  return mix64(a ^ (0x9e3779b97f4a7c15ULL + (b << 6) + (b >> 2) + b));
}

// Derives a stream key from a seed and up to three stream coordinates.
inline std::uint64_t key_of(std::uint64_t seed, std::uint64_t a,
                            std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t k = mix64(seed);
  k = combine(k, a);
  k = combine(k, b);
  k = combine(k, c);
  return k;
}

inline std::uint64_t bits(std::uint64_t key, std::uint64_t counter) {
  return mix64(key ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

// Uniform on [0, 1).
inline double u01(std::uint64_t key, std::uint64_t counter) {
  return static_cast<double>(bits(key, counter) >> 11) * 0x1.0p-53;
}

// Uniform on (0, 1]; safe as a log() argument.
inline double u01_open(std::uint64_t key, std::uint64_t counter) {
  return (static_cast<double>(bits(key, counter) >> 11) + 1.0) * 0x1.0p-53;
}

double normal_quantile(double p);

// Standard normal draw (inverse-CDF; one counter per draw).
inline double gaussian(std::uint64_t key, std::uint64_t counter) {
  return normal_quantile(u01_open(key, counter));
}

inline bool bernoulli(std::uint64_t key, std::uint64_t counter, double p) {
  return u01(key, counter) < p;
}

// Fills `v` with i.i.d. standard normals, counters [base, base + size).
inline void gaussian_fill(std::uint64_t key, std::uint64_t base,
                          Eigen::Ref<Eigen::VectorXd> v) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = gaussian(key, base + static_cast<std::uint64_t>(i));
}

// Unit vector drawn uniformly from the sphere.
inline Eigen::VectorXd unit_vector(std::uint64_t key, std::uint64_t base,
                                   int dim) {
  Eigen::VectorXd v(dim);
  double n = 0.0;
  do {
    gaussian_fill(key, base, v);
    n = v.norm();
    base += static_cast<std::uint64_t>(dim);
  } while (n < 1e-12);
  return v / n;
}

// FNV-1a over raw bytes; used to key per-point deterministic draws.
inline std::uint64_t hash_bytes(const void* data, std::size_t n,
                                std::uint64_t h = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_vector(const Eigen::VectorXd& v,
                                 std::uint64_t h = 0xcbf29ce484222325ULL) {
  return hash_bytes(v.data(), sizeof(double) * static_cast<std::size_t>(v.size()), h);
}

}  // namespace rng
}  // namespace bilevel
