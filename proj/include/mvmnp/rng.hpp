#pragma once

// Counter-based random streams. The generator is Philox4x32-10; a stream is
// addressed by (seed, stream id) and consumes a 64-bit block counter, so any
// (iteration, observation) pair can own a statistically independent substream
// that is reproducible regardless of thread schedule or evaluation order.

#include "mvmnp/normal.hpp"
#include "mvmnp/types.hpp"

#include <cmath>
#include <cstdint>

namespace mvmnp {

namespace detail {

inline void philox_round(std::uint32_t ctr[4], const std::uint32_t key[2]) {
  const std::uint64_t p0 = static_cast<std::uint64_t>(0xD2511F53u) * ctr[0];
  const std::uint64_t p1 = static_cast<std::uint64_t>(0xCD9E8D57u) * ctr[2];
  const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
  const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
  const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
  const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
  const std::uint32_t out0 = hi1 ^ ctr[1] ^ key[0];
  const std::uint32_t out1 = lo1;
  const std::uint32_t out2 = hi0 ^ ctr[3] ^ key[1];
  const std::uint32_t out3 = lo0;
  ctr[0] = out0;
  ctr[1] = out1;
  ctr[2] = out2;
  ctr[3] = out3;
}

inline void philox4x32_10(const std::uint32_t ctr_in[4], const std::uint32_t key_in[2],
                          std::uint32_t out[4]) {
  std::uint32_t key[2] = {key_in[0], key_in[1]};
  out[0] = ctr_in[0];
  out[1] = ctr_in[1];
  out[2] = ctr_in[2];
  out[3] = ctr_in[3];
  for (int round = 0; round < 10; ++round) {
    if (round > 0) {
      key[0] += 0x9E3779B9u;
      key[1] += 0xBB67AE85u;
    }
    philox_round(out, key);
  }
}

// 64-bit finalizer used to decorrelate seed/tag combinations.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace detail

// Derives a phase seed from a master seed and a short label, so distinct
// pipeline phases never share streams.
inline std::uint64_t derive_seed(std::uint64_t master, const char* tag) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char* c = tag; *c; ++c) h = (h ^ static_cast<std::uint64_t>(*c)) * 0x100000001b3ull;
  return detail::splitmix64(master ^ h);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) { reset(seed, stream); }

  void reset(std::uint64_t seed, std::uint64_t stream) {
    key_[0] = static_cast<std::uint32_t>(seed);
    key_[1] = static_cast<std::uint32_t>(seed >> 32);
    stream_[0] = static_cast<std::uint32_t>(stream);
    stream_[1] = static_cast<std::uint32_t>(stream >> 32);
    counter_ = 0;
    have_ = 0;
  }

  std::uint32_t next_u32() {
    if (have_ == 0) {
      const std::uint32_t ctr[4] = {static_cast<std::uint32_t>(counter_),
                                    static_cast<std::uint32_t>(counter_ >> 32), stream_[0],
                                    stream_[1]};
      detail::philox4x32_10(ctr, key_, block_);
      ++counter_;
      have_ = 4;
    }
    return block_[4 - have_--];
  }

  std::uint64_t next_u64() {
    const std::uint64_t lo = next_u32();
    const std::uint64_t hi = next_u32();
    return lo | (hi << 32);
  }

  // Uniform on the open interval (0, 1).
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * (1.0 / 9007199254740992.0);
  }

  double uniform(double a, double b) { return a + (b - a) * uniform(); }

  double normal() { return norm_quantile(uniform()); }

  double exponential() { return -std::log(uniform()); }

  // Standard normal conditioned on X > a. Inverse-CDF in the body, an
  // exponential rejection step beyond 5 standard deviations where the CDF
  // saturates.
  double truncated_normal_lower(double a) {
    if (a < 5.0) {
      const double pa = norm_cdf(a);
      return norm_quantile(pa + uniform() * (1.0 - pa));
    }
    const double alpha = 0.5 * (a + std::sqrt(a * a + 4.0));
    for (;;) {
      const double x = a + exponential() / alpha;
      const double d = x - alpha;
      if (std::log(uniform()) <= -0.5 * d * d) return x;
    }
  }

  double truncated_normal_upper(double b) { return -truncated_normal_lower(-b); }

  // Standard normal conditioned on a < X < b, for intervals with
  // non-negligible mass (proposal kernels on bounded domains).
  double truncated_normal_interval(double a, double b) {
    const double pa = norm_cdf(a);
    const double pb = norm_cdf(b);
    if (!(pb > pa)) throw NumericalError("truncated_normal_interval: empty probability mass");
    return norm_quantile(pa + uniform() * (pb - pa));
  }

  // Marsaglia-Tsang; shape > 0, unit scale.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  // X with density proportional to x^{-shape-1} exp(-rate / x).
  double inverse_gamma(double shape, double rate) { return rate / gamma(shape); }

 private:
  std::uint32_t key_[2] = {0, 0};
  std::uint32_t stream_[2] = {0, 0};
  std::uint64_t counter_ = 0;
  std::uint32_t block_[4] = {0, 0, 0, 0};
  int have_ = 0;
};

// Stream-id composition: 8-bit purpose, 24-bit iteration, 32-bit unit index.
// Iterations beyond 2^24 recycle ids across distant iterations, which is
// harmless because the block counter still separates the draws.
enum class StreamPurpose : std::uint64_t {
  generic = 0,
  dgp = 1,
  split = 2,
  calibrate_psi = 3,
  calibrate_fit = 4,
  latent_init = 5,
  latent_sweep = 6,
  beta_draw = 7,
  angle_proposal = 8,
  vb_init = 9,
  vb_zeta = 10,
  vb_subsample = 11,
  vb_diag = 12,
  predictive = 13,
};

inline Rng make_stream(std::uint64_t seed, StreamPurpose purpose, std::uint64_t iteration = 0,
                       std::uint64_t unit = 0) {
  const std::uint64_t stream = (static_cast<std::uint64_t>(purpose) << 56) |
                               ((iteration & 0xFFFFFFull) << 32) | (unit & 0xFFFFFFFFull);
  return Rng(seed, stream);
}

}  // namespace mvmnp
