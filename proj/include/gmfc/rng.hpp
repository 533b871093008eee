#pragma once

#include <cmath>
#include <cstdint>

namespace gmfc {

/// Counter-based random number generation.
///
/// Every draw is a pure function of (seed, stream, counter) where the stream
/// packs (purpose, unit, member) and the counter packs (step, draw).  This
/// makes all Monte Carlo paths reproducible independent of evaluation order
/// and thread count, and lets coupled experiments share noise by sharing keys.
namespace rng {

/// Role of a stream; keeps draws for different uses statistically independent.
enum class purpose : std::uint8_t {
  initial = 1,     ///< initial-condition uniforms
  brownian = 2,    ///< Brownian increments
  sample = 3,      ///< measure-view sampling
  sliced = 4,      ///< sliced-distance projection directions
  scenario = 5,    ///< experiment-level randomization (directions, controls)
  bernoulli = 6,   ///< random interaction matrices
  validation = 7,  ///< model validation probes
};

/// Philox 4x32-10 block: 128-bit counter, 64-bit key, 128-bit output.
struct block {
  std::uint32_t x[4];
};

inline block philox4x32(std::uint32_t c0, std::uint32_t c1, std::uint32_t c2,
                        std::uint32_t c3, std::uint32_t k0, std::uint32_t k1) {
  constexpr std::uint32_t m0 = 0xD2511F53u, m1 = 0xCD9E8D57u;
  constexpr std::uint32_t w0 = 0x9E3779B9u, w1 = 0xBB67AE85u;
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(m0) * c0;
    const std::uint64_t p1 = static_cast<std::uint64_t>(m1) * c2;
    const std::uint32_t h0 = static_cast<std::uint32_t>(p0 >> 32);
    const std::uint32_t l0 = static_cast<std::uint32_t>(p0);
    const std::uint32_t h1 = static_cast<std::uint32_t>(p1 >> 32);
    const std::uint32_t l1 = static_cast<std::uint32_t>(p1);
    const std::uint32_t n0 = h1 ^ c1 ^ k0;
    const std::uint32_t n2 = h0 ^ c3 ^ k1;
    c0 = n0;
    c1 = l1;
    c2 = n2;
    c3 = l0;
    k0 += w0;
    k1 += w1;
  }
  return block{{c0, c1, c2, c3}};
}

/// Packs (purpose, unit, member) into a 64-bit stream id.  `unit` addresses a
/// label or agent (24 bits), `member` a particle within it (28 bits).
inline std::uint64_t stream(purpose p, std::uint64_t unit, std::uint64_t member) {
  return (static_cast<std::uint64_t>(p) << 56) | ((unit & 0xFFFFFFu) << 28) |
         (member & 0xFFFFFFFu);
}

/// Packs (step, draw) into a 64-bit counter; `draw` indexes draws within a step.
inline std::uint64_t counter(std::uint64_t step, std::uint64_t draw) {
  return (step << 20) | (draw & 0xFFFFFu);
}

/// Raw 64 uniform bits for (seed, stream, counter).
inline std::uint64_t bits(std::uint64_t seed, std::uint64_t strm, std::uint64_t ctr) {
  const block b = philox4x32(static_cast<std::uint32_t>(ctr),
                             static_cast<std::uint32_t>(ctr >> 32),
                             static_cast<std::uint32_t>(strm),
                             static_cast<std::uint32_t>(strm >> 32),
                             static_cast<std::uint32_t>(seed),
                             static_cast<std::uint32_t>(seed >> 32));
  return (static_cast<std::uint64_t>(b.x[1]) << 32) | b.x[0];
}

/// Uniform draw on the open interval (0,1); 53-bit resolution, never 0 or 1.
inline double uniform01(std::uint64_t seed, std::uint64_t strm, std::uint64_t ctr) {
  return static_cast<double>(bits(seed, strm, ctr) >> 11) * 0x1.0p-53 + 0x1.0p-54;
}

/// Inverse standard-normal CDF (Wichura's AS241, double precision).
double normal_quantile(double p);

/// Standard normal draw via inverse-CDF transform of uniform01.
inline double normal(std::uint64_t seed, std::uint64_t strm, std::uint64_t ctr) {
  return normal_quantile(uniform01(seed, strm, ctr));
}

/// Derives a child seed for an experiment cell (e.g. one (N, repetition) pair)
/// from a base seed; distinct cells get statistically independent streams.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = base ^ (0x9E3779B97F4A7C15ull * (a + 1)) ^
                    (0xC2B2AE3D27D4EB4Full * (b + 1));
  z ^= z >> 30;
  z *= 0xBF58476D1CE4E5B9ull;
  z ^= z >> 27;
  z *= 0x94D049BB133111EBull;
  z ^= z >> 31;
  return z;
}

/// Convenience cursor over one stream: hands out consecutive draws.
class stream_cursor {
 public:
  stream_cursor(std::uint64_t seed, purpose p, std::uint64_t unit, std::uint64_t member)
      : seed_(seed), strm_(stream(p, unit, member)) {}

  double next_uniform() { return uniform01(seed_, strm_, next_++); }
  double next_normal() { return normal_quantile(next_uniform()); }

 private:
  std::uint64_t seed_;
  std::uint64_t strm_;
  std::uint64_t next_ = 0;
};

}  // namespace rng
}  // namespace gmfc
