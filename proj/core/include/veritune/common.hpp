#pragma once

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace veritune {

// Error taxonomy. The CLI maps these onto process exit codes, so throw the
// narrowest type that applies.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// splitmix64: used both as a stream seeder and as a stateless hash mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d4a2fa183cb7aeULL;
  return x ^ (x >> 31);
}

// FNV-1a over bytes; stable across platforms, used to key stateless draws
// and to fingerprint parameter blobs in logs.
constexpr std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t hash_combine(std::uint64_t a, std::uint64_t b) {
  return splitmix64(a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2)));
}

// Deterministic generator with an explicitly serializable state. All
// randomness in the library flows through this type; std engines are not
// used so that byte-stable replays hold across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    state_ = splitmix64(seed ^ 0x6a09e667f3bcc908ULL);
    if (state_ == 0) state_ = 0x9e3779b97f4a7c15ULL;
    have_spare_ = false;
    spare_ = 0.0;
  }

  std::uint64_t next_u64() {
    state_ = splitmix64(state_);
    return state_;
  }

  // 53-bit mantissa uniform in [0, 1).
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, n) via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Box-Muller; caches the second variate.
  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u1 = uniform01();
    while (u1 <= 1e-300) u1 = uniform01();
    const double u2 = uniform01();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return mean + stddev * r * std::cos(theta);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // State round-trips through (state, have_spare, spare) exactly.
  std::uint64_t state() const { return state_; }
  bool have_spare() const { return have_spare_; }
  double spare() const { return spare_; }
  void restore(std::uint64_t state, bool have_spare, double spare) {
    state_ = state;
    have_spare_ = have_spare;
    spare_ = spare;
  }

 private:
  std::uint64_t state_ = 0;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// Derives an independent stream for a named purpose. Stateless callers pass
// the same tags and always get the same stream regardless of call order.
inline Rng derive_rng(std::uint64_t seed, std::string_view purpose, std::uint64_t index = 0) {
  std::uint64_t h = fnv1a(purpose);
  h = hash_combine(h, seed);
  h = hash_combine(h, index);
  return Rng(h);
}

// Numerically stable ln(sigmoid(x)) and sigmoid(x).
inline double log_sigmoid(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace veritune
