#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dempt {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }

// Reserved vocabulary ids, fixed across every corpus and model.
namespace tokens {
inline constexpr int kPad = 0;
inline constexpr int kBeginTarget = 1;
inline constexpr int kEndOfSequence = 2;
inline constexpr int kBeginDocument = 3;  // sentinel standing in for an empty context
inline constexpr int kSeparator = 4;
inline constexpr int kReservedCount = 5;
}  // namespace tokens

#define DEMPT_CHECK(cond, msg)                       \
  do {                                               \
    if (!(cond)) ::dempt::fail(msg);                 \
  } while (0)

// splitmix64, used to derive independent stream seeds from (seed, tag) pairs
inline uint64_t mix_seed(uint64_t seed, uint64_t tag) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Deterministic RNG with fully specified draw functions so corpora and
// parameter inits are byte-identical across platforms and stdlib versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) {
    // seed xoshiro256** state via splitmix64
    uint64_t x = seed;
    for (auto& w : s_) {
      x += 0x9e3779b97f4a7c15ULL;
      uint64_t z = x;
      z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
      z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
      w = z ^ (z >> 31);
    }
  }

  uint64_t next_u64() {
    auto rotl = [](uint64_t v, int k) { return (v << k) | (v >> (64 - k)); };
    uint64_t result = rotl(s_[1] * 5, 7) * 9;
    uint64_t t = s_[1] << 17;
    s_[2] ^= s_[0];
    s_[3] ^= s_[1];
    s_[1] ^= s_[2];
    s_[0] ^= s_[3];
    s_[2] ^= t;
    s_[3] = rotl(s_[3], 45);
    return result;
  }

  // uniform in [0, n) without modulo bias
  uint64_t uniform(uint64_t n) {
    DEMPT_CHECK(n > 0, "Rng::uniform: n must be positive");
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(uniform(static_cast<uint64_t>(hi - lo + 1)));
  }

  double uniform_real() {  // [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform_real() < p; }

  // Box-Muller; one value per call, cached pair member keeps it deterministic
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform_real();
    double u2 = uniform_real();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <class Vec>
  void shuffle(Vec& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = uniform(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t s_[4];
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace dempt
