#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <limits>
#include <stdexcept>
#include <string>

namespace sgpc {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or out-of-contract input (exit code 2 at the CLI).
class InputError : public Error {
 public:
  using Error::Error;
};

/// Malformed stream or file contents (exit code 3 at the CLI).
class FormatError : public Error {
 public:
  enum class Kind { BadMagic, BadVersion, BadChecksum, Truncated, Malformed };

  FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}

  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Model/config/stream dimension disagreement (exit code 4 at the CLI).
class ConfigMismatch : public Error {
 public:
  using Error::Error;
};

// splitmix64 finalizer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Order-sensitive hash of a sequence of 64-bit values.
template <typename... Ts>
constexpr std::uint64_t mix64(Ts... values) noexcept {
  std::uint64_t h = 0x243F6A8885A308D3ull;
  ((h = splitmix64(h ^ static_cast<std::uint64_t>(values))), ...);
  return h;
}

/// Counter-based generator: draw k is a pure function of (seed, k), so any
/// subsequence can be regenerated without replaying the stream.
class CounterRng {
 public:
  explicit constexpr CounterRng(std::uint64_t seed) noexcept : seed_(seed) {}

  constexpr std::uint64_t bits(std::uint64_t counter) const noexcept {
    return splitmix64(splitmix64(seed_) ^ (counter * 0xD1B54A32D192ED03ull));
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform(std::uint64_t counter) const noexcept {
    return static_cast<double>(bits(counter) >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, bound) via Lemire's multiply-shift reduction.
  std::uint64_t below(std::uint64_t counter, std::uint64_t bound) const noexcept {
    const unsigned __int128 m =
        static_cast<unsigned __int128>(bits(counter)) * static_cast<unsigned __int128>(bound);
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard normal via Box-Muller on counters (counter, counter + 1).
  double normal(std::uint64_t counter) const noexcept {
    // 1 - u keeps the log argument in (0, 1].
    const double u1 = 1.0 - uniform(counter);
    const double u2 = uniform(counter + 1);
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Sequential cursor over the counter space.
  class Stream {
   public:
    explicit Stream(const CounterRng& rng, std::uint64_t start = 0) : seed_(rng.seed()), next_(start) {}
    double uniform() { return rng().uniform(next_++); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    std::uint64_t below(std::uint64_t bound) { return rng().below(next_++, bound); }
    double normal() {
      const double v = rng().normal(next_);
      next_ += 2;
      return v;
    }

   private:
    CounterRng rng() const { return CounterRng(seed_); }
    std::uint64_t seed_;
    std::uint64_t next_;
  };

  Stream stream(std::uint64_t start = 0) const { return Stream(*this, start); }

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
};

}  // namespace sgpc
