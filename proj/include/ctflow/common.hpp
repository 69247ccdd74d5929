#pragma once

#include <atomic>
#include <cstdint>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace ctf {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Precondition violations: degenerate inputs, cardinality mismatches, bad shapes.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

class InvalidRotation : public InvalidArgument {
 public:
  using InvalidArgument::InvalidArgument;
};

// Rejection-sampling budget exhausted while generating a sample.
class GenerationError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Structured-file mismatch: wrong checkpoint shape, unknown CSV column, ...
class SchemaError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// splitmix64 with a Box-Muller gaussian on top. The generator is fully
// specified here (no std::*_distribution) so seeded runs reproduce across
// standard libraries, which the dataset and checkpoint formats rely on.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  std::size_t uniform_index(std::size_t n) {
    return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
  }

  // Standard normal via Box-Muller; generates pairs, caches the second.
  double gaussian() {
    if (has_cached_) {
      has_cached_ = false;
      return cached_;
    }
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * M_PI * u2;
    cached_ = r * std::sin(a);
    has_cached_ = true;
    return r * std::cos(a);
  }

 private:
  std::uint64_t state_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

// Stable seed derivation so per-sample work is order-independent under
// worker pools: hash(global_seed, index) -> sub-seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  Rng r(a ^ (0x632be59bd9b4e019ull + b));
  r.next_u64();
  return r.next_u64();
}

// ---------------------------------------------------------------------------
// Worker pool

// CTF_NUM_WORKERS controls fan-out in the data generator and evaluators;
// defaults to 1. Outputs never depend on the worker count.
int num_workers();

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

// ---------------------------------------------------------------------------
// Logging

void set_log_quiet(bool quiet);
void set_log_json(bool json);
void log_info(const std::string& msg);
void log_warn(const std::string& msg);

}  // namespace ctf
