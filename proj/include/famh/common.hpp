#pragma once
// Shared plumbing: error codes, deterministic RNG, logging, atomic file writes.

#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <random>

namespace famh {

enum class Err {
  // ingest
  parse_error,
  non_monotone_time,
  empty_file,
  bad_magic,
  truncated_file,
  unsupported_version,
  segment_too_short,
  no_usable_segment,
  indivisible_length,
  coverage_error,
  invalid_config,
  missing_recording,
  bad_offset,
  // preprocess
  rate_too_low,
  too_short,
  calibration_insufficient_coverage,
  calibration_no_convergence,
  // spectral
  bad_length,
  too_few_frames,
  shape_mismatch,
  all_zero_weights,
  empty_mask,
  // model
  odd_dim,
  // training
  non_scalar_output,
  nan_gradient,
  io_error,
  version_mismatch,
  all_labels_missing,
  no_labels,
  // metrics
  length_mismatch,
  empty_matrix,
  degenerate_marginals,
  // cli
  config_error,
};

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Err code() const noexcept { return code_; }

 private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& msg) { throw Error(code, msg); }

// Process exit codes: 1 config, 2 data, 3 numeric abort.
inline int exit_code_for(Err code) {
  switch (code) {
    case Err::config_error:
    case Err::invalid_config:
      return 1;
    case Err::nan_gradient:
      return 3;
    default:
      return 2;
  }
}

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed, a stream tag and up to
// two counters (epoch, step). Same inputs, same seed.
inline uint64_t mix_seed(uint64_t seed, std::string_view stream, uint64_t a = 0, uint64_t b = 0) {
  uint64_t h = 1469598103934665603ull;
  for (char c : stream) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  uint64_t s = seed ^ h;
  uint64_t r = splitmix64(s);
  s ^= a * 0x632be59bd9b4e019ull + 1;
  r ^= splitmix64(s);
  s ^= b * 0xd6e8feb86659fd93ull + 1;
  r ^= splitmix64(s);
  return r;
}

// mt19937_64 engine with hand-rolled draws so sequences do not depend on the
// standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0,1)
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // unbiased integer in [0,n)
  uint64_t below(uint64_t n) {
    if (n == 0) return 0;
    uint64_t threshold = (~n + 1) % n;  // 2^64 mod n
    uint64_t x;
    do {
      x = next_u64();
    } while (x < threshold);
    return x % n;
  }

  double gaussian(double mean = 0.0, double std = 1.0) {
    if (has_spare_) {
      has_spare_ = false;
      return mean + spare_ * std;
    }
    double u1 = 1.0 - uniform01();  // (0,1]
    double u2 = uniform01();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return mean + r * std::cos(theta) * std;
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

enum class LogLevel { error = 0, info = 1, debug = 2 };

LogLevel log_level();
void logf(LogLevel lvl, const char* fmt, ...);

// Writes contents to a temp file next to `path`, then renames onto it.
void write_file_atomic(const std::filesystem::path& path, const std::string& contents);

std::string read_file(const std::filesystem::path& path);

}  // namespace famh
