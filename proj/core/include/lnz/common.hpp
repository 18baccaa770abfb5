#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace lnz {

// Base class for everything this library throws.
class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

// Tensor shape / dimension disagreements.
class ShapeError : public Error {
  public:
    using Error::Error;
};

// Out-of-range token ids, axes, layer indices.
class IndexError : public Error {
  public:
    using Error::Error;
};

// An operation was asked of a kind/config that does not support it.
class CapabilityError : public Error {
  public:
    using Error::Error;
};

// NaN/Inf detected where finite values are required.
class NumericsError : public Error {
  public:
    using Error::Error;
};

// Malformed files: bad magic, truncation, meta disagreement.
class FormatError : public Error {
  public:
    using Error::Error;
};

// Invalid or inconsistent run configuration.
class ConfigError : public Error {
  public:
    using Error::Error;
};

// Missing or incompatible input artifacts (checkpoints, data files).
class AssetError : public Error {
  public:
    using Error::Error;
};

// Sequencing violations: out-of-order stages, reused graphs.
class StateError : public Error {
  public:
    using Error::Error;
};

// Seeded RNG used everywhere randomness is needed. One named stream per
// purpose keeps runs reproducible when components are reordered.
class Rng {
  public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    // Derive an independent stream for a named purpose.
    Rng fork(const std::string& purpose) const;

    float normal(float mean = 0.f, float stddev = 1.f) {
        return std::normal_distribution<float>(mean, stddev)(gen_);
    }
    float uniform(float lo = 0.f, float hi = 1.f) {
        return std::uniform_real_distribution<float>(lo, hi)(gen_);
    }
    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        return std::uniform_int_distribution<int64_t>(lo, hi)(gen_);
    }
    uint64_t next_u64() { return gen_(); }

    std::mt19937_64& engine() { return gen_; }

  private:
    uint64_t seed_ = 0;
    std::mt19937_64 gen_;
};

// Stateless 64-bit mix, used to derive per-index randomness in pure
// functions of (seed, index).
uint64_t hash_mix(uint64_t a, uint64_t b);
uint64_t hash_str(const std::string& s);

// FNV-1a over arbitrary bytes; stable across platforms. Used for
// checkpoint and parameter hashing.
uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull);

namespace threads {
// Worker-thread cap. Initialized from LINEARIZE_THREADS (if set), else
// the hardware count. set() re-applies the cap process-wide.
int count();
void set(int n);
void init_from_env();
}  // namespace threads

// Operation counters used by cost-scaling assertions. Thread-local.
struct OpCounters {
    uint64_t mixer_state_updates = 0;  // one per (token, layer, head, sequence)
    uint64_t attn_score_entries = 0;   // one per materialized attention score
    void reset() { *this = OpCounters{}; }
};
OpCounters& op_counters();

}  // namespace lnz
