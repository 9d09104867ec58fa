#pragma once

#include <cstdint>
#include <string_view>

namespace padkit {

/// SplitMix64: a 64-bit state generator (Steele, Lea, Flood 2014).
///
/// Chosen because the whole state is a single word, which makes seeding,
/// stream splitting and auditing trivial. The identifier returned by
/// `algorithm()` is written into run metadata.
class Prng {
   public:
    explicit Prng(std::uint64_t seed) : state_(seed) {}

    static constexpr std::string_view algorithm() { return "splitmix64"; }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);

    /// Standard normal via Box-Muller. Consumes two draws and discards the
    /// second variate so that `state()` captures the generator completely.
    double normal();

    bool bernoulli(double p) { return uniform() < p; }

    /// Derives an independent generator for a named sub-stream without
    /// advancing this one.
    Prng split(std::uint64_t stream) const;

    std::uint64_t state() const { return state_; }

   private:
    std::uint64_t state_;
};

}  // namespace padkit
