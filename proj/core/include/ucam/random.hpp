#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace ucam {

/// Counter-based generator: the i-th draw of stream (seed, stream) is
/// splitmix64(key + i * 0x9E3779B97F4A7C15) with key = splitmix64(seed ^
/// splitmix64(stream)). Any implementation of those two lines reproduces
/// every corpus and dropout mask bit for bit.
class Rng {
  public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();

    /// Uniform in [0, 1) with 53 random bits.
    double uniform();

    /// Uniform in [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller; consumes exactly two draws.
    double normal();

    /// Uniform integer in [0, n), rejection-sampled so it is unbiased.
    std::size_t below(std::size_t n);

    std::uint64_t counter() const { return counter_; }

    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

  private:
    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace ucam
