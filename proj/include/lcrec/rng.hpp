#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>

namespace lcrec {

namespace detail {

inline constexpr std::uint64_t splitmix64(std::uint64_t& state) noexcept
{
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline constexpr std::uint64_t mix_key(std::uint64_t key, std::uint64_t value) noexcept
{
    std::uint64_t s = key ^ (value + 0x632BE59BD9B4E019ULL + (key << 6) + (key >> 2));
    return splitmix64(s);
}

inline constexpr std::uint64_t rotl(std::uint64_t x, int k) noexcept
{
    return (x << k) | (x >> (64 - k));
}

}  // namespace detail

/**
 * Keyed random stream (xoshiro256** seeded through splitmix64).
 *
 * A stream is identified by a key path, e.g. (seed, replicate, purpose, index).
 * Identical key paths give identical draws on every run; `split` derives a child
 * stream from the key alone, so children do not depend on how many numbers the
 * parent has already produced. Satisfies UniformRandomBitGenerator.
 */
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) noexcept : key_(detail::mix_key(0x5EEDULL, seed)) { reseed(); }

    Rng(std::initializer_list<std::uint64_t> path) noexcept : key_(0x5EEDULL)
    {
        for (auto v : path) key_ = detail::mix_key(key_, v);
        reseed();
    }

    [[nodiscard]] Rng split(std::uint64_t id) const noexcept
    {
        Rng child;
        child.key_ = detail::mix_key(key_, id);
        child.reseed();
        return child;
    }

    [[nodiscard]] std::uint64_t key() const noexcept { return key_; }

    static constexpr result_type min() noexcept { return 0; }
    static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

    result_type operator()() noexcept
    {
        const std::uint64_t result = detail::rotl(s_[1] * 5, 7) * 9;
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = detail::rotl(s_[3], 45);
        return result;
    }

    /// Uniform on the open interval (0, 1).
    double uniform() noexcept
    {
        return (static_cast<double>((*this)() >> 11) + 0.5) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

    bool bernoulli(double p) noexcept { return uniform() < p; }

    /// Uniform integer in [0, n). Multiply-shift; the bias is below 2^-40 for the sizes used here.
    std::uint64_t below(std::uint64_t n) noexcept
    {
        return static_cast<std::uint64_t>((static_cast<unsigned __int128>((*this)()) * n) >> 64);
    }

    double normal() noexcept;

private:
    void reseed() noexcept
    {
        std::uint64_t s = key_;
        for (auto& w : s_) w = detail::splitmix64(s);
    }

    std::uint64_t key_;
    std::array<std::uint64_t, 4> s_{};
};

}  // namespace lcrec

#include "lcrec/detail/normal.hpp"

namespace lcrec {

inline double Rng::normal() noexcept { return detail::standard_normal_quantile(uniform()); }

}  // namespace lcrec
