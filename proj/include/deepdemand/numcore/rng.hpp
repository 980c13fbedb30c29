#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace deepdemand {

/// SplitMix64 finalizer. Used to derive independent, counter-addressed streams from a master seed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for stream `stream` under master seed `seed` (e.g. one stream per consumer).
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t salt = 0) noexcept {
    return mix64(mix64(seed ^ mix64(salt + 0x632be59bd9b4e019ULL)) + stream);
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0, std::uint64_t salt = 0) {
    return Rng(stream_seed(seed, stream, salt));
}

inline double uniform01(Rng& rng) {
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
}

inline double standard_normal(Rng& rng) {
    return std::normal_distribution<double>(0.0, 1.0)(rng);
}

/// Fisher-Yates shuffle driven by our own engine so the permutation is stable across standard libraries.
template <typename T>
void shuffle_in_place(std::vector<T>& v, Rng& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(v[i - 1], v[j]);
    }
}

}  // namespace deepdemand
