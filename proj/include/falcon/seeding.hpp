#pragma once

// Deterministic seed derivation. Every stage and every episode draws its RNG
// seed from the root seed through a fixed mixing function, so results are
// reproducible regardless of evaluation order or which stages are re-run.

#include <cstdint>

namespace falcon {

/// splitmix64 step (Steele, Lea, Flood 2014); advances the state and returns
/// the next value of the sequence.
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// Mixes a base seed with one or two stream identifiers. Different streams of
/// the same base are statistically independent.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream,
                                 std::uint64_t substream = 0) {
    std::uint64_t s = base;
    std::uint64_t z = splitmix64(s);
    s = z ^ (stream * 0xD6E8FEB86659FD93ull);
    z = splitmix64(s);
    s = z ^ (substream * 0xA3B195354A39B70Dull);
    return splitmix64(s);
}

}  // namespace falcon
