#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace dladiff {

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Per-stage seed: mix64 folded over FNV-1a(tag) and an index. Every stage of
/// a run draws from derive_seed(global_seed, "<stage>", i), so re-running one
/// stage reproduces the same stream without replaying earlier stages.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : tag) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    return mix64(mix64(base ^ h) + index);
}

inline std::mt19937_64 make_rng(std::uint64_t base, std::string_view tag, std::uint64_t index = 0) {
    return std::mt19937_64(derive_seed(base, tag, index));
}

}  // namespace dladiff
