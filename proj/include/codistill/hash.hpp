#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace codistill {

inline constexpr std::uint64_t kFnvOffset = 14695981039346656037ull;
inline constexpr std::uint64_t kFnvPrime = 1099511628211ull;

/// 64-bit FNV-1a. `state` lets callers chain chunks or start from a seeded basis.
inline std::uint64_t fnv1a(std::span<const unsigned char> bytes, std::uint64_t state = kFnvOffset) {
    for (unsigned char b : bytes) {
        state ^= b;
        state *= kFnvPrime;
    }
    return state;
}

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t state = kFnvOffset) {
    return fnv1a({reinterpret_cast<const unsigned char*>(s.data()), s.size()}, state);
}

std::string hex64(std::uint64_t v);

/// FNV-1a of a whole file's bytes; throws Error if unreadable.
std::uint64_t fnv1a_file(const std::string& path);

}  // namespace codistill
