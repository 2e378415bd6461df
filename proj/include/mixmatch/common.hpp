#ifndef MIXMATCH_COMMON_HPP
#define MIXMATCH_COMMON_HPP

#include <cstdint>
#include <stdexcept>
#include <string>

namespace mixmatch {

// Ids of the reserved tokens. The vocabulary builder always places them at
// these positions; checkpoints carry them so a bundle is self-contained.
struct SpecialTokens {
    int pad = 0;
    int unk = 1;
    int cls = 2;
    int mask = 3;

    bool operator==(const SpecialTokens&) const = default;
};

// 64-bit FNV-1a. Used for config hashing, checkpoint checksums and
// deterministic pseudo-role assignment.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t seed = 1469598103934665603ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s,
                           std::uint64_t seed = 1469598103934665603ULL) {
    return fnv1a(s.data(), s.size(), seed);
}

// splitmix64 finalizer; used to derive independent seeds from a base seed
// plus a stream tag, so sub-tasks never share RNG state.
inline std::uint64_t mix_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t base, const std::string& tag) {
    return mix_seed(base, fnv1a(tag));
}

}  // namespace mixmatch

#endif  // MIXMATCH_COMMON_HPP
