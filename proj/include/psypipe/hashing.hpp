#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace psypipe {

// FNV-1a, 64 bit. Used for config hashes and seed derivation; must stay
// stable across platforms and releases because stored manifests embed it.
inline uint64_t fnv1a64(std::string_view data, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : data) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t fnv1a64_u64(uint64_t v, uint64_t h) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xffu;
        h *= 0x100000001b3ull;
    }
    return h;
}

// Stable seed derivation: master seed plus any number of string/integer parts.
class SeedChain {
public:
    explicit SeedChain(uint64_t master) : h_(fnv1a64_u64(master, 0xcbf29ce484222325ull)) {}
    SeedChain& mix(std::string_view part) {
        h_ = fnv1a64(part, h_);
        h_ = fnv1a64("/", h_);
        return *this;
    }
    SeedChain& mix(uint64_t part) {
        h_ = fnv1a64_u64(part, h_);
        return *this;
    }
    uint64_t value() const { return h_; }

private:
    uint64_t h_;
};

inline uint64_t derive_seed(uint64_t master, std::string_view a) {
    return SeedChain(master).mix(a).value();
}
inline uint64_t derive_seed(uint64_t master, std::string_view a, std::string_view b) {
    return SeedChain(master).mix(a).mix(b).value();
}
inline uint64_t derive_seed(uint64_t master, std::string_view a, std::string_view b, uint64_t k) {
    return SeedChain(master).mix(a).mix(b).mix(k).value();
}

inline std::string hash_hex(uint64_t h) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[h & 0xf];
        h >>= 4;
    }
    return out;
}

}  // namespace psypipe
