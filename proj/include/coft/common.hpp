#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace coft {

// Error hierarchy. Every failure the library can raise carries a stable
// kind string so the CLI can emit one-line machine-parsable errors.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& msg)
        : std::runtime_error(kind + ": " + msg), kind_(std::move(kind)) {}
    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

#define COFT_ERROR_KIND(NAME)                                       \
    class NAME : public Error {                                     \
    public:                                                         \
        explicit NAME(const std::string& msg) : Error(#NAME, msg) {} \
    }

COFT_ERROR_KIND(DimMismatch);
COFT_ERROR_KIND(ShapeMismatch);
COFT_ERROR_KIND(NonFinite);
COFT_ERROR_KIND(BadProbability);
COFT_ERROR_KIND(TokenOutOfRange);
COFT_ERROR_KIND(SeqTooLong);
COFT_ERROR_KIND(TraceMismatch);
COFT_ERROR_KIND(BadRange);
COFT_ERROR_KIND(BadRank);
COFT_ERROR_KIND(MissingGrad);
COFT_ERROR_KIND(MissingScore);
COFT_ERROR_KIND(UnknownSymbol);
COFT_ERROR_KIND(BadMethod);
COFT_ERROR_KIND(BadScope);
COFT_ERROR_KIND(BadConfig);
COFT_ERROR_KIND(IoError);

#undef COFT_ERROR_KIND

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

inline uint64_t mix_u64(uint64_t a, uint64_t b) {
    uint64_t s = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    return splitmix64(s);
}

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Deterministic counter-style RNG. The (seed, stream) pair fully determines
// the sequence on every platform; sub-streams are derived by hashing so
// per-layer / per-sample streams never overlap.
class SeededRng {
public:
    explicit SeededRng(uint64_t seed, uint64_t stream = 0)
        : seed_(seed), stream_(stream), state_(mix_u64(seed, mix_u64(stream, 0x5851F42D4C957F2DULL))) {}

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }

    uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1) with 53 random bits
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // standard normal via Box-Muller; the spare value is cached
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform(), u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * M_PI * u2;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    SeededRng substream(uint64_t id) const { return SeededRng(seed_, mix_u64(stream_, id)); }

private:
    uint64_t seed_;
    uint64_t stream_;
    uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace coft
