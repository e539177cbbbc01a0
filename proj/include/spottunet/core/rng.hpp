#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

namespace spottunet {

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace detail

/// PCG32. All stochastic code in the project draws from this generator so that
/// runs are bit-reproducible across platforms (no std::distribution involved).
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0) {
        state_ = 0;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state_;
        state_ = old * 6364136223846793005ULL + inc_;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((32u - rot) & 31u));
    }

    /// Uniform in [0, 1).
    double uniform() {
        return static_cast<double>(next_u32()) * (1.0 / 4294967296.0);
    }

    /// Uniform in (0, 1); never returns an exact 0 (safe for log()).
    double uniform_open() {
        return (static_cast<double>(next_u32()) + 0.5) * (1.0 / 4294967296.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Integer in [0, n).
    int uniform_int(int n) {
        return static_cast<int>(static_cast<std::uint64_t>(next_u32()) * static_cast<std::uint64_t>(n) >> 32);
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform_open();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    /// Standard Gumbel(0, 1): -log(-log(U)).
    double gumbel() {
        return -std::log(-std::log(uniform_open()));
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (int i = static_cast<int>(v.size()) - 1; i > 0; --i) {
            int j = uniform_int(i + 1);
            std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
        }
    }

private:
    std::uint64_t state_ = 0;
    std::uint64_t inc_ = 1;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

/// Per-run seed derivation. Every run's randomness is a pure function of the
/// experiment seed plus its labels: the labels are FNV-1a hashed, then folded
/// into the seed through one splitmix64 step per component.
inline std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t derive_seed(std::uint64_t base) { return base; }

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t component, Rest... rest);
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, const std::string& component, Rest... rest);
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, const char* component, Rest... rest);
template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, int component, Rest... rest);

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t component, Rest... rest) {
    std::uint64_t s = base ^ (component + 0x9e3779b97f4a7c15ULL + (base << 6) + (base >> 2));
    std::uint64_t st = s;
    return derive_seed(detail::splitmix64(st), rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, const std::string& component, Rest... rest) {
    return derive_seed(base, fnv1a(component), rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, const char* component, Rest... rest) {
    return derive_seed(base, fnv1a(std::string(component)), rest...);
}

template <typename... Rest>
std::uint64_t derive_seed(std::uint64_t base, int component, Rest... rest) {
    return derive_seed(base, static_cast<std::uint64_t>(component), rest...);
}

}  // namespace spottunet
