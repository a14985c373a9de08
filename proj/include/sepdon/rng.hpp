#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace sepdon {

// Counter-based generator: every output is a pure function of (key, counter),
// with the splitmix64 finalizer as the bijective mixer. Independent streams
// are derived by folding a label into the key, so data / init / shuffle
// streams never overlap regardless of how much each one consumes:
//
//   Rng root(seed);
//   Rng data = root.split("data");
//   Rng init = root.split("init").split(layer_index);
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : key_(mix(seed ^ mix(stream + 0x9e3779b97f4a7c15ull))), counter_(0) {}

    Rng split(std::uint64_t id) const { return Rng(derived_tag{}, key_, id + 1); }

    Rng split(std::string_view label) const {
        std::uint64_t h = 0xcbf29ce484222325ull;
        for (char c : label) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        return Rng(derived_tag{}, key_, h);
    }

    std::uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++counter_); }

    // Uniform in [0,1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double next_uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Standard normal via Box-Muller; consumes two uniforms per pair.
    double next_normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - next_unit(); // (0,1]
        double u2 = next_unit();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

private:
    struct derived_tag {};
    Rng(derived_tag, std::uint64_t key, std::uint64_t stream_plus1)
        : key_(mix(key ^ mix(stream_plus1 * 0xbf58476d1ce4e5b9ull))), counter_(0) {}

    static std::uint64_t mix(std::uint64_t z) {
        z ^= z >> 30;
        z *= 0xbf58476d1ce4e5b9ull;
        z ^= z >> 27;
        z *= 0x94d049bb133111ebull;
        z ^= z >> 31;
        return z;
    }

    std::uint64_t key_;
    std::uint64_t counter_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace sepdon
