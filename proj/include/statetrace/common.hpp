#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace statetrace {

/// Deterministic RNG stream. All randomness in the toolkit flows from one
/// master seed through named substreams so that experiments are reproducible
/// bit-for-bit regardless of which stages run or in what order.
///
/// The raw engine is std::mt19937_64 (fully specified by the standard); the
/// distribution transforms below are implemented by hand because the standard
/// library distributions are implementation-defined.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : eng_(seed) {}

    static std::uint64_t mix64(std::uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    }

    static std::uint64_t hash_name(std::string_view name) {
        std::uint64_t h = 0xcbf29ce484222325ULL; // FNV-1a
        for (unsigned char c : name) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    /// Derive an independent seed from (master seed, stream name, index).
    static std::uint64_t derive_seed(std::uint64_t master, std::string_view name,
                                     std::uint64_t index = 0) {
        return mix64(master ^ mix64(hash_name(name) + 0x9e3779b97f4a7c15ULL * (index + 1)));
    }

    /// Derive an independent stream from (master seed, stream name, index).
    static RngStream substream(std::uint64_t master, std::string_view name,
                               std::uint64_t index = 0) {
        return RngStream(derive_seed(master, name, index));
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n). n must be positive.
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        return static_cast<std::int64_t>(eng_() % static_cast<std::uint64_t>(n));
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <class Vec>
    void shuffle(Vec& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            const std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::mt19937_64& engine() { return eng_; }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace statetrace
