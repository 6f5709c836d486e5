// Counter-based random streams: every draw is a pure function of
// (seed, stream tags, counter), so results do not depend on how work is
// split across threads or on the order draws are requested.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

namespace smp::rng {

inline std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Immutable stream key. child(tag) derives an independent substream;
// uniform/normal draw the value at a given counter.
class Stream {
  public:
    explicit Stream(std::uint64_t seed) : key_(mix64(seed)) {}

    Stream child(std::uint64_t tag) const {
        Stream s = *this;
        s.key_ = mix64(key_ ^ (tag + 0x632be59bd9b4e019ULL));
        return s;
    }

    std::uint64_t bits(std::uint64_t counter) const { return mix64(key_ ^ counter); }

    // Uniform on (0, 1]; never returns 0 so log() is safe.
    double uniform(std::uint64_t counter) const {
        return static_cast<double>((bits(counter) >> 11) + 1) * 0x1.0p-53;
    }

    double normal(std::uint64_t counter) const {
        const double u1 = uniform(counter * 2);
        const double u2 = uniform(counter * 2 + 1);
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    std::uint64_t key() const { return key_; }

  private:
    std::uint64_t key_;
};

}  // namespace smp::rng
