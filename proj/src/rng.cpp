#include "hybridla/rng.hpp"

#include <cmath>

#include "hybridla/errors.hpp"

namespace hybridla {

namespace {

inline uint64_t mix64(uint64_t z) {
    z ^= z >> 33;
    z *= 0xff51afd7ed558ccdULL;
    z ^= z >> 33;
    z *= 0xc4ceb9fe1a85ec53ULL;
    z ^= z >> 33;
    return z;
}

}  // namespace

Rng::Rng(uint64_t seed, uint64_t stream) : key_(mix64(seed ^ mix64(stream * 0x9e3779b97f4a7c15ULL + 1))) {}

uint64_t Rng::stream_of(std::string_view name) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t Rng::next_u64() {
    return mix64(key_ + (++counter_) * 0x9e3779b97f4a7c15ULL);
}

double Rng::uniform() {
    // 53 high bits -> double in [0, 1)
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw ParameterError("uniform_int: hi < lo");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
}

double Rng::normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

bool Rng::chance(double p) { return uniform() < p; }

}  // namespace hybridla
