#pragma once

#include <cstdint>
#include <string_view>

namespace hybridla {

// Counter-based deterministic generator. Every stochastic site in the project
// draws from an Rng constructed as (seed, stream), so any draw sequence can be
// replayed bit-exactly regardless of what other streams did. Streams are cheap:
// derive them from names with stream_of().
class Rng {
public:
    Rng(uint64_t seed, uint64_t stream);

    // FNV-1a of a stream name, so call sites can write Rng(seed, Rng::stream_of("pages")).
    static uint64_t stream_of(std::string_view name);

    uint64_t next_u64();

    // Uniform in [0, 1).
    double uniform();
    // Uniform in [lo, hi).
    double uniform(double lo, double hi);
    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi);
    // Standard normal via Box-Muller; consumes exactly two uniforms per call.
    double normal();
    // Bernoulli with probability p.
    bool chance(double p);

private:
    uint64_t key_;
    uint64_t counter_ = 0;
};

}  // namespace hybridla
