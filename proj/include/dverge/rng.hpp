#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

/// Mixes a tag into a seed (splitmix64 finalizer). Used to give every
/// sub-model, restart and split its own reproducible stream.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view tag);

/// Seeded generator. Integer and real conversions are done by hand so the
/// streams are identical across standard library implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }
    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    Scalar uniform(Scalar lo, Scalar hi) { return lo + static_cast<Scalar>(uniform() * static_cast<double>(hi - lo)); }
    /// Uniform integer in [0, n).
    std::size_t below(std::size_t n);
    /// +1 or -1 with equal probability.
    Scalar rademacher() { return (engine_() >> 63) ? Scalar(1) : Scalar(-1); }

    std::vector<std::size_t> permutation(std::size_t n);

private:
    std::mt19937_64 engine_;
};

DVERGE_NAMESPACE_END
