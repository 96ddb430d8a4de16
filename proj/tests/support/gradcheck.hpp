#pragma once

// Finite-difference oracle for the graph engine. Built against the
// double-precision library; the interface is precision-free so float code can
// call it.

#include <cstdint>
#include <set>
#include <string>

namespace gradcheck {

struct Report {
    int graphs = 0;
    int failures = 0;
    double worst_relative_error = 0;
    std::set<std::string> ops_covered;
    std::string first_failure;
};

/// Builds `graphs` random graphs (seeded), evaluates analytic gradients of a
/// scalar output with respect to every leaf and compares them with central
/// differences of step `h`. The error for a leaf is
/// ||a - n|| / max(||a||, ||n||, 1e-8); the floor only matters for gradients
/// that are exactly zero by symmetry.
Report run(int graphs, std::uint64_t seed, double tolerance = 1e-4, double h = 1e-5);

/// Every op kind the engine supports, by name.
std::set<std::string> all_ops();

}  // namespace gradcheck
