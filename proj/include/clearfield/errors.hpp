#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace clearfield {

// Capacity guards (lattice size, assignment size, newton size).
struct CapacityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Mismatched steps/dims/node counts between processes and lattices.
struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A process is not measurable w.r.t. the filtration it claims.
struct AdaptednessError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Model-level construction failures (singular fee matrix, delta >= 1, ...).
struct InvalidModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Standing-assumption validation failed and the caller did not override.
struct AssumptionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct UnsupportedFamilyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DegenerateParameterError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad experiment configuration (schema violations, unknown keys, missing seed).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DomainError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Fixed-point iteration ran out of iterations; carries the residual history.
struct NonConvergenceError : std::runtime_error {
    std::vector<double> residual_history;

    NonConvergenceError(const std::string& msg, std::vector<double> history)
        : std::runtime_error(msg), residual_history(std::move(history)) {}
};

struct SingularJacobianError : std::runtime_error {
    double condition_estimate;

    SingularJacobianError(const std::string& msg, double cond)
        : std::runtime_error(msg), condition_estimate(cond) {}
};

}  // namespace clearfield
