#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace clearfield {

// Finite scenario tree over the common Brownian motion W^0 (d0 coordinates)
// and N idiosyncratic Brownian motions W^i (d coordinates each). Every step
// branches into b = 2^D outcomes, D = d0 + N*d: each noise coordinate moves
// +sqrt(dt) or -sqrt(dt) with probability 1/2, independently.
//
// Node addressing: step k holds b^k nodes indexed by path integer. The
// children of node p at step k are p*b + e, e in [0, b). The digit of step s
// (0-based, s < k) of node p is (p >> (D*(k-1-s))) & (b-1); bit q of a digit
// is the sign of noise coordinate q (set = up). Coordinates [0, d0) belong
// to W^0 and [d0 + i*d, d0 + (i+1)*d) to W^{i+1}.
struct ScenarioLattice {
    int steps = 0;      // M
    int agents = 0;     // N idiosyncratic blocks
    int d0 = 0;         // common-noise dimension
    int d = 0;          // idiosyncratic dimension per agent
    double horizon = 0; // T
    double dt = 0;      // T / M
    double sqrt_dt = 0;
    int noise_dim = 0;  // D = d0 + N*d
    std::uint64_t branching = 1;  // b = 2^D

    static constexpr std::uint64_t kMaxTotalNodes = 1ull << 24;

    std::uint64_t nodes_at(int k) const {
        return std::uint64_t{1} << (static_cast<unsigned>(noise_dim) * static_cast<unsigned>(k));
    }
    std::uint64_t common_nodes_at(int k) const {
        return std::uint64_t{1} << (static_cast<unsigned>(d0) * static_cast<unsigned>(k));
    }
    std::uint64_t total_nodes() const {
        std::uint64_t total = 0;
        for (int k = 0; k <= steps; ++k) total += nodes_at(k);
        return total;
    }
    // Node probability 1/b^k: an exact power of two.
    double node_probability(int k) const {
        return std::ldexp(1.0, -noise_dim * k);
    }

    std::uint64_t digit(std::uint64_t node, int step_index, int at_step) const {
        const int shift = noise_dim * (at_step - 1 - step_index);
        return (node >> shift) & (branching - 1);
    }
    // Sign (+1/-1) of noise coordinate q in branch digit e.
    static int coord_sign(std::uint64_t e, int q) {
        return ((e >> q) & 1ull) ? 1 : -1;
    }

    // Index of the common-noise prefix of a node at step k (in [0, 2^(d0*k))).
    std::uint64_t common_prefix(std::uint64_t node, int k) const;
    // Digit of the common prefix contributed by branch digit e.
    std::uint64_t common_digit(std::uint64_t e) const {
        return e & ((std::uint64_t{1} << d0) - 1);
    }
    // Projection of a node onto the (W^0, W^agent) coordinates, i.e. the node
    // index on a single-agent lattice with the same (M, d0, d).
    std::uint64_t project_to_agent(std::uint64_t node, int k, int agent) const;

    // Cumulative value of noise coordinate q at (k, node): sum of +-sqrt(dt).
    double noise_value(std::uint64_t node, int k, int q) const;
};

ScenarioLattice build_lattice(int M, int N, int d0, int d, double T);

// Adaptedness tag: Full processes carry one value vector per node; Common
// processes are measurable w.r.t. the common-noise filtration and are stored
// compressed, one value vector per common prefix.
enum class Adapted { Full, Common };

struct AdaptedProcess {
    Adapted tag = Adapted::Full;
    int dim = 1;
    // steps[k] has nodes_at(k)*dim (Full) or common_nodes_at(k)*dim (Common).
    std::vector<std::vector<double>> steps;

    static AdaptedProcess zeros(const ScenarioLattice& lat, int dim, Adapted tag = Adapted::Full);
    static AdaptedProcess constant(const ScenarioLattice& lat, std::span<const double> value,
                                   Adapted tag = Adapted::Full);

    int last_step() const { return static_cast<int>(steps.size()) - 1; }
    double* at(int k, std::uint64_t node) { return steps[k].data() + node * dim; }
    const double* at(int k, std::uint64_t node) const { return steps[k].data() + node * dim; }
};

// Shape checks; throw ShapeError / AdaptednessError on mismatch.
void check_full_shape(const ScenarioLattice& lat, const AdaptedProcess& p, int expected_dim,
                      const std::string& what);
void check_common_shape(const ScenarioLattice& lat, const AdaptedProcess& p, int expected_dim,
                        const std::string& what);

// E[proc | F_k] for a slice defined on step k+1: equally weighted average of
// the b children of each node. Exact tower property by construction.
std::vector<double> cond_expect(const ScenarioLattice& lat, std::span<const double> next,
                                int step_next, int dim);
AdaptedProcess cond_expect(const ScenarioLattice& lat, const AdaptedProcess& proc, int step_next);

// E[proc | common-noise filtration] at step k: uniform average over the nodes
// sharing each common prefix. Returns a prefix-indexed (Common) slice.
std::vector<double> cond_expect_common(const ScenarioLattice& lat, std::span<const double> values,
                                       int step, int dim);
AdaptedProcess cond_expect_common(const ScenarioLattice& lat, const AdaptedProcess& proc);

// Expand a prefix-indexed slice to all nodes of step k.
std::vector<double> expand_common(const ScenarioLattice& lat, std::span<const double> values,
                                  int step, int dim);
AdaptedProcess expand_common(const ScenarioLattice& lat, const AdaptedProcess& proc);

bool is_common_measurable(const ScenarioLattice& lat, const AdaptedProcess& proc, double tol = 0.0);

// Martingale representation coefficients: for each node p at step k and each
// noise coordinate q, Z[q] = E[proc_next * dW_q | p] / dt. Layout:
// z[p*(D*dim) + q*dim + c]. On a per-coordinate binary tree the first-order
// reconstruction proc_next = E[proc_next|p] + sum_q Z_q dW_q is exact when
// D == 1 (or whenever proc_next is affine in the step increments).
std::vector<double> martingale_coefficients(const ScenarioLattice& lat,
                                            std::span<const double> next, int step_next, int dim);

// Exact expectation of one coordinate of a slice under the node weights.
double expectation(const ScenarioLattice& lat, std::span<const double> values, int step, int dim,
                   int coord);

// Debug dump: one row per node (step, path, probability, v0, v1, ...).
void dump_csv(const ScenarioLattice& lat, const AdaptedProcess& proc, const std::string& path);

}  // namespace clearfield
