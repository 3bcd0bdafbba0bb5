#pragma once

#include <cstdint>

#include "clearfield/lattice.hpp"

namespace clearfield::kernels {

// Core data-parallel lattice kernels. Each has a serial reference
// implementation and an OpenMP one; the unqualified name dispatches on
// exec::mode(). Serial and parallel variants are bit-identical: outputs are
// per-node independent and every inner reduction runs in a fixed order.

// out[p*dim+c] = (1/b) * sum_e next[(p*b+e)*dim+c], p over step (step_next-1).
void children_mean_serial(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                          double* out);
void children_mean_omp(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                       double* out);
void children_mean(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                   double* out);

// Uniform average over the nodes sharing each common-noise prefix at `step`.
// out is prefix-indexed (2^(d0*step) groups).
void common_mean_serial(const ScenarioLattice& lat, const double* values, int step, int dim,
                        double* out);
void common_mean_omp(const ScenarioLattice& lat, const double* values, int step, int dim,
                     double* out);
void common_mean(const ScenarioLattice& lat, const double* values, int step, int dim, double* out);

// z[p*(D*dim) + q*dim + c] = sum_e sign_q(e) * next[(p*b+e)*dim+c] / (b*sqrt_dt).
void martingale_coeffs_serial(const ScenarioLattice& lat, const double* next, int step_next,
                              int dim, double* out);
void martingale_coeffs_omp(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                           double* out);
void martingale_coeffs(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                       double* out);

// Reconstructs a node from its group index: used by common_mean and shared
// with tests. Group g runs over common prefixes, member m over idiosyncratic
// fillings; digits are base 2^d0 and 2^(D-d0) respectively.
std::uint64_t node_from_group(const ScenarioLattice& lat, int step, std::uint64_t group,
                              std::uint64_t member);

}  // namespace clearfield::kernels
