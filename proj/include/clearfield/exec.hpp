#pragma once

#include <cstddef>

namespace clearfield::exec {

// Execution mode for the data-parallel kernels. Serial is the reference
// implementation; Parallel runs the same loops under OpenMP. Both produce
// bit-identical results: per-node outputs are independent and reductions
// use a fixed blocked pairwise order.
enum class Mode { Serial, Parallel };

Mode mode();
void set_mode(Mode m);

// threads == 1 selects Serial; threads == 0 keeps the OpenMP default.
void set_threads(int threads);
int threads();

}  // namespace clearfield::exec

namespace clearfield {

// Deterministic blocked pairwise sum. The value depends only on the input
// order, never on the thread count.
double det_sum(const double* x, std::size_t n);

// Deterministic sum of f(i) for i in [0, n). Blocks of fixed size are
// summed independently (in parallel when the mode allows) and combined
// pairwise in block order.
double det_sum_indexed(std::size_t n, const double* terms);

}  // namespace clearfield
