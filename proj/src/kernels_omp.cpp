#include "clearfield/exec.hpp"
#include "kernels_detail.hpp"

namespace clearfield::kernels {

void children_mean_omp(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                       double* out) {
    const std::uint64_t parents = lat.nodes_at(step_next - 1);
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < static_cast<long long>(parents); ++p)
        detail::children_mean_one(lat, next, dim, static_cast<std::uint64_t>(p), out);
}

void martingale_coeffs_omp(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                           double* out) {
    const std::uint64_t parents = lat.nodes_at(step_next - 1);
#pragma omp parallel for schedule(static)
    for (long long p = 0; p < static_cast<long long>(parents); ++p)
        detail::martingale_one(lat, next, dim, static_cast<std::uint64_t>(p), out);
}

void common_mean_omp(const ScenarioLattice& lat, const double* values, int step, int dim,
                     double* out) {
    const std::uint64_t groups = lat.common_nodes_at(step);
#pragma omp parallel for schedule(dynamic, 1)
    for (long long g = 0; g < static_cast<long long>(groups); ++g)
        detail::common_mean_one(lat, values, step, dim, static_cast<std::uint64_t>(g), out);
}

void children_mean(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                   double* out) {
    if (exec::mode() == exec::Mode::Parallel)
        children_mean_omp(lat, next, step_next, dim, out);
    else
        children_mean_serial(lat, next, step_next, dim, out);
}

void martingale_coeffs(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                       double* out) {
    if (exec::mode() == exec::Mode::Parallel)
        martingale_coeffs_omp(lat, next, step_next, dim, out);
    else
        martingale_coeffs_serial(lat, next, step_next, dim, out);
}

void common_mean(const ScenarioLattice& lat, const double* values, int step, int dim, double* out) {
    if (exec::mode() == exec::Mode::Parallel)
        common_mean_omp(lat, values, step, dim, out);
    else
        common_mean_serial(lat, values, step, dim, out);
}

}  // namespace clearfield::kernels
