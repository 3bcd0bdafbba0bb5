#include "kernels_detail.hpp"

namespace clearfield::kernels {

std::uint64_t node_from_group(const ScenarioLattice& lat, int step, std::uint64_t group,
                              std::uint64_t member) {
    const int idio_bits = lat.noise_dim - lat.d0;
    const std::uint64_t mask0 = (std::uint64_t{1} << lat.d0) - 1;
    const std::uint64_t maski = (std::uint64_t{1} << idio_bits) - 1;
    std::uint64_t node = 0;
    for (int s = 0; s < step; ++s) {
        // Digit of step s: most significant first (same convention as digit()).
        const std::uint64_t gd = (group >> (lat.d0 * (step - 1 - s))) & mask0;
        const std::uint64_t md = (member >> (idio_bits * (step - 1 - s))) & maski;
        node = (node << lat.noise_dim) | (gd | (md << lat.d0));
    }
    return node;
}

void children_mean_serial(const ScenarioLattice& lat, const double* next, int step_next, int dim,
                          double* out) {
    const std::uint64_t parents = lat.nodes_at(step_next - 1);
    for (std::uint64_t p = 0; p < parents; ++p) detail::children_mean_one(lat, next, dim, p, out);
}

void martingale_coeffs_serial(const ScenarioLattice& lat, const double* next, int step_next,
                              int dim, double* out) {
    const std::uint64_t parents = lat.nodes_at(step_next - 1);
    for (std::uint64_t p = 0; p < parents; ++p) detail::martingale_one(lat, next, dim, p, out);
}

void common_mean_serial(const ScenarioLattice& lat, const double* values, int step, int dim,
                        double* out) {
    const std::uint64_t groups = lat.common_nodes_at(step);
    for (std::uint64_t g = 0; g < groups; ++g)
        detail::common_mean_one(lat, values, step, dim, g, out);
}

}  // namespace clearfield::kernels
