#pragma once

#include "clearfield/kernels.hpp"

// Shared per-node bodies: serial and OpenMP kernels run exactly this code,
// which is what makes the two variants bit-identical.
namespace clearfield::kernels::detail {

inline void children_mean_one(const ScenarioLattice& lat, const double* next, int dim,
                              std::uint64_t p, double* out) {
    const std::uint64_t b = lat.branching;
    const double inv_b = 1.0 / static_cast<double>(b);
    for (int c = 0; c < dim; ++c) {
        double s = 0.0;
        const double* child = next + p * b * dim + c;
        for (std::uint64_t e = 0; e < b; ++e) s += child[e * dim];
        out[p * dim + c] = s * inv_b;
    }
}

inline void martingale_one(const ScenarioLattice& lat, const double* next, int dim,
                           std::uint64_t p, double* out) {
    const std::uint64_t b = lat.branching;
    const int D = lat.noise_dim;
    const double scale = 1.0 / (static_cast<double>(b) * lat.sqrt_dt);
    double* zp = out + p * static_cast<std::uint64_t>(D) * dim;
    for (int q = 0; q < D; ++q) {
        for (int c = 0; c < dim; ++c) {
            double s = 0.0;
            const double* child = next + p * b * dim + c;
            for (std::uint64_t e = 0; e < b; ++e) {
                const double v = child[e * dim];
                s += ((e >> q) & 1ull) ? v : -v;
            }
            zp[q * dim + c] = s * scale;
        }
    }
}

inline void common_mean_one(const ScenarioLattice& lat, const double* values, int step, int dim,
                            std::uint64_t g, double* out) {
    const int idio_bits = lat.noise_dim - lat.d0;
    const std::uint64_t members = std::uint64_t{1} << (idio_bits * step);
    const double inv = 1.0 / static_cast<double>(members);
    for (int c = 0; c < dim; ++c) out[g * dim + c] = 0.0;
    for (std::uint64_t m = 0; m < members; ++m) {
        const std::uint64_t node = node_from_group(lat, step, g, m);
        for (int c = 0; c < dim; ++c) out[g * dim + c] += values[node * dim + c];
    }
    for (int c = 0; c < dim; ++c) out[g * dim + c] *= inv;
}

}  // namespace clearfield::kernels::detail
