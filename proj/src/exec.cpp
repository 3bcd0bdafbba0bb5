#include "clearfield/exec.hpp"

#include <omp.h>

#include <vector>

namespace clearfield::exec {

namespace {
Mode g_mode = Mode::Parallel;
int g_threads = 0;
}  // namespace

Mode mode() { return g_mode; }
void set_mode(Mode m) { g_mode = m; }

void set_threads(int threads) {
    g_threads = threads;
    if (threads == 1) {
        g_mode = Mode::Serial;
    } else {
        g_mode = Mode::Parallel;
        if (threads > 0) omp_set_num_threads(threads);
    }
}

int threads() { return g_threads; }

}  // namespace clearfield::exec

namespace clearfield {

namespace {

constexpr std::size_t kBlock = 4096;

double pairwise(const double* x, std::size_t n) {
    if (n <= 8) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += x[i];
        return s;
    }
    const std::size_t half = n / 2;
    return pairwise(x, half) + pairwise(x + half, n - half);
}

}  // namespace

double det_sum(const double* x, std::size_t n) {
    const std::size_t nblocks = (n + kBlock - 1) / kBlock;
    if (nblocks <= 1) return pairwise(x, n);
    std::vector<double> partial(nblocks);
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long long b = 0; b < static_cast<long long>(nblocks); ++b) {
        const std::size_t lo = static_cast<std::size_t>(b) * kBlock;
        const std::size_t hi = lo + kBlock < n ? lo + kBlock : n;
        partial[static_cast<std::size_t>(b)] = pairwise(x + lo, hi - lo);
    }
    return pairwise(partial.data(), nblocks);
}

double det_sum_indexed(std::size_t n, const double* terms) { return det_sum(terms, n); }

}  // namespace clearfield
