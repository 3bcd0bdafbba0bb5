#include "clearfield/lattice.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/kernels.hpp"

namespace clearfield {

std::uint64_t ScenarioLattice::common_prefix(std::uint64_t node, int k) const {
    std::uint64_t prefix = 0;
    const std::uint64_t mask0 = (std::uint64_t{1} << d0) - 1;
    for (int s = 0; s < k; ++s) {
        const std::uint64_t e = digit(node, s, k);
        prefix = (prefix << d0) | (e & mask0);
    }
    return prefix;
}

std::uint64_t ScenarioLattice::project_to_agent(std::uint64_t node, int k, int agent) const {
    const std::uint64_t mask0 = (std::uint64_t{1} << d0) - 1;
    const std::uint64_t maskd = (std::uint64_t{1} << d) - 1;
    const int offset = d0 + agent * d;
    std::uint64_t out = 0;
    for (int s = 0; s < k; ++s) {
        const std::uint64_t e = digit(node, s, k);
        const std::uint64_t rep = (e & mask0) | (((e >> offset) & maskd) << d0);
        out = (out << (d0 + d)) | rep;
    }
    return out;
}

double ScenarioLattice::noise_value(std::uint64_t node, int k, int q) const {
    long long ups = 0;
    for (int s = 0; s < k; ++s) ups += coord_sign(digit(node, s, k), q);
    return static_cast<double>(ups) * sqrt_dt;
}

ScenarioLattice build_lattice(int M, int N, int d0, int d, double T) {
    if (M < 1) throw InvalidModelError("build_lattice: steps M must be >= 1");
    if (N < 1 || d0 < 0 || d < 0) throw InvalidModelError("build_lattice: bad dimensions");
    if (!(T > 0)) throw InvalidModelError("build_lattice: horizon T must be positive");
    const int D = d0 + N * d;
    if (D < 1) throw InvalidModelError("build_lattice: total noise dimension is zero");
    if (D >= 24) {
        throw CapacityError("build_lattice: noise dimension " + std::to_string(D) +
                            " exceeds the 2^24 node guard at one step");
    }
    ScenarioLattice lat;
    lat.steps = M;
    lat.agents = N;
    lat.d0 = d0;
    lat.d = d;
    lat.horizon = T;
    lat.dt = T / M;
    lat.sqrt_dt = std::sqrt(lat.dt);
    lat.noise_dim = D;
    lat.branching = std::uint64_t{1} << D;
    // Guard sum_k b^k <= 2^24; compute carefully to avoid overflow.
    long double total = 0;
    for (int k = 0; k <= M; ++k) {
        total += std::pow(2.0L, static_cast<long double>(D) * k);
        if (total > static_cast<long double>(ScenarioLattice::kMaxTotalNodes)) {
            throw CapacityError("build_lattice: total node count " + std::to_string((double)total) +
                                " exceeds the guard of " +
                                std::to_string(ScenarioLattice::kMaxTotalNodes) + " nodes");
        }
    }
    return lat;
}

AdaptedProcess AdaptedProcess::zeros(const ScenarioLattice& lat, int dim, Adapted tag) {
    AdaptedProcess p;
    p.tag = tag;
    p.dim = dim;
    p.steps.resize(lat.steps + 1);
    for (int k = 0; k <= lat.steps; ++k) {
        const std::uint64_t count = tag == Adapted::Full ? lat.nodes_at(k) : lat.common_nodes_at(k);
        p.steps[k].assign(count * dim, 0.0);
    }
    return p;
}

AdaptedProcess AdaptedProcess::constant(const ScenarioLattice& lat, std::span<const double> value,
                                        Adapted tag) {
    AdaptedProcess p = zeros(lat, static_cast<int>(value.size()), tag);
    for (auto& step : p.steps) {
        for (std::size_t i = 0; i < step.size(); ++i) step[i] = value[i % value.size()];
    }
    return p;
}

void check_full_shape(const ScenarioLattice& lat, const AdaptedProcess& p, int expected_dim,
                      const std::string& what) {
    if (p.tag != Adapted::Full)
        throw AdaptednessError(what + ": expected a full-adapted process");
    if (p.dim != expected_dim)
        throw ShapeError(what + ": dimension mismatch");
    if (static_cast<int>(p.steps.size()) != lat.steps + 1)
        throw ShapeError(what + ": step count mismatch");
    for (int k = 0; k <= lat.steps; ++k) {
        if (p.steps[k].size() != lat.nodes_at(k) * static_cast<std::uint64_t>(p.dim))
            throw ShapeError(what + ": node count mismatch at step " + std::to_string(k));
    }
}

void check_common_shape(const ScenarioLattice& lat, const AdaptedProcess& p, int expected_dim,
                        const std::string& what) {
    if (p.tag != Adapted::Common)
        throw AdaptednessError(what + ": expected a common-tagged process");
    if (p.dim != expected_dim)
        throw ShapeError(what + ": dimension mismatch");
    if (static_cast<int>(p.steps.size()) != lat.steps + 1)
        throw ShapeError(what + ": step count mismatch");
    for (int k = 0; k <= lat.steps; ++k) {
        if (p.steps[k].size() != lat.common_nodes_at(k) * static_cast<std::uint64_t>(p.dim))
            throw ShapeError(what + ": prefix count mismatch at step " + std::to_string(k));
    }
}

std::vector<double> cond_expect(const ScenarioLattice& lat, std::span<const double> next,
                                int step_next, int dim) {
    if (step_next < 1 || step_next > lat.steps)
        throw ShapeError("cond_expect: step out of range");
    if (next.size() != lat.nodes_at(step_next) * static_cast<std::uint64_t>(dim))
        throw ShapeError("cond_expect: slice size does not match step " + std::to_string(step_next));
    std::vector<double> out(lat.nodes_at(step_next - 1) * dim);
    kernels::children_mean(lat, next.data(), step_next, dim, out.data());
    return out;
}

AdaptedProcess cond_expect(const ScenarioLattice& lat, const AdaptedProcess& proc, int step_next) {
    check_full_shape(lat, proc, proc.dim, "cond_expect");
    AdaptedProcess out = proc;
    out.steps[step_next - 1] = cond_expect(lat, proc.steps[step_next], step_next, proc.dim);
    return out;
}

std::vector<double> cond_expect_common(const ScenarioLattice& lat, std::span<const double> values,
                                       int step, int dim) {
    if (step < 0 || step > lat.steps) throw ShapeError("cond_expect_common: step out of range");
    if (values.size() != lat.nodes_at(step) * static_cast<std::uint64_t>(dim))
        throw ShapeError("cond_expect_common: slice size mismatch");
    std::vector<double> out(lat.common_nodes_at(step) * dim);
    kernels::common_mean(lat, values.data(), step, dim, out.data());
    return out;
}

AdaptedProcess cond_expect_common(const ScenarioLattice& lat, const AdaptedProcess& proc) {
    if (proc.tag == Adapted::Common) return proc;  // idempotent
    check_full_shape(lat, proc, proc.dim, "cond_expect_common");
    AdaptedProcess out;
    out.tag = Adapted::Common;
    out.dim = proc.dim;
    out.steps.resize(proc.steps.size());
    for (int k = 0; k <= lat.steps; ++k)
        out.steps[k] = cond_expect_common(lat, proc.steps[k], k, proc.dim);
    return out;
}

std::vector<double> expand_common(const ScenarioLattice& lat, std::span<const double> values,
                                  int step, int dim) {
    if (values.size() != lat.common_nodes_at(step) * static_cast<std::uint64_t>(dim))
        throw ShapeError("expand_common: slice size mismatch");
    const std::uint64_t count = lat.nodes_at(step);
    std::vector<double> out(count * dim);
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(static) if (par && count > 1024)
    for (long long p = 0; p < static_cast<long long>(count); ++p) {
        const std::uint64_t prefix = lat.common_prefix(static_cast<std::uint64_t>(p), step);
        for (int c = 0; c < dim; ++c) out[p * dim + c] = values[prefix * dim + c];
    }
    return out;
}

AdaptedProcess expand_common(const ScenarioLattice& lat, const AdaptedProcess& proc) {
    check_common_shape(lat, proc, proc.dim, "expand_common");
    AdaptedProcess out;
    out.tag = Adapted::Full;
    out.dim = proc.dim;
    out.steps.resize(proc.steps.size());
    for (int k = 0; k <= lat.steps; ++k)
        out.steps[k] = expand_common(lat, proc.steps[k], k, proc.dim);
    return out;
}

bool is_common_measurable(const ScenarioLattice& lat, const AdaptedProcess& proc, double tol) {
    if (proc.tag == Adapted::Common) return true;
    for (int k = 0; k <= lat.steps; ++k) {
        const auto common = cond_expect_common(lat, proc.steps[k], k, proc.dim);
        const auto expanded = expand_common(lat, common, k, proc.dim);
        for (std::size_t i = 0; i < expanded.size(); ++i) {
            if (std::abs(expanded[i] - proc.steps[k][i]) > tol) return false;
        }
    }
    return true;
}

std::vector<double> martingale_coefficients(const ScenarioLattice& lat,
                                            std::span<const double> next, int step_next, int dim) {
    if (lat.dt <= 0) throw InvalidModelError("martingale_coefficients: invalid lattice (dt == 0)");
    if (step_next < 1 || step_next > lat.steps)
        throw ShapeError("martingale_coefficients: step out of range");
    if (next.size() != lat.nodes_at(step_next) * static_cast<std::uint64_t>(dim))
        throw ShapeError("martingale_coefficients: slice size mismatch");
    std::vector<double> out(lat.nodes_at(step_next - 1) * lat.noise_dim * dim);
    kernels::martingale_coeffs(lat, next.data(), step_next, dim, out.data());
    return out;
}

double expectation(const ScenarioLattice& lat, std::span<const double> values, int step, int dim,
                   int coord) {
    const std::uint64_t count = lat.nodes_at(step);
    if (values.size() != count * static_cast<std::uint64_t>(dim))
        throw ShapeError("expectation: slice size mismatch");
    std::vector<double> terms(count);
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(static) if (par && count > 4096)
    for (long long p = 0; p < static_cast<long long>(count); ++p)
        terms[p] = values[p * dim + coord];
    return det_sum(terms.data(), terms.size()) * lat.node_probability(step);
}

void dump_csv(const ScenarioLattice& lat, const AdaptedProcess& proc, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dump_csv: cannot open " + path);
    out << "step,path,probability";
    for (int c = 0; c < proc.dim; ++c) out << ",v" << c;
    out << "\n";
    char buf[32];
    for (int k = 0; k < static_cast<int>(proc.steps.size()); ++k) {
        const bool common = proc.tag == Adapted::Common;
        const std::uint64_t count = common ? lat.common_nodes_at(k) : lat.nodes_at(k);
        const double prob = common ? std::ldexp(1.0, -lat.d0 * k) : lat.node_probability(k);
        for (std::uint64_t p = 0; p < count; ++p) {
            out << k << ',' << p << ',';
            std::snprintf(buf, sizeof buf, "%.17g", prob);
            out << buf;
            for (int c = 0; c < proc.dim; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", proc.steps[k][p * proc.dim + c]);
                out << ',' << buf;
            }
            out << "\n";
        }
    }
}

}  // namespace clearfield
