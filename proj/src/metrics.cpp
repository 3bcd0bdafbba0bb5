#include "clearfield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"

namespace clearfield {

double normal_pdf(double z) {
    return 0.3989422804014326779 * std::exp(-0.5 * z * z);
}

double normal_cdf(double z) { return 0.5 * std::erfc(-z * 0.7071067811865475244); }

// Wichura's PPND16 (AS 241).
double normal_ppf(double u) {
    if (u <= 0.0) return -std::numeric_limits<double>::infinity();
    if (u >= 1.0) return std::numeric_limits<double>::infinity();
    const double q = u - 0.5;
    double r;
    if (std::abs(q) <= 0.425) {
        r = 0.180625 - q * q;
        return q *
               (((((((2.5090809287301226727e+3 * r + 3.3430575583588128105e+4) * r +
                     6.7265770927008700853e+4) * r + 4.5921953931549871457e+4) * r +
                   1.3731693765509461125e+4) * r + 1.9715909503065514427e+3) * r +
                 1.3314166789178437745e+2) * r + 3.3871328727963666080e+0) /
               (((((((5.2264952788528545610e+3 * r + 2.8729085735721942674e+4) * r +
                     3.9307895800092710610e+4) * r + 2.1213794301586595867e+4) * r +
                   5.3941960214247511077e+3) * r + 6.8718700749205790830e+2) * r +
                 4.2313330701600911252e+1) * r + 1.0);
    }
    r = q < 0.0 ? u : 1.0 - u;
    r = std::sqrt(-std::log(r));
    double val;
    if (r <= 5.0) {
        r -= 1.6;
        val = (((((((7.74545014278341407640e-4 * r + 2.27238449892691845833e-2) * r +
                    2.41780725177450611770e-1) * r + 1.27045825245236838258e+0) * r +
                  3.64784832476320460504e+0) * r + 5.76949722146069140550e+0) * r +
                4.63033784615654529590e+0) * r + 1.42343711074968357734e+0) /
              (((((((1.05075007164441684324e-9 * r + 5.47593808499534494600e-4) * r +
                    1.51986665636164571966e-2) * r + 1.48103976427480074590e-1) * r +
                  6.89767334985100004550e-1) * r + 1.67638483018380384940e+0) * r +
                2.05319162663775882187e+0) * r + 1.0);
    } else {
        r -= 5.0;
        val = (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r +
                    1.24266094738807843860e-3) * r + 2.65321895265761230930e-2) * r +
                  2.96560571828504891230e-1) * r + 1.78482653991729133580e+0) * r +
                5.46378491116411436990e+0) * r + 6.65790464350110377720e+0) /
              (((((((2.04426310338993978564e-15 * r + 1.42151175831644588870e-7) * r +
                    1.84631831751005468180e-5) * r + 7.86869131145613259100e-4) * r +
                  1.48753612908506148525e-2) * r + 1.36929880922735805310e-1) * r +
                5.99832206555887937690e-1) * r + 1.0);
    }
    return q < 0.0 ? -val : val;
}

std::vector<double> EmpiricalMeasure::mean() const {
    std::vector<double> m(dim, 0.0);
    const std::size_t cnt = count();
    for (std::size_t i = 0; i < cnt; ++i)
        for (int a = 0; a < dim; ++a) m[a] += weight(i) * points[i * dim + a];
    return m;
}

void EmpiricalMeasure::validate() const {
    if (weights.empty()) return;
    if (weights.size() != count()) throw ShapeError("empirical measure: weight count mismatch");
    double s = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ShapeError("empirical measure: negative weight");
        s += w;
    }
    if (std::abs(s - 1.0) > 1e-12) throw ShapeError("empirical measure: weights must sum to 1");
}

namespace {

void require_uniform_pair(const EmpiricalMeasure& a, const EmpiricalMeasure& b, int dim,
                          const char* what) {
    if (dim > 0 && (a.dim != dim || b.dim != dim))
        throw ShapeError(std::string(what) + ": expected dimension " + std::to_string(dim));
    if (a.dim != b.dim) throw ShapeError(std::string(what) + ": dimension mismatch");
    if (a.count() != b.count()) throw ShapeError(std::string(what) + ": atom count mismatch");
    if (!a.weights.empty() || !b.weights.empty())
        throw ShapeError(std::string(what) + ": requires uniform weights");
    if (a.count() == 0) throw ShapeError(std::string(what) + ": empty measure");
}

}  // namespace

double w2_empirical_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
    require_uniform_pair(a, b, 1, "w2_empirical_1d");
    std::vector<double> xs(a.points), ys(b.points);
    std::sort(xs.begin(), xs.end());
    std::sort(ys.begin(), ys.end());
    double s = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) s += (xs[i] - ys[i]) * (xs[i] - ys[i]);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

namespace {

// Jonker-Volgenant style shortest-augmenting-path assignment, O(N^3).
// cost is row-major N x N; returns the minimal total cost.
double assignment_min_cost(const std::vector<double>& cost, std::size_t n) {
    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
    std::vector<std::size_t> match(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        match[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, INF);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = match[j0];
            std::size_t j1 = 0;
            double delta = INF;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[match[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (match[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            match[j0] = match[j1];
            j0 = j1;
        } while (j0);
    }
    double total = 0.0;
    for (std::size_t j = 1; j <= n; ++j) total += cost[(match[j] - 1) * n + (j - 1)];
    return total;
}

}  // namespace

double w2_empirical_assignment(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                               std::size_t size_cap) {
    require_uniform_pair(a, b, 0, "w2_empirical_assignment");
    const std::size_t n = a.count();
    if (n > size_cap)
        throw CapacityError("w2_empirical_assignment: " + std::to_string(n) +
                            " atoms exceed the cap of " + std::to_string(size_cap));
    std::vector<double> cost(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double d = 0.0;
            for (int c = 0; c < a.dim; ++c) {
                const double diff = a.points[i * a.dim + c] - b.points[j * a.dim + c];
                d += diff * diff;
            }
            cost[i * n + j] = d;
        }
    }
    return std::sqrt(assignment_min_cost(cost, n) / static_cast<double>(n));
}

double w2_discrete_1d(std::span<const double> pts_a, std::span<const double> w_a,
                      std::span<const double> pts_b, std::span<const double> w_b) {
    if (pts_a.size() != w_a.size() || pts_b.size() != w_b.size())
        throw ShapeError("w2_discrete_1d: atom/weight mismatch");
    if (pts_a.empty() || pts_b.empty()) throw ShapeError("w2_discrete_1d: empty measure");
    std::vector<std::size_t> ia(pts_a.size()), ib(pts_b.size());
    std::iota(ia.begin(), ia.end(), 0);
    std::iota(ib.begin(), ib.end(), 0);
    std::sort(ia.begin(), ia.end(), [&](auto x, auto y) { return pts_a[x] < pts_a[y]; });
    std::sort(ib.begin(), ib.end(), [&](auto x, auto y) { return pts_b[x] < pts_b[y]; });
    double s = 0.0;
    std::size_t i = 0, j = 0;
    double ra = w_a[ia[0]], rb = w_b[ib[0]];
    while (true) {
        const double m = std::min(ra, rb);
        const double diff = pts_a[ia[i]] - pts_b[ib[j]];
        s += m * diff * diff;
        ra -= m;
        rb -= m;
        if (ra <= 0.0) {
            if (++i == ia.size()) break;
            ra = w_a[ia[i]];
        }
        if (rb <= 0.0) {
            if (++j == ib.size()) break;
            rb = w_b[ib[j]];
        }
    }
    return std::sqrt(std::max(0.0, s));
}

GaussianSegmentTable::GaussianSegmentTable(std::size_t count) : n(count) {
    quantile_int.resize(count);
    double pdf_lo = 0.0;  // phi(Phi^{-1}(0)) = 0
    for (std::size_t i = 0; i < count; ++i) {
        const double hi = static_cast<double>(i + 1) / static_cast<double>(count);
        const double pdf_hi = (i + 1 == count) ? 0.0 : normal_pdf(normal_ppf(hi));
        quantile_int[i] = pdf_lo - pdf_hi;
        pdf_lo = pdf_hi;
    }
}

double w2sq_sorted_vs_gaussian(std::span<const double> sorted, double mean, double sd,
                               const GaussianSegmentTable& table) {
    const std::size_t n = sorted.size();
    if (n != table.n) throw ShapeError("w2sq_sorted_vs_gaussian: table size mismatch");
    double sq = 0.0, cross = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double c = sorted[i] - mean;
        sq += c * c;
        cross += c * table.quantile_int[i];
    }
    return sq / static_cast<double>(n) - 2.0 * sd * cross + sd * sd;
}

double w2_empirical_vs_gaussian_1d(const EmpiricalMeasure& a, double mean, double sd) {
    if (a.dim != 1) throw ShapeError("w2_empirical_vs_gaussian_1d: requires n = 1");
    if (sd < 0.0) throw DomainError("w2_empirical_vs_gaussian_1d: sd must be >= 0");
    a.validate();
    const std::size_t n = a.count();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](auto i, auto j) { return a.points[i] < a.points[j]; });
    if (sd == 0.0) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = a.points[i] - mean;
            s += a.weight(i) * d * d;
        }
        return std::sqrt(s);
    }
    // Per-segment closed-form Gaussian integrals over the cumulative weights.
    double s = 0.0, lo = 0.0;
    double pdf_lo = 0.0, z_lo_pdfz = 0.0, cdf_lo = 0.0;
    for (std::size_t idx = 0; idx < n; ++idx) {
        const std::size_t i = order[idx];
        const double hi = std::min(1.0, lo + a.weight(i));
        double pdf_hi = 0.0, z_hi_pdfz = 0.0, cdf_hi = 1.0;
        if (idx + 1 < n && hi < 1.0) {
            const double z = normal_ppf(hi);
            pdf_hi = normal_pdf(z);
            z_hi_pdfz = z * pdf_hi;
            cdf_hi = hi;
        }
        const double i1 = pdf_lo - pdf_hi;                       // int z phi dz
        const double i2 = (cdf_hi - cdf_lo) - (z_hi_pdfz - z_lo_pdfz);  // int z^2 phi dz
        const double c = a.points[i] - mean;
        s += c * c * (hi - lo) - 2.0 * sd * c * i1 + sd * sd * i2;
        lo = hi;
        pdf_lo = pdf_hi;
        z_lo_pdfz = z_hi_pdfz;
        cdf_lo = cdf_hi;
    }
    return std::sqrt(std::max(0.0, s));
}

double epsilon_N(int n, std::int64_t N) {
    if (n < 1) throw DomainError("epsilon_N: n must be >= 1");
    if (N < 2) throw DomainError("epsilon_N: N must be >= 2");
    const double base = std::pow(static_cast<double>(N), -2.0 / std::max(n, 4));
    return n == 4 ? base * (1.0 + std::log(static_cast<double>(N))) : base;
}

LoglogFit fit_loglog_slope(std::span<const std::pair<double, double>> pairs) {
    if (pairs.size() < 3) throw DomainError("fit_loglog_slope: need at least 3 points");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (const auto& [N, v] : pairs) {
        if (!(N > 0) || !(v > 0))
            throw DomainError("fit_loglog_slope: values must be strictly positive");
        const double x = std::log(N), y = std::log(v);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    const double m = static_cast<double>(pairs.size());
    const double denom = m * sxx - sx * sx;
    LoglogFit fit;
    fit.slope = (m * sxy - sx * sy) / denom;
    fit.intercept = (sy - fit.slope * sx) / m;
    double rss = 0.0;
    for (const auto& [N, v] : pairs) {
        const double r = std::log(v) - (fit.intercept + fit.slope * std::log(N));
        rss += r * r;
    }
    fit.residual = std::sqrt(rss / m);
    return fit;
}

namespace {

// E[sup_k |P_k|^2] over leaf paths, exact on the lattice; proc is a per-agent
// difference process with dim n.
double expected_sup_sq(const ScenarioLattice& lat, const AdaptedProcess& a,
                       const AdaptedProcess& b) {
    const int n = a.dim;
    const int M = lat.steps;
    const std::uint64_t leaves = lat.nodes_at(M);
    std::vector<double> terms(leaves);
    for (std::uint64_t leaf = 0; leaf < leaves; ++leaf) {
        double best = 0.0;
        for (int k = 0; k <= M; ++k) {
            const std::uint64_t node = leaf >> (static_cast<unsigned>(lat.noise_dim) * (M - k));
            double s = 0.0;
            for (int c = 0; c < n; ++c) {
                const double d = a.steps[k][node * n + c] - b.steps[k][node * n + c];
                s += d * d;
            }
            best = std::max(best, s);
        }
        terms[leaf] = best;
    }
    return det_sum(terms.data(), terms.size()) * lat.node_probability(M);
}

double z_sq_integral(const ScenarioLattice& lat, const ZProcess& a, const ZProcess& b) {
    if (a.empty() || b.empty()) return 0.0;
    double total = 0.0;
    for (int k = 0; k < lat.steps; ++k) {
        const auto& sa = a.steps[k];
        const auto& sb = b.steps[k];
        std::vector<double> terms(lat.nodes_at(k), 0.0);
        const std::size_t per_node = sa.size() / lat.nodes_at(k);
        for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p) {
            double s = 0.0;
            for (std::size_t c = 0; c < per_node; ++c) {
                const double d = sa[p * per_node + c] - sb[p * per_node + c];
                s += d * d;
            }
            terms[p] = s;
        }
        total += det_sum(terms.data(), terms.size()) * lat.node_probability(k) * lat.dt;
    }
    return total;
}

}  // namespace

DifferenceTerms compute_difference_terms(const EquilibriumSolution& base,
                                         const MarketModel& base_model,
                                         const MarketModel& pert_model,
                                         const ScenarioLattice& lat) {
    if (base_model.N != pert_model.N || base_model.n != pert_model.n)
        throw ShapeError("compute_difference_terms: model shape mismatch");
    const int n = base_model.n;
    const int N = base_model.N;
    const int M = lat.steps;
    const LatticeData data_b = materialize_exogenous(base_model, lat);
    const LatticeData data_p = materialize_exogenous(pert_model, lat);
    DifferenceTerms diff;
    diff.dxi2.resize(N);
    diff.G2.resize(N);
    diff.F2.assign(N, AdaptedProcess::zeros(lat, 1));
    diff.B2.assign(N, AdaptedProcess::zeros(lat, 1));
    diff.S02.resize(N);
    diff.S2.resize(N);
    std::vector<double> va(n), vb(n), tmp(n);
    for (int i = 0; i < N; ++i) {
        double dxi = 0.0;
        for (int a = 0; a < n; ++a) {
            const double d = pert_model.initial_law.mean[a] - base_model.initial_law.mean[a];
            dxi += d * d;
        }
        diff.dxi2[i] = dxi;
        double s0 = 0.0, s1 = 0.0;
        for (int a = 0; a < n; ++a) {
            if (a < lat.d0) {
                const double d =
                    pert_model.agents[i].vol0_entry(a, a) - base_model.agents[i].vol0_entry(a, a);
                s0 += d * d;
            }
            if (a < lat.d) {
                const double d =
                    pert_model.agents[i].vol_entry(a, a) - base_model.agents[i].vol_entry(a, a);
                s1 += d * d;
            }
        }
        diff.S02[i] = s0;
        diff.S2[i] = s1;
        // B-bar and F-bar on the base trajectories. The alpha_hat part of B
        // cancels (common Lambda), leaving the order-flow difference.
        for (int k = 0; k <= M; ++k) {
            const std::uint64_t count = lat.nodes_at(k);
            const double t = k * lat.dt;
            for (std::uint64_t p = 0; p < count; ++p) {
                const std::uint64_t prefix = lat.common_prefix(p, k);
                const double* phi = base.phi.at(k, p);
                const double* x = base.X[i].at(k, p);
                pert_model.agents[i].flow(t, std::span(phi, n),
                                          std::span(data_p.c0.at(k, prefix), n),
                                          std::span(data_p.c[i].at(k, p), n), va.data());
                base_model.agents[i].flow(t, std::span(phi, n),
                                          std::span(data_b.c0.at(k, prefix), n),
                                          std::span(data_b.c[i].at(k, p), n), vb.data());
                double b2 = 0.0;
                for (int a = 0; a < n; ++a) b2 += (va[a] - vb[a]) * (va[a] - vb[a]);
                diff.B2[i].steps[k][p] = b2;
                pert_model.agents[i].dfdx(t, std::span(x, n), std::span(phi, n),
                                          std::span(data_p.c0.at(k, prefix), n),
                                          std::span(data_p.c[i].at(k, p), n), va.data());
                base_model.agents[i].dfdx(t, std::span(x, n), std::span(phi, n),
                                          std::span(data_b.c0.at(k, prefix), n),
                                          std::span(data_b.c[i].at(k, p), n), vb.data());
                double f2 = 0.0;
                for (int a = 0; a < n; ++a) f2 += (va[a] - vb[a]) * (va[a] - vb[a]);
                diff.F2[i].steps[k][p] = f2;
            }
        }
    }
    // G-bar at the leaves: the mean term uses the empirical measure of the
    // dgdx values of each coefficient set on the base terminal states.
    const std::uint64_t leaves = lat.nodes_at(M);
    const double w = base_model.delta / (1.0 - base_model.delta);
    std::vector<std::vector<double>> gp(N, std::vector<double>(leaves * n));
    std::vector<std::vector<double>> gb(N, std::vector<double>(leaves * n));
    for (int j = 0; j < N; ++j) {
        for (std::uint64_t p = 0; p < leaves; ++p) {
            const std::uint64_t prefix = lat.common_prefix(p, M);
            const double* x = base.X[j].at(M, p);
            pert_model.agents[j].dgdx(std::span(x, n), std::span(data_p.c0.at(M, prefix), n),
                                      std::span(data_p.c[j].at(M, p), n), gp[j].data() + p * n);
            base_model.agents[j].dgdx(std::span(x, n), std::span(data_b.c0.at(M, prefix), n),
                                      std::span(data_b.c[j].at(M, p), n), gb[j].data() + p * n);
        }
    }
    for (int i = 0; i < N; ++i) {
        diff.G2[i].assign(leaves, 0.0);
        for (std::uint64_t p = 0; p < leaves; ++p) {
            double g2 = 0.0;
            for (int a = 0; a < n; ++a) {
                double mean_diff = 0.0;
                for (int j = 0; j < N; ++j) mean_diff += gp[j][p * n + a] - gb[j][p * n + a];
                mean_diff /= N;
                const double d = w * mean_diff + (gp[i][p * n + a] - gb[i][p * n + a]);
                g2 += d * d;
            }
            diff.G2[i][p] = g2;
        }
    }
    return diff;
}

StabilityCheck stability_bound_check(const EquilibriumSolution& base,
                                     const EquilibriumSolution& perturbed,
                                     const DifferenceTerms& diff, const MarketModel& base_model,
                                     const ScenarioLattice& lat) {
    if (base.Y.size() != perturbed.Y.size())
        throw ShapeError("stability_bound_check: agent count mismatch");
    const int N = static_cast<int>(base.Y.size());
    const int M = lat.steps;
    StabilityCheck out;
    for (int i = 0; i < N; ++i) {
        out.lhs += expected_sup_sq(lat, perturbed.X[i], base.X[i]);
        out.lhs += expected_sup_sq(lat, perturbed.Y[i], base.Y[i]);
        out.lhs += z_sq_integral(lat, perturbed.Z0[i], base.Z0[i]);
        for (int j = 0; j < N; ++j) {
            if (base.Zij[i][j].empty() || perturbed.Zij[i][j].empty()) continue;
            out.lhs += z_sq_integral(lat, perturbed.Zij[i][j], base.Zij[i][j]);
        }
        // rhs: E|dxi|^2 + E|Gbar|^2 + int E(|Fbar|^2+|Bbar|^2+|sbar0|^2+|sbar|^2) dt.
        out.rhs += diff.dxi2[i];
        out.rhs += det_sum(diff.G2[i].data(), diff.G2[i].size()) * lat.node_probability(M);
        for (int k = 0; k < M; ++k) {
            const auto& f2 = diff.F2[i].steps[k];
            const auto& b2 = diff.B2[i].steps[k];
            const double ef = det_sum(f2.data(), f2.size()) * lat.node_probability(k);
            const double eb = det_sum(b2.data(), b2.size()) * lat.node_probability(k);
            out.rhs += (ef + eb + diff.S02[i] + diff.S2[i]) * lat.dt;
        }
    }
    out.ratio = out.rhs == 0.0 ? 0.0 : out.lhs / out.rhs;
    return out;
}

StabilityCheck stability_bound_check(const EquilibriumSolution& base,
                                     const EquilibriumSolution& perturbed,
                                     const MarketModel& base_model,
                                     const MarketModel& pert_model, const ScenarioLattice& lat) {
    const auto diff = compute_difference_terms(base, base_model, pert_model, lat);
    return stability_bound_check(base, perturbed, diff, base_model, lat);
}

}  // namespace clearfield
