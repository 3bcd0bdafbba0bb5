#include "clearfield/lqoracle.hpp"

#include <algorithm>
#include <cmath>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/metrics.hpp"
#include "clearfield/rng.hpp"

namespace clearfield {

namespace {

struct RiccatiSetup {
    double curvature;  // gamma_f
    double slope;      // gamma_l (mean) or 1/lambda (deviation)
    double terminal;
};

RiccatiSetup setup(const LQParams& params, double delta, double T, RiccatiKind kind) {
    if (!(T > 0)) throw DomainError("riccati: T must be positive");
    if (!(delta >= 0.0) || delta >= 1.0) throw InvalidModelError("riccati: delta must be in [0,1)");
    if (kind == RiccatiKind::Mean) {
        if (params.gamma_l <= 0.0)
            throw DegenerateParameterError("riccati: gamma_l must be positive for the mean kind");
        return {params.gamma_f, params.gamma_l, params.gamma_g / (1.0 - delta)};
    }
    if (params.lambda <= 0.0)
        throw DegenerateParameterError("riccati: lambda must be positive for the deviation kind");
    return {params.gamma_f, 1.0 / params.lambda, params.gamma_g};
}

// Value at time-to-go tau of P' = slope*P^2 - curvature backward from PT.
double closed_form_value(const RiccatiSetup& s, double tau) {
    if (s.curvature <= 0.0) {
        // P(tau) = PT / (1 + slope * PT * tau); curvature 0 limit.
        return s.terminal / (1.0 + s.slope * s.terminal * tau);
    }
    const double k = std::sqrt(s.curvature / s.slope);
    const double c = std::sqrt(s.curvature * s.slope);
    const double ch = std::cosh(c * tau), sh = std::sinh(c * tau);
    return k * (s.terminal * ch + k * sh) / (k * ch + s.terminal * sh);
}

}  // namespace

double riccati_closed_form(const LQParams& params, double delta, double T, RiccatiKind kind,
                           double t) {
    const auto s = setup(params, delta, T, kind);
    return closed_form_value(s, T - t);
}

std::vector<double> riccati_rk4(const LQParams& params, double delta, double T, RiccatiKind kind,
                                int steps) {
    if (steps < 1) throw DomainError("riccati_rk4: steps must be >= 1");
    const auto s = setup(params, delta, T, kind);
    // Integrate dP/dtau = curvature - slope*P^2 from tau = 0.
    const double h = T / steps;
    auto rhs = [&](double P) { return s.curvature - s.slope * P * P; };
    std::vector<double> traj(steps + 1);
    traj[steps] = s.terminal;  // index by time: t_j = j*h, tau = T - t_j
    double P = s.terminal;
    for (int j = steps - 1; j >= 0; --j) {
        const double k1 = rhs(P);
        const double k2 = rhs(P + 0.5 * h * k1);
        const double k3 = rhs(P + 0.5 * h * k2);
        const double k4 = rhs(P + h * k3);
        P += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        traj[j] = P;
    }
    return traj;
}

std::vector<double> riccati_offset_rk4(const LQParams& params, double delta, double T,
                                       int steps) {
    const auto s = setup(params, delta, T, RiccatiKind::Mean);
    const double h = T / steps;
    // dq/dtau = -gamma_l P(tau) q + P(tau) l0 backward from q(T) = 0,
    // i.e. in time-to-go: q'(tau) = P(tau) (l0 - gamma_l q).
    auto rhs = [&](double tau, double q) {
        const double P = closed_form_value(s, tau);
        return P * (params.l0 - params.gamma_l * q);
    };
    std::vector<double> traj(steps + 1, 0.0);
    double q = 0.0;
    for (int j = steps - 1; j >= 0; --j) {
        const double tau = T - (j + 1) * h;  // current time-to-go before the step
        const double k1 = rhs(tau, q);
        const double k2 = rhs(tau + 0.5 * h, q + 0.5 * h * k1);
        const double k3 = rhs(tau + 0.5 * h, q + 0.5 * h * k2);
        const double k4 = rhs(tau + h, q + h * k3);
        q += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        traj[j] = q;
    }
    return traj;
}

RiccatiSolution discrete_riccati(const LQParams& params, double delta, double T, int M) {
    if (M < 1) throw DomainError("discrete_riccati: M must be >= 1");
    if (!(delta >= 0.0) || delta >= 1.0)
        throw InvalidModelError("discrete_riccati: delta must be in [0,1)");
    if (params.lambda <= 0.0)
        throw DegenerateParameterError("discrete_riccati: lambda must be positive");
    RiccatiSolution sol;
    sol.dt = T / M;
    sol.t.resize(M + 1);
    sol.P.resize(M + 1);
    sol.p.resize(M + 1);
    sol.q.resize(M + 1);
    for (int j = 0; j <= M; ++j) sol.t[j] = j * sol.dt;
    sol.P[M] = params.gamma_g / (1.0 - delta);
    sol.p[M] = params.gamma_g;
    sol.q[M] = 0.0;
    const double dt = sol.dt;
    for (int k = M - 1; k >= 0; --k) {
        const double A = sol.P[k + 1] + params.gamma_f * dt;
        const double denom = 1.0 + params.gamma_l * A * dt;
        sol.P[k] = A / denom;
        sol.q[k] = (sol.q[k + 1] + A * params.l0 * dt) / denom;
        const double a = sol.p[k + 1] + params.gamma_f * dt;
        sol.p[k] = a / (1.0 + a * dt / params.lambda);
    }
    if (params.gamma_l > 0.0 && params.gamma_f > 0.0) {
        sol.k_mean = std::sqrt(params.gamma_f / params.gamma_l);
        sol.c_mean = std::sqrt(params.gamma_f * params.gamma_l);
    }
    if (params.lambda > 0.0 && params.gamma_f > 0.0) {
        sol.k_dev = std::sqrt(params.gamma_f * params.lambda);
        sol.c_dev = std::sqrt(params.gamma_f / params.lambda);
    }
    return sol;
}

GapVariancePrediction gap_variance(const LQParams& params, double delta, double T, int n,
                                   std::int64_t N, int M_sim) {
    if (n < 1 || N < 1) throw DomainError("gap_variance: bad dimensions");
    const auto s = setup(params, delta, T, RiccatiKind::Mean);
    const auto disc = discrete_riccati(params, delta, T, M_sim);
    GapVariancePrediction out;
    out.n = n;
    out.N = N;
    out.t = disc.t;
    const double h = T / M_sim;
    const double source = n * params.sigma * params.sigma / static_cast<double>(N);
    const double v0 = n * params.s0 * params.s0 / static_cast<double>(N);
    // Continuous ODE: v' = -2 gamma_l P(t) v + source, via RK4 with the
    // closed-form P; 16 substeps per grid cell.
    out.v_ode.resize(M_sim + 1);
    out.gap2_ode.resize(M_sim + 1);
    double v = v0;
    out.v_ode[0] = v;
    out.gap2_ode[0] = closed_form_value(s, T) * closed_form_value(s, T) * v;
    const int sub = 16;
    auto rhs = [&](double t, double vv) {
        return -2.0 * params.gamma_l * closed_form_value(s, T - t) * vv + source;
    };
    for (int j = 0; j < M_sim; ++j) {
        const double hh = h / sub;
        for (int m = 0; m < sub; ++m) {
            const double t = j * h + m * hh;
            const double k1 = rhs(t, v);
            const double k2 = rhs(t + 0.5 * hh, v + 0.5 * hh * k1);
            const double k3 = rhs(t + 0.5 * hh, v + 0.5 * hh * k2);
            const double k4 = rhs(t + hh, v + hh * k3);
            v += hh / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
        }
        out.v_ode[j + 1] = v;
        const double P = closed_form_value(s, T - (j + 1) * h);
        out.gap2_ode[j + 1] = P * P * v;
    }
    // Exact-in-distribution recursion for the Euler simulator, which drifts
    // with the discrete P_k: v_{k+1} = (1 - gamma_l P_k dt)^2 v_k + source dt.
    out.v_disc.resize(M_sim + 1);
    out.gap2_disc.resize(M_sim + 1);
    double vd = v0;
    out.v_disc[0] = vd;
    out.gap2_disc[0] = disc.P[0] * disc.P[0] * vd;
    for (int j = 0; j < M_sim; ++j) {
        const double f = 1.0 - params.gamma_l * disc.P[j] * h;
        vd = f * f * vd + source * h;
        out.v_disc[j + 1] = vd;
        out.gap2_disc[j + 1] = disc.P[j + 1] * disc.P[j + 1] * vd;
    }
    return out;
}

namespace {

void require_gaussian(InitialLaw::Family family, const char* what) {
    if (family != InitialLaw::Family::Gaussian)
        throw UnsupportedFamilyError(std::string(what) +
                                     ": only the Gaussian initial law is supported");
}

}  // namespace

LqEnsemble simulate_lq(const LQParams& params, double delta, double T, int n, std::int64_t N,
                       int M_sim, std::int64_t paths, std::uint64_t seed,
                       InitialLaw::Family family) {
    require_gaussian(family, "simulate_lq");
    if (n < 1 || N < 1 || M_sim < 1 || paths < 1) throw DomainError("simulate_lq: bad sizes");
    const std::uint64_t cells =
        static_cast<std::uint64_t>(paths) * (M_sim + 1) * static_cast<std::uint64_t>(n);
    if (cells > (1ull << 24))
        throw CapacityError("simulate_lq: ensemble of " + std::to_string(cells) +
                            " cells exceeds the storage guard; use the streaming statistics");
    const auto ric = discrete_riccati(params, delta, T, M_sim);
    LqEnsemble out;
    out.n = n;
    out.M = M_sim;
    out.paths = paths;
    out.t = ric.t;
    out.phi_ho.resize(cells);
    out.phi_mfg.resize(cells);
    out.xbar_agents.resize(cells);
    out.xbar_limit.resize(cells);
    const double dt = T / M_sim;
    const double sq = std::sqrt(dt);
    const double idio_scale = params.sigma / std::sqrt(static_cast<double>(N));
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(static) if (par)
    for (long long path = 0; path < paths; ++path) {
        Rng rng(seed, static_cast<std::uint64_t>(path));
        std::vector<double> X(n), x(n);
        for (int a = 0; a < n; ++a) {
            x[a] = params.m0;
            X[a] = params.m0 +
                   params.s0 / std::sqrt(static_cast<double>(N)) * rng.next_normal();
        }
        for (int k = 0; k <= M_sim; ++k) {
            const std::uint64_t base = (static_cast<std::uint64_t>(path) * (M_sim + 1) + k) * n;
            for (int a = 0; a < n; ++a) {
                out.xbar_agents[base + a] = X[a];
                out.xbar_limit[base + a] = x[a];
                out.phi_ho[base + a] = -(ric.P[k] * X[a] + ric.q[k]);
                out.phi_mfg[base + a] = -(ric.P[k] * x[a] + ric.q[k]);
            }
            if (k == M_sim) break;
            for (int a = 0; a < n; ++a) {
                const double common = rng.next_normal() * sq;
                const double idio = rng.next_normal() * sq;
                X[a] += (-params.gamma_l * (ric.P[k] * X[a] + ric.q[k]) + params.l0) * dt +
                        params.sigma0 * common + idio_scale * idio;
                x[a] += (-params.gamma_l * (ric.P[k] * x[a] + ric.q[k]) + params.l0) * dt +
                        params.sigma0 * common;
            }
        }
    }
    return out;
}

LqGapStats lq_gap_stats(const LQParams& params, double delta, double T, int n, std::int64_t N,
                        int M_sim, std::int64_t paths, std::uint64_t seed,
                        InitialLaw::Family family) {
    require_gaussian(family, "lq_gap_stats");
    if (n < 1 || N < 1 || M_sim < 1 || paths < 1) throw DomainError("lq_gap_stats: bad sizes");
    const auto ric = discrete_riccati(params, delta, T, M_sim);
    const double dt = T / M_sim;
    const double sq = std::sqrt(dt);
    const double idio_scale = params.sigma / std::sqrt(static_cast<double>(N));
    const int K = M_sim + 1;
    // Per-step accumulators: gap^2 moments 1,2 and phi^Ho coordinate-0 raw
    // moments 1..4. Per-block partials combined in block order.
    const std::int64_t block_size = 4096;
    const std::int64_t blocks = (paths + block_size - 1) / block_size;
    std::vector<std::vector<double>> acc(static_cast<std::size_t>(blocks),
                                         std::vector<double>(static_cast<std::size_t>(K) * 6, 0.0));
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (par)
    for (long long blk = 0; blk < blocks; ++blk) {
        Rng rng(seed, static_cast<std::uint64_t>(blk));
        auto& slot = acc[static_cast<std::size_t>(blk)];
        const std::int64_t lo = blk * block_size;
        const std::int64_t hi = std::min(paths, lo + block_size);
        std::vector<double> X(n), x(n);
        for (std::int64_t path = lo; path < hi; ++path) {
            for (int a = 0; a < n; ++a) {
                x[a] = params.m0;
                X[a] = params.m0 +
                       params.s0 / std::sqrt(static_cast<double>(N)) * rng.next_normal();
            }
            for (int k = 0; k < K; ++k) {
                double gap2 = 0.0;
                for (int a = 0; a < n; ++a) {
                    const double g = -ric.P[k] * (X[a] - x[a]);
                    gap2 += g * g;
                }
                const double ho0 = -(ric.P[k] * X[0] + ric.q[k]);
                double* s = slot.data() + static_cast<std::size_t>(k) * 6;
                s[0] += gap2;
                s[1] += gap2 * gap2;
                s[2] += ho0;
                s[3] += ho0 * ho0;
                s[4] += ho0 * ho0 * ho0;
                s[5] += ho0 * ho0 * ho0 * ho0;
                if (k == M_sim) break;
                for (int a = 0; a < n; ++a) {
                    const double common = rng.next_normal() * sq;
                    const double idio = rng.next_normal() * sq;
                    X[a] += (-params.gamma_l * (ric.P[k] * X[a] + ric.q[k]) + params.l0) * dt +
                            params.sigma0 * common + idio_scale * idio;
                    x[a] += (-params.gamma_l * (ric.P[k] * x[a] + ric.q[k]) + params.l0) * dt +
                            params.sigma0 * common;
                }
            }
        }
    }
    // Fixed-order combination.
    std::vector<double> total(static_cast<std::size_t>(K) * 6, 0.0);
    for (const auto& slot : acc)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += slot[i];
    LqGapStats stats;
    stats.t = ric.t;
    stats.gap2_mean.resize(K);
    stats.gap2_se.resize(K);
    stats.phi_ho_mean.resize(K);
    stats.phi_ho_mean_se.resize(K);
    stats.phi_ho_var.resize(K);
    stats.phi_ho_var_se.resize(K);
    const double P = static_cast<double>(paths);
    for (int k = 0; k < K; ++k) {
        const double* s = total.data() + static_cast<std::size_t>(k) * 6;
        const double m1 = s[0] / P, m2 = s[1] / P;
        stats.gap2_mean[k] = m1;
        stats.gap2_se[k] = std::sqrt(std::max(0.0, m2 - m1 * m1) / P);
        const double h1 = s[2] / P, h2 = s[3] / P, h3 = s[4] / P, h4 = s[5] / P;
        stats.phi_ho_mean[k] = h1;
        const double var = std::max(0.0, h2 - h1 * h1);
        stats.phi_ho_mean_se[k] = std::sqrt(var / P);
        stats.phi_ho_var[k] = var;
        // Var of the sample variance via central moments.
        const double mu3 = h3 - 3 * h1 * h2 + 2 * h1 * h1 * h1;
        const double mu4 = h4 - 4 * h1 * h3 + 6 * h1 * h1 * h2 - 3 * h1 * h1 * h1 * h1;
        (void)mu3;
        stats.phi_ho_var_se[k] = std::sqrt(std::max(0.0, mu4 - var * var) / P);
    }
    return stats;
}

LqW2Stats lq_w2_sweep(const LQParams& params, double delta, double T, std::int64_t N, int M_sim,
                      std::int64_t paths, std::uint64_t seed, InitialLaw::Family family) {
    require_gaussian(family, "lq_w2_sweep");
    if (N < 2 || M_sim < 1 || paths < 1) throw DomainError("lq_w2_sweep: bad sizes");
    const auto ric = discrete_riccati(params, delta, T, M_sim);
    const double dt = T / M_sim;
    const double sq = std::sqrt(dt);
    const int K = M_sim + 1;
    // Deviation-variance recursion matching the Euler deviation dynamics.
    std::vector<double> var_dev(K);
    var_dev[0] = params.s0 * params.s0;
    for (int k = 0; k < M_sim; ++k) {
        const double f = 1.0 - ric.p[k] * dt / params.lambda;
        var_dev[k + 1] = f * f * var_dev[k] + params.sigma * params.sigma * dt;
    }
    const GaussianSegmentTable table(static_cast<std::size_t>(N));
    // Fixed work-based block size: the block layout (and hence the RNG
    // streams) depends only on (N, paths), never on the thread count.
    const std::int64_t block_size =
        std::clamp<std::int64_t>((1 << 22) / N, 1, std::max<std::int64_t>(1, paths / 4));
    const std::int64_t blocks = (paths + block_size - 1) / block_size;
    // Accumulators per block: per-step (w2sq sum, w2sq^2 sum, |Ybar|^8 sum)
    // plus the terminal dgdx 8th moment.
    std::vector<std::vector<double>> acc(static_cast<std::size_t>(blocks),
                                         std::vector<double>(static_cast<std::size_t>(K) * 3 + 1, 0.0));
    const bool par = exec::mode() == exec::Mode::Parallel;
#pragma omp parallel for schedule(dynamic, 1) if (par)
    for (long long blk = 0; blk < blocks; ++blk) {
        Rng rng(seed, static_cast<std::uint64_t>(blk));
        auto& slot = acc[static_cast<std::size_t>(blk)];
        const std::int64_t lo = blk * block_size;
        const std::int64_t hi = std::min(paths, lo + block_size);
        std::vector<double> dev(static_cast<std::size_t>(N)), sorted(static_cast<std::size_t>(N));
        for (std::int64_t path = lo; path < hi; ++path) {
            double xc = params.m0;  // conditional-mean chain (common noise only)
            for (auto& d : dev) d = params.s0 * rng.next_normal();
            for (int k = 0; k < K; ++k) {
                sorted = dev;
                std::sort(sorted.begin(), sorted.end());
                const double w2sq_dev =
                    w2sq_sorted_vs_gaussian(sorted, 0.0, std::sqrt(var_dev[k]), table);
                const double w2sq = ric.p[k] * ric.p[k] * w2sq_dev;
                double* s = slot.data() + static_cast<std::size_t>(k) * 3;
                s[0] += w2sq;
                s[1] += w2sq * w2sq;
                const double m = ric.P[k] * xc + ric.q[k];
                double y8 = 0.0;
                for (double d : dev) {
                    const double y = m + ric.p[k] * d;
                    const double y2 = y * y;
                    y8 += y2 * y2 * y2 * y2;
                }
                s[2] += y8 / static_cast<double>(N);
                if (k == M_sim) {
                    double g8 = 0.0;
                    for (double d : dev) {
                        const double g = params.gamma_g * (xc + d);
                        const double g2 = g * g;
                        g8 += g2 * g2 * g2 * g2;
                    }
                    slot[static_cast<std::size_t>(K) * 3] += g8 / static_cast<double>(N);
                    break;
                }
                const double common = rng.next_normal() * sq;
                xc += (-params.gamma_l * (ric.P[k] * xc + ric.q[k]) + params.l0) * dt +
                      params.sigma0 * common;
                const double f = 1.0 - ric.p[k] * dt / params.lambda;
                for (auto& d : dev) d = f * d + params.sigma * sq * rng.next_normal();
            }
        }
    }
    std::vector<double> total(static_cast<std::size_t>(K) * 3 + 1, 0.0);
    for (const auto& slot : acc)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += slot[i];
    LqW2Stats stats;
    stats.t = ric.t;
    stats.w2sq_mean.resize(K);
    stats.w2sq_se.resize(K);
    const double P = static_cast<double>(paths);
    double y8_sup = 0.0;
    int argmax = 0;
    for (int k = 0; k < K; ++k) {
        const double* s = total.data() + static_cast<std::size_t>(k) * 3;
        const double m1 = s[0] / P, m2 = s[1] / P;
        stats.w2sq_mean[k] = m1;
        stats.w2sq_se[k] = std::sqrt(std::max(0.0, m2 - m1 * m1) / P);
        if (m1 > stats.sup_mean) {
            stats.sup_mean = m1;
            argmax = k;
        }
        y8_sup = std::max(y8_sup, s[2] / P);
    }
    stats.sup_se = stats.w2sq_se[argmax];
    stats.gamma_moment = std::pow(y8_sup, 1.0 / 8.0);
    stats.gamma_g_moment = std::pow(total[static_cast<std::size_t>(K) * 3] / P, 1.0 / 8.0);
    return stats;
}

}  // namespace clearfield
