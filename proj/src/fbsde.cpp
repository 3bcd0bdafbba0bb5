#include "clearfield/fbsde.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "clearfield/csvio.hpp"
#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "sweeps.hpp"

namespace clearfield {

namespace {

constexpr std::uint64_t kSeqCutoff = 512;  // below this, node loops stay serial

bool par_mode() { return exec::mode() == exec::Mode::Parallel; }

double sup_diff(const AdaptedProcess& a, const AdaptedProcess& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.steps.size(); ++k)
        for (std::size_t i = 0; i < a.steps[k].size(); ++i)
            m = std::max(m, std::abs(a.steps[k][i] - b.steps[k][i]));
    return m;
}

}  // namespace

namespace detail {

// X_{k+1} = X_k + (rho*(alpha_hat(Y_k, phi_k) + l(t_k, phi_k, c)) + Ib_k) dt
//           + sigma^0 dW^0 + sigma dW^i.
void forward_sweep(const MarketModel& model, const ScenarioLattice& lat, int agent, double rho,
                   const AdaptedProcess& phi, const AdaptedProcess& Y, const AdaptedProcess* Ib,
                   const LatticeData& data, AdaptedProcess& X) {
    const int n = model.n;
    const auto& bundle = model.agents[agent];
    const double dt = lat.dt;
    const std::uint64_t b = lat.branching;
    std::copy(data.x0.begin(), data.x0.end(), X.steps[0].begin());
    for (int k = 0; k < lat.steps; ++k) {
        const std::uint64_t count = lat.nodes_at(k);
        const double tk = k * dt;
        const auto& xk = X.steps[k];
        auto& xn = X.steps[k + 1];
#pragma omp parallel for schedule(static) if (par_mode() && count >= kSeqCutoff)
        for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
            const auto p = static_cast<std::uint64_t>(pp);
            const std::uint64_t prefix = lat.common_prefix(p, k);
            const double* c0 = data.c0.at(k, prefix);
            const double* ci = data.c[agent].at(k, p);
            const double* ph = phi.at(k, p);
            const double* yk = Y.at(k, p);
            double base[8];
            double l[8];
            bundle.flow(tk, std::span(ph, n), std::span(c0, n), std::span(ci, n), l);
            for (int a = 0; a < n; ++a) {
                double rate = 0.0;
                for (int c = 0; c < n; ++c) rate -= model.Lambda_inv(a, c) * (yk[c] + ph[c]);
                double drift = rho * (rate + l[a]);
                if (Ib) drift += Ib->at(k, p)[a];
                base[a] = xk[p * n + a] + drift * dt;
            }
            for (std::uint64_t e = 0; e < b; ++e) {
                double* out = xn.data() + (p * b + e) * n;
                for (int a = 0; a < n; ++a) {
                    double v = base[a];
                    if (a < lat.d0)
                        v += bundle.vol0_entry(a, a) * ScenarioLattice::coord_sign(e, a) *
                             lat.sqrt_dt;
                    if (a < lat.d)
                        v += bundle.vol_entry(a, a) *
                             ScenarioLattice::coord_sign(e, lat.d0 + agent * lat.d + a) *
                             lat.sqrt_dt;
                    out[a] = v;
                }
            }
        }
    }
}

// Y_k = E[ Y_{k+1} + ((1-rho)*gamma*X_{k+1} + rho*dfdx(t_{k+1}, X_{k+1},
//          phi_{k+1}) + If_{k+1}) dt | F_k ].  Y.steps[M] must hold the
// terminal values on entry.
void backward_sweep(const MarketModel& model, const ScenarioLattice& lat, int agent, double rho,
                    double gamma, const AdaptedProcess& phi, const AdaptedProcess& X,
                    const AdaptedProcess* If, const LatticeData& data, AdaptedProcess& Y) {
    const int n = model.n;
    const auto& bundle = model.agents[agent];
    const double dt = lat.dt;
    const std::uint64_t b = lat.branching;
    const double inv_b = 1.0 / static_cast<double>(b);
    for (int k = lat.steps - 1; k >= 0; --k) {
        const std::uint64_t count = lat.nodes_at(k);
        const double tk1 = (k + 1) * dt;
        const auto& yn = Y.steps[k + 1];
        auto& yk = Y.steps[k];
#pragma omp parallel for schedule(static) if (par_mode() && count >= kSeqCutoff)
        for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
            const auto p = static_cast<std::uint64_t>(pp);
            const std::uint64_t prefix = lat.common_prefix(p, k);
            double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            double grad[8];
            for (std::uint64_t e = 0; e < b; ++e) {
                const std::uint64_t q = p * b + e;
                const std::uint64_t qprefix = (prefix << lat.d0) | lat.common_digit(e);
                const double* c0 = data.c0.at(k + 1, qprefix);
                const double* ci = data.c[agent].at(k + 1, q);
                const double* xq = X.at(k + 1, q);
                const double* phq = phi.at(k + 1, q);
                bundle.dfdx(tk1, std::span(xq, n), std::span(phq, n), std::span(c0, n),
                            std::span(ci, n), grad);
                for (int a = 0; a < n; ++a) {
                    double driver = rho * grad[a];
                    if (rho < 1.0) driver += (1.0 - rho) * gamma * xq[a];
                    if (If) driver += If->at(k + 1, q)[a];
                    acc[a] += yn[q * n + a] + driver * dt;
                }
            }
            for (int a = 0; a < n; ++a) yk[p * n + a] = acc[a] * inv_b;
        }
    }
}

}  // namespace detail

namespace {

using detail::forward_sweep;
using detail::backward_sweep;

// Splits the full-coordinate martingale coefficients of Y into the common
// block Z^{i,0} and the per-agent blocks Z^{i,j}. With store_cross off only
// the own block (j == own) is kept.
void fill_z(const MarketModel& model, const ScenarioLattice& lat, const AdaptedProcess& Y,
            bool store_cross, int own, ZProcess& Z0, std::vector<ZProcess>& Zij) {
    const int n = model.n;
    Z0.dim = n;
    Z0.cols = lat.d0;
    Z0.steps.assign(lat.steps, {});
    Zij.assign(lat.agents, ZProcess{});
    for (int j = 0; j < lat.agents; ++j) {
        if (!store_cross && j != own) continue;
        Zij[j].dim = n;
        Zij[j].cols = lat.d;
        Zij[j].steps.assign(lat.steps, {});
    }
    for (int k = 0; k < lat.steps; ++k) {
        const auto z = martingale_coefficients(lat, Y.steps[k + 1], k + 1, n);
        const std::uint64_t count = lat.nodes_at(k);
        const int D = lat.noise_dim;
        Z0.steps[k].assign(count * n * lat.d0, 0.0);
        for (int j = 0; j < lat.agents; ++j)
            if (store_cross || j == own) Zij[j].steps[k].assign(count * n * lat.d, 0.0);
        for (std::uint64_t p = 0; p < count; ++p) {
            for (int q = 0; q < D; ++q) {
                for (int a = 0; a < n; ++a) {
                    const double v = z[p * D * n + q * n + a];
                    if (q < lat.d0) {
                        Z0.steps[k][(p * n + a) * lat.d0 + q] = v;
                    } else {
                        const int j = (q - lat.d0) / lat.d;
                        if (!store_cross && j != own) continue;
                        const int col = (q - lat.d0) % lat.d;
                        Zij[j].steps[k][(p * n + a) * lat.d + col] = v;
                    }
                }
            }
        }
    }
}

// Terminal values for the price-taker solve: Y_M = -delta*phi_M + dgdx(X_M).
void decoupled_terminal(const MarketModel& model, const ScenarioLattice& lat, int agent,
                        const AdaptedProcess& phi, const AdaptedProcess& X,
                        const LatticeData& data, AdaptedProcess& Y) {
    const int n = model.n;
    const int M = lat.steps;
    const auto& bundle = model.agents[agent];
    const std::uint64_t leaves = lat.nodes_at(M);
#pragma omp parallel for schedule(static) if (par_mode() && leaves >= kSeqCutoff)
    for (long long pp = 0; pp < static_cast<long long>(leaves); ++pp) {
        const auto p = static_cast<std::uint64_t>(pp);
        const std::uint64_t prefix = lat.common_prefix(p, M);
        const double* c0 = data.c0.at(M, prefix);
        const double* ci = data.c[agent].at(M, p);
        const double* x = X.at(M, p);
        const double* ph = phi.at(M, p);
        double grad[8];
        bundle.dgdx(std::span(x, n), std::span(c0, n), std::span(ci, n), grad);
        double* y = Y.at(M, p);
        for (int a = 0; a < n; ++a) y[a] = -model.delta * ph[a] + grad[a];
    }
}

void gate_assumptions(const MarketModel& model, const SolverConfig& cfg) {
    if (cfg.skip_assumption_check) return;
    const auto report = validate_assumptions(model, 512, 0x5eedu);
    if (!report.all_pass) {
        std::string failed;
        for (const auto& c : report.checks)
            if (!c.pass) failed += (failed.empty() ? "" : ", ") + c.name;
        throw AssumptionError(
            "model fails assumption validation (" + failed +
            "); pass skip_assumption_check to solve anyway");
    }
}

}  // namespace

void check_solver_config(const SolverConfig& cfg) {
    if (!(cfg.damping > 0.0) || cfg.damping > 1.0)
        throw ConfigError("solver: damping must lie in (0, 1]");
    if (!(cfg.tol > 0.0)) throw ConfigError("solver: tol must be positive");
    if (cfg.max_iters < 1) throw ConfigError("solver: max_iters must be >= 1");
    const auto& zs = cfg.continuation;
    if (zs.empty() || zs.front() != 0.0 || zs.back() != 1.0)
        throw ConfigError("solver: continuation schedule must start at 0 and end at 1");
    for (std::size_t i = 1; i < zs.size(); ++i)
        if (!(zs[i] > zs[i - 1]))
            throw ConfigError("solver: continuation schedule must be strictly increasing");
}

DecoupledSolution solve_decoupled(const MarketModel& model, const ScenarioLattice& lat, int agent,
                                  const AdaptedProcess& price, const SolverConfig& cfg) {
    const LatticeData data = materialize_exogenous(model, lat);
    return solve_decoupled(model, lat, agent, price, cfg, data);
}

DecoupledSolution solve_decoupled(const MarketModel& model, const ScenarioLattice& lat, int agent,
                                  const AdaptedProcess& price, const SolverConfig& cfg,
                                  const LatticeData& data) {
    check_solver_config(cfg);
    check_full_shape(lat, price, model.n, "solve_decoupled price");
    if (model.n > 8) throw CapacityError("solve_decoupled: n > 8 not supported");
    DecoupledSolution sol;
    sol.X = AdaptedProcess::zeros(lat, model.n);
    sol.Y = AdaptedProcess::zeros(lat, model.n);
    AdaptedProcess y_prev = sol.Y;
    AdaptedProcess y_new = sol.Y;
    std::vector<double> history;
    bool converged = false;
    double theta = cfg.damping;
    for (int it = 0; it < cfg.max_iters; ++it) {
        forward_sweep(model, lat, agent, 1.0, price, sol.Y, nullptr, data, sol.X);
        decoupled_terminal(model, lat, agent, price, sol.X, data, y_new);
        backward_sweep(model, lat, agent, 1.0, 0.0, price, sol.X, nullptr, data, y_new);
        const double dy = sup_diff(y_new, y_prev);
        if (!history.empty() && dy > history.back()) theta = std::max(theta * 0.5, 0.0625);
        history.push_back(dy);
        for (std::size_t k = 0; k < sol.Y.steps.size(); ++k)
            for (std::size_t c = 0; c < sol.Y.steps[k].size(); ++c)
                sol.Y.steps[k][c] =
                    (1.0 - theta) * y_prev.steps[k][c] + theta * y_new.steps[k][c];
        y_prev = sol.Y;
        sol.diagnostics.iterations = it + 1;
        if (dy <= cfg.tol) {
            converged = true;
            break;
        }
    }
    if (converged) {
        // Final undamped backward pass keeps the terminal relation exact.
        forward_sweep(model, lat, agent, 1.0, price, sol.Y, nullptr, data, sol.X);
        decoupled_terminal(model, lat, agent, price, sol.X, data, sol.Y);
        backward_sweep(model, lat, agent, 1.0, 0.0, price, sol.X, nullptr, data, sol.Y);
    }
    sol.diagnostics.residual_history = history;
    sol.diagnostics.final_residual = history.empty() ? 0.0 : history.back();
    sol.diagnostics.method = "picard-decoupled";
    if (!converged)
        throw NonConvergenceError("solve_decoupled: no fixed point within max_iters", history);
    fill_z(model, lat, sol.Y, cfg.store_cross_z, agent, sol.Z0, sol.Zij);
    return sol;
}

EquilibriumSolution solve_equilibrium(const MarketModel& model, const ScenarioLattice& lat,
                                      const SolverConfig& cfg) {
    check_solver_config(cfg);
    if (lat.agents != model.N) throw ShapeError("solve_equilibrium: lattice hosts N agents");
    if (model.n > 8) throw CapacityError("solve_equilibrium: n > 8 not supported");
    gate_assumptions(model, cfg);
    const LatticeData data = materialize_exogenous(model, lat);
    const int n = model.n;
    const int N = model.N;
    const int M = lat.steps;
    const double gamma = std::max(0.0, model.gamma_compat());
    const double w = model.delta / (1.0 - model.delta);

    EquilibriumSolution sol;
    sol.X.assign(N, AdaptedProcess::zeros(lat, n));
    sol.Y.assign(N, AdaptedProcess::zeros(lat, n));
    AdaptedProcess phi =
        cfg.phi_guess ? *cfg.phi_guess : AdaptedProcess::zeros(lat, n);
    check_full_shape(lat, phi, n, "solve_equilibrium phi guess");
    for (std::size_t i = 0; i < cfg.drift_input.size(); ++i)
        check_full_shape(lat, cfg.drift_input[i], n, "solve_equilibrium I^b");
    for (std::size_t i = 0; i < cfg.driver_input.size(); ++i)
        check_full_shape(lat, cfg.driver_input[i], n, "solve_equilibrium I^f");

    std::vector<AdaptedProcess> y_prev = sol.Y;
    std::vector<AdaptedProcess> y_new = sol.Y;
    std::vector<double> history;
    const std::uint64_t leaves = lat.nodes_at(M);
    std::vector<std::vector<double>> gvals(N);
    std::vector<double> gmean(leaves * n);
    int total_iters = 0;

    // One full sweep: forward passes from the current Y iterate, then the
    // rho-blended terminal and backward passes into `out`.
    auto sweep = [&](double rho, std::vector<AdaptedProcess>& out) {
        for (int i = 0; i < N; ++i) {
            const AdaptedProcess* Ib = cfg.drift_input.empty() ? nullptr : &cfg.drift_input[i];
            forward_sweep(model, lat, i, rho, phi, sol.Y[i], Ib, data, sol.X[i]);
        }
        // Terminal: Y_M^i = rho*(delta/(1-delta)*mean_j dgdx_j + dgdx_i)
        //           + (1-rho)*X_M^i + eta_i.
        std::fill(gmean.begin(), gmean.end(), 0.0);
        for (int i = 0; i < N; ++i) {
            gvals[i].assign(leaves * n, 0.0);
            const auto& bundle = model.agents[i];
#pragma omp parallel for schedule(static) if (par_mode() && leaves >= kSeqCutoff)
            for (long long pp = 0; pp < static_cast<long long>(leaves); ++pp) {
                const auto p = static_cast<std::uint64_t>(pp);
                const std::uint64_t prefix = lat.common_prefix(p, M);
                bundle.dgdx(std::span(sol.X[i].at(M, p), n), std::span(data.c0.at(M, prefix), n),
                            std::span(data.c[i].at(M, p), n), gvals[i].data() + p * n);
            }
            for (std::size_t idx = 0; idx < gmean.size(); ++idx)
                gmean[idx] += gvals[i][idx] / N;
        }
        for (int i = 0; i < N; ++i) {
            auto& Y = out[i];
#pragma omp parallel for schedule(static) if (par_mode() && leaves >= kSeqCutoff)
            for (long long pp = 0; pp < static_cast<long long>(leaves); ++pp) {
                const auto p = static_cast<std::uint64_t>(pp);
                double* y = Y.at(M, p);
                const double* x = sol.X[i].at(M, p);
                for (int a = 0; a < n; ++a) {
                    double v = rho * (w * gmean[p * n + a] + gvals[i][p * n + a]) +
                               (1.0 - rho) * x[a];
                    if (!cfg.terminal_input.empty()) v += cfg.terminal_input[i][p * n + a];
                    y[a] = v;
                }
            }
            const AdaptedProcess* If = cfg.driver_input.empty() ? nullptr : &cfg.driver_input[i];
            backward_sweep(model, lat, i, rho, gamma, phi, sol.X[i], If, data, out[i]);
        }
    };

    for (double rho : cfg.continuation) {
        int level_iters = 0;
        bool converged = false;
        double theta = cfg.damping;
        double prev_res = std::numeric_limits<double>::infinity();
        for (int it = 0; it < cfg.max_iters; ++it) {
            ++level_iters;
            ++total_iters;
            sweep(rho, y_new);
            // Residual against the undamped targets, measured before the
            // update so the damping can back off when the loop expands.
            double dy = 0.0;
            for (int i = 0; i < N; ++i) dy = std::max(dy, sup_diff(y_new[i], y_prev[i]));
            double dphi = 0.0;
            for (int k = 0; k <= M; ++k) {
                const auto& slice = phi.steps[k];
                const std::uint64_t count = lat.nodes_at(k);
#pragma omp parallel for schedule(static) reduction(max : dphi) \
    if (par_mode() && count >= kSeqCutoff)
                for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
                    const auto p = static_cast<std::uint64_t>(pp);
                    for (int a = 0; a < n; ++a) {
                        double mean = 0.0;
                        for (int i = 0; i < N; ++i) mean += y_new[i].steps[k][p * n + a];
                        dphi = std::max(dphi, std::abs(-mean / N - slice[p * n + a]));
                    }
                }
            }
            const double res = std::max(dy, dphi);
            if (res > prev_res) theta = std::max(theta * 0.5, 0.0625);
            prev_res = res;
            history.push_back(res);
            if (res <= cfg.tol) {
                converged = true;
                break;
            }
            // Damped update of the adjoints and the price.
            for (int i = 0; i < N; ++i) {
                for (int k = 0; k <= M; ++k) {
                    auto& cur = sol.Y[i].steps[k];
                    const auto& nxt = y_new[i].steps[k];
                    const auto& prv = y_prev[i].steps[k];
                    const std::uint64_t cells = cur.size();
#pragma omp parallel for schedule(static) if (par_mode() && cells >= kSeqCutoff)
                    for (long long c = 0; c < static_cast<long long>(cells); ++c)
                        cur[c] = (1.0 - theta) * prv[c] + theta * nxt[c];
                }
                y_prev[i] = sol.Y[i];
            }
            for (int k = 0; k <= M; ++k) {
                auto& slice = phi.steps[k];
                const std::uint64_t count = lat.nodes_at(k);
#pragma omp parallel for schedule(static) if (par_mode() && count >= kSeqCutoff)
                for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
                    const auto p = static_cast<std::uint64_t>(pp);
                    for (int a = 0; a < n; ++a) {
                        double mean = 0.0;
                        for (int i = 0; i < N; ++i) mean += y_new[i].steps[k][p * n + a];
                        slice[p * n + a] =
                            (1.0 - theta) * slice[p * n + a] + theta * (-mean / N);
                    }
                }
            }
        }
        sol.diagnostics.continuation_path.emplace_back(rho, level_iters);
        if (!converged)
            throw NonConvergenceError("solve_equilibrium: continuation level rho=" +
                                          std::to_string(rho) + " did not converge",
                                      history);
    }
    // Final undamped pass: restores the exact terminal-map relation at the
    // leaves, then the price is assigned the exact mean relation.
    sweep(1.0, sol.Y);
    for (int k = 0; k <= M; ++k) {
        const std::uint64_t count = lat.nodes_at(k);
        auto& slice = phi.steps[k];
#pragma omp parallel for schedule(static) if (par_mode() && count >= kSeqCutoff)
        for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
            const auto p = static_cast<std::uint64_t>(pp);
            for (int a = 0; a < n; ++a) {
                double mean = 0.0;
                for (int i = 0; i < N; ++i) mean += sol.Y[i].steps[k][p * n + a];
                slice[p * n + a] = 0.0 - mean / N;  // 0.0- avoids writing -0
            }
        }
    }
    sol.phi = std::move(phi);
    sol.Z0.resize(N);
    sol.Zij.resize(N);
    for (int i = 0; i < N; ++i) fill_z(model, lat, sol.Y[i], cfg.store_cross_z, i, sol.Z0[i], sol.Zij[i]);
    sol.diagnostics.iterations = total_iters;
    sol.diagnostics.final_residual = history.empty() ? 0.0 : history.back();
    sol.diagnostics.residual_history = std::move(history);
    sol.diagnostics.cross_z_stored = cfg.store_cross_z;
    sol.diagnostics.method = "picard-continuation";
    return sol;
}

namespace {

struct NewtonLayout {
    const ScenarioLattice* lat;
    int n, N, M;
    std::vector<std::uint64_t> node_offset;  // cumulative nodes below step k
    std::uint64_t total_nodes;

    explicit NewtonLayout(const ScenarioLattice& l, int n_, int N_)
        : lat(&l), n(n_), N(N_), M(l.steps) {
        node_offset.resize(M + 2, 0);
        for (int k = 0; k <= M; ++k) node_offset[k + 1] = node_offset[k] + l.nodes_at(k);
        total_nodes = node_offset[M + 1];
    }
    std::uint64_t unknowns() const { return 2ull * N * total_nodes * n; }
    std::uint64_t x_index(int i, int k, std::uint64_t node, int a) const {
        return (static_cast<std::uint64_t>(i) * 2 * total_nodes + node_offset[k] + node) * n + a;
    }
    std::uint64_t y_index(int i, int k, std::uint64_t node, int a) const {
        return (static_cast<std::uint64_t>(i) * 2 * total_nodes + total_nodes + node_offset[k] +
                node) * n + a;
    }
};

void newton_residual(const MarketModel& model, const ScenarioLattice& lat,
                     const LatticeData& data, const NewtonLayout& lo, const Eigen::VectorXd& u,
                     Eigen::VectorXd& r) {
    const int n = model.n, N = model.N, M = lat.steps;
    const double dt = lat.dt;
    const std::uint64_t b = lat.branching;
    const double w = model.delta / (1.0 - model.delta);
    r.setZero(u.size());
    std::vector<double> phi(n), l(n), grad(n), x(n), y(n);
    for (int i = 0; i < N; ++i) {
        // Initial condition.
        for (int a = 0; a < n; ++a)
            r(lo.x_index(i, 0, 0, a)) = u(lo.x_index(i, 0, 0, a)) - data.x0[a];
        for (int k = 0; k < M; ++k) {
            const std::uint64_t count = lat.nodes_at(k);
            const double tk = k * dt, tk1 = (k + 1) * dt;
            for (std::uint64_t p = 0; p < count; ++p) {
                const std::uint64_t prefix = lat.common_prefix(p, k);
                for (int a = 0; a < n; ++a) {
                    double mean = 0.0;
                    for (int j = 0; j < N; ++j) mean += u(lo.y_index(j, k, p, a));
                    phi[a] = -mean / N;
                }
                const double* c0 = data.c0.at(k, prefix);
                const double* ci = data.c[i].at(k, p);
                model.agents[i].flow(tk, phi, std::span(c0, n), std::span(ci, n), l.data());
                // Forward residuals for every child.
                for (std::uint64_t e = 0; e < b; ++e) {
                    const std::uint64_t q = p * b + e;
                    for (int a = 0; a < n; ++a) {
                        double rate = 0.0;
                        for (int c = 0; c < n; ++c)
                            rate -= model.Lambda_inv(a, c) * (u(lo.y_index(i, k, p, c)) + phi[c]);
                        double v = u(lo.x_index(i, k + 1, q, a)) - u(lo.x_index(i, k, p, a)) -
                                   (rate + l[a]) * dt;
                        if (a < lat.d0)
                            v -= model.agents[i].vol0_entry(a, a) *
                                 ScenarioLattice::coord_sign(e, a) * lat.sqrt_dt;
                        if (a < lat.d)
                            v -= model.agents[i].vol_entry(a, a) *
                                 ScenarioLattice::coord_sign(e, lat.d0 + i * lat.d + a) *
                                 lat.sqrt_dt;
                        r(lo.x_index(i, k + 1, q, a)) = v;
                    }
                }
                // Backward residual at (k, p).
                double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
                for (std::uint64_t e = 0; e < b; ++e) {
                    const std::uint64_t q = p * b + e;
                    const std::uint64_t qprefix = (prefix << lat.d0) | lat.common_digit(e);
                    for (int a = 0; a < n; ++a) {
                        double mean = 0.0;
                        for (int j = 0; j < N; ++j) mean += u(lo.y_index(j, k + 1, q, a));
                        phi[a] = -mean / N;
                        x[a] = u(lo.x_index(i, k + 1, q, a));
                    }
                    model.agents[i].dfdx(tk1, x, phi, std::span(data.c0.at(k + 1, qprefix), n),
                                         std::span(data.c[i].at(k + 1, q), n), grad.data());
                    for (int a = 0; a < n; ++a)
                        acc[a] += u(lo.y_index(i, k + 1, q, a)) + grad[a] * dt;
                }
                for (int a = 0; a < n; ++a)
                    r(lo.y_index(i, k, p, a)) =
                        u(lo.y_index(i, k, p, a)) - acc[a] / static_cast<double>(b);
            }
        }
    }
    // Terminal residuals.
    const std::uint64_t leaves = lat.nodes_at(M);
    std::vector<double> gsum(n);
    for (std::uint64_t p = 0; p < leaves; ++p) {
        const std::uint64_t prefix = lat.common_prefix(p, M);
        const double* c0 = data.c0.at(M, prefix);
        std::fill(gsum.begin(), gsum.end(), 0.0);
        std::vector<std::vector<double>> gs(N, std::vector<double>(n));
        for (int j = 0; j < N; ++j) {
            for (int a = 0; a < n; ++a) x[a] = u(lo.x_index(j, M, p, a));
            model.agents[j].dgdx(x, std::span(c0, n), std::span(data.c[j].at(M, p), n),
                                 gs[j].data());
            for (int a = 0; a < n; ++a) gsum[a] += gs[j][a] / N;
        }
        for (int i = 0; i < N; ++i)
            for (int a = 0; a < n; ++a)
                r(lo.y_index(i, M, p, a)) =
                    u(lo.y_index(i, M, p, a)) - (w * gsum[a] + gs[i][a]);
    }
}

}  // namespace

EquilibriumSolution solve_global_newton(const MarketModel& model, const ScenarioLattice& lat,
                                        const SolverConfig& cfg) {
    check_solver_config(cfg);
    if (lat.agents != model.N) throw ShapeError("solve_global_newton: lattice hosts N agents");
    const NewtonLayout lo(lat, model.n, model.N);
    if (lo.unknowns() > cfg.newton_cap)
        throw CapacityError("solve_global_newton: " + std::to_string(lo.unknowns()) +
                            " unknowns exceed the cap of " + std::to_string(cfg.newton_cap));
    const LatticeData data = materialize_exogenous(model, lat);
    const auto m = static_cast<Eigen::Index>(lo.unknowns());
    Eigen::VectorXd u = Eigen::VectorXd::Zero(m), r(m), rp(m), rm(m);
    newton_residual(model, lat, data, lo, u, r);
    double rnorm = r.lpNorm<Eigen::Infinity>();
    std::vector<double> history{rnorm};
    const double tol = 1e-12;
    int it = 0;
    while (rnorm > tol && it < 50) {
        ++it;
        Eigen::MatrixXd J(m, m);
        for (Eigen::Index col = 0; col < m; ++col) {
            const double h = 1e-7 * (1.0 + std::abs(u(col)));
            const double saved = u(col);
            u(col) = saved + h;
            newton_residual(model, lat, data, lo, u, rp);
            u(col) = saved - h;
            newton_residual(model, lat, data, lo, u, rm);
            u(col) = saved;
            J.col(col) = (rp - rm) / (2.0 * h);
        }
        Eigen::PartialPivLU<Eigen::MatrixXd> lu(J);
        const Eigen::VectorXd diag = lu.matrixLU().diagonal().cwiseAbs();
        const double dmin = diag.minCoeff(), dmax = diag.maxCoeff();
        if (dmin == 0.0 || dmax / dmin > 1e14)
            throw SingularJacobianError("solve_global_newton: singular Jacobian",
                                        dmin == 0.0 ? std::numeric_limits<double>::infinity()
                                                    : dmax / dmin);
        const Eigen::VectorXd du = lu.solve(-r);
        double s = 1.0;
        while (s > 1e-6) {
            Eigen::VectorXd ut = u + s * du;
            newton_residual(model, lat, data, lo, ut, rp);
            const double rn = rp.lpNorm<Eigen::Infinity>();
            if (rn < rnorm || rn <= tol) {
                u = std::move(ut);
                r = rp;
                rnorm = rn;
                break;
            }
            s *= 0.5;
        }
        history.push_back(rnorm);
        if (s <= 1e-6)
            throw NonConvergenceError("solve_global_newton: line search stalled", history);
    }
    if (rnorm > 1e-10)
        throw NonConvergenceError("solve_global_newton: residual " + std::to_string(rnorm) +
                                      " above 1e-10",
                                  history);

    EquilibriumSolution sol;
    sol.X.assign(model.N, AdaptedProcess::zeros(lat, model.n));
    sol.Y.assign(model.N, AdaptedProcess::zeros(lat, model.n));
    for (int i = 0; i < model.N; ++i) {
        for (int k = 0; k <= lat.steps; ++k) {
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p) {
                for (int a = 0; a < model.n; ++a) {
                    sol.X[i].steps[k][p * model.n + a] = u(lo.x_index(i, k, p, a));
                    sol.Y[i].steps[k][p * model.n + a] = u(lo.y_index(i, k, p, a));
                }
            }
        }
    }
    sol.phi = AdaptedProcess::zeros(lat, model.n);
    for (int k = 0; k <= lat.steps; ++k) {
        for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p) {
            for (int a = 0; a < model.n; ++a) {
                double mean = 0.0;
                for (int i = 0; i < model.N; ++i) mean += sol.Y[i].steps[k][p * model.n + a];
                sol.phi.steps[k][p * model.n + a] = 0.0 - mean / model.N;
            }
        }
    }
    sol.Z0.resize(model.N);
    sol.Zij.resize(model.N);
    for (int i = 0; i < model.N; ++i)
        fill_z(model, lat, sol.Y[i], cfg.store_cross_z, i, sol.Z0[i], sol.Zij[i]);
    sol.diagnostics.iterations = it;
    sol.diagnostics.final_residual = rnorm;
    sol.diagnostics.residual_history = std::move(history);
    sol.diagnostics.method = "newton";
    return sol;
}

AdaptedProcess clearing_residual(const EquilibriumSolution& sol, const MarketModel& model,
                                 const ScenarioLattice& lat) {
    const int n = model.n;
    AdaptedProcess out = AdaptedProcess::zeros(lat, 1);
    for (int k = 0; k <= lat.steps; ++k) {
        const std::uint64_t count = lat.nodes_at(k);
#pragma omp parallel for schedule(static) if (par_mode() && count >= kSeqCutoff)
        for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
            const auto p = static_cast<std::uint64_t>(pp);
            double total[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            const double* ph = sol.phi.at(k, p);
            for (int i = 0; i < model.N; ++i) {
                const double* y = sol.Y[i].at(k, p);
                for (int a = 0; a < n; ++a) {
                    double rate = 0.0;
                    for (int c = 0; c < n; ++c) rate -= model.Lambda_inv(a, c) * (y[c] + ph[c]);
                    total[a] += rate;
                }
            }
            double norm = 0.0;
            for (int a = 0; a < n; ++a) norm += total[a] * total[a];
            out.steps[k][p] = std::sqrt(norm);
        }
    }
    return out;
}

double max_clearing_residual(const EquilibriumSolution& sol, const MarketModel& model,
                             const ScenarioLattice& lat) {
    const auto res = clearing_residual(sol, model, lat);
    double m = 0.0;
    for (const auto& s : res.steps)
        for (double v : s) m = std::max(m, v);
    return m;
}

AdaptedProcess control_from(const MarketModel& model, const ScenarioLattice& lat,
                            const AdaptedProcess& Y, const AdaptedProcess& phi) {
    AdaptedProcess alpha = AdaptedProcess::zeros(lat, model.n);
    for (int k = 0; k < lat.steps; ++k) {
        const std::uint64_t count = lat.nodes_at(k);
        for (std::uint64_t p = 0; p < count; ++p) {
            const double* y = Y.at(k, p);
            const double* ph = phi.at(k, p);
            double* out = alpha.at(k, p);
            for (int a = 0; a < model.n; ++a) {
                double rate = 0.0;
                for (int c = 0; c < model.n; ++c)
                    rate -= model.Lambda_inv(a, c) * (y[c] + ph[c]);
                out[a] = rate;
            }
        }
    }
    return alpha;
}

std::vector<std::string> export_solution(const EquilibriumSolution& sol,
                                         const ScenarioLattice& lat, const std::string& out_dir,
                                         const std::string& prefix) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<std::string> files;
    const int N = static_cast<int>(sol.Y.size());
    const int n = sol.phi.dim;
    auto agent_csv = [&](const std::string& kind, const std::vector<AdaptedProcess>& procs) {
        const std::string path = out_dir + "/" + prefix + "_" + kind + ".csv";
        CsvFile csv(path);
        csv.row("step", "node", "agent", "coordinate", "value");
        for (int k = 0; k <= lat.steps; ++k)
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p)
                for (int i = 0; i < N; ++i)
                    for (int a = 0; a < n; ++a)
                        csv.row(k, p, i, a, procs[i].steps[k][p * n + a]);
        files.push_back(path);
    };
    agent_csv("X", sol.X);
    agent_csv("Y", sol.Y);
    {
        const std::string path = out_dir + "/" + prefix + "_Z0.csv";
        CsvFile csv(path);
        csv.row("step", "node", "agent", "coordinate", "value");
        for (int k = 0; k < lat.steps; ++k)
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p)
                for (int i = 0; i < N; ++i)
                    for (int a = 0; a < n * lat.d0; ++a)
                        csv.row(k, p, i, a, sol.Z0[i].steps[k][p * n * lat.d0 + a]);
        files.push_back(path);
    }
    {
        const std::string path = out_dir + "/" + prefix + "_phi.csv";
        CsvFile csv(path);
        csv.row("step", "node", "coordinate", "value");
        for (int k = 0; k <= lat.steps; ++k)
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p)
                for (int a = 0; a < n; ++a) csv.row(k, p, a, sol.phi.steps[k][p * n + a]);
        files.push_back(path);
    }
    return files;
}

}  // namespace clearfield
