#include "clearfield/mfg.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "clearfield/csvio.hpp"
#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/metrics.hpp"
#include "sweeps.hpp"

namespace clearfield {

namespace {

double sup_diff(const AdaptedProcess& a, const AdaptedProcess& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.steps.size(); ++k)
        for (std::size_t i = 0; i < a.steps[k].size(); ++i)
            m = std::max(m, std::abs(a.steps[k][i] - b.steps[k][i]));
    return m;
}

MarketModel representative_model(const MarketModel& model) {
    return make_market_model(model.n, model.d0, model.d, 1, model.T, model.delta, model.Lambda,
                             {model.agents.front()}, model.initial_law, model.exogenous);
}

// Terminal Y_M = w * E[dgdx(X_M)|common] + dgdx(X_M) written into Y.steps[M].
void mkv_terminal(const MarketModel& rep, const ScenarioLattice& lat, const LatticeData& data,
                  const AdaptedProcess& X, AdaptedProcess& Y) {
    const int n = rep.n;
    const int M = lat.steps;
    const double w = rep.delta / (1.0 - rep.delta);
    const std::uint64_t leaves = lat.nodes_at(M);
    std::vector<double> g(leaves * n);
    for (std::uint64_t p = 0; p < leaves; ++p) {
        const std::uint64_t prefix = lat.common_prefix(p, M);
        rep.agents[0].dgdx(std::span(X.at(M, p), n), std::span(data.c0.at(M, prefix), n),
                           std::span(data.c[0].at(M, p), n), g.data() + p * n);
    }
    const auto gbar = cond_expect_common(lat, g, M, n);
    for (std::uint64_t p = 0; p < leaves; ++p) {
        const std::uint64_t prefix = lat.common_prefix(p, M);
        for (int a = 0; a < n; ++a)
            Y.steps[M][p * n + a] = w * gbar[prefix * n + a] + g[p * n + a];
    }
}

}  // namespace

MkvSolution solve_mkv(const MarketModel& model, const ScenarioLattice& lat_rep,
                      const SolverConfig& cfg) {
    check_solver_config(cfg);
    if (!model.homogeneous())
        throw InvalidModelError("solve_mkv: requires a homogeneous coefficient bundle");
    if (lat_rep.agents != 1)
        throw ShapeError("solve_mkv: expects a single-agent representative lattice");
    if (lat_rep.d0 != model.d0 || lat_rep.d != model.d)
        throw ShapeError("solve_mkv: lattice noise dimensions do not match the model");
    const MarketModel rep = representative_model(model);
    if (!cfg.skip_assumption_check) {
        const auto report = validate_assumptions(rep, 512, 0x5eedu);
        if (!report.all_pass)
            throw AssumptionError("solve_mkv: model fails assumption validation");
    }
    const LatticeData data = materialize_exogenous(rep, lat_rep);
    const int n = model.n;
    const int M = lat_rep.steps;

    MkvSolution sol;
    sol.X = AdaptedProcess::zeros(lat_rep, n);
    sol.Y = AdaptedProcess::zeros(lat_rep, n);
    sol.m = AdaptedProcess::zeros(lat_rep, n, Adapted::Common);
    AdaptedProcess y_new = sol.Y;
    AdaptedProcess phi = AdaptedProcess::zeros(lat_rep, n);

    auto refresh_phi = [&] {
        for (int k = 0; k <= M; ++k) {
            auto expanded = expand_common(lat_rep, sol.m.steps[k], k, n);
            for (std::size_t i = 0; i < expanded.size(); ++i) phi.steps[k][i] = -expanded[i];
        }
    };

    std::vector<double> history;
    double theta = cfg.damping;
    double prev_res = std::numeric_limits<double>::infinity();
    bool converged = false;
    for (int it = 0; it < cfg.max_iters; ++it) {
        refresh_phi();
        detail::forward_sweep(rep, lat_rep, 0, 1.0, phi, sol.Y, nullptr, data, sol.X);
        mkv_terminal(rep, lat_rep, data, sol.X, y_new);
        detail::backward_sweep(rep, lat_rep, 0, 1.0, 0.0, phi, sol.X, nullptr, data, y_new);
        // Fixed-point residual on m and on Y.
        double res = sup_diff(y_new, sol.Y);
        double dm = 0.0;
        for (int k = 0; k <= M; ++k) {
            const auto m_new = cond_expect_common(lat_rep, y_new.steps[k], k, n);
            for (std::size_t i = 0; i < m_new.size(); ++i)
                dm = std::max(dm, std::abs(m_new[i] - sol.m.steps[k][i]));
        }
        res = std::max(res, dm);
        if (res > prev_res) theta = std::max(theta * 0.5, 0.0625);
        prev_res = res;
        history.push_back(res);
        sol.diagnostics.iterations = it + 1;
        if (res <= cfg.tol) {
            converged = true;
            break;
        }
        for (int k = 0; k <= M; ++k) {
            const auto m_new = cond_expect_common(lat_rep, y_new.steps[k], k, n);
            for (std::size_t i = 0; i < m_new.size(); ++i)
                sol.m.steps[k][i] = (1.0 - theta) * sol.m.steps[k][i] + theta * m_new[i];
            for (std::size_t i = 0; i < sol.Y.steps[k].size(); ++i)
                sol.Y.steps[k][i] =
                    (1.0 - theta) * sol.Y.steps[k][i] + theta * y_new.steps[k][i];
        }
    }
    sol.diagnostics.residual_history = history;
    sol.diagnostics.final_residual = history.empty() ? 0.0 : history.back();
    sol.diagnostics.method = "picard-mkv";
    if (!converged)
        throw NonConvergenceError("solve_mkv: no fixed point within max_iters", history);

    // Final undamped pass; m is then the exact conditional mean of Y and the
    // terminal relation holds exactly at every leaf.
    refresh_phi();
    detail::forward_sweep(rep, lat_rep, 0, 1.0, phi, sol.Y, nullptr, data, sol.X);
    mkv_terminal(rep, lat_rep, data, sol.X, sol.Y);
    detail::backward_sweep(rep, lat_rep, 0, 1.0, 0.0, phi, sol.X, nullptr, data, sol.Y);
    sol.m = cond_expect_common(lat_rep, sol.Y);
    sol.phi_mfg = sol.m;
    for (auto& s : sol.phi_mfg.steps)
        for (auto& v : s) v = 0.0 - v;

    // Martingale coefficients of the representative adjoint.
    sol.Z0.dim = n;
    sol.Z0.cols = lat_rep.d0;
    sol.Z0.steps.assign(M, {});
    sol.Zii.dim = n;
    sol.Zii.cols = lat_rep.d;
    sol.Zii.steps.assign(M, {});
    for (int k = 0; k < M; ++k) {
        const auto z = martingale_coefficients(lat_rep, sol.Y.steps[k + 1], k + 1, n);
        const std::uint64_t count = lat_rep.nodes_at(k);
        const int D = lat_rep.noise_dim;
        sol.Z0.steps[k].assign(count * n * lat_rep.d0, 0.0);
        sol.Zii.steps[k].assign(count * n * lat_rep.d, 0.0);
        for (std::uint64_t p = 0; p < count; ++p)
            for (int q = 0; q < D; ++q)
                for (int a = 0; a < n; ++a) {
                    const double v = z[p * D * n + q * n + a];
                    if (q < lat_rep.d0)
                        sol.Z0.steps[k][(p * n + a) * lat_rep.d0 + q] = v;
                    else
                        sol.Zii.steps[k][(p * n + a) * lat_rep.d + (q - lat_rep.d0)] = v;
                }
    }
    return sol;
}

AdaptedProcess extend_common_to_lattice(const ScenarioLattice& lat_to,
                                        const AdaptedProcess& common) {
    if (common.tag != Adapted::Common)
        throw AdaptednessError("extend_common_to_lattice: needs a common-tagged process");
    if (static_cast<int>(common.steps.size()) != lat_to.steps + 1)
        throw ShapeError("extend_common_to_lattice: step count mismatch");
    AdaptedProcess out = AdaptedProcess::zeros(lat_to, common.dim);
    for (int k = 0; k <= lat_to.steps; ++k)
        out.steps[k] = expand_common(lat_to, common.steps[k], k, common.dim);
    return out;
}

AdaptedProcess replicate_to_agent(const ScenarioLattice& lat_N, const ScenarioLattice& lat_rep,
                                  const AdaptedProcess& rep_full, int agent) {
    if (lat_rep.agents != 1 || lat_rep.d0 != lat_N.d0 || lat_rep.d != lat_N.d ||
        lat_rep.steps != lat_N.steps)
        throw ShapeError("replicate_to_agent: lattice mismatch");
    const int n = rep_full.dim;
    AdaptedProcess out = AdaptedProcess::zeros(lat_N, n);
    const bool par = exec::mode() == exec::Mode::Parallel;
    for (int k = 0; k <= lat_N.steps; ++k) {
        const std::uint64_t count = lat_N.nodes_at(k);
#pragma omp parallel for schedule(static) if (par && count > 1024)
        for (long long pp = 0; pp < static_cast<long long>(count); ++pp) {
            const auto p = static_cast<std::uint64_t>(pp);
            const std::uint64_t rp = lat_N.project_to_agent(p, k, agent);
            for (int a = 0; a < n; ++a)
                out.steps[k][p * n + a] = rep_full.steps[k][rp * n + a];
        }
    }
    return out;
}

MfgClearingResult mfg_clearing_residual(const MkvSolution& mkv, const MarketModel& model,
                                        const ScenarioLattice& lat_N, const SolverConfig& cfg) {
    if (!model.homogeneous())
        throw InvalidModelError("mfg_clearing_residual: requires homogeneous agents");
    if (lat_N.agents != model.N)
        throw ShapeError("mfg_clearing_residual: lattice does not host N agents");
    if (static_cast<int>(mkv.phi_mfg.steps.size()) != lat_N.steps + 1)
        throw ShapeError("mfg_clearing_residual: grid mismatch with the MKV solution");
    const int n = model.n;
    const int N = model.N;
    const AdaptedProcess phi = extend_common_to_lattice(lat_N, mkv.phi_mfg);
    const LatticeData data = materialize_exogenous(model, lat_N);
    std::vector<AdaptedProcess> Y;
    Y.reserve(N);
    for (int i = 0; i < N; ++i) {
        SolverConfig dcfg = cfg;
        dcfg.store_cross_z = false;  // best responses only need Y
        Y.push_back(solve_decoupled(model, lat_N, i, phi, dcfg, data).Y);
    }
    MfgClearingResult out;
    out.residual = AdaptedProcess::zeros(lat_N, 1);
    out.l2_per_step.resize(lat_N.steps + 1);
    for (int k = 0; k <= lat_N.steps; ++k) {
        const std::uint64_t count = lat_N.nodes_at(k);
        std::vector<double> sq(count);
        for (std::uint64_t p = 0; p < count; ++p) {
            double total[8] = {0, 0, 0, 0, 0, 0, 0, 0};
            const double* ph = phi.at(k, p);
            for (int i = 0; i < N; ++i) {
                const double* y = Y[i].at(k, p);
                for (int a = 0; a < n; ++a) {
                    double rate = 0.0;
                    for (int c = 0; c < n; ++c) rate -= model.Lambda_inv(a, c) * (y[c] + ph[c]);
                    total[a] += rate;
                }
            }
            double norm = 0.0;
            for (int a = 0; a < n; ++a) norm += total[a] * total[a];
            const double res = std::sqrt(norm) / N;
            out.residual.steps[k][p] = res;
            sq[p] = res * res;
        }
        out.l2_per_step[k] =
            std::sqrt(det_sum(sq.data(), sq.size()) * lat_N.node_probability(k));
    }
    double acc = 0.0;
    for (int k = 0; k < lat_N.steps; ++k)
        acc += out.l2_per_step[k] * out.l2_per_step[k] * lat_N.dt;
    out.l2_aggregate = std::sqrt(acc);
    return out;
}

MkvW2Terms mkv_w2_terms(const MkvSolution& mkv, const MarketModel& model,
                        const ScenarioLattice& lat_N, const ScenarioLattice& lat_rep) {
    if (model.n != 1) throw ShapeError("mkv_w2_terms: implemented for n = 1");
    const int N = lat_N.agents;
    const int M = lat_N.steps;
    // Replicated MKV adjoints across the N idiosyncratic blocks.
    std::vector<AdaptedProcess> reps;
    reps.reserve(N);
    for (int i = 0; i < N; ++i) reps.push_back(replicate_to_agent(lat_N, lat_rep, mkv.Y, i));
    MkvW2Terms out;
    out.w2sq_per_step.resize(M + 1);
    std::vector<double> atoms(N), watoms(N, 1.0 / N);
    for (int k = 0; k <= M; ++k) {
        const std::uint64_t count = lat_N.nodes_at(k);
        const std::uint64_t rep_count = lat_rep.nodes_at(k);
        const std::uint64_t groups = lat_rep.common_nodes_at(k);
        // Conditional law of the representative adjoint per common prefix.
        std::vector<std::vector<double>> law(groups);
        for (std::uint64_t rp = 0; rp < rep_count; ++rp)
            law[lat_rep.common_prefix(rp, k)].push_back(mkv.Y.steps[k][rp]);
        std::vector<double> terms(count);
        for (std::uint64_t p = 0; p < count; ++p) {
            for (int i = 0; i < N; ++i) atoms[i] = reps[i].steps[k][p];
            const auto& l = law[lat_N.common_prefix(p, k)];
            const std::vector<double> wl(l.size(), 1.0 / static_cast<double>(l.size()));
            const double d = w2_discrete_1d(atoms, watoms, l, wl);
            terms[p] = d * d;
        }
        out.w2sq_per_step[k] =
            det_sum(terms.data(), terms.size()) * lat_N.node_probability(k);
        out.sup = std::max(out.sup, out.w2sq_per_step[k]);
    }
    // Terminal dgdx variant.
    {
        const LatticeData data_rep = materialize_exogenous(
            make_market_model(model.n, model.d0, model.d, 1, model.T, model.delta, model.Lambda,
                              {model.agents.front()}, model.initial_law, model.exogenous),
            lat_rep);
        const std::uint64_t rep_count = lat_rep.nodes_at(M);
        std::vector<double> g(rep_count);
        for (std::uint64_t rp = 0; rp < rep_count; ++rp) {
            const std::uint64_t prefix = lat_rep.common_prefix(rp, M);
            model.agents[0].dgdx(std::span(mkv.X.at(M, rp), 1),
                                 std::span(data_rep.c0.at(M, prefix), 1),
                                 std::span(data_rep.c[0].at(M, rp), 1), &g[rp]);
        }
        const std::uint64_t groups = lat_rep.common_nodes_at(M);
        std::vector<std::vector<double>> law(groups);
        for (std::uint64_t rp = 0; rp < rep_count; ++rp)
            law[lat_rep.common_prefix(rp, M)].push_back(g[rp]);
        const std::uint64_t count = lat_N.nodes_at(M);
        std::vector<double> terms(count);
        for (std::uint64_t p = 0; p < count; ++p) {
            for (int i = 0; i < N; ++i)
                atoms[i] = g[lat_N.project_to_agent(p, M, i)];
            const auto& l = law[lat_N.common_prefix(p, M)];
            const std::vector<double> wl(l.size(), 1.0 / static_cast<double>(l.size()));
            const double d = w2_discrete_1d(atoms, watoms, l, wl);
            terms[p] = d * d;
        }
        out.terminal_g = det_sum(terms.data(), terms.size()) * lat_N.node_probability(M);
    }
    return out;
}

std::vector<std::string> export_mkv(const MkvSolution& mkv, const ScenarioLattice& lat_rep,
                                    const std::string& out_dir, const std::string& prefix) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const std::string path = out_dir + "/" + prefix + "_phi_mfg.csv";
    CsvFile csv(path);
    csv.row("step", "common_prefix", "coordinate", "value");
    const int n = mkv.phi_mfg.dim;
    for (int k = 0; k <= lat_rep.steps; ++k)
        for (std::uint64_t g = 0; g < lat_rep.common_nodes_at(k); ++g)
            for (int a = 0; a < n; ++a) csv.row(k, g, a, mkv.phi_mfg.steps[k][g * n + a]);
    return {path};
}

}  // namespace clearfield
