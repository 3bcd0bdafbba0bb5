#include "doctest.h"

#include <cmath>

#include "clearfield/errors.hpp"
#include "clearfield/fbsde.hpp"
#include "clearfield/lqoracle.hpp"
#include "clearfield/mfg.hpp"
#include "clearfield/model.hpp"

using namespace clearfield;

namespace {

double sup_abs(const AdaptedProcess& p) {
    double m = 0.0;
    for (const auto& s : p.steps)
        for (double v : s) m = std::max(m, std::abs(v));
    return m;
}

}  // namespace

TEST_CASE("solve_mkv") {
    SUBCASE("all-zero model gives a zero mean field") {
        LQParams lq;
        lq.gamma_f = lq.gamma_g = 0.0;
        lq.gamma_l = 1.0;
        lq.m0 = 0.0;
        auto model = lq.to_model(1, 1, 1, 4, 1.0, 0.0);
        auto lat = build_lattice(2, 1, 1, 1, 1.0);
        SolverConfig cfg;
        cfg.skip_assumption_check = true;
        auto mkv = solve_mkv(model, lat, cfg);
        CHECK(sup_abs(mkv.m) == 0.0);
        CHECK(sup_abs(mkv.phi_mfg) == 0.0);
    }
    SUBCASE("heterogeneous bundles are rejected") {
        LQParams lq;
        auto model = lq.to_model(1, 1, 1, 2, 1.0, 0.0);
        auto agents = model.agents;
        agents[1].gamma_f = 2.0;
        model = make_market_model(1, 1, 1, 2, 1.0, 0.0, model.Lambda, agents, model.initial_law,
                                  model.exogenous);
        auto lat = build_lattice(2, 1, 1, 1, 1.0);
        CHECK_THROWS_AS(solve_mkv(model, lat), InvalidModelError);
    }
    SUBCASE("no common noise: phi^MFG is deterministic and tracks the mean recursion") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.0, 0.4, 0.3, 0.6, 0.0};
        const int M = 4;
        auto model = lq.to_model(1, 1, 1, 3, 1.0, 0.5);
        auto lat = build_lattice(M, 1, 1, 1, 1.0);
        auto mkv = solve_mkv(model, lat);
        const auto ric = discrete_riccati(lq, 0.5, 1.0, M);
        // Discrete mean chain: xhat_{k+1} = xhat_k + (-gamma_l(P xhat+q)+l0)dt.
        double xhat = lq.m0;
        for (int k = 0; k <= M; ++k) {
            const double expect = -(ric.P[k] * xhat + ric.q[k]);
            for (std::uint64_t g = 0; g < lat.common_nodes_at(k); ++g)
                CHECK(std::abs(mkv.phi_mfg.steps[k][g] - expect) <= 1e-8);
            xhat += (-lq.gamma_l * (ric.P[k] * xhat + ric.q[k]) + lq.l0) * lat.dt;
        }
        // O(dt) agreement with the continuous closed form at t = 0.
        const double cont = riccati_closed_form(lq, 0.5, 1.0, RiccatiKind::Mean, 0.0) * lq.m0 +
                            riccati_offset_rk4(lq, 0.5, 1.0, 512)[0];
        CHECK(std::abs(mkv.phi_mfg.steps[0][0] + cont) < 0.5 / M);
    }
    SUBCASE("common noise: m matches the discrete Riccati reconstruction") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.25, 0.4, 0.2, 0.5, 0.0};
        const int M = 3;
        const double delta = 0.4;
        auto model = lq.to_model(1, 1, 1, 2, 1.0, delta);
        auto lat = build_lattice(M, 1, 1, 1, 1.0);
        auto mkv = solve_mkv(model, lat);
        const auto ric = discrete_riccati(lq, delta, 1.0, M);
        for (int k = 0; k <= M; ++k) {
            const auto xhat = cond_expect_common(lat, mkv.X.steps[k], k, 1);
            for (std::uint64_t g = 0; g < lat.common_nodes_at(k); ++g) {
                const double rec = ric.P[k] * xhat[g] + ric.q[k];
                CHECK(std::abs(mkv.m.steps[k][g] - rec) <= 1e-8);
            }
            // Conditional variance of Y over idiosyncratic branches equals
            // p_k^2 times the conditional variance of X.
            std::vector<double> y2(mkv.Y.steps[k].size()), x2(mkv.X.steps[k].size());
            for (std::size_t i = 0; i < y2.size(); ++i) {
                y2[i] = mkv.Y.steps[k][i] * mkv.Y.steps[k][i];
                x2[i] = mkv.X.steps[k][i] * mkv.X.steps[k][i];
            }
            const auto ey2 = cond_expect_common(lat, y2, k, 1);
            const auto ex2 = cond_expect_common(lat, x2, k, 1);
            const auto ex = cond_expect_common(lat, mkv.X.steps[k], k, 1);
            for (std::uint64_t g = 0; g < lat.common_nodes_at(k); ++g) {
                const double vy = ey2[g] - mkv.m.steps[k][g] * mkv.m.steps[k][g];
                const double vx = ex2[g] - ex[g] * ex[g];
                CHECK(std::abs(vy - ric.p[k] * ric.p[k] * vx) <= 1e-8);
            }
        }
        // Tower consistency: E[phi^MFG] = -E[Y].
        for (int k = 0; k <= M; ++k) {
            const auto full = expand_common(lat, mkv.phi_mfg.steps[k], k, 1);
            CHECK(expectation(lat, full, k, 1, 0) ==
                  doctest::Approx(-expectation(lat, mkv.Y.steps[k], k, 1, 0)).epsilon(1e-12));
        }
        // m is the exact conditional mean at return.
        const auto mm = cond_expect_common(lat, mkv.Y);
        for (int k = 0; k <= M; ++k)
            for (std::size_t i = 0; i < mm.steps[k].size(); ++i)
                CHECK(mm.steps[k][i] == mkv.m.steps[k][i]);
    }
}

TEST_CASE("mfg_clearing_residual") {
    SUBCASE("no idiosyncratic randomness clears exactly") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.3, 0.0, 0.2, 0.5, 0.0};
        auto model = lq.to_model(1, 1, 1, 2, 1.0, 0.4);
        auto rep = build_lattice(2, 1, 1, 1, 1.0);
        auto latN = build_lattice(2, 2, 1, 1, 1.0);
        auto mkv = solve_mkv(model, rep);
        auto res = mfg_clearing_residual(mkv, model, latN);
        for (const auto& s : res.residual.steps)
            for (double v : s) CHECK(v <= 1e-8);
    }
    SUBCASE("N = 1 residual is the gap between Y and its conditional mean") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.4, 0.0, 0.5, 0.0};
        auto model = lq.to_model(1, 1, 1, 1, 1.0, 0.3);
        auto rep = build_lattice(2, 1, 1, 1, 1.0);
        auto mkv = solve_mkv(model, rep);
        auto res = mfg_clearing_residual(mkv, model, rep);
        for (int k = 0; k <= 2; ++k) {
            const auto m_full = expand_common(rep, mkv.m.steps[k], k, 1);
            for (std::uint64_t p = 0; p < rep.nodes_at(k); ++p) {
                const double expect = std::abs(mkv.Y.steps[k][p] - m_full[p]);
                CHECK(res.residual.steps[k][p] == doctest::Approx(expect).epsilon(1e-6));
            }
        }
    }
    SUBCASE("best responses replicate the representative solution") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.1, 0.4, 0.0};
        auto model = lq.to_model(1, 1, 1, 2, 1.0, 0.4);
        auto rep = build_lattice(2, 1, 1, 1, 1.0);
        auto latN = build_lattice(2, 2, 1, 1, 1.0);
        auto mkv = solve_mkv(model, rep);
        const auto phi = extend_common_to_lattice(latN, mkv.phi_mfg);
        for (int i = 0; i < 2; ++i) {
            auto best = solve_decoupled(model, latN, i, phi);
            auto replica = replicate_to_agent(latN, rep, mkv.Y, i);
            double worst = 0.0;
            for (int k = 0; k <= 2; ++k)
                for (std::size_t c = 0; c < best.Y.steps[k].size(); ++c)
                    worst = std::max(worst,
                                     std::abs(best.Y.steps[k][c] - replica.steps[k][c]));
            CHECK(worst <= 1e-8);
        }
    }
    SUBCASE("LQ per-capita residual follows the exact deviation-variance law") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.0, 0.5, 0.0};
        const int M = 2;
        const double delta = 0.4;
        for (int N : {2, 4}) {
            auto model = lq.to_model(1, 1, 1, N, 1.0, delta);
            auto rep = build_lattice(M, 1, 1, 1, 1.0);
            auto latN = build_lattice(M, N, 1, 1, 1.0);
            auto mkv = solve_mkv(model, rep);
            auto res = mfg_clearing_residual(mkv, model, latN);
            const auto ric = discrete_riccati(lq, delta, 1.0, M);
            double var_dev = 0.0;  // deterministic initial state on the lattice
            for (int k = 0; k <= M; ++k) {
                const double expect =
                    ric.p[k] / lq.lambda * std::sqrt(var_dev / N);
                CHECK(res.l2_per_step[k] == doctest::Approx(expect).epsilon(1e-6));
                const double f = 1.0 - ric.p[k] * latN.dt / lq.lambda;
                var_dev = f * f * var_dev + lq.sigma * lq.sigma * latN.dt;
            }
        }
    }
}

TEST_CASE("mkv_w2_terms") {
    LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.4, 0.0, 0.5, 0.0};
    auto model = lq.to_model(1, 1, 1, 2, 1.0, 0.4);
    auto rep = build_lattice(2, 1, 1, 1, 1.0);
    auto latN = build_lattice(2, 2, 1, 1, 1.0);
    auto mkv = solve_mkv(model, rep);
    auto terms = mkv_w2_terms(mkv, model, latN, rep);
    CHECK(terms.w2sq_per_step[0] <= 1e-12);  // everything deterministic at t=0
    CHECK(terms.sup > 0.0);
    CHECK(terms.terminal_g >= 0.0);
    for (double v : terms.w2sq_per_step) CHECK(v >= 0.0);
}
