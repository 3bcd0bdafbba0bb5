#include "doctest.h"

#include <cmath>
#include <vector>

#include "clearfield/errors.hpp"
#include "clearfield/fbsde.hpp"
#include "clearfield/lattice.hpp"
#include "clearfield/lqoracle.hpp"
#include "clearfield/metrics.hpp"
#include "clearfield/model.hpp"
#include "clearfield/rng.hpp"

using namespace clearfield;

namespace {

MarketModel zero_model(int N) {
    LQParams lq;
    lq.gamma_f = lq.gamma_g = 0.0;
    lq.gamma_l = 1.0;
    lq.l0 = 0.0;
    lq.m0 = 0.0;
    return lq.to_model(1, 1, 1, N, 1.0, 0.0);
}

MarketModel lq_model(const LQParams& lq, int N, double T, double delta) {
    return lq.to_model(1, 1, 1, N, T, delta);
}

double sup_abs(const AdaptedProcess& p) {
    double m = 0.0;
    for (const auto& s : p.steps)
        for (double v : s) m = std::max(m, std::abs(v));
    return m;
}

double sup_diff(const AdaptedProcess& a, const AdaptedProcess& b) {
    double m = 0.0;
    for (std::size_t k = 0; k < a.steps.size(); ++k)
        for (std::size_t i = 0; i < a.steps[k].size(); ++i)
            m = std::max(m, std::abs(a.steps[k][i] - b.steps[k][i]));
    return m;
}

// Linear two-point boundary value oracle for the decoupled LQ system with
// zero price and zero volatility:
//   x' = -y/lambda + l0,  y' = -gamma_f x,  x(0) = m0,  y(T) = gamma_g x(T).
// Superposition of two RK4 runs pins y(0).
double tpbvp_y0(const LQParams& p, double T, int steps) {
    auto rk4 = [&](double x0, double y0, double l0) {
        double x = x0, y = y0;
        const double h = T / steps;
        auto fx = [&](double, double yy) { return -yy / p.lambda + l0; };
        auto fy = [&](double xx, double) { return -p.gamma_f * xx; };
        for (int i = 0; i < steps; ++i) {
            const double k1x = fx(x, y), k1y = fy(x, y);
            const double k2x = fx(x + 0.5 * h * k1x, y + 0.5 * h * k1y);
            const double k2y = fy(x + 0.5 * h * k1x, y + 0.5 * h * k1y);
            const double k3x = fx(x + 0.5 * h * k2x, y + 0.5 * h * k2y);
            const double k3y = fy(x + 0.5 * h * k2x, y + 0.5 * h * k2y);
            const double k4x = fx(x + h * k3x, y + h * k3y);
            const double k4y = fy(x + h * k3x, y + h * k3y);
            x += h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x);
            y += h / 6 * (k1y + 2 * k2y + 2 * k3y + k4y);
        }
        return std::pair{x, y};
    };
    const auto [xa, ya] = rk4(p.m0, 0.0, p.l0);   // particular with y0 = 0
    const auto [xb, yb] = rk4(0.0, 1.0, 0.0);     // homogeneous unit y0
    // y(T) - gamma_g x(T) = (ya - g xa) + y0 (yb - g xb) = 0.
    const double r0 = ya - p.gamma_g * xa;
    const double r1 = yb - p.gamma_g * xb;
    return -r0 / r1;
}

}  // namespace

TEST_CASE("solve_decoupled") {
    SUBCASE("zero coefficients, zero price: X stays at xi, Y and Z vanish") {
        LQParams lq;
        lq.gamma_f = lq.gamma_g = 0.0;
        lq.m0 = 0.7;
        auto model = lq_model(lq, 1, 1.0, 0.0);
        auto lat = build_lattice(2, 1, 1, 1, 1.0);
        auto price = AdaptedProcess::zeros(lat, 1);
        auto sol = solve_decoupled(model, lat, 0, price);
        for (const auto& s : sol.X.steps)
            for (double v : s) CHECK(v == 0.7);
        CHECK(sup_abs(sol.Y) == 0.0);
        for (const auto& s : sol.Z0.steps)
            for (double v : s) CHECK(v == 0.0);
    }
    SUBCASE("deterministic LQ case matches the RK4 boundary-value oracle") {
        LQParams lq{1.0, 1.5, 1.0, 0.8, 0.0, 0.0, 0.3, 0.5, 0.0};
        const double T = 1.0;
        // One-coordinate noise keeps the deterministic tree small.
        auto model = lq.to_model(1, 0, 1, 1, T, 0.25);  // delta irrelevant at zero price
        const double y0_oracle = tpbvp_y0(lq, T, 4096);
        double err_prev = 0.0;
        for (int M : {8, 16}) {
            auto lat = build_lattice(M, 1, 0, 1, T);
            auto price = AdaptedProcess::zeros(lat, 1);
            auto sol = solve_decoupled(model, lat, 0, price);
            const double err = std::abs(sol.Y.steps[0][0] - y0_oracle);
            if (M == 8)
                err_prev = err;
            else
                CHECK(err < err_prev);
            CHECK(err < 0.5 / M);  // within O(dt)
        }
    }
    SUBCASE("re-running the backward sweep on the converged X is a fixed point") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.3, 0.4, 0.1, 0.5, 0.0};
        auto model = lq_model(lq, 1, 1.0, 0.5);
        auto lat = build_lattice(3, 1, 1, 1, 1.0);
        Rng rng(5);
        auto price = AdaptedProcess::zeros(lat, 1);
        for (auto& s : price.steps)
            for (auto& v : s) v = rng.next_uniform(-0.2, 0.2);
        SolverConfig cfg;
        auto sol = solve_decoupled(model, lat, 0, price, cfg);
        auto again = solve_decoupled(model, lat, 0, price, cfg);
        CHECK(sup_diff(sol.Y, again.Y) <= cfg.tol);
        CHECK(sol.diagnostics.final_residual <= cfg.tol);
    }
}

TEST_CASE("solve_equilibrium") {
    SUBCASE("all-zero model yields the zero solution") {
        auto model = zero_model(2);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        SolverConfig cfg;
        cfg.skip_assumption_check = true;  // gamma-compat needs gamma_f > 0
        auto sol = solve_equilibrium(model, lat, cfg);
        for (int i = 0; i < 2; ++i) {
            CHECK(sup_abs(sol.X[i]) == 0.0);
            CHECK(sup_abs(sol.Y[i]) == 0.0);
        }
        CHECK(sup_abs(sol.phi) == 0.0);
    }
    SUBCASE("LQ homogeneous agents reproduce the discrete Riccati reconstruction") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.3, 0.5, 0.0};
        const double T = 1.0, delta = 0.5;
        auto model = lq_model(lq, 2, T, delta);
        auto lat = build_lattice(3, 2, 1, 1, T);
        auto sol = solve_equilibrium(model, lat);
        const auto ric = discrete_riccati(lq, delta, T, 3);
        double worst = 0.0;
        for (int k = 0; k <= 3; ++k) {
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p) {
                const double xbar =
                    0.5 * (sol.X[0].steps[k][p] + sol.X[1].steps[k][p]);
                for (int i = 0; i < 2; ++i) {
                    const double rec = ric.p[k] * (sol.X[i].steps[k][p] - xbar) +
                                       ric.P[k] * xbar + ric.q[k];
                    worst = std::max(worst, std::abs(sol.Y[i].steps[k][p] - rec));
                }
            }
        }
        CHECK(worst <= 1e-8);
        // Clearing identity at machine precision.
        CHECK(max_clearing_residual(sol, model, lat) <= 1e-12 * 2 * 10);
        // Terminal-map relation at the leaves.
        const LatticeData data = materialize_exogenous(model, lat);
        for (std::uint64_t p = 0; p < lat.nodes_at(3); ++p) {
            std::vector<Vec> g;
            for (int i = 0; i < 2; ++i) {
                Vec v(1);
                model.agents[i].dgdx(std::span(sol.X[i].at(3, p), 1),
                                     std::span(data.c0.at(3, lat.common_prefix(p, 3)), 1),
                                     std::span(data.c[i].at(3, p), 1), v.data());
                g.push_back(v);
            }
            const auto yT = terminal_map(g, delta);
            for (int i = 0; i < 2; ++i)
                CHECK(std::abs(sol.Y[i].steps[3][p] - yT[i](0)) <= 1e-12);
        }
    }
    SUBCASE("uniqueness probe: two initial price guesses agree") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.1, 0.4, 0.0};
        auto model = lq_model(lq, 2, 1.0, 0.3);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        SolverConfig cfg;
        auto sol0 = solve_equilibrium(model, lat, cfg);
        AdaptedProcess guess = AdaptedProcess::constant(lat, std::vector<double>{1.0});
        SolverConfig cfg1 = cfg;
        cfg1.phi_guess = &guess;
        auto sol1 = solve_equilibrium(model, lat, cfg1);
        double worst = sup_diff(sol0.phi, sol1.phi);
        for (int i = 0; i < 2; ++i) worst = std::max(worst, sup_diff(sol0.Y[i], sol1.Y[i]));
        CHECK(worst <= 10 * cfg.tol);
    }
    SUBCASE("price shift breaks clearing by the predicted amount") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.0, 0.3, 0.0, 0.4, 0.0};
        auto model = lq_model(lq, 2, 1.0, 0.0);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        auto sol = solve_equilibrium(model, lat);
        for (auto& s : sol.phi.steps)
            for (auto& v : s) v += 1.0;
        const auto res = clearing_residual(sol, model, lat);
        // sum alpha_hat = -Lambda^{-1} * N * 1 at every node.
        for (const auto& s : res.steps)
            for (double v : s) CHECK(v == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("non-convergence carries the residual history") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.1, 0.4, 0.0};
        auto model = lq_model(lq, 2, 1.0, 0.3);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        SolverConfig cfg;
        cfg.max_iters = 1;
        try {
            solve_equilibrium(model, lat, cfg);
            FAIL("expected NonConvergenceError");
        } catch (const NonConvergenceError& e) {
            CHECK_FALSE(e.residual_history.empty());
        }
    }
    SUBCASE("assumption gate rejects invalid models unless overridden") {
        auto model = zero_model(2);  // gamma = 0 fails compatibility
        auto lat = build_lattice(1, 2, 1, 1, 1.0);
        CHECK_THROWS_AS(solve_equilibrium(model, lat), AssumptionError);
    }
    SUBCASE("auxiliary inputs: constant drift input integrates, eta shifts Y") {
        LQParams lq;
        lq.gamma_f = lq.gamma_g = lq.gamma_l = 0.0;  // flow decoupled from the price
        lq.m0 = 0.0;
        auto model = lq.to_model(1, 1, 1, 1, 1.0, 0.0);
        auto lat = build_lattice(2, 1, 1, 1, 1.0);
        SolverConfig cfg;
        cfg.skip_assumption_check = true;
        cfg.drift_input.assign(1, AdaptedProcess::constant(lat, std::vector<double>{0.4}));
        cfg.terminal_input.assign(1, std::vector<double>(lat.nodes_at(2), 0.25));
        auto sol = solve_equilibrium(model, lat, cfg);
        for (int k = 0; k <= 2; ++k)
            for (std::uint64_t p = 0; p < lat.nodes_at(k); ++p)
                CHECK(sol.X[0].steps[k][p] == doctest::Approx(0.4 * k * 0.5).epsilon(1e-12));
        // Zero driver, so Y is the martingale closure of eta and phi = -Y.
        for (const auto& s : sol.Y[0].steps)
            for (double v : s) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
        for (const auto& s : sol.phi.steps)
            for (double v : s) CHECK(v == doctest::Approx(-0.25).epsilon(1e-12));
    }
}

TEST_CASE("newton oracle") {
    SUBCASE("zero model accepted at iteration zero") {
        auto model = zero_model(2);
        auto lat = build_lattice(1, 2, 1, 1, 1.0);
        auto sol = solve_global_newton(model, lat);
        CHECK(sol.diagnostics.iterations == 0);
        CHECK(sol.diagnostics.final_residual <= 1e-10);
        CHECK(sup_abs(sol.phi) == 0.0);
    }
    SUBCASE("LQ homogeneous N=2 M=1 agrees with the Picard solver") {
        LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.2, 0.5, 0.0};
        auto model = lq_model(lq, 2, 1.0, 0.5);
        auto lat = build_lattice(1, 2, 1, 1, 1.0);
        auto picard = solve_equilibrium(model, lat);
        auto newton = solve_global_newton(model, lat);
        double worst = sup_diff(picard.phi, newton.phi);
        for (int i = 0; i < 2; ++i) {
            worst = std::max(worst, sup_diff(picard.X[i], newton.X[i]));
            worst = std::max(worst, sup_diff(picard.Y[i], newton.Y[i]));
        }
        CHECK(worst <= 1e-9);
    }
    SUBCASE("perturbed-LQ N=2 M=2 cross-solver agreement within 1e-8") {
        LQParams lq{1.0, 1.2, 1.0, 1.0, 0.2, 0.3, 0.2, 0.4, 0.0};
        auto model = lq_model(lq, 2, 1.0, 0.4);
        auto agents = model.agents;
        for (auto& a : agents) {
            a.eps_f = 0.3;
            a.eps_g = 0.2;
            a.kappa_l = 0.25;
            a.lip_L += 0.8;
        }
        model = make_market_model(1, 1, 1, 2, 1.0, 0.4, model.Lambda, agents, model.initial_law,
                                  model.exogenous);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        auto picard = solve_equilibrium(model, lat);
        auto newton = solve_global_newton(model, lat);
        double worst = sup_diff(picard.phi, newton.phi);
        for (int i = 0; i < 2; ++i) {
            worst = std::max(worst, sup_diff(picard.X[i], newton.X[i]));
            worst = std::max(worst, sup_diff(picard.Y[i], newton.Y[i]));
        }
        CHECK(worst <= 1e-8);
        CHECK(newton.diagnostics.final_residual <= 1e-10);
    }
    SUBCASE("size cap raises a capacity error") {
        LQParams lq;
        auto model = lq_model(lq, 2, 1.0, 0.0);
        auto lat = build_lattice(2, 2, 1, 1, 1.0);
        SolverConfig cfg;
        cfg.newton_cap = 10;
        CHECK_THROWS_AS(solve_global_newton(model, lat, cfg), CapacityError);
    }
}

TEST_CASE("optimality of the solver's control") {
    LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.2, 0.4, 0.0};
    const double delta = 0.4;
    auto model = lq_model(lq, 2, 1.0, delta);
    auto lat = build_lattice(2, 2, 1, 1, 1.0);
    auto sol = solve_equilibrium(model, lat);
    const LatticeData data = materialize_exogenous(model, lat);
    Rng rng(77);
    for (int agent = 0; agent < 2; ++agent) {
        auto alpha = control_from(model, lat, sol.Y[agent], sol.phi);
        const double j0 = evaluate_cost(model, lat, agent, alpha, sol.phi, data);
        for (int rep = 0; rep < 50; ++rep) {
            auto beta = AdaptedProcess::zeros(lat, 1);
            for (int k = 0; k < lat.steps; ++k)
                for (auto& v : beta.steps[k]) v = rng.next_uniform(-1.0, 1.0);
            for (double eps : {0.1, -0.1, 0.01, -0.01}) {
                auto pert = alpha;
                for (int k = 0; k < lat.steps; ++k)
                    for (std::size_t i = 0; i < pert.steps[k].size(); ++i)
                        pert.steps[k][i] += eps * beta.steps[k][i];
                const double j = evaluate_cost(model, lat, agent, pert, sol.phi, data);
                CHECK(j - j0 >= -1e-12);
            }
        }
    }
}

TEST_CASE("stability estimate behaves quadratically") {
    LQParams base{1.0, 1.0, 1.0, 1.0, 0.2, 0.3, 0.2, 0.4, 0.0};
    auto base_model = lq_model(base, 2, 1.0, 0.4);
    auto lat = build_lattice(2, 2, 1, 1, 1.0);
    auto base_sol = solve_equilibrium(base_model, lat);

    auto solve_shifted = [&](double h) {
        LQParams p = base;
        p.l0 += h;
        auto m = lq_model(p, 2, 1.0, 0.4);
        return std::pair{m, solve_equilibrium(m, lat)};
    };
    const auto [m1, s1] = solve_shifted(0.2);
    const auto [m2, s2] = solve_shifted(0.1);
    const auto c1 = stability_bound_check(base_sol, s1, base_model, m1, lat);
    const auto c2 = stability_bound_check(base_sol, s2, base_model, m2, lat);
    CHECK(c1.ratio > 0.0);
    // l0 enters linearly, so the ratio is h-invariant.
    CHECK(std::abs(c1.ratio - c2.ratio) <= 0.10 * c1.ratio);
    // Halving the perturbation shrinks the LHS by at least 3x.
    CHECK(c1.lhs / c2.lhs >= 3.0);
    CHECK(c1.rhs / c2.rhs == doctest::Approx(4.0).epsilon(1e-9));
    // Identical models give an all-zero check.
    const auto c0 = stability_bound_check(base_sol, base_sol, base_model, base_model, lat);
    CHECK(c0.lhs == 0.0);
    CHECK(c0.rhs == 0.0);
    CHECK(c0.ratio == 0.0);
}
