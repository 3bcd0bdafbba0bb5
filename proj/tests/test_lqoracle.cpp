#include "doctest.h"

#include <cmath>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/lqoracle.hpp"
#include "clearfield/metrics.hpp"
#include "clearfield/rng.hpp"

using namespace clearfield;

TEST_CASE("riccati closed form") {
    LQParams lq{1.0, 1.0, 2.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0};
    const double delta = 0.5, T = 1.0;
    SUBCASE("terminal values are exact") {
        CHECK(riccati_closed_form(lq, delta, T, RiccatiKind::Mean, T) ==
              doctest::Approx(lq.gamma_g / (1 - delta)).epsilon(1e-15));
        CHECK(riccati_closed_form(lq, delta, T, RiccatiKind::Deviation, T) ==
              doctest::Approx(lq.gamma_g).epsilon(1e-15));
    }
    SUBCASE("equilibrium point stays put") {
        // P_T = k makes P constant.
        LQParams p = lq;
        const double k = std::sqrt(p.gamma_f / p.gamma_l);
        p.gamma_g = k * (1 - 0.25);
        for (double t : {0.0, 0.3, 0.9})
            CHECK(riccati_closed_form(p, 0.25, T, RiccatiKind::Mean, t) ==
                  doctest::Approx(k).epsilon(1e-14));
    }
    SUBCASE("generic value matches RK4 at 1000 steps") {
        const auto traj = riccati_rk4(lq, delta, T, RiccatiKind::Mean, 1000);
        CHECK(std::abs(riccati_closed_form(lq, delta, T, RiccatiKind::Mean, 0.0) - traj[0]) <
              1e-10);
        const auto dev = riccati_rk4(lq, delta, T, RiccatiKind::Deviation, 1000);
        CHECK(std::abs(riccati_closed_form(lq, delta, T, RiccatiKind::Deviation, 0.0) - dev[0]) <
              1e-10);
    }
    SUBCASE("degenerate parameters are rejected") {
        LQParams bad = lq;
        bad.gamma_l = 0.0;
        CHECK_THROWS_AS(riccati_closed_form(bad, delta, T, RiccatiKind::Mean, 0.0),
                        DegenerateParameterError);
        LQParams bad2 = lq;
        bad2.lambda = 0.0;
        CHECK_THROWS_AS(riccati_closed_form(bad2, delta, T, RiccatiKind::Deviation, 0.0),
                        DegenerateParameterError);
    }
    SUBCASE("ODE residual of the closed form is tiny on a 1000-point grid") {
        // Independent route: re-derive the hyperbolic solution and its exact
        // derivative here, compare the value against the library and check
        // the ODE residual with the symbolic derivative.
        Rng rng(20);
        for (int rep = 0; rep < 20; ++rep) {
            LQParams p;
            p.gamma_f = rng.next_uniform(0.2, 3.0);
            p.gamma_g = rng.next_uniform(0.2, 3.0);
            p.gamma_l = rng.next_uniform(0.2, 3.0);
            p.lambda = rng.next_uniform(0.2, 3.0);
            const double d = rng.next_uniform(0.0, 0.8);
            const double PT = p.gamma_g / (1 - d);
            const double k = std::sqrt(p.gamma_f / p.gamma_l);
            const double c = std::sqrt(p.gamma_f * p.gamma_l);
            const double bound = std::max(PT, k) * (1 + 1e-12);
            for (int j = 0; j <= 1000; ++j) {
                const double t = j / 1000.0;
                const double tau = 1.0 - t;
                const double ch = std::cosh(c * tau), sh = std::sinh(c * tau);
                const double num = PT * ch + k * sh, den = k * ch + PT * sh;
                const double P = k * num / den;
                const double dnum = c * (PT * sh + k * ch), dden = c * (k * sh + PT * ch);
                const double dPdtau = k * (dnum * den - num * dden) / (den * den);
                CHECK(riccati_closed_form(p, d, 1.0, RiccatiKind::Mean, t) ==
                      doctest::Approx(P).epsilon(1e-13));
                // dP/dt = -dP/dtau must equal gamma_l P^2 - gamma_f.
                const double resid = -dPdtau - (p.gamma_l * P * P - p.gamma_f);
                CHECK(std::abs(resid) < 1e-10 * std::max(1.0, PT * PT));
                CHECK(std::abs(P) <= bound);
            }
        }
    }
}

TEST_CASE("riccati_rk4") {
    SUBCASE("zero curvature, zero terminal stays zero") {
        LQParams p;
        p.gamma_f = 0.0;
        p.gamma_g = 0.0;
        const auto traj = riccati_rk4(p, 0.0, 1.0, RiccatiKind::Mean, 64);
        for (double v : traj) CHECK(v == 0.0);
    }
    SUBCASE("step halving shows order >= 3.8") {
        LQParams p{1.3, 0.9, 1.7, 1.0, 0, 0, 0, 0, 0};
        const double exact = riccati_closed_form(p, 0.4, 1.0, RiccatiKind::Mean, 0.0);
        const double e1 = std::abs(riccati_rk4(p, 0.4, 1.0, RiccatiKind::Mean, 8)[0] - exact);
        const double e2 = std::abs(riccati_rk4(p, 0.4, 1.0, RiccatiKind::Mean, 16)[0] - exact);
        const double order = std::log2(e1 / e2);
        CHECK(order >= 3.8);
    }
}

TEST_CASE("discrete riccati") {
    LQParams p{1.0, 1.0, 1.0, 1.0, 0, 0, 0.3, 0, 0};
    SUBCASE("dt -> 0 limit matches the closed form") {
        const double exact = riccati_closed_form(p, 0.5, 1.0, RiccatiKind::Mean, 0.0);
        const double e1 = std::abs(discrete_riccati(p, 0.5, 1.0, 64).P[0] - exact);
        const double e2 = std::abs(discrete_riccati(p, 0.5, 1.0, 128).P[0] - exact);
        CHECK(e2 < e1);
        CHECK(e1 < 0.05);
        // Offset against its RK4 integration.
        const auto q_rk4 = riccati_offset_rk4(p, 0.5, 1.0, 512);
        const auto disc = discrete_riccati(p, 0.5, 1.0, 512);
        CHECK(std::abs(disc.q[0] - q_rk4[0]) < 1e-2 * std::max(1.0, std::abs(q_rk4[0])));
    }
    SUBCASE("single-step recursion agrees with the hand-expanded update") {
        // One step: Ybar_0 = (P_1 + gf dt) E[Xbar_1] + q_1 with
        // E[Xbar_1] = Xbar_0 + (-gl Ybar_0 + l0) dt. Solving for Ybar_0 at two
        // states recovers the slope/intercept.
        const int M = 1;
        const auto d = discrete_riccati(p, 0.5, 1.0, M);
        const double dt = 1.0;
        const double A = d.P[1] + p.gamma_f * dt;
        auto y0 = [&](double x0) {
            return (A * (x0 + p.l0 * dt) + d.q[1]) / (1.0 + A * p.gamma_l * dt);
        };
        const double slope = y0(2.0) - y0(1.0);
        const double intercept = y0(1.0) - slope;
        CHECK(d.P[0] == doctest::Approx(slope).epsilon(1e-14));
        CHECK(d.q[0] == doctest::Approx(intercept).epsilon(1e-12));
    }
    SUBCASE("zero curvature collapses to zero") {
        LQParams z;
        z.gamma_f = z.gamma_g = 0.0;
        z.l0 = 0.0;
        const auto d = discrete_riccati(z, 0.3, 1.0, 8);
        for (int k = 0; k <= 8; ++k) {
            CHECK(d.P[k] == 0.0);
            CHECK(d.p[k] == 0.0);
            CHECK(d.q[k] == 0.0);
        }
    }
}

TEST_CASE("gap variance prediction") {
    LQParams p{1.0, 1.0, 1.0, 1.0, 0.2, 0.4, 0.0, 0.5, 0.3};
    const auto g = gap_variance(p, 0.5, 1.0, 1, 100, 64);
    SUBCASE("nonnegative and consistent at t=0") {
        CHECK(g.v_ode[0] == doctest::Approx(p.s0 * p.s0 / 100).epsilon(1e-14));
        for (double v : g.v_ode) CHECK(v >= 0.0);
        for (double v : g.v_disc) CHECK(v >= 0.0);
    }
    SUBCASE("discrete recursion converges to the ODE") {
        const auto fine = gap_variance(p, 0.5, 1.0, 1, 100, 512);
        const double e64 = std::abs(g.v_disc.back() - g.v_ode.back());
        const double e512 = std::abs(fine.v_disc.back() - fine.v_ode.back());
        CHECK(e512 < e64 / 4);
    }
}

TEST_CASE("simulate_lq") {
    LQParams p{1.0, 1.0, 1.0, 1.0, 0.2, 0.0, 0.1, 0.5, 0.0};
    SUBCASE("no idiosyncratic randomness makes the prices equal pathwise") {
        const auto ens = simulate_lq(p, 0.5, 1.0, 1, 4, 4, 50, 99);
        for (std::size_t i = 0; i < ens.phi_ho.size(); ++i)
            CHECK(ens.phi_ho[i] == ens.phi_mfg[i]);
    }
    SUBCASE("two-point initial law unsupported") {
        CHECK_THROWS_AS(simulate_lq(p, 0.5, 1.0, 1, 4, 4, 10, 1, InitialLaw::Family::TwoPoint),
                        UnsupportedFamilyError);
    }
    SUBCASE("seeded runs are identical and thread-count invariant") {
        LQParams q{1.0, 1.0, 1.0, 1.0, 0.2, 0.4, 0.1, 0.5, 0.3};
        const auto a = simulate_lq(q, 0.5, 1.0, 1, 8, 4, 64, 7);
        const auto b = simulate_lq(q, 0.5, 1.0, 1, 8, 4, 64, 7);
        CHECK(a.phi_ho == b.phi_ho);
        exec::set_mode(exec::Mode::Serial);
        const auto c = simulate_lq(q, 0.5, 1.0, 1, 8, 4, 64, 7);
        exec::set_mode(exec::Mode::Parallel);
        CHECK(a.phi_ho == c.phi_ho);
        CHECK(a.xbar_limit == c.xbar_limit);
    }
}

TEST_CASE("lq_gap_stats matches the exact discrete prediction") {
    LQParams p{1.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.0, 0.5, 0.4};
    const int Msim = 16;
    const std::int64_t N = 50, paths = 40000;
    const auto stats = lq_gap_stats(p, 0.5, 1.0, 1, N, Msim, paths, 2024);
    const auto pred = gap_variance(p, 0.5, 1.0, 1, N, Msim);
    for (int k = 0; k <= Msim; k += 4) {
        const double diff = std::abs(stats.gap2_mean[k] - pred.gap2_disc[k]);
        CHECK(diff <= 3.5 * stats.gap2_se[k] + 1e-14);
    }
}

TEST_CASE("lq_w2_sweep basics") {
    LQParams p{1.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.0, 0.0, 0.4};
    const auto s1 = lq_w2_sweep(p, 0.5, 1.0, 64, 4, 200, 5);
    const auto s2 = lq_w2_sweep(p, 0.5, 1.0, 64, 4, 200, 5);
    CHECK(s1.w2sq_mean == s2.w2sq_mean);
    CHECK(s1.sup_mean > 0.0);
    CHECK(s1.gamma_moment > 0.0);
    exec::set_mode(exec::Mode::Serial);
    const auto s3 = lq_w2_sweep(p, 0.5, 1.0, 64, 4, 200, 5);
    exec::set_mode(exec::Mode::Parallel);
    CHECK(s1.w2sq_mean == s3.w2sq_mean);
}
