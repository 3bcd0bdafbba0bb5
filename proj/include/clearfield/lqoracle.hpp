#pragma once

#include <cstdint>
#include <vector>

#include "clearfield/model.hpp"

namespace clearfield {

// Scalar Riccati equations of the linear-quadratic specialization, both
// solved backward from T:
//   mean:      P' = gamma_l P^2 - gamma_f,   P(T) = gamma_g / (1 - delta)
//   deviation: p' = p^2 / lambda - gamma_f,  p(T) = gamma_g
// The mean loading applies to the agent-average state, the deviation loading
// to X^i minus the average. With l0 != 0 the mean value carries an affine
// offset q solving q' = gamma_l P q - P l0, q(T) = 0.
enum class RiccatiKind { Mean, Deviation };

double riccati_closed_form(const LQParams& params, double delta, double T, RiccatiKind kind,
                           double t);

// Classical RK4 integration backward from the terminal value; values on the
// uniform grid t_j = j T / steps, j = 0..steps.
std::vector<double> riccati_rk4(const LQParams& params, double delta, double T, RiccatiKind kind,
                                int steps);

// Affine offset q(t) by RK4 on the same grid (closed-form P inside).
std::vector<double> riccati_offset_rk4(const LQParams& params, double delta, double T, int steps);

// Backward recursions mirroring the lattice solver's evaluation points
// exactly; with A = P_{k+1} + gamma_f dt,
//   P_k = A / (1 + gamma_l A dt),        q_k = (q_{k+1} + A l0 dt) / (1 + gamma_l A dt),
// and with a = p_{k+1} + gamma_f dt,  p_k = a / (1 + a dt / lambda).
// On LQ instances Y^i_k = p_k (X^i_k - Xbar_k) + P_k Xbar_k + q_k reproduces
// the lattice equilibrium node-wise.
struct RiccatiSolution {
    double dt = 0.0;
    std::vector<double> t, P, p, q;
    double k_mean = 0.0, c_mean = 0.0;  // sqrt(gamma_f/gamma_l), sqrt(gamma_f gamma_l)
    double k_dev = 0.0, c_dev = 0.0;    // sqrt(gamma_f lambda), sqrt(gamma_f/lambda)
};
RiccatiSolution discrete_riccati(const LQParams& params, double delta, double T, int M);

// Predicted E|phi^Ho_t - phi^MFG_t|^2 = P(t)^2 v(t) where v solves
//   v' = -2 gamma_l P(t) v + n sigma^2 / N,   v(0) = n s0^2 / N.
// v_ode/gap2_ode use the continuous closed-form P; v_disc/gap2_disc use the
// discrete recursion that is exact in distribution for the Euler simulator.
struct GapVariancePrediction {
    int n = 1;
    std::int64_t N = 1;
    std::vector<double> t, v_ode, gap2_ode, v_disc, gap2_disc;
};
GapVariancePrediction gap_variance(const LQParams& params, double delta, double T, int n,
                                   std::int64_t N, int M_sim);

// Euler path ensemble of the aggregated LQ dynamics: Xbar carries the
// averaged idiosyncratic noise (scale sigma/sqrt(N)), xbar only the common
// noise (same W^0 draw), phi^Ho = -(P Xbar + q), phi^MFG = -(P xbar + q).
struct LqEnsemble {
    int n = 1;
    int M = 0;
    std::int64_t paths = 0;
    std::vector<double> t;
    // layout: value[(path*(M+1) + step)*n + coord]
    std::vector<double> phi_ho, phi_mfg, xbar_agents, xbar_limit;
};
LqEnsemble simulate_lq(const LQParams& params, double delta, double T, int n, std::int64_t N,
                       int M_sim, std::int64_t paths, std::uint64_t seed,
                       InitialLaw::Family family = InitialLaw::Family::Gaussian);

// Streaming statistics over the same dynamics (no path storage).
struct LqGapStats {
    std::vector<double> t;
    std::vector<double> gap2_mean, gap2_se;
    std::vector<double> phi_ho_mean, phi_ho_mean_se, phi_ho_var, phi_ho_var_se;
};
LqGapStats lq_gap_stats(const LQParams& params, double delta, double T, int n, std::int64_t N,
                        int M_sim, std::int64_t paths, std::uint64_t seed,
                        InitialLaw::Family family = InitialLaw::Family::Gaussian);

// Per-step E[W2(empirical of N conditionally-iid MKV adjoints, conditional
// Gaussian law)^2] with Monte Carlo standard errors, plus empirical q = 8
// moment witnesses for the rate lemma's hypothesis. n = 1 only.
struct LqW2Stats {
    std::vector<double> t;
    std::vector<double> w2sq_mean, w2sq_se;
    double sup_mean = 0.0, sup_se = 0.0;
    double gamma_moment = 0.0;    // sup_t (E|Ybar_t|^8)^(1/8)
    double gamma_g_moment = 0.0;  // (E|dgdx(Xbar_T)|^8)^(1/8)
};
LqW2Stats lq_w2_sweep(const LQParams& params, double delta, double T, std::int64_t N, int M_sim,
                      std::int64_t paths, std::uint64_t seed,
                      InitialLaw::Family family = InitialLaw::Family::Gaussian);

}  // namespace clearfield
