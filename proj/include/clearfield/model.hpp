#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "clearfield/lattice.hpp"

namespace clearfield {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Law of the initial position xi^i, common across agents.
struct InitialLaw {
    enum class Family { Gaussian, TwoPoint };
    Family family = Family::Gaussian;
    std::vector<double> mean;  // m0 in R^n
    double scale = 0.0;        // s0 >= 0
};

// Exogenous shock processes: constant or affine in the first coordinate of
// the driving Brownian motion (W^0 for c0, W^i for c).
struct ExoProcessSpec {
    std::vector<double> base;
    double w_coeff = 0.0;
};

struct ExogenousSpec {
    ExoProcessSpec c0;
    ExoProcessSpec c;
};

// Coefficient bundle, closed under two families:
//   - linear-quadratic: grad_x fbar = gamma_f*x, grad_x gbar = gamma_g*x,
//     l(t,v,c0,c) = gamma_l*v + l0 + c0 + c, constant vols;
//   - LQ plus smooth perturbation: adds eps*logcosh per component to fbar
//     and/or gbar, and kappa_l*tanh to l (monotone in the price slot).
// Constants are stored as declared; validate_assumptions measures whether
// they actually hold, so "bad" bundles are constructible on purpose.
struct CoefficientBundle {
    double gamma_f = 0.0;
    double gamma_g = 0.0;
    double gamma_l = 0.0;
    double l0 = 0.0;
    double sigma0 = 0.0;
    double sigma = 0.0;
    double eps_f = 0.0;
    double eps_g = 0.0;
    double kappa_l = 0.0;
    // Declared bounds: growth/Lipschitz L, and the price-Lipschitz constant
    // of grad_x fbar (the L_phi entering the gamma-compatibility inequality;
    // zero for both built-in families).
    double lip_L = 0.0;
    double lip_Lphi = 0.0;

    // grad_x fbar(t, x, phi, c0, c); component-wise.
    void dfdx(double t, std::span<const double> x, std::span<const double> phi,
              std::span<const double> c0, std::span<const double> c, double* out) const;
    // grad_x gbar(x, c0, c).
    void dgdx(std::span<const double> x, std::span<const double> c0, std::span<const double> c,
              double* out) const;
    // Order flow l(t, v, c0, c); v is the price slot.
    void flow(double t, std::span<const double> v, std::span<const double> c0,
              std::span<const double> c, double* out) const;
    double fbar(double t, std::span<const double> x, std::span<const double> phi,
                std::span<const double> c0, std::span<const double> c) const;
    double gbar(std::span<const double> x, std::span<const double> c0,
                std::span<const double> c) const;
    // Constant volatility loadings: entry (a, b) of the n x dcols matrix.
    double vol0_entry(int a, int b) const { return a == b ? sigma0 : 0.0; }
    double vol_entry(int a, int b) const { return a == b ? sigma : 0.0; }

    // max Lipschitz slope of l in the price slot (used by reports).
    double l_phi_lip() const { return gamma_l + kappa_l; }

    bool operator==(const CoefficientBundle&) const = default;
};

struct MarketModel {
    int n = 1;
    int d0 = 0;
    int d = 0;
    int N = 1;
    double T = 1.0;
    double delta = 0.0;
    Mat Lambda;
    std::vector<CoefficientBundle> agents;
    InitialLaw initial_law;
    ExogenousSpec exogenous;

    // Derived at construction.
    Mat Lambda_inv;
    double lambda_min = 0.0;
    double lambda_max = 0.0;

    bool homogeneous() const;
    // gamma of Assumption 3.2(iii): min over agents of
    // (gamma_f - L_phi^2/(4 gamma_l)) ^ gamma_g; negative values mean the
    // compatibility inequality fails.
    double gamma_compat() const;
};

// Validates invariants (Lambda SPD symmetric, 0 <= delta < 1, dims) and
// precomputes Lambda_inv and the eigenvalue bounds. Throws InvalidModelError.
MarketModel make_market_model(int n, int d0, int d, int N, double T, double delta, Mat Lambda,
                              std::vector<CoefficientBundle> agents, InitialLaw initial_law,
                              ExogenousSpec exogenous);

// Scalar linear-quadratic parameter set; Lambda = lambda * I.
struct LQParams {
    double gamma_f = 1.0;
    double gamma_g = 1.0;
    double gamma_l = 1.0;
    double lambda = 1.0;
    double sigma0 = 0.0;
    double sigma = 0.0;
    double l0 = 0.0;
    double m0 = 0.0;
    double s0 = 0.0;

    CoefficientBundle to_bundle() const;
    MarketModel to_model(int n, int d0, int d, int N, double T, double delta) const;
};

// Exogenous and initial data materialized on a lattice for one solve.
struct LatticeData {
    AdaptedProcess c0;                    // common-tagged, dim n
    std::vector<AdaptedProcess> c;        // per agent, full, dim n
    std::vector<double> x0;               // deterministic lattice initial state (= m0)
};
LatticeData materialize_exogenous(const MarketModel& model, const ScenarioLattice& lat);

// alpha_hat(y, phi) = -Lambda^{-1} (y + phi). Exact linear algebra.
void optimal_rate(const MarketModel& model, std::span<const double> y,
                  std::span<const double> phi, double* out);
Vec optimal_rate(const MarketModel& model, const Vec& y, const Vec& phi);

// Y_T^i = delta/(1-delta) * mean_j g_j + g_i, the explicit solution of the
// implicit terminal relation Y_T^i = delta * mean_j Y_T^j + g_i.
std::vector<Vec> terminal_map(const std::vector<Vec>& g_values, double delta);

// Expected cost J^i of an adapted control under an adapted price, computed
// exactly on the lattice. The control lives on steps 0..M-1. The state-cost
// integral uses the right-endpoint rule (fbar sampled at steps 1..M), the
// control cost the left-endpoint rule; the solver's optimal rate is the exact
// minimizer of this discrete functional.
double evaluate_cost(const MarketModel& model, const ScenarioLattice& lat, int agent,
                     const AdaptedProcess& alpha, const AdaptedProcess& price);
double evaluate_cost(const MarketModel& model, const ScenarioLattice& lat, int agent,
                     const AdaptedProcess& alpha, const AdaptedProcess& price,
                     const LatticeData& data);

struct AssumptionCheck {
    std::string name;
    bool pass = false;
    double margin = 0.0;  // minimal observed slack; negative forces fail
    std::string detail;
};

struct AssumptionReport {
    std::vector<AssumptionCheck> checks;
    int samples = 0;
    std::uint64_t seed = 0;
    bool all_pass = false;

    const AssumptionCheck* find(const std::string& name) const;
};

struct ValidationOptions {
    double box_half_width = 5.0;  // sampling box [-w, w] per coordinate
    double tolerance = 1e-9;      // slack added before declaring failure
    int mean_tuple_size = 8;      // N used for the empirical-mean inequalities
};

// Samples random tuples and reports minimal margins for Assumptions 3.1,
// 3.2 and 4.1. Failures are reported, never thrown.
AssumptionReport validate_assumptions(const MarketModel& model, int samples, std::uint64_t seed,
                                      const ValidationOptions& opts = {});

}  // namespace clearfield
