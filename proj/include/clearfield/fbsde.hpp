#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clearfield/lattice.hpp"
#include "clearfield/model.hpp"

namespace clearfield {

// Martingale-coefficient process: steps 0..M-1, per node an n x cols block.
struct ZProcess {
    int dim = 0;   // n
    int cols = 0;  // d0 or d
    std::vector<std::vector<double>> steps;  // steps[k]: nodes(k)*dim*cols

    bool empty() const { return steps.empty(); }
};

struct SolverConfig {
    double damping = 0.5;          // theta in (0, 1]
    double tol = 1e-10;            // sup-node max-agent |dY| (and |dphi|)
    int max_iters = 400;
    // Continuation schedule: strictly increasing, starts at 0, ends at 1.
    std::vector<double> continuation{0.0, 0.25, 0.5, 0.75, 1.0};
    bool newton_enabled = true;
    std::size_t newton_cap = 20000;
    bool store_cross_z = true;
    bool skip_assumption_check = false;

    // Auxiliary inputs of the continuation system (zero in the equilibrium
    // instance; settable for stability tests). Indexed per agent.
    std::vector<AdaptedProcess> drift_input;               // I^b
    std::vector<AdaptedProcess> driver_input;              // I^f
    std::vector<std::vector<double>> terminal_input;       // eta at the leaves
    const AdaptedProcess* phi_guess = nullptr;
};

void check_solver_config(const SolverConfig& cfg);

struct SolveDiagnostics {
    int iterations = 0;
    double final_residual = 0.0;
    std::vector<double> residual_history;
    // (rho level, iterations spent at that level)
    std::vector<std::pair<double, int>> continuation_path;
    bool cross_z_stored = true;
    std::string method;
};

struct DecoupledSolution {
    AdaptedProcess X, Y;
    ZProcess Z0;
    std::vector<ZProcess> Zij;  // one block per idiosyncratic noise
    SolveDiagnostics diagnostics;
};

struct EquilibriumSolution {
    std::vector<AdaptedProcess> X, Y;        // per agent
    std::vector<ZProcess> Z0;                // per agent
    std::vector<std::vector<ZProcess>> Zij;  // [agent][j]
    AdaptedProcess phi;
    SolveDiagnostics diagnostics;
};

// Price-taker solve: the decoupled adjoint system for one agent under a given
// full-adapted price. Forward Euler uses the previous sweep's Y in the
// optimal rate; the backward step takes the driver inside the conditional
// expectation at the right endpoint,
//   Y_k = E[ Y_{k+1} + dfdx(t_{k+1}, X_{k+1}, phi_{k+1}) dt | F_k ],
// with terminal Y_M = -delta*phi_M + dgdx(X_M). This pairing makes the rate
// -Lambda^{-1}(Y_k + phi_k) the exact minimizer of the discrete cost.
DecoupledSolution solve_decoupled(const MarketModel& model, const ScenarioLattice& lat, int agent,
                                  const AdaptedProcess& price, const SolverConfig& cfg = {});
DecoupledSolution solve_decoupled(const MarketModel& model, const ScenarioLattice& lat, int agent,
                                  const AdaptedProcess& price, const SolverConfig& cfg,
                                  const LatticeData& data);

// Damped Picard iteration with a continuation schedule for the N-coupled
// equilibrium system. The returned solution satisfies, to machine precision,
// phi = -(1/N) sum_i Y^i and the terminal-map relation at the leaves.
EquilibriumSolution solve_equilibrium(const MarketModel& model, const ScenarioLattice& lat,
                                      const SolverConfig& cfg = {});

// Independent oracle: stacks every node value of (X, Y) into one unknown
// vector, writes the discretized forward/backward/terminal relations as a
// residual and solves by damped Newton with a finite-difference Jacobian.
EquilibriumSolution solve_global_newton(const MarketModel& model, const ScenarioLattice& lat,
                                        const SolverConfig& cfg = {});

// Per-node |sum_i alpha_hat(Y^i, phi)| (Euclidean norm of the total rate).
AdaptedProcess clearing_residual(const EquilibriumSolution& sol, const MarketModel& model,
                                 const ScenarioLattice& lat);
double max_clearing_residual(const EquilibriumSolution& sol, const MarketModel& model,
                             const ScenarioLattice& lat);

// The solver's optimal control alpha_hat(Y_k, phi_k) on steps 0..M-1.
AdaptedProcess control_from(const MarketModel& model, const ScenarioLattice& lat,
                            const AdaptedProcess& Y, const AdaptedProcess& phi);

// CSV/JSON export: X, Y, Z0, phi as CSV files plus a diagnostics sidecar.
// Returns the list of files written.
std::vector<std::string> export_solution(const EquilibriumSolution& sol,
                                         const ScenarioLattice& lat, const std::string& out_dir,
                                         const std::string& prefix);

}  // namespace clearfield
