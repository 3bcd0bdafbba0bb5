#pragma once

#include <string>
#include <vector>

#include "clearfield/fbsde.hpp"
#include "clearfield/lattice.hpp"
#include "clearfield/model.hpp"

namespace clearfield {

// Solution of the conditional McKean-Vlasov system on a representative-agent
// lattice (one idiosyncratic block). m is the common-noise conditional mean
// of the adjoint, and phi_mfg = -m is the mean-field price.
struct MkvSolution {
    AdaptedProcess X, Y;        // representative agent, full-adapted
    AdaptedProcess m;           // common-tagged, E[Y | common filtration]
    AdaptedProcess phi_mfg;     // common-tagged, -m
    ZProcess Z0;
    ZProcess Zii;               // own idiosyncratic block
    SolveDiagnostics diagnostics;
};

// Damped fixed point on m: given m, solve the representative decoupled
// system with price -m and conditional terminal condition
//   Y_M = delta/(1-delta) E[dgdx(X_M)|common] + dgdx(X_M),
// then update m <- E[Y|common]. Requires a homogeneous model and a
// single-agent lattice with matching (M, d0, d).
MkvSolution solve_mkv(const MarketModel& model, const ScenarioLattice& lat_rep,
                      const SolverConfig& cfg = {});

// Extends a common-tagged process to every node of an N-agent lattice with
// the same (M, d0): the prefix index spaces coincide.
AdaptedProcess extend_common_to_lattice(const ScenarioLattice& lat_to,
                                        const AdaptedProcess& common);

// Pulls a full process on the representative lattice back through agent i's
// coordinate projection of an N-agent lattice.
AdaptedProcess replicate_to_agent(const ScenarioLattice& lat_N, const ScenarioLattice& lat_rep,
                                  const AdaptedProcess& rep_full, int agent);

struct MfgClearingResult {
    AdaptedProcess residual;          // per node (1/N)|sum_i alpha_hat^i|
    std::vector<double> l2_per_step;  // sqrt(E[residual^2]) per step
    double l2_aggregate = 0.0;        // sqrt(sum_k E[residual_k^2] dt)
};

// Plugs phi^MFG into every agent's decoupled best response on the N-agent
// lattice and measures the per-capita clearing failure.
MfgClearingResult mfg_clearing_residual(const MkvSolution& mkv, const MarketModel& model,
                                        const ScenarioLattice& lat_N,
                                        const SolverConfig& cfg = {});

// Lattice analogues of the convergence-rate distances: per step,
// E[W2(empirical measure of the N replicated MKV adjoints, conditional law
// of the representative adjoint)^2], plus the terminal dgdx variant. n = 1.
struct MkvW2Terms {
    std::vector<double> w2sq_per_step;
    double sup = 0.0;
    double terminal_g = 0.0;
};
MkvW2Terms mkv_w2_terms(const MkvSolution& mkv, const MarketModel& model,
                        const ScenarioLattice& lat_N, const ScenarioLattice& lat_rep);

// CSV export of phi^MFG keyed by common-noise prefix.
std::vector<std::string> export_mkv(const MkvSolution& mkv, const ScenarioLattice& lat_rep,
                                    const std::string& out_dir, const std::string& prefix);

}  // namespace clearfield
