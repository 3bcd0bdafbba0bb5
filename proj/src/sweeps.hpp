#pragma once

#include "clearfield/lattice.hpp"
#include "clearfield/model.hpp"

// Shared forward/backward lattice sweeps of the FBSDE solvers (internal).
namespace clearfield::detail {

// X_{k+1} = X_k + (rho*(alpha_hat(Y_k, phi_k) + l(t_k, phi_k, c)) + Ib_k) dt
//           + sigma^0 dW^0 + sigma dW^i.
void forward_sweep(const MarketModel& model, const ScenarioLattice& lat, int agent, double rho,
                   const AdaptedProcess& phi, const AdaptedProcess& Y, const AdaptedProcess* Ib,
                   const LatticeData& data, AdaptedProcess& X);

// Y_k = E[ Y_{k+1} + ((1-rho)*gamma*X_{k+1} + rho*dfdx(t_{k+1}, X_{k+1},
//          phi_{k+1}) + If_{k+1}) dt | F_k ];  Y.steps[M] holds the terminal.
void backward_sweep(const MarketModel& model, const ScenarioLattice& lat, int agent, double rho,
                    double gamma, const AdaptedProcess& phi, const AdaptedProcess& X,
                    const AdaptedProcess* If, const LatticeData& data, AdaptedProcess& Y);

}  // namespace clearfield::detail
