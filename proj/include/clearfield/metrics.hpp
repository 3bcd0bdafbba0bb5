#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "clearfield/fbsde.hpp"
#include "clearfield/lattice.hpp"
#include "clearfield/model.hpp"

namespace clearfield {

// Standard-normal helpers (PPND16 inverse CDF; accurate to ~1e-15).
double normal_pdf(double z);
double normal_cdf(double z);
double normal_ppf(double u);

// Weighted point cloud in R^n.
struct EmpiricalMeasure {
    int dim = 1;
    std::vector<double> points;   // row-major, size count*dim
    std::vector<double> weights;  // empty means uniform 1/count

    std::size_t count() const { return dim ? points.size() / dim : 0; }
    double weight(std::size_t i) const {
        return weights.empty() ? 1.0 / static_cast<double>(count()) : weights[i];
    }
    std::vector<double> mean() const;
    void validate() const;  // weights nonnegative, sum 1 within 1e-12
};

// Exact 1-D W2 between equal-size uniform samples (sorted pairing).
double w2_empirical_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b);

// Exact W2 between equal-size uniform clouds in any dimension via an optimal
// assignment (Jonker-Volgenant, O(N^3)). Size cap defaults to 2000.
double w2_empirical_assignment(const EmpiricalMeasure& a, const EmpiricalMeasure& b,
                               std::size_t size_cap = 2000);

// Exact W2 between two discrete 1-D laws with arbitrary weights (quantile
// coupling by a merge sweep). Atoms need not be sorted.
double w2_discrete_1d(std::span<const double> pts_a, std::span<const double> w_a,
                      std::span<const double> pts_b, std::span<const double> w_b);

// W2 between a 1-D empirical measure and a Gaussian(mean, sd). Integrates
// the squared quantile difference; the Gaussian segment integrals have
// closed forms, so the result is exact up to roundoff (well inside the 1e-8
// documented tolerance). sd = 0 degenerates to the distance to a point mass.
double w2_empirical_vs_gaussian_1d(const EmpiricalMeasure& a, double mean, double sd);

// Fast path used by the Monte Carlo sweeps: per-segment integrals of the
// standard-normal quantile for uniform weights, precomputed once per N.
struct GaussianSegmentTable {
    std::size_t n = 0;
    std::vector<double> quantile_int;  // I1_i = int_{(i-1)/N}^{i/N} Phi^{-1}(u) du

    explicit GaussianSegmentTable(std::size_t count);
};
// x must be sorted ascending. Returns W2 squared.
double w2sq_sorted_vs_gaussian(std::span<const double> sorted, double mean, double sd,
                               const GaussianSegmentTable& table);

// epsilon_N = N^{-2/max(n,4)} * (1 + log(N) * [n == 4]).
double epsilon_N(int n, std::int64_t N);

struct LoglogFit {
    double slope = 0.0;
    double intercept = 0.0;
    double residual = 0.0;  // RMS of the log-space fit residuals
};
LoglogFit fit_loglog_slope(std::span<const std::pair<double, double>> pairs);

// Difference terms of the stability estimate, evaluated on the base
// solution's trajectories: model A's coefficients with A's exogenous paths
// minus base model B's coefficients with B's paths.
struct DifferenceTerms {
    std::vector<double> dxi2;             // per agent |delta xi|^2
    std::vector<std::vector<double>> G2;  // per agent, per leaf |Gbar_i|^2
    std::vector<AdaptedProcess> F2, B2;   // per agent, scalar per node
    std::vector<double> S02, S2;          // per agent |sigma-bar|^2 (constant vols)
};
DifferenceTerms compute_difference_terms(const EquilibriumSolution& base,
                                         const MarketModel& base_model,
                                         const MarketModel& pert_model,
                                         const ScenarioLattice& lat);

struct StabilityCheck {
    double lhs = 0.0;
    double rhs = 0.0;
    double ratio = 0.0;  // lhs / rhs; 0 when both vanish
};
StabilityCheck stability_bound_check(const EquilibriumSolution& base,
                                     const EquilibriumSolution& perturbed,
                                     const DifferenceTerms& diff, const MarketModel& base_model,
                                     const ScenarioLattice& lat);
StabilityCheck stability_bound_check(const EquilibriumSolution& base,
                                     const EquilibriumSolution& perturbed,
                                     const MarketModel& base_model,
                                     const MarketModel& pert_model, const ScenarioLattice& lat);

}  // namespace clearfield
