#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "clearfield/metrics.hpp"
#include "clearfield/model.hpp"
#include "clearfield/serialize.hpp"

namespace clearfield {

// Parsed experiment configuration (one JSON document; unknown keys rejected;
// the seed is mandatory for randomized experiments).
struct ExperimentConfig {
    std::string kind;
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    json raw;  // canonical document, hashed into the manifest

    std::optional<json> model_json;
    std::string model_file;
    int lattice_steps = 2;
    SolverConfig solver;

    // validate
    int samples = 10000;

    // linear-quadratic experiment family
    LQParams lq{1.0, 1.0, 1.0, 1.0, 0.2, 0.5, 0.0, 0.5, 0.3};
    double T = 1.0;
    double delta = 0.5;

    // lq-oracle
    int oracle_steps = 64;
    int oracle_paths = 16;
    std::int64_t oracle_N = 100;

    // convergence
    std::vector<std::int64_t> w2_n_grid{100, 1000, 10000, 100000};
    std::int64_t w2_paths = 10000;
    int w2_m_sim = 8;
    std::vector<std::int64_t> gap_n_grid{10, 100, 1000, 10000};
    std::int64_t gap_paths = 100000;
    int gap_m_sim = 1000;
    std::int64_t gap_check_n = 100;
    int check_times = 5;

    // stability
    std::vector<double> h_grid{0.2, 0.1, 0.05};
    int stability_agents = 2;

    // clearing
    std::vector<std::int64_t> clearing_n_grid{2, 4, 8, 16};
};

ExperimentConfig parse_experiment_config(const json& j, const std::string& kind_from_cli);
ExperimentConfig load_experiment_config(const std::string& path, const std::string& kind_from_cli);

MarketModel resolve_model(const ExperimentConfig& cfg);

struct RunResult {
    std::vector<std::string> artifacts;  // data files (byte-stable across reruns)
    std::string manifest_path;
    json summary;
    bool ok = true;
};

RunResult run_experiment(const ExperimentConfig& cfg);

// Individual runners (used by the CLI dispatcher and the acceptance suite).
RunResult run_validate(const ExperimentConfig& cfg);
RunResult run_solve_lattice(const ExperimentConfig& cfg);
RunResult run_solve_newton(const ExperimentConfig& cfg);
RunResult run_solve_mkv(const ExperimentConfig& cfg);
RunResult run_lq_oracle(const ExperimentConfig& cfg);
RunResult run_convergence(const ExperimentConfig& cfg);
RunResult run_stability(const ExperimentConfig& cfg);
RunResult run_clearing(const ExperimentConfig& cfg);

// Sum over agents of E|dxi|^2 + E|Gbar|^2 + int(E|Fbar|^2 + E|Bbar|^2 +
// |sbar0|^2 + |sbar|^2) dt — the right side of the stability estimate.
double difference_rhs(const DifferenceTerms& diff, const ScenarioLattice& lat);

}  // namespace clearfield
