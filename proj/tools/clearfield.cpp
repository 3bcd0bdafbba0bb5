#include <CLI11.hpp>

#include <cstdint>
#include <iostream>

#include "clearfield/errors.hpp"
#include "clearfield/exec.hpp"
#include "clearfield/experiments.hpp"

namespace {

const char* kSchemaHelp = R"(Config file schema (one JSON document; unknown keys are rejected):
{
  "experiment": "validate|solve-lattice|solve-newton|solve-mkv|lq-oracle|convergence|stability|clearing",
  "seed": 1,                      // mandatory for validate and convergence
  "out": "out",                   // output directory (--out overrides)
  "model": { ...model json... } | {"file": "model.json"},
  "lattice": {"steps": 2},
  "solver": {"damping": 0.5, "tol": 1e-10, "max_iters": 400,
             "continuation": [0, 0.25, 0.5, 0.75, 1],
             "newton_enabled": true, "newton_cap": 20000,
             "store_cross_z": true, "skip_assumption_check": false},
  "validate": {"samples": 10000},
  "lq": {"gamma_f":1,"gamma_g":1,"gamma_l":1,"lambda":1,
         "sigma0":0.2,"sigma":0.5,"l0":0,"m0":0.5,"s0":0.3},
  "T": 1.0, "delta": 0.5,
  "lq_oracle": {"steps": 64, "paths": 16, "N": 100},
  "convergence": {"w2_n_grid": [100,1000,10000,100000], "w2_paths": 10000,
                  "w2_m_sim": 8, "gap_n_grid": [10,100,1000,10000],
                  "gap_paths": 100000, "gap_m_sim": 1000,
                  "gap_check_n": 100, "check_times": 5},
  "stability": {"h_grid": [0.2,0.1,0.05], "agents": 2},
  "clearing": {"n_grid": [2,4,8,16]}
}
Model json: {"n":1,"d0":1,"d":1,"N":2,"T":1.0,"delta":0.5,"lambda":1.0,
 "agents":[{"gamma_f":1,"gamma_g":1,"gamma_l":1,"l0":0,"sigma0":0.2,"sigma":0.3,
            "eps_f":0,"eps_g":0,"kappa_l":0}],
 "initial_law":{"family":"gaussian","mean":[0.5],"scale":0.0},
 "exogenous":{"c0":{"base":[0],"w_coeff":0},"c":{"base":[0],"w_coeff":0}}}
Exit codes: 0 success, 1 solver non-convergence, 2 config/schema error,
3 capacity guard exceeded.)";

int dispatch(const std::string& kind, const std::string& config_path, const std::string& out,
             bool seed_given, std::uint64_t seed) {
    using namespace clearfield;
    try {
        auto cfg = load_experiment_config(config_path, kind);
        if (seed_given) {
            cfg.seed = seed;
            cfg.raw["seed"] = seed;
        }
        if (!out.empty()) {
            cfg.out_dir = out;
            cfg.raw["out"] = out;
        }
        const auto result = run_experiment(cfg);
        for (const auto& a : result.artifacts) std::cout << "wrote " << a << "\n";
        std::cout << "wrote " << result.manifest_path << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CapacityError& e) {
        std::cerr << "capacity error: " << e.what() << "\n";
        return 3;
    } catch (const NonConvergenceError& e) {
        std::cerr << "solver error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "clearfield: market-clearing equilibria of N coupled forward-backward systems, "
        "their mean-field limit, and convergence/stability experiments"};
    app.footer(kSchemaHelp);
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    int threads = 0;
    bool seed_given = false;

    app.add_option("--config", config_path, "path to the JSON experiment config")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--out", out_dir, "output directory (overrides the config)");
    auto* seed_opt = app.add_option("--seed", seed, "seed override (u64)");
    app.add_option("--threads", threads, "worker threads (1 = serial reference kernels)");

    std::string kind;
    for (const char* name :
         {"validate", "solve-lattice", "solve-newton", "solve-mkv", "lq-oracle"}) {
        auto* sub = app.add_subcommand(name);
        sub->fallthrough();
        sub->callback([&kind, name] { kind = name; });
    }
    auto* exp = app.add_subcommand("experiment", "convergence | stability | clearing");
    exp->fallthrough();
    std::string exp_kind;
    exp->add_option("kind", exp_kind, "experiment kind")
        ->required()
        ->check(CLI::IsMember({"convergence", "stability", "clearing"}));
    exp->callback([&] { kind = exp_kind; });

    CLI11_PARSE(app, argc, argv);
    seed_given = seed_opt->count() > 0;
    clearfield::exec::set_threads(threads);
    return dispatch(kind, config_path, out_dir, seed_given, seed);
}
