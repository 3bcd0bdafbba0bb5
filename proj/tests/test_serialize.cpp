#include "doctest.h"

#include <cmath>

#include "clearfield/errors.hpp"
#include "clearfield/experiments.hpp"
#include "clearfield/serialize.hpp"

using namespace clearfield;

TEST_CASE("model json round-trips bit-exactly") {
    LQParams lq{1.0 / 3.0, 0.7, 1.1, 0.9, 0.123456789012345678, 0.3, 0.05, 0.5, 0.25};
    auto model = lq.to_model(2, 1, 1, 3, 1.0, 0.4);
    auto agents = model.agents;
    agents[1].eps_f = 0.017453292519943295;
    agents[2].kappa_l = std::nextafter(0.25, 1.0);
    model = make_market_model(2, 1, 1, 3, 1.0, 0.4, model.Lambda, agents, model.initial_law,
                              model.exogenous);
    const json j = model_to_json(model);
    // Serialize to text and parse back: every float must round-trip.
    const auto j2 = json::parse(j.dump());
    const auto back = model_from_json(j2);
    CHECK(back.n == model.n);
    CHECK(back.N == model.N);
    CHECK(back.delta == model.delta);
    CHECK(back.Lambda(0, 0) == model.Lambda(0, 0));
    for (int i = 0; i < 3; ++i) {
        CHECK(back.agents[i].gamma_f == model.agents[i].gamma_f);
        CHECK(back.agents[i].eps_f == model.agents[i].eps_f);
        CHECK(back.agents[i].kappa_l == model.agents[i].kappa_l);
        CHECK(back.agents[i].lip_L == model.agents[i].lip_L);
    }
    CHECK(back.initial_law.mean == model.initial_law.mean);
    CHECK(model_to_json(back) == j);
}

TEST_CASE("unknown keys are rejected") {
    json j = model_to_json(LQParams{}.to_model(1, 1, 1, 1, 1.0, 0.0));
    j["surprise"] = 1;
    CHECK_THROWS_AS(model_from_json(j), ConfigError);

    json cfg{{"experiment", "validate"}, {"seed", 1}, {"typo_key", 2}};
    CHECK_THROWS_AS(parse_experiment_config(cfg, "validate"), ConfigError);
}

TEST_CASE("seed is mandatory for randomized experiments") {
    json cfg{{"experiment", "convergence"}};
    CHECK_THROWS_AS(parse_experiment_config(cfg, ""), ConfigError);
    json ok{{"experiment", "clearing"}};  // deterministic: seed optional
    CHECK_NOTHROW(parse_experiment_config(ok, ""));
}

TEST_CASE("solver config validation") {
    json bad{{"continuation", {0.0, 0.5}}};
    CHECK_THROWS_AS(solver_config_from_json(bad), ConfigError);
    json bad2{{"continuation", {0.0, 0.7, 0.4, 1.0}}};
    CHECK_THROWS_AS(solver_config_from_json(bad2), ConfigError);
    json ok{{"damping", 0.4}, {"continuation", {0.0, 1.0}}};
    const auto cfg = solver_config_from_json(ok);
    CHECK(cfg.damping == 0.4);
}

TEST_CASE("experiment kind must match the subcommand") {
    json cfg{{"experiment", "clearing"}};
    CHECK_THROWS_AS(parse_experiment_config(cfg, "stability"), ConfigError);
}
