#include "clearfield/serialize.hpp"

#include <fstream>

#include "clearfield/errors.hpp"

namespace clearfield {

void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) ok = true;
        if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

namespace {

json bundle_to_json(const CoefficientBundle& b) {
    return json{{"gamma_f", b.gamma_f}, {"gamma_g", b.gamma_g}, {"gamma_l", b.gamma_l},
                {"l0", b.l0},           {"sigma0", b.sigma0},   {"sigma", b.sigma},
                {"eps_f", b.eps_f},     {"eps_g", b.eps_g},     {"kappa_l", b.kappa_l},
                {"L", b.lip_L},         {"L_phi", b.lip_Lphi}};
}

CoefficientBundle bundle_from_json(const json& j) {
    reject_unknown_keys(j, {"gamma_f", "gamma_g", "gamma_l", "l0", "sigma0", "sigma", "eps_f",
                            "eps_g", "kappa_l", "L", "L_phi"},
                        "agent bundle");
    CoefficientBundle b;
    b.gamma_f = j.value("gamma_f", 0.0);
    b.gamma_g = j.value("gamma_g", 0.0);
    b.gamma_l = j.value("gamma_l", 0.0);
    b.l0 = j.value("l0", 0.0);
    b.sigma0 = j.value("sigma0", 0.0);
    b.sigma = j.value("sigma", 0.0);
    b.eps_f = j.value("eps_f", 0.0);
    b.eps_g = j.value("eps_g", 0.0);
    b.kappa_l = j.value("kappa_l", 0.0);
    if (j.contains("L")) {
        b.lip_L = j.at("L").get<double>();
    } else {
        b.lip_L = std::max({b.gamma_f + b.eps_f, b.gamma_g + b.eps_g,
                            0.5 * (b.gamma_f + b.gamma_g) + b.eps_f + b.eps_g,
                            b.gamma_l + b.kappa_l,
                            std::abs(b.l0) + std::abs(b.sigma0) + std::abs(b.sigma)}) +
                  1.0;
    }
    b.lip_Lphi = j.value("L_phi", 0.0);
    return b;
}

}  // namespace

json model_to_json(const MarketModel& m) {
    json j;
    j["n"] = m.n;
    j["d0"] = m.d0;
    j["d"] = m.d;
    j["N"] = m.N;
    j["T"] = m.T;
    j["delta"] = m.delta;
    bool scalar = true;
    for (int a = 0; a < m.n && scalar; ++a)
        for (int b = 0; b < m.n && scalar; ++b)
            if (m.Lambda(a, b) != (a == b ? m.Lambda(0, 0) : 0.0)) scalar = false;
    if (scalar) {
        j["lambda"] = m.Lambda(0, 0);
    } else {
        json rows = json::array();
        for (int a = 0; a < m.n; ++a) {
            json row = json::array();
            for (int b = 0; b < m.n; ++b) row.push_back(m.Lambda(a, b));
            rows.push_back(row);
        }
        j["Lambda"] = rows;
    }
    j["agents"] = json::array();
    for (const auto& b : m.agents) j["agents"].push_back(bundle_to_json(b));
    j["initial_law"] = {
        {"family", m.initial_law.family == InitialLaw::Family::Gaussian ? "gaussian" : "two-point"},
        {"mean", m.initial_law.mean},
        {"scale", m.initial_law.scale}};
    j["exogenous"] = {
        {"c0", {{"base", m.exogenous.c0.base}, {"w_coeff", m.exogenous.c0.w_coeff}}},
        {"c", {{"base", m.exogenous.c.base}, {"w_coeff", m.exogenous.c.w_coeff}}}};
    return j;
}

MarketModel model_from_json(const json& j) {
    reject_unknown_keys(
        j, {"n", "d0", "d", "N", "T", "delta", "lambda", "Lambda", "agents", "initial_law",
            "exogenous"},
        "model");
    for (const char* key : {"n", "d0", "d", "N", "T", "delta", "agents"})
        if (!j.contains(key)) throw ConfigError(std::string("model: missing key '") + key + "'");
    const int n = j.at("n").get<int>();
    Mat Lambda;
    if (j.contains("lambda")) {
        Lambda = j.at("lambda").get<double>() * Mat::Identity(n, n);
    } else if (j.contains("Lambda")) {
        const auto rows = j.at("Lambda");
        Lambda.resize(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) Lambda(a, b) = rows.at(a).at(b).get<double>();
    } else {
        throw ConfigError("model: need 'lambda' or 'Lambda'");
    }
    std::vector<CoefficientBundle> agents;
    for (const auto& bj : j.at("agents")) agents.push_back(bundle_from_json(bj));

    InitialLaw law;
    law.mean.assign(n, 0.0);
    if (j.contains("initial_law")) {
        const auto& lj = j.at("initial_law");
        reject_unknown_keys(lj, {"family", "mean", "scale"}, "initial_law");
        const std::string fam = lj.value("family", "gaussian");
        if (fam == "gaussian")
            law.family = InitialLaw::Family::Gaussian;
        else if (fam == "two-point")
            law.family = InitialLaw::Family::TwoPoint;
        else
            throw ConfigError("initial_law: unknown family '" + fam + "'");
        if (lj.contains("mean")) law.mean = lj.at("mean").get<std::vector<double>>();
        law.scale = lj.value("scale", 0.0);
    }
    ExogenousSpec exo;
    exo.c0.base.assign(n, 0.0);
    exo.c.base.assign(n, 0.0);
    if (j.contains("exogenous")) {
        const auto& ej = j.at("exogenous");
        reject_unknown_keys(ej, {"c0", "c"}, "exogenous");
        auto parse = [&](const json& pj, ExoProcessSpec& spec, const char* what) {
            reject_unknown_keys(pj, {"base", "w_coeff"}, what);
            if (pj.contains("base")) spec.base = pj.at("base").get<std::vector<double>>();
            spec.w_coeff = pj.value("w_coeff", 0.0);
        };
        if (ej.contains("c0")) parse(ej.at("c0"), exo.c0, "exogenous.c0");
        if (ej.contains("c")) parse(ej.at("c"), exo.c, "exogenous.c");
    }
    return make_market_model(n, j.at("d0").get<int>(), j.at("d").get<int>(), j.at("N").get<int>(),
                             j.at("T").get<double>(), j.at("delta").get<double>(),
                             std::move(Lambda), std::move(agents), std::move(law),
                             std::move(exo));
}

json lq_to_json(const LQParams& p) {
    return json{{"gamma_f", p.gamma_f}, {"gamma_g", p.gamma_g}, {"gamma_l", p.gamma_l},
                {"lambda", p.lambda},   {"sigma0", p.sigma0},   {"sigma", p.sigma},
                {"l0", p.l0},           {"m0", p.m0},           {"s0", p.s0}};
}

LQParams lq_from_json(const json& j) {
    reject_unknown_keys(
        j, {"gamma_f", "gamma_g", "gamma_l", "lambda", "sigma0", "sigma", "l0", "m0", "s0"},
        "lq");
    LQParams p;
    p.gamma_f = j.value("gamma_f", 1.0);
    p.gamma_g = j.value("gamma_g", 1.0);
    p.gamma_l = j.value("gamma_l", 1.0);
    p.lambda = j.value("lambda", 1.0);
    p.sigma0 = j.value("sigma0", 0.0);
    p.sigma = j.value("sigma", 0.0);
    p.l0 = j.value("l0", 0.0);
    p.m0 = j.value("m0", 0.0);
    p.s0 = j.value("s0", 0.0);
    return p;
}

json solver_config_to_json(const SolverConfig& cfg) {
    return json{{"damping", cfg.damping},
                {"tol", cfg.tol},
                {"max_iters", cfg.max_iters},
                {"continuation", cfg.continuation},
                {"newton_enabled", cfg.newton_enabled},
                {"newton_cap", cfg.newton_cap},
                {"store_cross_z", cfg.store_cross_z},
                {"skip_assumption_check", cfg.skip_assumption_check}};
}

SolverConfig solver_config_from_json(const json& j) {
    reject_unknown_keys(j,
                        {"damping", "tol", "max_iters", "continuation", "newton_enabled",
                         "newton_cap", "store_cross_z", "skip_assumption_check"},
                        "solver");
    SolverConfig cfg;
    cfg.damping = j.value("damping", cfg.damping);
    cfg.tol = j.value("tol", cfg.tol);
    cfg.max_iters = j.value("max_iters", cfg.max_iters);
    if (j.contains("continuation"))
        cfg.continuation = j.at("continuation").get<std::vector<double>>();
    cfg.newton_enabled = j.value("newton_enabled", cfg.newton_enabled);
    cfg.newton_cap = j.value("newton_cap", cfg.newton_cap);
    cfg.store_cross_z = j.value("store_cross_z", cfg.store_cross_z);
    cfg.skip_assumption_check = j.value("skip_assumption_check", cfg.skip_assumption_check);
    check_solver_config(cfg);
    return cfg;
}

MarketModel load_model_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("model file " + path + ": " + e.what());
    }
    return model_from_json(j);
}

void save_model_file(const MarketModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open " + path + " for writing");
    out << model_to_json(model).dump(2) << "\n";
}

}  // namespace clearfield
