#pragma once

#include <json.hpp>

#include <string>

#include "clearfield/fbsde.hpp"
#include "clearfield/model.hpp"

namespace clearfield {

using nlohmann::json;

// Model <-> JSON. Floating-point values round-trip bit-exactly (shortest
// decimal representation on write, exact binary parse on read). Unknown keys
// are rejected.
json model_to_json(const MarketModel& model);
MarketModel model_from_json(const json& j);

json lq_to_json(const LQParams& p);
LQParams lq_from_json(const json& j);

json solver_config_to_json(const SolverConfig& cfg);
SolverConfig solver_config_from_json(const json& j);

MarketModel load_model_file(const std::string& path);
void save_model_file(const MarketModel& model, const std::string& path);

// Throws ConfigError when `j` holds keys outside `allowed`.
void reject_unknown_keys(const json& j, std::initializer_list<const char*> allowed,
                         const std::string& where);

}  // namespace clearfield
