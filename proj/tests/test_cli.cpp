#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "clearfield/csvio.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CLEARFIELD_BIN) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    out << content;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

const char* kZeroModel = R"({
  "n": 1, "d0": 1, "d": 1, "N": 2, "T": 1.0, "delta": 0.0, "lambda": 1.0,
  "agents": [
    {"gamma_f": 0.0, "gamma_g": 0.0, "gamma_l": 1.0},
    {"gamma_f": 0.0, "gamma_g": 0.0, "gamma_l": 1.0}
  ],
  "initial_law": {"family": "gaussian", "mean": [0.0], "scale": 0.0}
})";

const char* kLqModel = R"({
  "n": 1, "d0": 1, "d": 1, "N": 2, "T": 1.0, "delta": 0.5, "lambda": 1.0,
  "agents": [
    {"gamma_f": 1.0, "gamma_g": 1.0, "gamma_l": 1.0, "sigma0": 0.2, "sigma": 0.3, "l0": 0.1},
    {"gamma_f": 1.0, "gamma_g": 1.0, "gamma_l": 1.0, "sigma0": 0.2, "sigma": 0.3, "l0": 0.1}
  ],
  "initial_law": {"family": "gaussian", "mean": [0.5], "scale": 0.0}
})";

}  // namespace

TEST_CASE("cli end to end") {
    const fs::path dir = fs::path("cli_scratch");
    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto p = [&](const std::string& name) { return (dir / name).string(); };

    SUBCASE("validate on the LQ default passes all checks") {
        write_file(p("model.json"), kLqModel);
        write_file(p("validate.json"),
                   R"({"experiment":"validate","seed":42,"out":")" + p("v") +
                       R"(","model":{"file":")" + p("model.json") + R"("}})");
        CHECK(run_cli("validate --config " + p("validate.json")) == 0);
        const auto report = json::parse(slurp(p("v") + "/validate_42_assumption_report.json"));
        CHECK(report.at("all_pass").get<bool>());
    }

    SUBCASE("solve-lattice on the zero model writes all-zero solution files") {
        write_file(p("model.json"), kZeroModel);
        write_file(p("solve.json"),
                   R"({"experiment":"solve-lattice","seed":7,"out":")" + p("s") +
                       R"(","model":{"file":")" + p("model.json") +
                       R"("},"lattice":{"steps":2},"solver":{"skip_assumption_check":true}})");
        CHECK(run_cli("solve-lattice --config " + p("solve.json")) == 0);
        std::ifstream phi(p("s") + "/solve-lattice_7_solution_phi.csv");
        REQUIRE(phi.good());
        std::string line;
        std::getline(phi, line);  // header
        int rows = 0;
        while (std::getline(phi, line)) {
            CHECK(line.substr(line.rfind(',') + 1) == "0");
            ++rows;
        }
        CHECK(rows > 0);
    }

    SUBCASE("re-running with identical config and seed is byte-identical") {
        write_file(p("model.json"), kLqModel);
        const std::string cfg =
            R"({"experiment":"convergence","seed":11,"T":1.0,"delta":0.5,)"
            R"("lq":{"gamma_f":1,"gamma_g":1,"gamma_l":1,"lambda":1,"sigma0":0.2,"sigma":0.5,"m0":0.5,"s0":0.3},)"
            R"("convergence":{"w2_n_grid":[16,32,64],"w2_paths":200,"w2_m_sim":4,)"
            R"("gap_n_grid":[8,32,128],"gap_paths":2000,"gap_m_sim":16,"gap_check_n":32}})";
        write_file(p("conv.json"), cfg);
        CHECK(run_cli("experiment convergence --config " + p("conv.json") + " --out " + p("a")) ==
              0);
        CHECK(run_cli("experiment convergence --config " + p("conv.json") + " --out " + p("b") +
                      " --threads 1") == 0);
        for (const char* name :
             {"convergence_11_rate_w2.csv", "convergence_11_gap.csv",
              "convergence_11_rate_report.json"}) {
            const auto a = slurp(p("a") + "/" + name);
            const auto b = slurp(p("b") + "/" + name);
            REQUIRE_FALSE(a.empty());
            CHECK(a == b);  // thread-count invariant as well
        }
    }

    SUBCASE("manifest lists every artifact with its content hash") {
        write_file(p("model.json"), kLqModel);
        write_file(p("solve.json"),
                   R"({"experiment":"solve-lattice","seed":3,"out":")" + p("m") +
                       R"(","model":{"file":")" + p("model.json") +
                       R"("},"lattice":{"steps":1}})");
        CHECK(run_cli("solve-lattice --config " + p("solve.json")) == 0);
        const auto manifest = json::parse(slurp(p("m") + "/solve-lattice_3_manifest.json"));
        CHECK(manifest.at("artifacts").size() >= 5);
        for (const auto& entry : manifest.at("artifacts")) {
            const std::string file = p("m") + "/" + entry.at("path").get<std::string>();
            CHECK(clearfield::file_hash_hex(file) == entry.at("hash").get<std::string>());
        }
    }

    SUBCASE("exit code 2 on schema violations") {
        write_file(p("bad.json"), R"({"experiment":"validate","oops":1,"seed":1})");
        CHECK(run_cli("validate --config " + p("bad.json")) == 2);
        write_file(p("noseed.json"), R"({"experiment":"convergence"})");
        CHECK(run_cli("experiment convergence --config " + p("noseed.json")) == 2);
        write_file(p("mismatch.json"), R"({"experiment":"clearing","seed":1})");
        CHECK(run_cli("experiment stability --config " + p("mismatch.json")) == 2);
    }

    SUBCASE("exit code 3 on capacity guards") {
        write_file(p("model.json"), kLqModel);
        write_file(p("big.json"),
                   R"({"experiment":"solve-lattice","seed":1,"out":")" + p("big") +
                       R"(","model":{"file":")" + p("model.json") +
                       R"("},"lattice":{"steps":12}})");
        CHECK(run_cli("solve-lattice --config " + p("big.json")) == 3);
    }

    SUBCASE("exit code 1 with residual artifact on non-convergence") {
        write_file(p("model.json"), kLqModel);
        write_file(p("stall.json"),
                   R"({"experiment":"solve-lattice","seed":5,"out":")" + p("r") +
                       R"(","model":{"file":")" + p("model.json") +
                       R"("},"lattice":{"steps":2},"solver":{"max_iters":1}})");
        CHECK(run_cli("solve-lattice --config " + p("stall.json")) == 1);
        const auto residuals = json::parse(slurp(p("r") + "/solve-lattice_5_residuals.json"));
        CHECK_FALSE(residuals.at("residual_history").empty());
    }
}
