// Spawns the installed CLI binary (path from NV_CLI_BIN, set by the test
// harness) and checks exit codes and observable output.

#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

struct Cli {
    std::string bin;
    fs::path scratch;

    Cli() {
        const char* env = std::getenv("NV_CLI_BIN");
        REQUIRE_MESSAGE(env != nullptr, "NV_CLI_BIN must point at the CLI binary");
        bin = env;
        scratch = fs::temp_directory_path() / "nv_cli_scratch";
        fs::remove_all(scratch);
        fs::create_directories(scratch);
    }
    ~Cli() { fs::remove_all(scratch); }

    RunResult run(const std::string& args) const {
        const fs::path out = scratch / "stdout.txt";
        const fs::path err = scratch / "stderr.txt";
        const std::string cmd =
            bin + " " + args + " >" + out.string() + " 2>" + err.string();
        const int raw = std::system(cmd.c_str());
        RunResult r;
        r.code = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
        r.out = slurp(out);
        r.err = slurp(err);
        return r;
    }
};

const char* kTinyConfig = R"({
  "run_name": "cli",
  "data": {"n_train": 12, "n_val": 6, "n_test": 4, "categories": 6, "voxels": 64,
           "frames_per_fmri": 3, "q": 4, "d": 8, "seed": 7},
  "encoder": {"embed_dim": 16, "layers": 2, "heads": 2, "mlp_ratio": 2},
  "pretrain": {"steps": 6, "batch": 6},
  "phase1": {"steps": 6, "batch_size": 6},
  "codec": {"identity": true},
  "schedule": {"steps": 50},
  "phase2": {"steps": 6, "batch_clips": 2},
  "sample": {"ddim_steps": 3},
  "classifier": {"hidden": 6, "steps": 40, "batch": 8, "lr": 0.003, "gate": 0.0, "seed": 4},
  "eval": {"image": {"n": 4, "trials": 10}, "video": {"n": 8, "trials": 10}},
  "interpret": {"max_windows": 4}
})";

}  // namespace

TEST_CASE("version and help exit cleanly") {
    Cli cli;
    CHECK(cli.run("--version").code == 0);
    const RunResult help = cli.run("--help");
    CHECK(help.code == 0);
    CHECK(help.out.find("gen-data") != std::string::npos);
    CHECK(help.out.find("ablate") != std::string::npos);
}

TEST_CASE("print-config honors flags and overrides") {
    Cli cli;
    const RunResult plain = cli.run("print-config");
    REQUIRE(plain.code == 0);
    const json def = json::parse(plain.out);
    CHECK(def.at("eval").at("image").at("n").get<int>() == 50);

    const RunResult tuned = cli.run(
        "print-config --beta 0.25 --ddim-steps 7 --schedule linear --gamma-spa 0.1 "
        "--gamma-tem 0.2 --eta 0.3 --set phase1.steps=5");
    REQUIRE(tuned.code == 0);
    const json doc = json::parse(tuned.out);
    CHECK(doc.at("phase2").at("beta").get<double>() == 0.25);
    CHECK(doc.at("sample").at("beta").get<double>() == 0.25);
    CHECK(doc.at("sample").at("ddim_steps").get<int>() == 7);
    CHECK(doc.at("sample").at("eta").get<double>() == 0.3);
    CHECK(doc.at("schedule").at("kind").get<std::string>() == "linear");
    CHECK(doc.at("augment").at("gamma_spa").get<double>() == doctest::Approx(0.1));
    CHECK(doc.at("augment").at("gamma_tem").get<double>() == doctest::Approx(0.2));
    CHECK(doc.at("phase1").at("steps").get<int>() == 5);
}

TEST_CASE("usage and config errors exit with code 2") {
    Cli cli;
    CHECK(cli.run("").code == 2);                                   // missing subcommand
    CHECK(cli.run("no-such-stage").code == 2);                      // unknown subcommand
    CHECK(cli.run("print-config --bogus 1").code == 2);             // unknown flag
    CHECK(cli.run("print-config --set phase2.beta=7").code == 2);   // out of range
    CHECK(cli.run("print-config --set phase1.nope=1").code == 2);   // unknown key
    CHECK(cli.run("print-config --schedule quadratic").code == 2);  // bad enum
    CHECK(cli.run("gen-data --config /nonexistent.json").code == 2);
}

TEST_CASE("the core chain runs end to end through the CLI" * doctest::timeout(600)) {
    Cli cli;
    const fs::path cfg_path = cli.scratch / "tiny.json";
    std::ofstream(cfg_path) << kTinyConfig;
    const fs::path root = cli.scratch / "runs";
    const std::string common =
        " --config " + cfg_path.string() + " --run-root " + root.string();

    // a stage without its upstream artifacts names the stage to run
    const RunResult dep = cli.run("decode" + common);
    CHECK(dep.code == 3);
    CHECK(dep.err.find("gen-data") != std::string::npos);

    const RunResult all = cli.run("all" + common);
    REQUIRE_MESSAGE(all.code == 0, all.err);
    CHECK(all.out.find("done in") != std::string::npos);
    CHECK(fs::exists(root / "cli/report/report.md"));
    CHECK(fs::exists(root / "cli/evaluate/metrics.csv"));

    const RunResult again = cli.run("all" + common);
    CHECK(again.code == 0);
    CHECK(again.out.find("up to date") != std::string::npos);
    CHECK(again.out.find("done in") == std::string::npos);

    // the environment variable supplies the run root when the flag is absent
    const std::string env_cmd = "NEUROVID_RUN_ROOT=" + (cli.scratch / "envroot").string() + " " +
                                cli.bin + " gen-data --config " + cfg_path.string() +
                                " --set run_name=envrun >/dev/null 2>&1";
    REQUIRE(std::system(env_cmd.c_str()) == 0);
    CHECK(fs::exists(cli.scratch / "envroot/envrun/data/train.nfta"));
}
