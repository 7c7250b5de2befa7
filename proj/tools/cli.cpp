// Command-line front end. Everything goes through the C API so this file is
// also a worked example of driving the library from plain C types.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "neurovid/capi.h"

namespace {

std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

int run_one(const nvd_config* cfg, const std::string& root, const char* stage, bool force) {
    int skipped = 0;
    double ms = 0.0;
    const int rc = nvd_run_stage(cfg, root.c_str(), stage, force ? 1 : 0, &skipped, &ms);
    if (rc != NVD_OK) {
        std::fprintf(stderr, "error: %s\n", nvd_last_error());
        return rc;
    }
    if (skipped != 0) {
        std::printf("%-14s up to date\n", stage);
    } else {
        std::printf("%-14s done in %.0f ms\n", stage, ms);
    }
    std::fflush(stdout);
    return NVD_OK;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{
        "neurovid: fMRI-to-video decoding on synthetic data. Contrastive encoder "
        "training, conditional video diffusion with dependent prior noise, metric "
        "evaluation, and attention interpretation, organized as resumable run stages."};
    app.require_subcommand(1);

    std::string config_path, run_root, schedule;
    bool force = false;
    std::vector<std::string> sets;
    double gamma_spa = 0, gamma_tem = 0, beta = 0, eta = 0;
    int ddim_steps = 0;

    app.add_option("--config", config_path, "JSON run configuration file");
    app.add_option("--run-root", run_root,
                   "directory holding run folders (default: $NEUROVID_RUN_ROOT, then ./runs)");
    app.add_flag("--force", force, "re-run stages even when config and inputs are unchanged");
    app.add_option("--set", sets,
                   "config override as section.key=value (repeatable, applied last)");
    auto* o_gspa =
        app.add_option("--gamma-spa", gamma_spa, "spatial mask ratio (augment.gamma_spa)");
    auto* o_gtem = app.add_option("--gamma-tem", gamma_tem,
                                  "temporal interpolation ratio (augment.gamma_tem)");
    auto* o_beta = app.add_option(
        "--beta", beta, "dependent noise ratio (sets phase2.beta and sample.beta)");
    auto* o_ddim = app.add_option("--ddim-steps", ddim_steps, "DDIM steps (sample.ddim_steps)");
    auto* o_eta = app.add_option("--eta", eta, "DDIM eta (sample.eta)");
    auto* o_sched =
        app.add_option("--schedule", schedule, "noise schedule kind (schedule.kind)");
    app.set_version_flag("--version", nvd_version());

    const char* const* stages = nvd_stage_names();
    app.add_subcommand("all", "run every stage except ablate, in order")->fallthrough();
    for (size_t i = 0; stages[i] != nullptr; ++i) {
        static const char* help[] = {
            "generate the synthetic paired dataset",
            "masked-token pretraining of the fMRI encoder",
            "contrastive training against text/image embeddings",
            "train the latent codec and the conditional denoiser",
            "DDIM-decode the test split (plus its time-averaged control)",
            "train/load the scoring classifier and compute SSIM + N-way metrics",
            "attention summaries, ROI statistics, and heatmaps per training stage",
            "run the ablation grid into sub-runs and collate the table",
            "collate metrics and the ablation grid into one report",
        };
        app.add_subcommand(stages[i], help[i])->fallthrough();
    }
    app.add_subcommand("print-config", "print the effective configuration and exit")
        ->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : NVD_CONFIG;
    }

    std::string config_text;
    if (!config_path.empty()) {
        std::ifstream in(config_path, std::ios::binary);
        if (!in.good()) {
            std::fprintf(stderr, "error: cannot read config file '%s'\n", config_path.c_str());
            return NVD_CONFIG;
        }
        std::ostringstream ss;
        ss << in.rdbuf();
        config_text = ss.str();
    }

    nvd_config* cfg = nvd_config_create(config_text.c_str());
    if (cfg == nullptr) {
        std::fprintf(stderr, "error: %s\n", nvd_last_error());
        return NVD_CONFIG;
    }

    std::vector<std::string> overrides;
    if (o_gspa->count() > 0) overrides.push_back("augment.gamma_spa=" + fmt_num(gamma_spa));
    if (o_gtem->count() > 0) overrides.push_back("augment.gamma_tem=" + fmt_num(gamma_tem));
    if (o_beta->count() > 0) {
        overrides.push_back("phase2.beta=" + fmt_num(beta));
        overrides.push_back("sample.beta=" + fmt_num(beta));
    }
    if (o_ddim->count() > 0) overrides.push_back("sample.ddim_steps=" + std::to_string(ddim_steps));
    if (o_eta->count() > 0) overrides.push_back("sample.eta=" + fmt_num(eta));
    if (o_sched->count() > 0) overrides.push_back("schedule.kind=" + schedule);
    overrides.insert(overrides.end(), sets.begin(), sets.end());
    for (const std::string& ov : overrides) {
        const int rc = nvd_config_override(cfg, ov.c_str());
        if (rc != NVD_OK) {
            std::fprintf(stderr, "error: %s\n", nvd_last_error());
            nvd_config_free(cfg);
            return rc;
        }
    }

    const std::string stage = app.get_subcommands().at(0)->get_name();
    int rc = NVD_OK;
    if (stage == "print-config") {
        char* dump = nvd_config_dump(cfg);
        if (dump == nullptr) {
            std::fprintf(stderr, "error: %s\n", nvd_last_error());
            rc = NVD_ERROR;
        } else {
            std::fputs(dump, stdout);
            nvd_free(dump);
        }
    } else if (stage == "all") {
        for (size_t i = 0; stages[i] != nullptr && rc == NVD_OK; ++i) {
            if (std::string(stages[i]) == "ablate") continue;
            rc = run_one(cfg, run_root, stages[i], force);
        }
    } else {
        rc = run_one(cfg, run_root, stage.c_str(), force);
    }
    nvd_config_free(cfg);
    return rc;
}
