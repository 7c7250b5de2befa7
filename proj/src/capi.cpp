#include "neurovid/capi.h"

#include <cstdlib>
#include <cstring>
#include <string>

#include "neurovid/pipeline.hpp"

using namespace neurovid;

namespace {

thread_local std::string g_last_error;

int code_of(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::Validation:
            return NVD_CONFIG;
        case ErrorKind::Dependency:
            return NVD_DEPENDENCY;
        case ErrorKind::Numeric:
            return NVD_NUMERIC;
        default:
            return NVD_ERROR;
    }
}

template <typename F>
int guarded(F&& fn) {
    try {
        fn();
        g_last_error.clear();
        return NVD_OK;
    } catch (const Error& e) {
        g_last_error = e.what();
        return code_of(e.kind());
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return NVD_ERROR;
    } catch (...) {
        g_last_error = "unknown failure";
        return NVD_ERROR;
    }
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out != nullptr) std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

}  // namespace

struct nvd_config {
    RunConfig cfg;
};

extern "C" {

const char* nvd_last_error(void) { return g_last_error.c_str(); }

const char* nvd_version(void) { return "0.1.0"; }

const char* const* nvd_stage_names(void) {
    static const char* names[] = {"gen-data", "pretrain", "train-phase1", "train-phase2",
                                  "decode",   "evaluate", "interpret",    "ablate",
                                  "report",   nullptr};
    return names;
}

nvd_config* nvd_config_create(const char* json_text) {
    nvd_config* out = nullptr;
    const int rc = guarded([&] {
        const std::string text =
            (json_text == nullptr || *json_text == '\0') ? std::string("{}") : json_text;
        out = new nvd_config{run_config_from_json(text)};
    });
    if (rc != NVD_OK) {
        delete out;
        return nullptr;
    }
    return out;
}

int nvd_config_override(nvd_config* cfg, const char* assignment) {
    return guarded([&] {
        require(cfg != nullptr, ErrorKind::Config, "null config handle");
        require(assignment != nullptr, ErrorKind::Config, "null override");
        const std::string patched =
            apply_overrides(run_config_to_json(cfg->cfg), {std::string(assignment)});
        cfg->cfg = run_config_from_json(patched);  // validates before mutating
    });
}

char* nvd_config_dump(const nvd_config* cfg) {
    char* out = nullptr;
    const int rc = guarded([&] {
        require(cfg != nullptr, ErrorKind::Config, "null config handle");
        out = dup_string(run_config_to_json(cfg->cfg));
        require(out != nullptr, ErrorKind::Io, "out of memory");
    });
    return rc == NVD_OK ? out : nullptr;
}

void nvd_config_free(nvd_config* cfg) { delete cfg; }

int nvd_run_stage(const nvd_config* cfg, const char* run_root, const char* stage, int force,
                  int* skipped, double* wall_ms) {
    return guarded([&] {
        require(cfg != nullptr, ErrorKind::Config, "null config handle");
        require(stage != nullptr && *stage != '\0', ErrorKind::Config, "null stage name");
        const std::string root = run_root == nullptr ? "" : run_root;
        bool all_skipped = true;
        double total_ms = 0.0;
        if (std::string(stage) == "all") {
            for (const StageResult& r : run_all(cfg->cfg, root, force != 0)) {
                all_skipped = all_skipped && r.skipped;
                total_ms += r.wall_ms;
            }
        } else {
            const StageResult r = run_stage(cfg->cfg, root, stage, force != 0);
            all_skipped = r.skipped;
            total_ms = r.wall_ms;
        }
        if (skipped != nullptr) *skipped = all_skipped ? 1 : 0;
        if (wall_ms != nullptr) *wall_ms = total_ms;
    });
}

void nvd_free(char* p) { std::free(p); }

}  // extern "C"
