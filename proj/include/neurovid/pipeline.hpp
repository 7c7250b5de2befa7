#pragma once

#include <string>
#include <vector>

#include "neurovid/contrastive.hpp"
#include "neurovid/diffusion.hpp"
#include "neurovid/encoder.hpp"
#include "neurovid/eval.hpp"
#include "neurovid/synthdata.hpp"

namespace neurovid {

// Every tunable of the pipeline in one document. The JSON form is strict:
// unknown keys anywhere are rejected, values are type-checked, and omitted
// keys take the defaults below.
struct RunConfig {
    std::string run_name = "default";

    SynthConfig data;
    int patch_size = 8;
    float patch_pad_value = 0.0f;

    // encoder geometry beyond what data/patch determine
    int encoder_embed_dim = 32;
    int encoder_layers = 4;
    int encoder_heads = 4;
    int encoder_mlp_ratio = 4;
    uint64_t encoder_seed = 1;

    MaePretrainConfig pretrain;
    Phase1Config phase1;  // carries augment.{gamma_spa, gamma_tem, ...}

    CodecConfig codec;
    CodecTrainConfig codec_train;

    int denoiser_base_channels = 8;
    int denoiser_heads = 2;
    int denoiser_temporal_window = 2;
    int denoiser_time_dim = 16;
    int denoiser_groups = 4;
    uint64_t denoiser_seed = 5;

    int schedule_steps = 1000;
    ScheduleKind schedule_kind = ScheduleKind::Cosine;

    Phase2Config phase2;
    SampleConfig sample;
    uint64_t sample_seed = 11;

    ClassifierConfig classifier;
    uint64_t classifier_init_seed = 17;

    NwayConfig eval_image{50, 1, 100};
    NwayConfig eval_video{50, 1, 100};
    uint64_t eval_seed = 0;

    bool interpret_row_mean = false;
    int interpret_max_windows = 64;

    // Ablation grids, one list per axis of the study table.
    std::vector<double> ablate_gamma_spa = {0.0, 0.2, 0.4};
    std::vector<double> ablate_gamma_tem = {0.0, 1.0 / 3.0, 0.5};
    std::vector<double> ablate_mu_spa = {0.0, 1.0};
    std::vector<double> ablate_mu_tem = {0.0, 1.0};
    std::vector<double> ablate_use_dependent_noise = {0.0, 1.0};
    std::vector<double> ablate_beta = {0.0, 0.25, 0.5, 1.0};

    void validate() const;

    // Derived module configs (geometry wired through from `data`).
    EncoderConfig encoder_config() const;
    PatchConfig patch_config() const;
    DenoiserConfig denoiser_config(int latent_channels) const;
    ClassifierConfig classifier_config() const;
};

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& json_text);

// Applies "dotted.path=value" assignments onto a JSON document; the result
// still passes the strict parse, so unknown paths are rejected there.
std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides);

// Run root resolution: explicit argument beats $NEUROVID_RUN_ROOT beats
// "./runs".
std::string resolve_run_root(const std::string& explicit_root);

extern const std::vector<std::string> kPipelineStages;  // execution order

struct StageResult {
    std::string stage;
    bool skipped = false;
    double wall_ms = 0.0;
    std::vector<std::string> outputs;
};

// Executes one stage (or "all") inside <run_root>/<run_name>/. A stage whose
// config slice and inputs are unchanged is skipped unless `force`. Missing
// upstream artifacts raise a dependency error naming the stage to run.
StageResult run_stage(const RunConfig& cfg, const std::string& run_root,
                      const std::string& stage, bool force = false);
std::vector<StageResult> run_all(const RunConfig& cfg, const std::string& run_root,
                                 bool force = false);

// Manifest access for audits: the raw JSON lines, in append order.
std::vector<std::string> read_manifest(const std::string& run_dir);

}  // namespace neurovid
