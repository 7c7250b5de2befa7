#include "neurovid/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neurovid/interpret.hpp"
#include "neurovid/util.hpp"

namespace neurovid {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Config schema

namespace {

// Wraps one JSON object for typed, default-preserving reads. Every key that
// is read gets marked; finish() rejects whatever was never asked for, which
// is what makes unknown keys anywhere in the document an error.
class StrictObject {
  public:
    StrictObject(const json* obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (obj_ != nullptr) {
            require(obj_->is_object(), ErrorKind::Config,
                    "config: '" + (path_.empty() ? std::string("<root>") : path_) +
                        "' must be an object");
        }
    }

    void get(const char* key, int& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_number_integer() || v->is_number_unsigned(), ErrorKind::Config,
                at(key) + ": expected an integer");
        const int64_t raw = v->get<int64_t>();
        require(raw >= INT32_MIN && raw <= INT32_MAX, ErrorKind::Config,
                at(key) + ": integer out of range");
        out = static_cast<int>(raw);
    }

    void get(const char* key, double& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_number(), ErrorKind::Config, at(key) + ": expected a number");
        out = v->get<double>();
    }

    void get(const char* key, float& out) {
        double d = static_cast<double>(out);
        get(key, d);
        out = static_cast<float>(d);
    }

    void get(const char* key, bool& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_boolean(), ErrorKind::Config, at(key) + ": expected a boolean");
        out = v->get<bool>();
    }

    void get(const char* key, std::string& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_string(), ErrorKind::Config, at(key) + ": expected a string");
        out = v->get<std::string>();
    }

    void get(const char* key, uint64_t& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_number_unsigned() ||
                    (v->is_number_integer() && v->get<int64_t>() >= 0),
                ErrorKind::Config, at(key) + ": expected a non-negative integer");
        out = v->get<uint64_t>();
    }

    void get(const char* key, std::vector<double>& out) {
        const json* v = find(key);
        if (v == nullptr) return;
        require(v->is_array(), ErrorKind::Config, at(key) + ": expected an array of numbers");
        std::vector<double> parsed;
        for (const json& e : *v) {
            require(e.is_number(), ErrorKind::Config, at(key) + ": expected an array of numbers");
            parsed.push_back(e.get<double>());
        }
        out = std::move(parsed);
    }

    // Sub-object, or nullptr when the section is omitted entirely.
    const json* section(const char* key) {
        if (obj_ == nullptr) return nullptr;
        seen_.insert(key);
        auto it = obj_->find(key);
        if (it == obj_->end()) return nullptr;
        require(it->is_object(), ErrorKind::Config, at(key) + ": expected an object");
        return &*it;
    }

    void finish() {
        if (obj_ == nullptr) return;
        for (auto it = obj_->begin(); it != obj_->end(); ++it) {
            require(seen_.count(it.key()) > 0, ErrorKind::Config,
                    "config: unknown key '" + at(it.key()) + "'");
        }
    }

  private:
    const json* find(const char* key) {
        if (obj_ == nullptr) return nullptr;
        seen_.insert(key);
        auto it = obj_->find(key);
        return it == obj_->end() ? nullptr : &*it;
    }

    std::string at(const std::string& key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    const json* obj_;
    std::string path_;
    std::set<std::string> seen_;
};

json nway_json(const NwayConfig& c) {
    return json{{"n", c.n}, {"k", c.k}, {"trials", c.trials}};
}

}  // namespace

std::string run_config_to_json(const RunConfig& c) {
    json j;
    j["run_name"] = c.run_name;
    j["data"] = {{"n_train", c.data.n_train},
                 {"n_val", c.data.n_val},
                 {"n_test", c.data.n_test},
                 {"categories", c.data.categories},
                 {"directions", c.data.directions},
                 {"voxels", c.data.voxels},
                 {"height", c.data.height},
                 {"width", c.data.width},
                 {"window", c.data.window},
                 {"frames_per_fmri", c.data.frames_per_fmri},
                 {"lag", c.data.lag},
                 {"noise_sigma", c.data.noise_sigma},
                 {"overlap_target", c.data.overlap_target},
                 {"q", c.data.q},
                 {"d", c.data.d},
                 {"seed", c.data.seed}};
    j["patch"] = {{"size", c.patch_size}, {"pad_value", c.patch_pad_value}};
    j["encoder"] = {{"embed_dim", c.encoder_embed_dim},
                    {"layers", c.encoder_layers},
                    {"heads", c.encoder_heads},
                    {"mlp_ratio", c.encoder_mlp_ratio},
                    {"seed", c.encoder_seed}};
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch", c.pretrain.batch},
                     {"lr", c.pretrain.lr},
                     {"mask_ratio", c.pretrain.mask_ratio},
                     {"seed", c.pretrain.seed}};
    j["augment"] = {{"gamma_spa", c.phase1.augment.gamma_spa},
                    {"gamma_tem", c.phase1.augment.gamma_tem},
                    {"normalize_interpolation", c.phase1.augment.normalize_interpolation}};
    j["phase1"] = {{"mu_spa", c.phase1.mu_spa},
                   {"mu_tem", c.phase1.mu_tem},
                   {"temperature", c.phase1.temperature},
                   {"batch_size", c.phase1.batch_size},
                   {"steps", c.phase1.steps},
                   {"lr", c.phase1.lr},
                   {"literal_pairing", c.phase1.literal_pairing},
                   {"shuffle_pairing", c.phase1.shuffle_pairing},
                   {"seed", c.phase1.seed}};
    j["codec"] = {{"identity", c.codec.identity},
                  {"latent_channels", c.codec.latent_channels},
                  {"hidden", c.codec.hidden}};
    j["codec_train"] = {{"steps", c.codec_train.steps},
                        {"batch", c.codec_train.batch},
                        {"lr", c.codec_train.lr},
                        {"seed", c.codec_train.seed}};
    j["denoiser"] = {{"base_channels", c.denoiser_base_channels},
                     {"heads", c.denoiser_heads},
                     {"temporal_window", c.denoiser_temporal_window},
                     {"time_dim", c.denoiser_time_dim},
                     {"groups", c.denoiser_groups},
                     {"seed", c.denoiser_seed}};
    j["schedule"] = {{"steps", c.schedule_steps}, {"kind", to_string(c.schedule_kind)}};
    j["phase2"] = {{"steps", c.phase2.steps},
                   {"batch_clips", c.phase2.batch_clips},
                   {"lr", c.phase2.lr},
                   {"beta", c.phase2.beta},
                   {"use_dependent_noise", c.phase2.use_dependent_noise},
                   {"seed", c.phase2.seed}};
    j["sample"] = {{"ddim_steps", c.sample.ddim_steps},
                   {"eta", c.sample.eta},
                   {"beta", c.sample.beta},
                   {"seed", c.sample_seed}};
    j["classifier"] = {{"hidden", c.classifier.hidden},
                       {"train_clips_per_combo", c.classifier.train_clips_per_combo},
                       {"val_clips_per_combo", c.classifier.val_clips_per_combo},
                       {"steps", c.classifier.steps},
                       {"batch", c.classifier.batch},
                       {"lr", c.classifier.lr},
                       {"blur_prob", c.classifier.blur_prob},
                       {"noise_sigma", c.classifier.noise_sigma},
                       {"gate", c.classifier.gate},
                       {"seed", c.classifier.seed},
                       {"init_seed", c.classifier_init_seed}};
    j["eval"] = {{"image", nway_json(c.eval_image)},
                 {"video", nway_json(c.eval_video)},
                 {"seed", c.eval_seed}};
    j["interpret"] = {{"row_mean", c.interpret_row_mean},
                      {"max_windows", c.interpret_max_windows}};
    j["ablate"] = {{"gamma_spa", c.ablate_gamma_spa},
                   {"gamma_tem", c.ablate_gamma_tem},
                   {"mu_spa", c.ablate_mu_spa},
                   {"mu_tem", c.ablate_mu_tem},
                   {"use_dependent_noise", c.ablate_use_dependent_noise},
                   {"beta", c.ablate_beta}};
    return j.dump(2) + "\n";
}

RunConfig run_config_from_json(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Config, std::string("config: invalid JSON: ") + e.what());
    }
    RunConfig c;
    StrictObject root(&doc, "");
    root.get("run_name", c.run_name);
    {
        StrictObject o(root.section("data"), "data");
        o.get("n_train", c.data.n_train);
        o.get("n_val", c.data.n_val);
        o.get("n_test", c.data.n_test);
        o.get("categories", c.data.categories);
        o.get("directions", c.data.directions);
        o.get("voxels", c.data.voxels);
        o.get("height", c.data.height);
        o.get("width", c.data.width);
        o.get("window", c.data.window);
        o.get("frames_per_fmri", c.data.frames_per_fmri);
        o.get("lag", c.data.lag);
        o.get("noise_sigma", c.data.noise_sigma);
        o.get("overlap_target", c.data.overlap_target);
        o.get("q", c.data.q);
        o.get("d", c.data.d);
        o.get("seed", c.data.seed);
        o.finish();
    }
    {
        StrictObject o(root.section("patch"), "patch");
        o.get("size", c.patch_size);
        o.get("pad_value", c.patch_pad_value);
        o.finish();
    }
    {
        StrictObject o(root.section("encoder"), "encoder");
        o.get("embed_dim", c.encoder_embed_dim);
        o.get("layers", c.encoder_layers);
        o.get("heads", c.encoder_heads);
        o.get("mlp_ratio", c.encoder_mlp_ratio);
        o.get("seed", c.encoder_seed);
        o.finish();
    }
    {
        StrictObject o(root.section("pretrain"), "pretrain");
        o.get("steps", c.pretrain.steps);
        o.get("batch", c.pretrain.batch);
        o.get("lr", c.pretrain.lr);
        o.get("mask_ratio", c.pretrain.mask_ratio);
        o.get("seed", c.pretrain.seed);
        o.finish();
    }
    {
        StrictObject o(root.section("augment"), "augment");
        o.get("gamma_spa", c.phase1.augment.gamma_spa);
        o.get("gamma_tem", c.phase1.augment.gamma_tem);
        o.get("normalize_interpolation", c.phase1.augment.normalize_interpolation);
        o.finish();
    }
    {
        StrictObject o(root.section("phase1"), "phase1");
        o.get("mu_spa", c.phase1.mu_spa);
        o.get("mu_tem", c.phase1.mu_tem);
        o.get("temperature", c.phase1.temperature);
        o.get("batch_size", c.phase1.batch_size);
        o.get("steps", c.phase1.steps);
        o.get("lr", c.phase1.lr);
        o.get("literal_pairing", c.phase1.literal_pairing);
        o.get("shuffle_pairing", c.phase1.shuffle_pairing);
        o.get("seed", c.phase1.seed);
        o.finish();
    }
    {
        StrictObject o(root.section("codec"), "codec");
        o.get("identity", c.codec.identity);
        o.get("latent_channels", c.codec.latent_channels);
        o.get("hidden", c.codec.hidden);
        o.finish();
    }
    {
        StrictObject o(root.section("codec_train"), "codec_train");
        o.get("steps", c.codec_train.steps);
        o.get("batch", c.codec_train.batch);
        o.get("lr", c.codec_train.lr);
        o.get("seed", c.codec_train.seed);
        o.finish();
    }
    {
        StrictObject o(root.section("denoiser"), "denoiser");
        o.get("base_channels", c.denoiser_base_channels);
        o.get("heads", c.denoiser_heads);
        o.get("temporal_window", c.denoiser_temporal_window);
        o.get("time_dim", c.denoiser_time_dim);
        o.get("groups", c.denoiser_groups);
        o.get("seed", c.denoiser_seed);
        o.finish();
    }
    {
        StrictObject o(root.section("schedule"), "schedule");
        o.get("steps", c.schedule_steps);
        std::string kind = to_string(c.schedule_kind);
        o.get("kind", kind);
        c.schedule_kind = schedule_kind_from_string(kind);
        o.finish();
    }
    {
        StrictObject o(root.section("phase2"), "phase2");
        o.get("steps", c.phase2.steps);
        o.get("batch_clips", c.phase2.batch_clips);
        o.get("lr", c.phase2.lr);
        o.get("beta", c.phase2.beta);
        o.get("use_dependent_noise", c.phase2.use_dependent_noise);
        o.get("seed", c.phase2.seed);
        o.finish();
    }
    {
        StrictObject o(root.section("sample"), "sample");
        o.get("ddim_steps", c.sample.ddim_steps);
        o.get("eta", c.sample.eta);
        o.get("beta", c.sample.beta);
        o.get("seed", c.sample_seed);
        o.finish();
    }
    {
        StrictObject o(root.section("classifier"), "classifier");
        o.get("hidden", c.classifier.hidden);
        o.get("train_clips_per_combo", c.classifier.train_clips_per_combo);
        o.get("val_clips_per_combo", c.classifier.val_clips_per_combo);
        o.get("steps", c.classifier.steps);
        o.get("batch", c.classifier.batch);
        o.get("lr", c.classifier.lr);
        o.get("blur_prob", c.classifier.blur_prob);
        o.get("noise_sigma", c.classifier.noise_sigma);
        o.get("gate", c.classifier.gate);
        o.get("seed", c.classifier.seed);
        o.get("init_seed", c.classifier_init_seed);
        o.finish();
    }
    {
        StrictObject o(root.section("eval"), "eval");
        {
            StrictObject img(o.section("image"), "eval.image");
            img.get("n", c.eval_image.n);
            img.get("k", c.eval_image.k);
            img.get("trials", c.eval_image.trials);
            img.finish();
        }
        {
            StrictObject vid(o.section("video"), "eval.video");
            vid.get("n", c.eval_video.n);
            vid.get("k", c.eval_video.k);
            vid.get("trials", c.eval_video.trials);
            vid.finish();
        }
        o.get("seed", c.eval_seed);
        o.finish();
    }
    {
        StrictObject o(root.section("interpret"), "interpret");
        o.get("row_mean", c.interpret_row_mean);
        o.get("max_windows", c.interpret_max_windows);
        o.finish();
    }
    {
        StrictObject o(root.section("ablate"), "ablate");
        o.get("gamma_spa", c.ablate_gamma_spa);
        o.get("gamma_tem", c.ablate_gamma_tem);
        o.get("mu_spa", c.ablate_mu_spa);
        o.get("mu_tem", c.ablate_mu_tem);
        o.get("use_dependent_noise", c.ablate_use_dependent_noise);
        o.get("beta", c.ablate_beta);
        o.finish();
    }
    root.finish();
    c.validate();
    return c;
}

EncoderConfig RunConfig::encoder_config() const {
    EncoderConfig e;
    e.voxels = data.voxels;
    e.patch_size = patch_size;
    e.embed_dim = encoder_embed_dim;
    e.layers = encoder_layers;
    e.heads = encoder_heads;
    e.mlp_ratio = encoder_mlp_ratio;
    e.q = data.q;
    e.d = data.d;
    e.window = data.window;
    return e;
}

PatchConfig RunConfig::patch_config() const {
    PatchConfig p;
    p.patch_size = patch_size;
    p.embed_dim = patch_size;  // raw patch tokens; the encoder owns the projection
    p.pad_value = patch_pad_value;
    return p;
}

DenoiserConfig RunConfig::denoiser_config(int latent_channels) const {
    DenoiserConfig d;
    d.in_channels = latent_channels;
    d.base_channels = denoiser_base_channels;
    d.cond_tokens = data.q;
    d.cond_dim = data.d;
    d.heads = denoiser_heads;
    d.temporal_window = denoiser_temporal_window;
    d.time_dim = denoiser_time_dim;
    d.groups = denoiser_groups;
    return d;
}

ClassifierConfig RunConfig::classifier_config() const {
    ClassifierConfig cc = classifier;
    cc.categories = data.categories;
    cc.directions = data.directions;
    cc.height = data.height;
    cc.width = data.width;
    cc.frames = data.video_frames();
    return cc;
}

void RunConfig::validate() const {
    require(!run_name.empty() &&
                run_name.find_first_not_of(
                    "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789._-") ==
                    std::string::npos,
            ErrorKind::Config, "run_name must be non-empty and limited to [A-Za-z0-9._-]");
    data.validate();
    patch_config().validate();
    encoder_config().validate();
    pretrain.validate();
    phase1.validate();
    codec.validate();
    codec_train.validate();
    denoiser_config(codec.identity ? 3 : codec.latent_channels).validate();
    require(schedule_steps >= 2, ErrorKind::Config, "schedule.steps must be >= 2");
    phase2.validate();
    sample.validate();
    require(sample.ddim_steps <= schedule_steps, ErrorKind::Config,
            "sample.ddim_steps must be <= schedule.steps");
    classifier_config().validate();
    eval_image.validate(data.categories);
    eval_video.validate(data.categories * data.directions);
    require(interpret_max_windows >= 1, ErrorKind::Config, "interpret.max_windows must be >= 1");
    require(data.height % 4 == 0 && data.width % 4 == 0, ErrorKind::Config,
            "data.height and data.width must be divisible by 4 (latent downsampling)");

    auto grid = [](const std::vector<double>& g, const char* name, double lo, double hi) {
        require(!g.empty(), ErrorKind::Config, std::string("ablate.") + name + ": empty grid");
        for (double v : g) {
            require(std::isfinite(v) && v >= lo && v <= hi, ErrorKind::Config,
                    std::string("ablate.") + name + ": value out of range");
        }
    };
    grid(ablate_gamma_spa, "gamma_spa", 0.0, 1.0);
    grid(ablate_gamma_tem, "gamma_tem", 0.0, 1.0);
    grid(ablate_mu_spa, "mu_spa", 0.0, 1e9);
    grid(ablate_mu_tem, "mu_tem", 0.0, 1e9);
    grid(ablate_beta, "beta", 0.0, 1.0);
    for (double v : ablate_use_dependent_noise) {
        require(v == 0.0 || v == 1.0, ErrorKind::Config,
                "ablate.use_dependent_noise: values must be 0 or 1");
    }
}

std::string apply_overrides(const std::string& json_text,
                            const std::vector<std::string>& overrides) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const std::exception& e) {
        throw Error(ErrorKind::Config, std::string("config: invalid JSON: ") + e.what());
    }
    for (const std::string& ov : overrides) {
        const size_t eq = ov.find('=');
        require(eq != std::string::npos && eq > 0, ErrorKind::Config,
                "override must look like section.key=value: '" + ov + "'");
        std::string path = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        // flag spellings use dashes; config keys use underscores
        std::replace(path.begin(), path.end(), '-', '_');
        std::vector<std::string> parts;
        std::stringstream ss(path);
        std::string part;
        while (std::getline(ss, part, '.')) {
            require(!part.empty(), ErrorKind::Config, "override has an empty path segment: '" + ov + "'");
            parts.push_back(part);
        }
        json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
        if (parsed.is_discarded()) parsed = value;  // bare words are strings
        json* node = &doc;
        for (size_t i = 0; i + 1 < parts.size(); ++i) {
            json& next = (*node)[parts[i]];
            if (next.is_null()) next = json::object();
            require(next.is_object(), ErrorKind::Config,
                    "override '" + ov + "': '" + parts[i] + "' is not a config section");
            node = &next;
        }
        (*node)[parts.back()] = parsed;
    }
    return doc.dump(2) + "\n";
}

std::string resolve_run_root(const std::string& explicit_root) {
    if (!explicit_root.empty()) return explicit_root;
    if (const char* env = std::getenv("NEUROVID_RUN_ROOT"); env != nullptr && *env != '\0') {
        return env;
    }
    return "./runs";
}

// ---------------------------------------------------------------------------
// Stage framework

const std::vector<std::string> kPipelineStages = {
    "gen-data", "pretrain", "train-phase1", "train-phase2", "decode",
    "evaluate", "interpret", "ablate",      "report"};

namespace {

std::string stage_dir_name(const std::string& stage) {
    if (stage == "gen-data") return "data";
    if (stage == "train-phase1") return "phase1";
    if (stage == "train-phase2") return "phase2";
    return stage;
}

json config_slice(const json& full, std::initializer_list<const char*> keys) {
    json out = json::object();
    for (const char* k : keys) out[k] = full.at(k);
    return out;
}

// The part of the config a stage actually reads; its hash drives the
// skip-if-unchanged decision, so unrelated edits never invalidate a stage.
json stage_slice(const RunConfig& cfg, const std::string& stage) {
    const json full = json::parse(run_config_to_json(cfg));
    if (stage == "gen-data") return config_slice(full, {"data"});
    if (stage == "pretrain") return config_slice(full, {"data", "patch", "encoder", "pretrain"});
    if (stage == "train-phase1")
        return config_slice(full, {"data", "patch", "encoder", "augment", "phase1"});
    if (stage == "train-phase2")
        return config_slice(full, {"data", "patch", "encoder", "codec", "codec_train",
                                   "denoiser", "schedule", "phase2"});
    if (stage == "decode")
        return config_slice(full,
                            {"data", "patch", "encoder", "codec", "denoiser", "schedule", "sample"});
    if (stage == "evaluate") return config_slice(full, {"data", "classifier", "eval"});
    if (stage == "interpret") return config_slice(full, {"data", "patch", "encoder", "interpret"});
    if (stage == "ablate") return full;
    if (stage == "report") return config_slice(full, {"eval", "ablate"});
    throw Error(ErrorKind::Config, "unknown stage '" + stage + "'");
}

const std::vector<std::pair<std::string, std::string>> kDataFiles = {
    {"data/manifest.json", "gen-data"},
    {"data/train.nfta", "gen-data"},
    {"data/val.nfta", "gen-data"},
    {"data/test.nfta", "gen-data"},
    {"data/rois.nfta", "gen-data"},
};

// Required input artifacts per stage, each with the stage that produces it.
std::vector<std::pair<std::string, std::string>> stage_inputs(const std::string& stage) {
    std::vector<std::pair<std::string, std::string>> in;
    auto data = [&] { in.insert(in.end(), kDataFiles.begin(), kDataFiles.end()); };
    if (stage == "pretrain") {
        data();
    } else if (stage == "train-phase1") {
        data();
        in.push_back({"pretrain/encoder.nfta", "pretrain"});
    } else if (stage == "train-phase2") {
        data();
        in.push_back({"phase1/encoder.nfta", "train-phase1"});
    } else if (stage == "decode") {
        data();
        in.push_back({"phase1/encoder.nfta", "train-phase1"});
        in.push_back({"phase2/codec.nfta", "train-phase2"});
        in.push_back({"phase2/denoiser.nfta", "train-phase2"});
    } else if (stage == "evaluate") {
        data();
        in.push_back({"decode/decoded.nfta", "decode"});
        in.push_back({"decode/decoded_tavg.nfta", "decode"});
    } else if (stage == "interpret") {
        data();
        in.push_back({"pretrain/encoder_init.nfta", "pretrain"});
        in.push_back({"pretrain/encoder.nfta", "pretrain"});
        in.push_back({"phase1/encoder.nfta", "train-phase1"});
    } else if (stage == "ablate") {
        data();
        in.push_back({"pretrain/encoder_init.nfta", "pretrain"});
        in.push_back({"pretrain/encoder.nfta", "pretrain"});
        in.push_back({"phase1/encoder.nfta", "train-phase1"});
        in.push_back({"evaluate/classifier.nfta", "evaluate"});
        in.push_back({"evaluate/classifier_state.json", "evaluate"});
    } else if (stage == "report") {
        in.push_back({"evaluate/report.json", "evaluate"});
        in.push_back({"evaluate/metrics.csv", "evaluate"});
    }
    return in;
}

// Inputs picked up when present (hashed into the manifest) but not required.
std::vector<std::string> optional_stage_inputs(const std::string& stage) {
    if (stage == "report") return {"ablate/ablate.csv"};
    return {};
}

std::string slurp_if_exists(const fs::path& p) {
    if (!fs::exists(p)) return {};
    return read_file(p.string());
}

void append_manifest_line(const fs::path& run_dir, const json& line) {
    std::ofstream out(run_dir / "manifest.jsonl", std::ios::app | std::ios::binary);
    require(out.good(), ErrorKind::Io, "cannot open manifest for append");
    out << line.dump() << "\n";
    require(out.good(), ErrorKind::Io, "manifest append failed");
}

// -------------------------------------------------------------------------
// Shared stage helpers

std::vector<FmriWindow> split_windows(const std::vector<SynthSample>& split,
                                      const RunConfig& cfg) {
    const PatchConfig pc = cfg.patch_config();
    std::vector<FmriWindow> out;
    out.reserve(split.size());
    for (const SynthSample& s : split) {
        auto ws = make_windows(s.fmri, cfg.data.window, 1, pc);
        require(ws.size() == 1, ErrorKind::Validation,
                "sample does not reduce to exactly one fMRI window");
        out.push_back(std::move(ws[0]));
    }
    return out;
}

Encoder load_encoder(const RunConfig& cfg, const fs::path& checkpoint) {
    Encoder enc(cfg.encoder_config(), cfg.encoder_seed);
    enc.load(archive_read(checkpoint.string()));
    return enc;
}

std::vector<std::vector<uint8_t>> clip_to_rgb8(const Tensor& clip) {
    require(clip.shape.size() == 4 && clip.shape[1] == 3, ErrorKind::Validation,
            "preview expects a [m, 3, H, W] clip");
    const int64_t m = clip.shape[0], h = clip.shape[2], w = clip.shape[3];
    std::vector<std::vector<uint8_t>> frames(static_cast<size_t>(m));
    for (int64_t f = 0; f < m; ++f) {
        auto& img = frames[static_cast<size_t>(f)];
        img.resize(static_cast<size_t>(h * w * 3));
        for (int64_t y = 0; y < h; ++y) {
            for (int64_t x = 0; x < w; ++x) {
                for (int64_t ch = 0; ch < 3; ++ch) {
                    const float v = clip.at({f, ch, y, x});
                    const double scaled = std::lround(std::clamp(static_cast<double>(v), 0.0, 1.0) * 255.0);
                    img[static_cast<size_t>((y * w + x) * 3 + ch)] = static_cast<uint8_t>(scaled);
                }
            }
        }
    }
    return frames;
}

json nway_result_json(const NwayResult& r) {
    return json{{"n", r.n},
                {"k", r.k},
                {"trials", r.trials},
                {"accuracy", r.accuracy},
                {"stderr", r.stderr_est}};
}

// -------------------------------------------------------------------------
// Stage bodies. Each returns the run-dir-relative paths of its outputs.

std::vector<std::string> stage_gen_data(const RunConfig& cfg, const fs::path& run_dir) {
    SynthDataset ds = generate_dataset(cfg.data);
    save_dataset((run_dir / "data").string(), ds);
    std::vector<std::string> out;
    for (const auto& [rel, stage] : kDataFiles) out.push_back(rel);
    return out;
}

std::vector<std::string> stage_pretrain(const RunConfig& cfg, const fs::path& run_dir,
                                        const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());
    Encoder enc(cfg.encoder_config(), cfg.encoder_seed);
    NamedTensors init;
    enc.save(init);
    archive_write((stage_dir / "encoder_init.nfta").string(), init);

    const auto windows = split_windows(ds.train, cfg);
    const std::vector<double> losses = mae_pretrain(enc, windows, cfg.pretrain);

    NamedTensors trained;
    enc.save(trained);
    archive_write((stage_dir / "encoder.nfta").string(), trained);

    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < losses.size(); ++i) {
        rows.push_back({std::to_string(i), fmt_double(losses[i])});
    }
    write_csv((stage_dir / "loss.csv").string(), {"step", "loss"}, rows);
    return {"pretrain/encoder_init.nfta", "pretrain/encoder.nfta", "pretrain/loss.csv"};
}

std::vector<std::string> stage_train_phase1(const RunConfig& cfg, const fs::path& run_dir,
                                            const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());
    Encoder enc = load_encoder(cfg, run_dir / "pretrain/encoder.nfta");

    const auto windows = split_windows(ds.train, cfg);
    std::vector<Tensor> e_txt, e_img;
    for (const SynthSample& s : ds.train) {
        e_txt.push_back(s.e_txt);
        e_img.push_back(s.e_img);
    }
    const auto log = train_phase1(enc, windows, e_txt, e_img, cfg.phase1);

    NamedTensors trained;
    enc.save(trained);
    archive_write((stage_dir / "encoder.nfta").string(), trained);

    std::vector<std::vector<std::string>> rows;
    for (const Phase1LogRow& r : log) {
        rows.push_back({std::to_string(r.step), fmt_double(r.spa), fmt_double(r.tem),
                        fmt_double(r.emb), fmt_double(r.total)});
    }
    write_csv((stage_dir / "log.csv").string(), {"step", "spa", "tem", "emb", "total"}, rows);

    // within-batch retrieval on the validation split, the phase-1 health check
    const auto val_windows = split_windows(ds.val, cfg);
    std::vector<Tensor> val_targets;
    for (const SynthSample& s : ds.val) val_targets.push_back(s.e_img);
    std::vector<std::vector<size_t>> batches;
    const size_t bs = static_cast<size_t>(cfg.phase1.batch_size);
    for (size_t at = 0; at < val_windows.size(); at += bs) {
        std::vector<size_t> batch;
        for (size_t i = at; i < std::min(at + bs, val_windows.size()); ++i) batch.push_back(i);
        if (batch.size() >= 2) batches.push_back(std::move(batch));
    }
    json retr{{"top1", batches.empty() ? 0.0
                                       : retrieval_top1(enc, val_windows, val_targets, batches)},
              {"batch_size", cfg.phase1.batch_size},
              {"batches", batches.size()},
              {"items", val_windows.size()}};
    write_file_atomic((stage_dir / "retrieval.json").string(), retr.dump(2) + "\n");
    return {"phase1/encoder.nfta", "phase1/log.csv", "phase1/retrieval.json"};
}

std::vector<std::string> stage_train_phase2(const RunConfig& cfg, const fs::path& run_dir,
                                            const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());
    Encoder enc = load_encoder(cfg, run_dir / "phase1/encoder.nfta");

    std::vector<Tensor> train_videos;
    train_videos.reserve(ds.train.size());
    for (const SynthSample& s : ds.train) train_videos.push_back(video_to_chw(s.video));

    Codec codec(cfg.codec, cfg.codec_train.seed);
    std::vector<std::string> outputs = {"phase2/codec.nfta", "phase2/denoiser.nfta",
                                        "phase2/log.csv"};
    if (!cfg.codec.identity) {
        const std::vector<double> closs = codec.train(train_videos, cfg.codec_train);
        std::vector<std::vector<std::string>> rows;
        for (size_t i = 0; i < closs.size(); ++i) {
            rows.push_back({std::to_string(i), fmt_double(closs[i])});
        }
        write_csv((stage_dir / "codec_loss.csv").string(), {"step", "loss"}, rows);
        outputs.push_back("phase2/codec_loss.csv");
    }
    NamedTensors ct;
    codec.save(ct);
    archive_write((stage_dir / "codec.nfta").string(), ct);

    const auto windows = split_windows(ds.train, cfg);
    std::vector<LatentVideo> latents;
    std::vector<Tensor> conditions;
    latents.reserve(train_videos.size());
    conditions.reserve(train_videos.size());
    for (size_t i = 0; i < train_videos.size(); ++i) {
        latents.push_back(codec.encode(train_videos[i]));
        conditions.push_back(enc.embed_eval(windows[i]));
    }

    const NoiseSchedule sched = make_schedule(cfg.schedule_steps, cfg.schedule_kind);
    Denoiser den(cfg.denoiser_config(codec.latent_channels()), cfg.denoiser_seed);
    const auto log = train_phase2(den, latents, conditions, sched, cfg.phase2);

    NamedTensors dt;
    den.save(dt);
    archive_write((stage_dir / "denoiser.nfta").string(), dt);

    std::vector<std::vector<std::string>> rows;
    for (const Phase2LogRow& r : log) {
        rows.push_back({std::to_string(r.step), fmt_double(r.loss)});
    }
    write_csv((stage_dir / "log.csv").string(), {"step", "loss"}, rows);
    return outputs;
}

std::vector<std::string> stage_decode(const RunConfig& cfg, const fs::path& run_dir,
                                      const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());
    Encoder enc = load_encoder(cfg, run_dir / "phase1/encoder.nfta");
    Codec codec(cfg.codec, cfg.codec_train.seed);
    codec.load(archive_read((run_dir / "phase2/codec.nfta").string()));
    Denoiser den(cfg.denoiser_config(codec.latent_channels()), cfg.denoiser_seed);
    den.load(archive_read((run_dir / "phase2/denoiser.nfta").string()));
    const NoiseSchedule sched = make_schedule(cfg.schedule_steps, cfg.schedule_kind);

    const auto windows = split_windows(ds.test, cfg);
    const auto tavg = time_average_control(windows);
    const std::vector<int64_t> frame_shape = {codec.latent_channels(), cfg.data.height / 4,
                                              cfg.data.width / 4};
    const int frames = cfg.data.video_frames();

    NamedTensors dec, dec_tavg;
    const Rng root(cfg.sample_seed);
    for (size_t i = 0; i < windows.size(); ++i) {
        const std::string name = "clip." + std::to_string(i);
        // identical noise streams for both variants: the only difference
        // between decoded and the control is the conditioning
        Rng r_full = root.child("clip").child(i);
        Rng r_ctrl = root.child("clip").child(i);
        const Tensor cond = enc.embed_eval(windows[i]);
        const Tensor cond_ctrl = enc.embed_eval(tavg[i]);
        dec.add(name, codec.decode(sample(den, cond, sched, frame_shape, frames, cfg.sample, r_full)));
        dec_tavg.add(name, codec.decode(
                               sample(den, cond_ctrl, sched, frame_shape, frames, cfg.sample, r_ctrl)));
    }
    archive_write((stage_dir / "decoded.nfta").string(), dec);
    archive_write((stage_dir / "decoded_tavg.nfta").string(), dec_tavg);

    write_gif((stage_dir / "preview_decoded.gif").string(), cfg.data.height, cfg.data.width,
              clip_to_rgb8(dec.get("clip.0")), 12);
    write_gif((stage_dir / "preview_gt.gif").string(), cfg.data.height, cfg.data.width,
              clip_to_rgb8(video_to_chw(ds.test.at(0).video)), 12);
    return {"decode/decoded.nfta", "decode/decoded_tavg.nfta", "decode/preview_decoded.gif",
            "decode/preview_gt.gif"};
}

std::vector<std::string> stage_evaluate(const RunConfig& cfg, const fs::path& run_dir,
                                        const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());

    // train-or-load the frozen scoring instrument; the cache key covers
    // everything its behavior depends on
    const json full = json::parse(run_config_to_json(cfg));
    const std::string cache_key = sha256_hex(config_slice(full, {"data", "classifier"}).dump());
    const fs::path clf_path = stage_dir / "classifier.nfta";
    const fs::path clf_state_path = stage_dir / "classifier_state.json";
    SceneClassifier clf(cfg.classifier_config(), cfg.classifier_init_seed);
    double cat_acc = -1.0, dir_acc = -1.0;
    bool cached = false;
    if (fs::exists(clf_path) && fs::exists(clf_state_path)) {
        const json st = json::parse(read_file(clf_state_path.string()), nullptr, false);
        if (!st.is_discarded() && st.value("key", "") == cache_key) {
            clf.load(archive_read(clf_path.string()));
            cat_acc = st.value("cat_acc", -1.0);
            dir_acc = st.value("dir_acc", -1.0);
            cached = true;
        }
    }
    if (!cached) {
        const auto acc = clf.train(cfg.data);
        cat_acc = acc.first;
        dir_acc = acc.second;
        NamedTensors t;
        clf.save(t);
        archive_write(clf_path.string(), t);
        const json st{{"key", cache_key},
                      {"cat_acc", cat_acc},
                      {"dir_acc", dir_acc},
                      {"content_hash", clf.content_hash()}};
        write_file_atomic(clf_state_path.string(), st.dump(2) + "\n");
    }
    const FrameScorer scorer = make_scorer(clf);

    const size_t n = ds.test.size();
    auto load_clips = [&](const char* file) {
        const NamedTensors arc = archive_read((run_dir / "decode" / file).string());
        require(arc.size() == n, ErrorKind::Validation,
                std::string(file) + " does not match the test split size");
        std::vector<Tensor> clips;
        clips.reserve(n);
        for (size_t i = 0; i < n; ++i) clips.push_back(arc.get("clip." + std::to_string(i)));
        return clips;
    };
    const std::vector<Tensor> decoded = load_clips("decoded.nfta");
    const std::vector<Tensor> decoded_tavg = load_clips("decoded_tavg.nfta");

    std::vector<Tensor> gt;
    std::vector<std::pair<int, int>> labels;
    for (const SynthSample& s : ds.test) {
        gt.push_back(video_to_chw(s.video));
        labels.push_back({s.category(), s.direction()});
    }

    EvalConfig ec;
    ec.image = cfg.eval_image;
    ec.video = cfg.eval_video;
    ec.seed = cfg.eval_seed;
    ec.checkpoint = sha256_file((run_dir / "decode/decoded.nfta").string()).substr(0, 16);

    std::vector<std::vector<std::string>> rows, rows_tavg;
    const MetricReport rep = evaluate_run(decoded, gt, labels, scorer, ec, &rows);
    EvalConfig ec_tavg = ec;  // same seed: the N-way trials are paired
    ec_tavg.checkpoint = sha256_file((run_dir / "decode/decoded_tavg.nfta").string()).substr(0, 16);
    const MetricReport rep_tavg = evaluate_run(decoded_tavg, gt, labels, scorer, ec_tavg, &rows_tavg);

    write_csv((stage_dir / "metrics.csv").string(), kMetricCsvHeader, rows);
    write_csv((stage_dir / "metrics_tavg.csv").string(), kMetricCsvHeader, rows_tavg);

    // paired one-sided comparison on per-clip video accuracy: does the real
    // temporal structure in the window beat its time-averaged control?
    auto per_clip_vid = [n](const std::vector<std::vector<std::string>>& rs) {
        std::vector<double> acc(n, 0.0);
        std::vector<bool> seen(n, false);
        for (const auto& r : rs) {
            const size_t c = static_cast<size_t>(std::stoul(r[0]));
            if (!seen.at(c)) {
                acc[c] = std::stod(r[4]);
                seen[c] = true;
            }
        }
        return acc;
    };
    const std::vector<double> vid_full = per_clip_vid(rows);
    const std::vector<double> vid_ctrl = per_clip_vid(rows_tavg);
    std::vector<double> diff(n);
    for (size_t i = 0; i < n; ++i) diff[i] = vid_full[i] - vid_ctrl[i];
    const TTestResult tt = ttest_one_sample(diff, 0.0);
    const double p_one_sided = tt.t_stat > 0.0 ? tt.p_value / 2.0 : 1.0 - tt.p_value / 2.0;

    const json report{
        {"ssim_mean", rep.ssim_mean},
        {"nway_image", nway_result_json(rep.nway_image)},
        {"nway_video", nway_result_json(rep.nway_video)},
        {"tavg",
         {{"ssim_mean", rep_tavg.ssim_mean},
          {"nway_image", nway_result_json(rep_tavg.nway_image)},
          {"nway_video", nway_result_json(rep_tavg.nway_video)}}},
        {"paired_time_average",
         {{"mean_diff", tt.mean_a}, {"t", tt.t_stat}, {"p_one_sided", p_one_sided}, {"n", n}}},
        {"classifier", {{"hash", scorer.hash}, {"cat_acc", cat_acc}, {"dir_acc", dir_acc}}},
        {"seed", cfg.eval_seed},
        {"checkpoint", ec.checkpoint}};
    write_file_atomic((stage_dir / "report.json").string(), report.dump(2) + "\n");
    return {"evaluate/classifier.nfta", "evaluate/classifier_state.json", "evaluate/metrics.csv",
            "evaluate/metrics_tavg.csv", "evaluate/report.json"};
}

std::vector<std::string> stage_interpret(const RunConfig& cfg, const fs::path& run_dir,
                                         const fs::path& stage_dir) {
    SynthDataset ds = load_dataset((run_dir / "data").string());
    auto windows = split_windows(ds.test, cfg);
    if (windows.size() > static_cast<size_t>(cfg.interpret_max_windows)) {
        windows.resize(static_cast<size_t>(cfg.interpret_max_windows));
    }
    const std::vector<AttnLayer> layers = {AttnLayer::First, AttnLayer::Middle, AttnLayer::Last};
    const std::vector<std::pair<TrainStage, const char*>> checkpoints = {
        {TrainStage::Init, "pretrain/encoder_init.nfta"},
        {TrainStage::PostMae, "pretrain/encoder.nfta"},
        {TrainStage::PostContrastive, "phase1/encoder.nfta"},
    };

    std::vector<AttentionSummary> all;
    for (const auto& [stage_tag, rel] : checkpoints) {
        const Encoder enc = load_encoder(cfg, run_dir / rel);
        auto sums = summarize(enc, windows, layers, stage_tag, cfg.interpret_row_mean);
        all.insert(all.end(), sums.begin(), sums.end());
    }
    save_summaries((stage_dir / "summaries.nfta").string(), all);

    std::vector<std::string> outputs = {"interpret/summaries.nfta", "interpret/stats.csv"};
    for (const AttentionSummary& s : all) {
        const std::string file =
            "heatmap_" + to_string(s.stage) + "_" + to_string(s.layer) + ".png";
        export_heatmap(s, ds.rois, (stage_dir / file).string());
        outputs.push_back("interpret/" + file);
        outputs.push_back("interpret/" + file + ".json");
    }

    const std::vector<AttentionSummary> baseline(all.begin(), all.begin() + layers.size());
    const std::vector<AttentionSummary> current(all.begin() + layers.size(), all.end());
    write_csv((stage_dir / "stats.csv").string(), kRoiStatsCsvHeader,
              stage_comparison_rows(current, baseline, ds.rois));
    return outputs;
}

StageResult run_stage_in(const RunConfig& cfg, const fs::path& run_dir, const std::string& stage,
                         bool force);

// Copies an already-computed stage directory (state file included) into an
// ablation sub-run so its stages skip instead of recomputing.
void seed_stage_copy(const fs::path& parent_dir, const fs::path& sub_dir,
                     const std::string& dir_name, bool force) {
    const fs::path src = parent_dir / dir_name;
    const fs::path dst = sub_dir / dir_name;
    if (!fs::exists(src)) return;
    bool need = force || !fs::exists(dst);
    if (!need) {
        const std::string a = slurp_if_exists(src / ".stage.json");
        const std::string b = slurp_if_exists(dst / ".stage.json");
        need = a.empty() || a != b;
    }
    if (need) {
        fs::remove_all(dst);
        fs::copy(src, dst, fs::copy_options::recursive);
    }
}

void seed_manifest(const fs::path& parent_dir, const fs::path& sub_dir,
                   const std::vector<std::string>& stages, bool force) {
    const fs::path dst = sub_dir / "manifest.jsonl";
    if (fs::exists(dst) && !force) return;
    std::map<std::string, json> last;  // latest manifest line per copied stage
    for (const std::string& line : read_manifest(parent_dir.string())) {
        const json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) continue;
        const std::string s = j.value("stage", "");
        if (std::find(stages.begin(), stages.end(), s) != stages.end()) last[s] = j;
    }
    std::string out;
    for (const std::string& s : stages) {
        if (last.count(s) > 0) out += last[s].dump() + "\n";
    }
    write_file_atomic(dst.string(), out);
}

std::vector<std::string> stage_ablate(const RunConfig& cfg, const fs::path& run_dir,
                                      const fs::path& stage_dir, bool force) {
    struct Axis {
        const char* name;
        const std::vector<double>* grid;
        bool phase2_only;  // phase-1 artifacts stay valid along this axis
    };
    const std::vector<Axis> axes = {
        {"gamma_spa", &cfg.ablate_gamma_spa, false},
        {"gamma_tem", &cfg.ablate_gamma_tem, false},
        {"mu_spa", &cfg.ablate_mu_spa, false},
        {"mu_tem", &cfg.ablate_mu_tem, false},
        {"use_dependent_noise", &cfg.ablate_use_dependent_noise, true},
        {"beta", &cfg.ablate_beta, true},
    };
    const std::vector<std::string> sub_stages = {"gen-data",     "pretrain", "train-phase1",
                                                 "train-phase2", "decode",   "evaluate"};

    std::vector<std::vector<std::string>> rows;
    for (const Axis& axis : axes) {
        for (double value : *axis.grid) {
            RunConfig sub = cfg;
            if (std::string(axis.name) == "gamma_spa") {
                sub.phase1.augment.gamma_spa = static_cast<float>(value);
            } else if (std::string(axis.name) == "gamma_tem") {
                sub.phase1.augment.gamma_tem = static_cast<float>(value);
            } else if (std::string(axis.name) == "mu_spa") {
                sub.phase1.mu_spa = value;
            } else if (std::string(axis.name) == "mu_tem") {
                sub.phase1.mu_tem = value;
            } else if (std::string(axis.name) == "use_dependent_noise") {
                sub.phase2.use_dependent_noise = value != 0.0;
                if (value == 0.0) sub.sample.beta = 0.0;  // i.i.d. prior at sampling time too
            } else {
                sub.phase2.beta = value;  // one ratio for corruption and for the prior
                sub.sample.beta = value;
            }

            const fs::path sub_dir =
                stage_dir / (std::string(axis.name) + "=" + fmt_double(value));
            fs::create_directories(sub_dir);

            std::vector<std::string> reused = {"gen-data", "pretrain"};
            std::vector<std::string> reused_dirs = {"data", "pretrain"};
            if (axis.phase2_only) {
                reused.push_back("train-phase1");
                reused_dirs.push_back("phase1");
            }
            for (const std::string& d : reused_dirs) seed_stage_copy(run_dir, sub_dir, d, force);
            seed_manifest(run_dir, sub_dir, reused, force);
            // reuse the scoring instrument: it only depends on data + classifier config
            fs::create_directories(sub_dir / "evaluate");
            for (const char* f : {"classifier.nfta", "classifier_state.json"}) {
                const fs::path src = run_dir / "evaluate" / f;
                const fs::path dst = sub_dir / "evaluate" / f;
                if (fs::exists(src) &&
                    (force || !fs::exists(dst) ||
                     slurp_if_exists(src) != slurp_if_exists(dst))) {
                    fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
                }
            }

            for (const std::string& s : sub_stages) run_stage_in(sub, sub_dir, s, force);

            const json rep = json::parse(read_file((sub_dir / "evaluate/report.json").string()));
            rows.push_back({axis.name, fmt_double(value),
                            fmt_double(sub.phase1.augment.gamma_spa),
                            fmt_double(sub.phase1.augment.gamma_tem), fmt_double(sub.phase1.mu_spa),
                            fmt_double(sub.phase1.mu_tem),
                            sub.phase2.use_dependent_noise ? "1" : "0",
                            fmt_double(sub.phase2.beta), fmt_double(rep.at("ssim_mean")),
                            fmt_double(rep.at("nway_image").at("accuracy")),
                            fmt_double(rep.at("nway_video").at("accuracy"))});
        }
    }
    write_csv((stage_dir / "ablate.csv").string(),
              {"axis", "value", "gamma_spa", "gamma_tem", "mu_spa", "mu_tem",
               "use_dependent_noise", "beta", "ssim_mean", "img_nway_acc", "vid_nway_acc"},
              rows);
    return {"ablate/ablate.csv"};
}

std::vector<std::string> stage_report(const RunConfig& cfg, const fs::path& run_dir,
                                      const fs::path& stage_dir) {
    const json rep = json::parse(read_file((run_dir / "evaluate/report.json").string()));

    std::vector<std::vector<std::string>> rows;
    const std::vector<std::string> header = {"axis",  "value",     "gamma_spa",
                                             "gamma_tem", "mu_spa", "mu_tem",
                                             "use_dependent_noise", "beta", "ssim_mean",
                                             "img_nway_acc", "vid_nway_acc"};
    rows.push_back({"default", "", fmt_double(cfg.phase1.augment.gamma_spa),
                    fmt_double(cfg.phase1.augment.gamma_tem), fmt_double(cfg.phase1.mu_spa),
                    fmt_double(cfg.phase1.mu_tem), cfg.phase2.use_dependent_noise ? "1" : "0",
                    fmt_double(cfg.phase2.beta), fmt_double(rep.at("ssim_mean")),
                    fmt_double(rep.at("nway_image").at("accuracy")),
                    fmt_double(rep.at("nway_video").at("accuracy"))});
    const fs::path ablate_csv = run_dir / "ablate/ablate.csv";
    const bool have_ablate = fs::exists(ablate_csv);
    if (have_ablate) {
        const auto parsed = parse_csv(read_file(ablate_csv.string()));
        for (size_t i = 1; i < parsed.size(); ++i) rows.push_back(parsed[i]);  // skip header
    }
    write_csv((stage_dir / "report.csv").string(), header, rows);

    std::ostringstream md;
    md << "# Run report: " << cfg.run_name << "\n\n";
    md << "## Decoding metrics\n\n";
    md << "| metric | value |\n|---|---|\n";
    const json& ni = rep.at("nway_image");
    const json& nv = rep.at("nway_video");
    md << "| SSIM (mean over decoded frames) | " << fmt_double(rep.at("ssim_mean")) << " |\n";
    md << "| " << ni.at("n").get<int>() << "-way top-" << ni.at("k").get<int>()
       << " image accuracy | " << fmt_double(ni.at("accuracy")) << " ± "
       << fmt_double(ni.at("stderr")) << " |\n";
    md << "| " << nv.at("n").get<int>() << "-way top-" << nv.at("k").get<int>()
       << " video accuracy | " << fmt_double(nv.at("accuracy")) << " ± "
       << fmt_double(nv.at("stderr")) << " |\n";
    const json& tavg = rep.at("tavg");
    md << "| video accuracy, time-averaged control | "
       << fmt_double(tavg.at("nway_video").at("accuracy")) << " |\n";
    const json& paired = rep.at("paired_time_average");
    md << "| paired control test (one-sided) | t = " << fmt_double(paired.at("t"))
       << ", p = " << fmt_double(paired.at("p_one_sided")) << " |\n\n";
    md << "## Ablation grid\n\n";
    if (have_ablate) {
        md << "| " ;
        for (size_t i = 0; i < header.size(); ++i) md << header[i] << (i + 1 < header.size() ? " | " : " |\n");
        md << "|";
        for (size_t i = 0; i < header.size(); ++i) md << "---|";
        md << "\n";
        for (const auto& r : rows) {
            md << "| ";
            for (size_t i = 0; i < r.size(); ++i) md << r[i] << (i + 1 < r.size() ? " | " : " |\n");
        }
    } else {
        md << "The ablate stage has not run; only the default configuration is listed in "
              "report.csv.\n";
    }
    write_file_atomic((stage_dir / "report.md").string(), md.str());
    return {"report/report.csv", "report/report.md"};
}

// -------------------------------------------------------------------------
// Driver

StageResult run_stage_in(const RunConfig& cfg, const fs::path& run_dir, const std::string& stage,
                         bool force) {
    require(std::find(kPipelineStages.begin(), kPipelineStages.end(), stage) !=
                kPipelineStages.end(),
            ErrorKind::Config, "unknown stage '" + stage + "'");
    const fs::path stage_dir = run_dir / stage_dir_name(stage);
    const std::string config_hash = sha256_hex(stage_slice(cfg, stage).dump());

    std::map<std::string, std::string> input_hashes;
    for (const auto& [rel, producer] : stage_inputs(stage)) {
        const fs::path p = run_dir / rel;
        if (!fs::exists(p)) {
            throw Error(ErrorKind::Dependency, "stage '" + stage + "' is missing input '" + rel +
                                                   "'; run stage '" + producer + "' first");
        }
        input_hashes[rel] = sha256_file(p.string());
    }
    for (const std::string& rel : optional_stage_inputs(stage)) {
        const fs::path p = run_dir / rel;
        if (fs::exists(p)) input_hashes[rel] = sha256_file(p.string());
    }

    StageResult res;
    res.stage = stage;

    const fs::path state_path = stage_dir / ".stage.json";
    if (!force && fs::exists(state_path)) {
        const json st = json::parse(slurp_if_exists(state_path), nullptr, false);
        if (!st.is_discarded() && st.value("config_hash", "") == config_hash &&
            st.value("inputs", json::object()) == json(input_hashes)) {
            const json outs = st.value("outputs", json::object());
            bool outputs_ok = true;
            for (const auto& [rel, hash] : outs.items()) {
                const fs::path p = run_dir / rel;
                if (!fs::exists(p) || sha256_file(p.string()) != hash.get<std::string>()) {
                    outputs_ok = false;
                    break;
                }
            }
            if (outputs_ok) {
                res.skipped = true;
                for (const auto& [rel, hash] : outs.items()) res.outputs.push_back(rel);
                return res;
            }
        }
    }

    fs::create_directories(stage_dir);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outputs;
    if (stage == "gen-data") {
        outputs = stage_gen_data(cfg, run_dir);
    } else if (stage == "pretrain") {
        outputs = stage_pretrain(cfg, run_dir, stage_dir);
    } else if (stage == "train-phase1") {
        outputs = stage_train_phase1(cfg, run_dir, stage_dir);
    } else if (stage == "train-phase2") {
        outputs = stage_train_phase2(cfg, run_dir, stage_dir);
    } else if (stage == "decode") {
        outputs = stage_decode(cfg, run_dir, stage_dir);
    } else if (stage == "evaluate") {
        outputs = stage_evaluate(cfg, run_dir, stage_dir);
    } else if (stage == "interpret") {
        outputs = stage_interpret(cfg, run_dir, stage_dir);
    } else if (stage == "ablate") {
        outputs = stage_ablate(cfg, run_dir, stage_dir, force);
    } else {
        outputs = stage_report(cfg, run_dir, stage_dir);
    }
    res.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                      .count();
    res.outputs = outputs;

    std::map<std::string, std::string> output_hashes;
    for (const std::string& rel : outputs) {
        output_hashes[rel] = sha256_file((run_dir / rel).string());
    }
    const json state{
        {"config_hash", config_hash}, {"inputs", input_hashes}, {"outputs", output_hashes}};
    write_file_atomic(state_path.string(), state.dump(2) + "\n");
    append_manifest_line(run_dir, json{{"stage", stage},
                                       {"config_hash", config_hash},
                                       {"inputs", input_hashes},
                                       {"outputs", output_hashes},
                                       {"wall_ms", res.wall_ms}});
    return res;
}

}  // namespace

StageResult run_stage(const RunConfig& cfg, const std::string& run_root, const std::string& stage,
                      bool force) {
    cfg.validate();
    const fs::path run_dir = fs::path(resolve_run_root(run_root)) / cfg.run_name;
    fs::create_directories(run_dir);
    return run_stage_in(cfg, run_dir, stage, force);
}

std::vector<StageResult> run_all(const RunConfig& cfg, const std::string& run_root, bool force) {
    std::vector<StageResult> out;
    for (const std::string& stage : kPipelineStages) {
        if (stage == "ablate") continue;  // the grid is expensive; run it explicitly
        out.push_back(run_stage(cfg, run_root, stage, force));
    }
    return out;
}

std::vector<std::string> read_manifest(const std::string& run_dir) {
    const fs::path p = fs::path(run_dir) / "manifest.jsonl";
    std::vector<std::string> lines;
    if (!fs::exists(p)) return lines;
    std::stringstream ss(read_file(p.string()));
    std::string line;
    while (std::getline(ss, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

}  // namespace neurovid
