#pragma once

#include <array>
#include <string>
#include <vector>

#include "neurovid/fmri.hpp"
#include "neurovid/rng.hpp"
#include "neurovid/tensor.hpp"

namespace neurovid {

enum class ShapeKind { Circle, Square, Bar };

// One rendered scene: a colored shape moving linearly. category_id encodes
// (shape kind, hue); direction_id picks the motion axis.
struct SceneSpec {
    int category_id = 0;
    int direction_id = 0;
    ShapeKind shape_kind = ShapeKind::Circle;
    std::array<float, 3> color{1, 1, 1};
    std::array<float, 2> start{0, 0};     // px, at video frame 0
    std::array<float, 2> velocity{0, 0};  // px per video frame
};

struct SynthSample {
    int sample_id = 0;
    int subject_id = 0;
    SceneSpec scene;
    Tensor video;                  // [F, H, W, 3] in [0,1]
    std::vector<FmriFrame> fmri;   // one frame per fMRI period
    Tensor e_txt, e_img;           // [q, d], unit-norm rows

    int category() const { return scene.category_id; }
    int direction() const { return scene.direction_id; }
};

// Disjoint named voxel masks; the union may leave voxels unassigned.
struct RoiLayout {
    std::vector<std::pair<std::string, std::vector<uint8_t>>> masks;

    const std::vector<uint8_t>& mask(const std::string& name) const;
    bool contains(const std::string& name) const;
    std::vector<std::string> names() const;
};

struct SynthConfig {
    int n_train = 480;
    int n_val = 96;
    int n_test = 120;
    int categories = 51;  // 3 shape kinds x 17 hues
    int directions = 4;
    int voxels = 128;
    int height = 32;
    int width = 32;
    int window = 2;          // fMRI frames per sample
    int frames_per_fmri = 6;  // video frames per fMRI period
    int lag = 1;             // hemodynamic delay, in fMRI periods
    float noise_sigma = 0.1f;
    float overlap_target = 0.56f;  // train/test category-set overlap
    int q = 8;
    int d = 16;
    uint64_t seed = 0;

    int video_frames() const { return window * frames_per_fmri; }
    void validate() const;
};

struct SynthDataset {
    SynthConfig config;
    RoiLayout rois;
    std::vector<SynthSample> train, val, test;
};

// Deterministic scene construction for a (category, direction) pair. The
// start position is a fixed per-pair anchor plus <=1px jitter, so the
// conditional mean video given (category, direction) stays sharp.
SceneSpec make_scene(int category, int direction, const SynthConfig& cfg, Rng rng);

// Renders frames [first_frame, first_frame + n_frames) of a scene. Frame
// indices may be negative (the trajectory extends before the clip so lagged
// fMRI periods are well defined).
Tensor render_video(const SceneSpec& scene, int first_frame, int n_frames, int height, int width);

RoiLayout make_roi_layout(int voxels);

SynthDataset generate_dataset(const SynthConfig& cfg);

// |categories(a) ∩ categories(b)| / |categories(a) ∪ categories(b)|.
double semantic_overlap(const std::vector<SynthSample>& a, const std::vector<SynthSample>& b);

// Dataset persistence: one archive per split plus rois.nfta and
// manifest.json under `dir`.
void save_dataset(const std::string& dir, const SynthDataset& ds);
SynthDataset load_dataset(const std::string& dir);

// Scene feature vector (category one-hot, color, mean position of a lagged
// period); exposed for the linear-decodability oracle in tests.
std::vector<double> scene_features(const SceneSpec& scene, int period, const SynthConfig& cfg);

}  // namespace neurovid
