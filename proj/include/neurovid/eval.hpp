#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "neurovid/archive.hpp"
#include "neurovid/autograd.hpp"
#include "neurovid/fmri.hpp"
#include "neurovid/rng.hpp"
#include "neurovid/synthdata.hpp"
#include "neurovid/tensor.hpp"

namespace neurovid {

// [F, H, W, 3] (renderer layout) <-> [F, 3, H, W] (model layout).
Tensor video_to_chw(const Tensor& video);
Tensor video_to_hwc(const Tensor& video);

// Structural similarity over [c, H, W] images in [0,1]: 11x11 Gaussian
// window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, averaged over valid window
// positions and channels. Requires H, W >= 11.
double ssim(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// N-way top-K

struct NwayConfig {
    int n = 50;
    int k = 1;
    int trials = 100;
    void validate(int classes) const;
};

// Per trial: the ground-truth class plus n-1 distinct distractors drawn
// uniformly; success iff the ground truth ranks in the top k of `probs`
// restricted to the candidates. Ties are broken by a per-trial shuffle, so a
// constant classifier scores k/n in expectation.
double nway_topk(const std::vector<double>& probs, int gt_class, const NwayConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Stand-in classifiers (trained, frozen, content-hashed)

struct ClassifierConfig {
    int categories = 51;
    int directions = 4;
    int height = 32;
    int width = 32;
    int frames = 12;
    int hidden = 12;
    int train_clips_per_combo = 3;
    int val_clips_per_combo = 1;
    int steps = 1500;
    int batch = 16;
    double lr = 2e-3;
    double blur_prob = 0.5;    // 4x block-average augmentation (decode-like blur)
    double noise_sigma = 0.02;
    double gate = 0.9;         // required validation accuracy per head
    uint64_t seed = 0;
    void validate() const;
};

// Two conv heads over rendered scenes: a category head on single frames and a
// direction head on the mean consecutive frame difference. Video classes are
// the (category, direction) pairs, indexed category * directions + direction.
class SceneClassifier {
  public:
    SceneClassifier(ClassifierConfig cfg, uint64_t seed);

    const ClassifierConfig& config() const { return cfg_; }
    int image_classes() const { return cfg_.categories; }
    int video_classes() const { return cfg_.categories * cfg_.directions; }

    std::vector<double> image_probs(const Tensor& frame) const;  // [3, H, W]
    std::vector<double> video_probs(const Tensor& clip) const;   // [m, 3, H, W]

    // Renders its own training scenes from `scene_cfg`, trains both heads,
    // and asserts the validation gate. Returns (category, direction)
    // validation accuracies.
    std::pair<double, double> train(const SynthConfig& scene_cfg);

    std::string content_hash() const;
    void save(NamedTensors& out) const;
    void load(const NamedTensors& in);

  private:
    ag::Var head_logits(const std::string& head, const ag::Var& x) const;
    std::vector<double> probs_of(const std::string& head, const Tensor& input) const;

    ClassifierConfig cfg_;
    ag::ParamStore params_;
};

// Deterministic hash of a tensor set (names, shapes, f32 payloads).
std::string content_hash(const NamedTensors& tensors);

// ---------------------------------------------------------------------------
// Time-averaged control (replaces each fMRI window by its temporal mean)

FmriWindow time_average_control(const FmriWindow& window);
std::vector<FmriWindow> time_average_control(const std::vector<FmriWindow>& windows);

// ---------------------------------------------------------------------------
// Run-level evaluation

// Classifier access used by evaluate_run; tests can substitute oracles.
struct FrameScorer {
    std::function<std::vector<double>(const Tensor&)> image;  // frame [3,H,W]
    std::function<std::vector<double>(const Tensor&)> video;  // clip [m,3,H,W]
    int image_classes = 0;
    int video_classes = 0;
    std::string hash;
};
FrameScorer make_scorer(const SceneClassifier& clf);

struct NwayResult {
    int n = 0, k = 0, trials = 0;
    double accuracy = 0.0;
    double stderr_est = 0.0;
};

struct MetricReport {
    double ssim_mean = 0.0;
    std::vector<double> ssim_per_frame;  // all clips, frame-major
    NwayResult nway_image, nway_video;
    std::string subject, checkpoint, classifier_hash;
    uint64_t seed = 0;
};

struct EvalConfig {
    NwayConfig image{};
    NwayConfig video{};
    uint64_t seed = 0;
    std::string subject = "synthetic";
    std::string checkpoint;
};

// Frame-level SSIM (averaged per clip, then over clips), image N-way top-K
// per frame, video N-way top-K per clip. Labels are (category, direction).
// When `csv_rows` is given, one row per frame is appended with the schema
// (clip_id, frame_id, ssim, img_acc, vid_acc, N, K, trials, seed,
// classifier_hash).
MetricReport evaluate_run(const std::vector<Tensor>& decoded, const std::vector<Tensor>& gt,
                          const std::vector<std::pair<int, int>>& labels,
                          const FrameScorer& scorer, const EvalConfig& cfg,
                          std::vector<std::vector<std::string>>* csv_rows = nullptr);

extern const std::vector<std::string> kMetricCsvHeader;

}  // namespace neurovid
