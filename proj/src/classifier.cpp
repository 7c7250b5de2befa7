#include <algorithm>
#include <cmath>

#include "neurovid/eval.hpp"
#include "neurovid/util.hpp"

namespace neurovid {

using namespace ag;

void ClassifierConfig::validate() const {
    require(categories >= 2 && directions >= 2, ErrorKind::Config,
            "classifier: need at least two categories and directions");
    require(height >= 11 && width >= 11, ErrorKind::Config,
            "classifier: frames must be at least 11x11");
    require(height % 4 == 0 && width % 4 == 0, ErrorKind::Config,
            "classifier: frame dims must be divisible by 4");
    require(frames >= 2, ErrorKind::Config, "classifier: clips need at least two frames");
    require(hidden >= 2, ErrorKind::Config, "classifier: hidden width must be >= 2");
    require(train_clips_per_combo >= 1 && val_clips_per_combo >= 1, ErrorKind::Config,
            "classifier: clip counts must be positive");
    require(steps >= 1 && batch >= 1, ErrorKind::Config,
            "classifier: steps and batch must be positive");
    require(lr > 0.0, ErrorKind::Config, "classifier: lr must be positive");
    require(blur_prob >= 0.0 && blur_prob <= 1.0, ErrorKind::Config,
            "classifier: blur_prob must be in [0,1]");
    require(noise_sigma >= 0.0, ErrorKind::Config, "classifier: noise_sigma must be >= 0");
    require(gate >= 0.0 && gate <= 1.0, ErrorKind::Config,
            "classifier: gate must be in [0,1]");
}

namespace {

// Fixed gain on the mean frame-difference input; raw diffs are small and the
// direction head has no normalization layers.
constexpr double kDiffGain = 4.0;

// 4x4 block average, replicated back to full resolution. Matches the
// blockify round trip of the reduced-resolution latent path, which is the
// kind of blur decoded clips carry.
Tensor blockify4(const Tensor& frame) {
    const int64_t c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
    Tensor out = Tensor::zeros({c, h, w});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t by = 0; by < h; by += 4)
            for (int64_t bx = 0; bx < w; bx += 4) {
                double sum = 0.0;
                for (int64_t i = 0; i < 4; ++i)
                    for (int64_t j = 0; j < 4; ++j) sum += frame.at({ch, by + i, bx + j});
                const float mean = static_cast<float>(sum / 16.0);
                for (int64_t i = 0; i < 4; ++i)
                    for (int64_t j = 0; j < 4; ++j) out.at({ch, by + i, bx + j}) = mean;
            }
    return out;
}

// Mean consecutive frame difference of a [m, 3, H, W] clip, scaled by
// kDiffGain; this is the direction head's input.
Tensor mean_diff(const Tensor& clip) {
    const int64_t m = clip.dim(0);
    require(m >= 2, ErrorKind::Validation, "direction input needs at least two frames");
    const size_t stride = static_cast<size_t>(clip.dim(1) * clip.dim(2) * clip.dim(3));
    Tensor out = Tensor::zeros({clip.dim(1), clip.dim(2), clip.dim(3)});
    for (size_t i = 0; i < stride; ++i) {
        double acc = 0.0;
        for (int64_t f = 0; f + 1 < m; ++f)
            acc += static_cast<double>(clip.data[(f + 1) * stride + i]) -
                   static_cast<double>(clip.data[f * stride + i]);
        out.data[i] = static_cast<float>(kDiffGain * acc / static_cast<double>(m - 1));
    }
    return out;
}

Tensor stack_frames(const std::vector<Tensor>& frames) {
    const Tensor& f0 = frames.front();
    Tensor out = Tensor::zeros({static_cast<int64_t>(frames.size()), f0.dim(0), f0.dim(1),
                                f0.dim(2)});
    const size_t stride = f0.data.size();
    for (size_t i = 0; i < frames.size(); ++i)
        std::copy(frames[i].data.begin(), frames[i].data.end(),
                  out.data.begin() + static_cast<int64_t>(i * stride));
    return out;
}

std::vector<double> softmax_row(const std::vector<double>& logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (size_t i = 0; i < p.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
    for (double& v : p) v /= z;
    return p;
}

}  // namespace

SceneClassifier::SceneClassifier(ClassifierConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng root(seed);
    auto normal = [](double std) {
        return [std](Rng& r) { return r.normal(0.0, std); };
    };
    const int h = cfg_.hidden;
    for (const char* head : {"cat", "dir"}) {
        const std::string p(head);
        const int classes = p == "cat" ? cfg_.categories : cfg_.directions;
        params_.add(p + ".c1.w", {h, 3, 3, 3}, normal(1.0 / std::sqrt(27.0)),
                    root.child(p + ".c1.w"));
        params_.add_zeros(p + ".c1.b", {h});
        params_.add(p + ".c2.w", {2 * h, h, 3, 3}, normal(1.0 / std::sqrt(9.0 * h)),
                    root.child(p + ".c2.w"));
        params_.add_zeros(p + ".c2.b", {2 * h});
        params_.add(p + ".fc.w", {2 * h, classes}, normal(1.0 / std::sqrt(2.0 * h)),
                    root.child(p + ".fc.w"));
        params_.add_zeros(p + ".fc.b", {classes});
    }
}

Var SceneClassifier::head_logits(const std::string& head, const Var& x) const {
    Var h1 = avgpool2(silu(conv2d(x, params_.get(head + ".c1.w"), params_.get(head + ".c1.b"), 1)));
    Var h2 = avgpool2(silu(conv2d(h1, params_.get(head + ".c2.w"), params_.get(head + ".c2.b"), 1)));
    const int64_t n = h2.n->shape[0], c = h2.n->shape[1];
    const int64_t hw = h2.n->shape[2] * h2.n->shape[3];
    Var flat = reshape(h2, {n * c, hw});
    Var pool = constant({hw, 1}, std::vector<double>(static_cast<size_t>(hw),
                                                     1.0 / static_cast<double>(hw)));
    Var gap = reshape(matmul(flat, pool), {n, c});
    return add_rowvec(matmul(gap, params_.get(head + ".fc.w")), params_.get(head + ".fc.b"));
}

std::vector<double> SceneClassifier::probs_of(const std::string& head,
                                              const Tensor& input) const {
    require(input.rank() == 3 && input.dim(0) == 3 && input.dim(1) == cfg_.height &&
                input.dim(2) == cfg_.width,
            ErrorKind::Validation, "classifier input must be [3, H, W], got " +
                input.shape_str());
    require(input.all_finite(), ErrorKind::Numeric, "classifier input is non-finite");
    Tensor batch(std::vector<int64_t>{1, 3, cfg_.height, cfg_.width}, input.data);
    Var logits = head_logits(head, from_tensor(batch));
    return softmax_row(logits.n->val);
}

std::vector<double> SceneClassifier::image_probs(const Tensor& frame) const {
    return probs_of("cat", frame);
}

std::vector<double> SceneClassifier::video_probs(const Tensor& clip) const {
    require(clip.rank() == 4 && clip.dim(1) == 3, ErrorKind::Validation,
            "video classifier expects [m, 3, H, W], got " + clip.shape_str());
    const int64_t m = clip.dim(0);
    require(m >= 2, ErrorKind::Validation, "video classifier needs at least two frames");
    // Category: per-frame probabilities, ensembled by averaging.
    std::vector<double> cat(static_cast<size_t>(cfg_.categories), 0.0);
    Tensor frame = Tensor::zeros({3, clip.dim(2), clip.dim(3)});
    const size_t stride = frame.data.size();
    for (int64_t f = 0; f < m; ++f) {
        std::copy_n(clip.data.begin() + static_cast<int64_t>(f * stride), stride,
                    frame.data.begin());
        const std::vector<double> p = image_probs(frame);
        for (size_t i = 0; i < cat.size(); ++i) cat[i] += p[i] / static_cast<double>(m);
    }
    const std::vector<double> dir = probs_of("dir", mean_diff(clip));
    std::vector<double> joint(static_cast<size_t>(video_classes()));
    for (int c = 0; c < cfg_.categories; ++c)
        for (int d = 0; d < cfg_.directions; ++d)
            joint[static_cast<size_t>(c * cfg_.directions + d)] =
                cat[static_cast<size_t>(c)] * dir[static_cast<size_t>(d)];
    return joint;
}

std::pair<double, double> SceneClassifier::train(const SynthConfig& scene_cfg) {
    require(scene_cfg.categories == cfg_.categories && scene_cfg.directions == cfg_.directions,
            ErrorKind::Config, "classifier/scene label spaces disagree");
    require(scene_cfg.height == cfg_.height && scene_cfg.width == cfg_.width, ErrorKind::Config,
            "classifier/scene frame sizes disagree");

    Rng root(cfg_.seed);
    auto augment = [&](Tensor frame, Rng& rng, bool clamp01) {
        if (rng.uniform() < cfg_.blur_prob) frame = blockify4(frame);
        for (float& v : frame.data) {
            v = static_cast<float>(v + cfg_.noise_sigma * rng.normal());
            if (clamp01) v = std::min(1.0f, std::max(0.0f, v));
        }
        return frame;
    };
    auto render_clip = [&](int cat, int dir, Rng scene_rng) {
        const SceneSpec scene = make_scene(cat, dir, scene_cfg, scene_rng);
        return video_to_chw(render_video(scene, 0, cfg_.frames, cfg_.height, cfg_.width));
    };

    Adam adam({cfg_.lr});
    for (int step = 0; step < cfg_.steps; ++step) {
        Rng sr = root.child("step").child(static_cast<uint64_t>(step));
        std::vector<Tensor> cat_in, dir_in;
        std::vector<int> cat_lab, dir_lab;
        for (int i = 0; i < cfg_.batch; ++i) {
            Rng ir = sr.child(static_cast<uint64_t>(i));
            const int cat = static_cast<int>(ir.below(static_cast<uint64_t>(cfg_.categories)));
            const int dir = static_cast<int>(ir.below(static_cast<uint64_t>(cfg_.directions)));
            const Tensor clip = render_clip(cat, dir, ir.child("scene"));
            Rng ar = ir.child("aug");
            Tensor frame = Tensor::zeros({3, clip.dim(2), clip.dim(3)});
            const int64_t f = static_cast<int64_t>(ir.below(static_cast<uint64_t>(cfg_.frames)));
            std::copy_n(clip.data.begin() + f * static_cast<int64_t>(frame.data.size()),
                        frame.data.size(), frame.data.begin());
            cat_in.push_back(augment(std::move(frame), ar, true));
            cat_lab.push_back(cat);
            dir_in.push_back(augment(mean_diff(clip), ar, false));
            dir_lab.push_back(dir);
        }
        Var loss = add(cross_entropy_rows(head_logits("cat", from_tensor(stack_frames(cat_in))),
                                          cat_lab),
                       cross_entropy_rows(head_logits("dir", from_tensor(stack_frames(dir_in))),
                                          dir_lab));
        require(std::isfinite(loss.n->val[0]), ErrorKind::Numeric,
                "classifier: non-finite loss at step " + std::to_string(step));
        params_.zero_grad();
        backward(loss);
        adam.step(params_);
    }

    // Clean validation set, disjoint scene jitter from the training stream.
    Rng vr = root.child("val");
    int cat_hits = 0, dir_hits = 0, total = 0;
    for (int cat = 0; cat < cfg_.categories; ++cat)
        for (int dir = 0; dir < cfg_.directions; ++dir)
            for (int r = 0; r < cfg_.val_clips_per_combo; ++r) {
                const Tensor clip = render_clip(
                    cat, dir,
                    vr.child(static_cast<uint64_t>(cat * cfg_.directions + dir)).child(r));
                Tensor frame = Tensor::zeros({3, clip.dim(2), clip.dim(3)});
                const int64_t f = cfg_.frames / 2;
                std::copy_n(clip.data.begin() + f * static_cast<int64_t>(frame.data.size()),
                            frame.data.size(), frame.data.begin());
                const std::vector<double> pc = image_probs(frame);
                const std::vector<double> pd = probs_of("dir", mean_diff(clip));
                cat_hits += static_cast<int>(std::max_element(pc.begin(), pc.end()) -
                                             pc.begin()) == cat;
                dir_hits += static_cast<int>(std::max_element(pd.begin(), pd.end()) -
                                             pd.begin()) == dir;
                ++total;
            }
    const double cat_acc = static_cast<double>(cat_hits) / total;
    const double dir_acc = static_cast<double>(dir_hits) / total;
    require(cat_acc >= cfg_.gate && dir_acc >= cfg_.gate, ErrorKind::Validation,
            "classifier below validation gate: category " + fmt_double(cat_acc) +
                ", direction " + fmt_double(dir_acc) + " (gate " + fmt_double(cfg_.gate) + ")");
    return {cat_acc, dir_acc};
}

std::string SceneClassifier::content_hash() const {
    NamedTensors t;
    save(t);
    return neurovid::content_hash(t);
}

void SceneClassifier::save(NamedTensors& out) const { params_.save(out, "clf."); }

void SceneClassifier::load(const NamedTensors& in) { params_.load(in, "clf."); }

}  // namespace neurovid
