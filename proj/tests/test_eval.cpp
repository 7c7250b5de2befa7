#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "neurovid/eval.hpp"
#include "neurovid/util.hpp"

using namespace neurovid;

namespace {

Tensor random_image(std::vector<int64_t> shape, Rng& rng, float lo = 0.0f, float hi = 1.0f) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.data) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// Reference structural similarity, written independently of the library
// version: two-pass weighted central moments instead of E[x^2] - mu^2.
double reference_ssim(const Tensor& a, const Tensor& b) {
    const int W = 11;
    const double sigma = 1.5, C1 = 1e-4, C2 = 9e-4;
    std::vector<double> g(W * W);
    double gs = 0.0;
    for (int i = 0; i < W; ++i)
        for (int j = 0; j < W; ++j) {
            g[i * W + j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) /
                                    (2.0 * sigma * sigma));
            gs += g[i * W + j];
        }
    for (double& v : g) v /= gs;
    double total = 0.0;
    int64_t count = 0;
    for (int64_t c = 0; c < a.dim(0); ++c)
        for (int64_t y = 0; y + W <= a.dim(1); ++y)
            for (int64_t x = 0; x + W <= a.dim(2); ++x) {
                double ma = 0, mb = 0;
                for (int i = 0; i < W; ++i)
                    for (int j = 0; j < W; ++j) {
                        ma += g[i * W + j] * a.at({c, y + i, x + j});
                        mb += g[i * W + j] * b.at({c, y + i, x + j});
                    }
                double va = 0, vb = 0, cov = 0;
                for (int i = 0; i < W; ++i)
                    for (int j = 0; j < W; ++j) {
                        const double da = a.at({c, y + i, x + j}) - ma;
                        const double db = b.at({c, y + i, x + j}) - mb;
                        va += g[i * W + j] * da * da;
                        vb += g[i * W + j] * db * db;
                        cov += g[i * W + j] * da * db;
                    }
                total += ((2 * ma * mb + C1) * (2 * cov + C2)) /
                         ((ma * ma + mb * mb + C1) * (va + vb + C2));
                ++count;
            }
    return total / static_cast<double>(count);
}

// Scorer whose image head reads the clip identity out of the mean pixel
// value and answers with a one-hot on that clip's label.
struct OracleSetup {
    std::vector<Tensor> clips;
    std::vector<std::pair<int, int>> labels;
    FrameScorer scorer;
};

OracleSetup make_oracle_setup() {
    OracleSetup s;
    s.labels = {{0, 1}, {3, 2}, {5, 0}};
    for (size_t i = 0; i < s.labels.size(); ++i) {
        Tensor clip = Tensor::zeros({4, 3, 16, 16});
        for (size_t j = 0; j < clip.data.size(); ++j)
            clip.data[j] = static_cast<float>((i + 1) / 8.0 + (j % 7) / 700.0);
        s.clips.push_back(std::move(clip));
    }
    const int directions = 4;
    auto clip_index = [](const Tensor& t) {
        double mean = 0.0;
        for (float v : t.data) mean += v;
        mean /= static_cast<double>(t.data.size());
        return static_cast<size_t>(std::lround(mean * 8.0) - 1);
    };
    auto labels = s.labels;
    s.scorer.image_classes = 6;
    s.scorer.video_classes = 6 * directions;
    s.scorer.hash = "oracle";
    s.scorer.image = [labels, clip_index](const Tensor& frame) {
        std::vector<double> p(6, 0.0);
        p[static_cast<size_t>(labels[clip_index(frame)].first)] = 1.0;
        return p;
    };
    s.scorer.video = [labels, clip_index, directions](const Tensor& clip) {
        std::vector<double> p(6 * directions, 0.0);
        const auto [cat, dir] = labels[clip_index(clip)];
        p[static_cast<size_t>(cat * directions + dir)] = 1.0;
        return p;
    };
    return s;
}

FrameScorer uniform_scorer(int image_classes, int directions) {
    FrameScorer sc;
    sc.image_classes = image_classes;
    sc.video_classes = image_classes * directions;
    sc.hash = "uniform";
    sc.image = [image_classes](const Tensor&) {
        return std::vector<double>(static_cast<size_t>(image_classes),
                                   1.0 / image_classes);
    };
    sc.video = [&sc](const Tensor&) {
        return std::vector<double>(static_cast<size_t>(sc.video_classes),
                                   1.0 / sc.video_classes);
    };
    return sc;
}

}  // namespace

TEST_CASE("ssim is exactly one on identical images and symmetric") {
    Rng rng(11);
    const Tensor a = random_image({3, 16, 16}, rng);
    const Tensor b = random_image({3, 16, 16}, rng);
    CHECK(ssim(a, a) == 1.0);
    CHECK(ssim(b, b) == 1.0);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
    CHECK(ssim(a, b) <= 1.0);
    CHECK(ssim(a, b) >= -1.0);
}

TEST_CASE("ssim matches an independently written reference") {
    Rng rng(5);
    for (int rep = 0; rep < 5; ++rep) {
        const Tensor a = random_image({2, 13, 15}, rng);
        Tensor b = a;
        for (float& v : b.data) v = static_cast<float>(v + 0.1 * rng.normal());
        CHECK(ssim(a, b) == doctest::Approx(reference_ssim(a, b)).epsilon(1e-9));
    }
}

TEST_CASE("ssim separates structure: inverted checkerboard scores near minus one") {
    Tensor x = Tensor::zeros({1, 16, 16});
    for (int64_t y = 0; y < 16; ++y)
        for (int64_t i = 0; i < 16; ++i) x.at({0, y, i}) = static_cast<float>((y + i) % 2);
    Tensor inv = x;
    for (float& v : inv.data) v = 1.0f - v;
    CHECK(ssim(x, inv) < 0.1);
    CHECK(ssim(x, inv) < -0.9);

    // Mild noise stays far above the inverted image.
    Rng rng(3);
    Tensor noisy = x;
    for (float& v : noisy.data) v = static_cast<float>(v + 0.05 * rng.normal());
    CHECK(ssim(x, noisy) > 0.5);
    CHECK(ssim(x, noisy) > ssim(x, inv));
}

TEST_CASE("ssim input validation") {
    Rng rng(1);
    const Tensor a = random_image({1, 16, 16}, rng);
    CHECK_THROWS_AS(ssim(a, random_image({1, 16, 15}, rng)), Error);
    CHECK_THROWS_AS(ssim(random_image({1, 8, 8}, rng), random_image({1, 8, 8}, rng)), Error);
    Tensor bad = a;
    bad.data[7] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(ssim(a, bad), Error);
}

TEST_CASE("n-way top-k sits at chance for a constant classifier") {
    // Uniform scores mean every trial is decided by the tie-break shuffle,
    // so accuracy must match k/n within binomial error.
    const std::vector<double> probs(60, 1.0 / 60.0);
    struct Pin {
        int n, k;
    };
    for (const Pin pin : {Pin{50, 1}, Pin{10, 3}}) {
        NwayConfig cfg;
        cfg.n = pin.n;
        cfg.k = pin.k;
        cfg.trials = 4000;
        Rng rng(77 + pin.n);
        const double acc = nway_topk(probs, 13, cfg, rng);
        const double p = static_cast<double>(pin.k) / pin.n;
        const double tol = 4.0 * std::sqrt(p * (1.0 - p) / cfg.trials);
        CHECK(std::abs(acc - p) < tol);
    }
}

TEST_CASE("n-way top-k is monotone in k and saturates at k = n") {
    Rng rng(19);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> probs(40);
        for (double& v : probs) v = rng.uniform();
        const int gt = static_cast<int>(rng.below(40));
        NwayConfig cfg;
        cfg.n = 8;
        cfg.trials = 25;
        double prev = 0.0;
        for (int k = 1; k <= cfg.n; ++k) {
            cfg.k = k;
            Rng r(1234);  // same candidate draws for every k
            const double acc = nway_topk(probs, gt, cfg, r);
            CHECK(acc >= prev);
            prev = acc;
        }
        CHECK(prev == 1.0);  // k = n always contains the ground truth
    }
}

TEST_CASE("n-way top-k on decisive scores") {
    std::vector<double> probs(20, 0.0);
    probs[4] = 1.0;
    NwayConfig cfg;
    cfg.n = 10;
    cfg.k = 1;
    cfg.trials = 64;
    Rng rng(2);
    CHECK(nway_topk(probs, 4, cfg, rng) == 1.0);

    // Strictly smallest score never makes top-1 of a 2-way trial.
    std::vector<double> worst(20);
    for (size_t i = 0; i < worst.size(); ++i) worst[i] = static_cast<double>(i + 1);
    worst[4] = 0.0;
    cfg.n = 2;
    Rng rng2(3);
    CHECK(nway_topk(worst, 4, cfg, rng2) == 0.0);
}

TEST_CASE("n-way top-k validation") {
    const std::vector<double> probs(5, 0.2);
    NwayConfig cfg;
    Rng rng(0);
    cfg.n = 6;  // exceeds the number of classes
    CHECK_THROWS_AS(nway_topk(probs, 0, cfg, rng), Error);
    cfg.n = 4;
    cfg.k = 5;
    CHECK_THROWS_AS(nway_topk(probs, 0, cfg, rng), Error);
    cfg.k = 1;
    CHECK_THROWS_AS(nway_topk(probs, 5, cfg, rng), Error);
    cfg.trials = 0;
    CHECK_THROWS_AS(nway_topk(probs, 0, cfg, rng), Error);
    cfg.trials = 1;
    std::vector<double> bad = probs;
    bad[2] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(nway_topk(bad, 0, cfg, rng), Error);
}

TEST_CASE("time-averaged control replaces frames by their temporal mean") {
    FmriWindow w;
    w.tokens = Tensor({2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    w.window_start = 3;
    w.subject_id = 1;
    const FmriWindow avg = time_average_control(w);
    CHECK(avg.tokens.at({0, 0, 0}) == doctest::Approx(3.0));   // (1+5)/2
    CHECK(avg.tokens.at({1, 0, 0}) == doctest::Approx(3.0));
    CHECK(avg.tokens.at({0, 1, 1}) == doctest::Approx(6.0));   // (4+8)/2
    CHECK(avg.tokens.at({1, 1, 1}) == doctest::Approx(6.0));
    CHECK(avg.window_start == 3);
    CHECK(avg.subject_id == 1);

    // Idempotent, bit for bit, including a window width that does not divide
    // its sums exactly.
    Rng rng(9);
    FmriWindow w3;
    w3.tokens = random_image({3, 4, 5}, rng, -1.0f, 1.0f);
    const FmriWindow once = time_average_control(w3);
    const FmriWindow twice = time_average_control(once);
    CHECK(once.tokens.data == twice.tokens.data);

    FmriWindow w1;
    w1.tokens = Tensor::zeros({1, 2, 2});
    CHECK_THROWS_AS(time_average_control(w1), Error);

    const auto batch = time_average_control(std::vector<FmriWindow>{w, w3});
    CHECK(batch.size() == 2);
    CHECK(batch[0].tokens.data == avg.tokens.data);
}

TEST_CASE("video layout conversion round trips") {
    Rng rng(21);
    Tensor hwc = random_image({5, 6, 7, 3}, rng);
    // random_image builds [5,6,7,3]; treat as renderer layout.
    const Tensor chw = video_to_chw(hwc);
    CHECK(chw.shape == std::vector<int64_t>{5, 3, 6, 7});
    CHECK(chw.at({2, 1, 4, 3}) == hwc.at({2, 4, 3, 1}));
    const Tensor back = video_to_hwc(chw);
    CHECK(back.shape == hwc.shape);
    CHECK(back.data == hwc.data);
    CHECK_THROWS_AS(video_to_chw(chw), Error);    // wrong layout for this direction
    CHECK_THROWS_AS(video_to_hwc(hwc), Error);
}

TEST_CASE("content hash is order- and byte-sensitive") {
    NamedTensors a;
    a.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
    a.add("b", Tensor({2}, {5, 6}));
    NamedTensors same;
    same.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
    same.add("b", Tensor({2}, {5, 6}));
    CHECK(content_hash(a) == content_hash(same));
    CHECK(content_hash(a).size() == 64);

    NamedTensors flipped;
    flipped.add("b", Tensor({2}, {5, 6}));
    flipped.add("w", Tensor({2, 2}, {1, 2, 3, 4}));
    CHECK(content_hash(a) != content_hash(flipped));

    NamedTensors tweaked;
    tweaked.add("w", Tensor({2, 2}, {1, 2, 3, 4.0000005f}));
    tweaked.add("b", Tensor({2}, {5, 6}));
    CHECK(content_hash(a) != content_hash(tweaked));

    NamedTensors reshaped;
    reshaped.add("w", Tensor({4, 1}, {1, 2, 3, 4}));
    reshaped.add("b", Tensor({2}, {5, 6}));
    CHECK(content_hash(a) != content_hash(reshaped));
}

TEST_CASE("scene classifier trains both heads past the gate" * doctest::timeout(600)) {
    SynthConfig scene;
    scene.categories = 6;
    scene.directions = 4;

    ClassifierConfig cc;
    cc.categories = 6;
    cc.directions = 4;
    cc.hidden = 6;
    cc.steps = 500;
    cc.batch = 12;
    cc.lr = 3e-3;
    cc.seed = 4;

    SceneClassifier clf(cc, 1);
    const std::string fresh_hash = clf.content_hash();
    const auto [cat_acc, dir_acc] = clf.train(scene);
    CHECK(cat_acc >= cc.gate);
    CHECK(dir_acc >= cc.gate);
    CHECK(clf.content_hash() != fresh_hash);

    // Probability outputs are simplex points; the video head factorizes.
    Rng rng(6);
    const SceneSpec spec = make_scene(2, 1, scene, rng);
    const Tensor clip = video_to_chw(render_video(spec, 0, cc.frames, 32, 32));
    Tensor frame = Tensor::zeros({3, 32, 32});
    std::copy_n(clip.data.begin(), frame.data.size(), frame.data.begin());
    const auto ip = clf.image_probs(frame);
    CHECK(ip.size() == 6);
    CHECK(std::accumulate(ip.begin(), ip.end(), 0.0) == doctest::Approx(1.0));
    const auto vp = clf.video_probs(clip);
    CHECK(vp.size() == 24);
    CHECK(std::accumulate(vp.begin(), vp.end(), 0.0) == doctest::Approx(1.0));

    // Checkpoint round trip preserves behavior and hash.
    NamedTensors snap;
    clf.save(snap);
    SceneClassifier clone(cc, 99);
    clone.load(snap);
    CHECK(clone.content_hash() == clf.content_hash());
    CHECK(clone.video_probs(clip) == clf.video_probs(clip));

    // Motion is decided from temporal change: on static clips (every frame
    // identical) the direction evidence vanishes, so joint accuracy drops.
    int motion_hits = 0, static_hits = 0, n = 0;
    Rng vr(31);
    for (int cat = 0; cat < 6; ++cat)
        for (int dir = 0; dir < 4; ++dir) {
            const SceneSpec sp = make_scene(cat, dir, scene, vr.child(n));
            const Tensor c = video_to_chw(render_video(sp, 0, cc.frames, 32, 32));
            Tensor still = c;
            const size_t fs = still.data.size() / static_cast<size_t>(cc.frames);
            for (int f = 1; f < cc.frames; ++f)
                std::copy_n(still.data.begin(), fs,
                            still.data.begin() + static_cast<int64_t>(f * fs));
            const auto pm = clf.video_probs(c);
            const auto ps = clf.video_probs(still);
            const int want = cat * 4 + dir;
            motion_hits += static_cast<int>(std::max_element(pm.begin(), pm.end()) -
                                            pm.begin()) == want;
            static_hits += static_cast<int>(std::max_element(ps.begin(), ps.end()) -
                                            ps.begin()) == want;
            ++n;
        }
    CHECK(motion_hits >= static_cast<int>(0.8 * n));
    CHECK(motion_hits - static_hits >= static_cast<int>(0.3 * n));

    // Config validation.
    ClassifierConfig bad = cc;
    bad.categories = 1;
    CHECK_THROWS_AS(SceneClassifier(bad, 0), Error);
    bad = cc;
    bad.gate = 1.5;
    CHECK_THROWS_AS(SceneClassifier(bad, 0), Error);
    SynthConfig wrong = scene;
    wrong.categories = 7;
    SceneClassifier other(cc, 0);
    CHECK_THROWS_AS(other.train(wrong), Error);
}

TEST_CASE("evaluate_run on identical clips with an oracle scorer is perfect") {
    OracleSetup s = make_oracle_setup();
    EvalConfig cfg;
    cfg.image = {5, 1, 8};
    cfg.video = {10, 2, 6};
    cfg.seed = 42;
    cfg.subject = "s1";
    std::vector<std::vector<std::string>> rows;
    const MetricReport rep = evaluate_run(s.clips, s.clips, s.labels, s.scorer, cfg, &rows);

    CHECK(rep.ssim_mean == 1.0);
    CHECK(rep.ssim_per_frame.size() == 12);
    for (double v : rep.ssim_per_frame) CHECK(v == 1.0);
    CHECK(rep.nway_image.accuracy == 1.0);
    CHECK(rep.nway_video.accuracy == 1.0);
    CHECK(rep.nway_image.n == 5);
    CHECK(rep.nway_video.k == 2);
    CHECK(rep.nway_image.stderr_est == 0.0);
    CHECK(rep.classifier_hash == "oracle");
    CHECK(rep.subject == "s1");

    // One CSV row per frame, schema-shaped, byte-stable across reruns.
    CHECK(rows.size() == 12);
    CHECK(kMetricCsvHeader.size() == 10);
    for (const auto& r : rows) {
        CHECK(r.size() == kMetricCsvHeader.size());
        CHECK(r[2] == fmt_double(1.0));
        CHECK(r[9] == "oracle");
    }
    CHECK(rows[0][0] == "0");
    CHECK(rows[5][1] == "1");  // clip 1, frame 1
    CHECK(rows[5][5] == "5");
    CHECK(rows[5][8] == "42");

    std::vector<std::vector<std::string>> rows2;
    const MetricReport rep2 = evaluate_run(s.clips, s.clips, s.labels, s.scorer, cfg, &rows2);
    CHECK(rows2 == rows);
    CHECK(rep2.ssim_per_frame == rep.ssim_per_frame);
}

TEST_CASE("evaluate_run degrades monotonically and reports chance for a flat scorer") {
    OracleSetup s = make_oracle_setup();
    EvalConfig cfg;
    cfg.image = {5, 1, 40};
    cfg.video = {10, 2, 40};
    cfg.seed = 7;

    auto noisy = [&](double sigma, uint64_t seed) {
        Rng rng(seed);
        std::vector<Tensor> out = s.clips;
        for (Tensor& t : out)
            for (float& v : t.data)
                v = std::min(1.0f, std::max(0.0f, static_cast<float>(v + sigma * rng.normal())));
        return out;
    };
    const MetricReport mild = evaluate_run(noisy(0.02, 1), s.clips, s.labels, s.scorer, cfg);
    const MetricReport harsh = evaluate_run(noisy(0.25, 1), s.clips, s.labels, s.scorer, cfg);
    CHECK(mild.ssim_mean < 1.0);
    CHECK(mild.ssim_mean > harsh.ssim_mean);

    const FrameScorer flat = uniform_scorer(6, 4);
    const MetricReport chance = evaluate_run(s.clips, s.clips, s.labels, flat, cfg);
    const double pi = 1.0 / 5.0;  // k/n for the image metric
    CHECK(std::abs(chance.nway_image.accuracy - pi) <
          4.0 * std::sqrt(pi * (1 - pi) / (12.0 * 40.0)));
    const double expect_se = std::sqrt(
        chance.nway_image.accuracy * (1 - chance.nway_image.accuracy) / (12.0 * 40.0));
    CHECK(chance.nway_image.stderr_est == doctest::Approx(expect_se).epsilon(1e-12));

    // Validation: misaligned inputs, bad shapes, oversubscribed n-way.
    auto labels_short = s.labels;
    labels_short.pop_back();
    CHECK_THROWS_AS(evaluate_run(s.clips, s.clips, labels_short, s.scorer, cfg), Error);
    auto gt_bad = s.clips;
    gt_bad[1] = Tensor::zeros({4, 3, 16, 12});
    CHECK_THROWS_AS(evaluate_run(s.clips, gt_bad, s.labels, s.scorer, cfg), Error);
    EvalConfig wide = cfg;
    wide.image.n = 7;  // scorer only has 6 classes
    CHECK_THROWS_AS(evaluate_run(s.clips, s.clips, s.labels, s.scorer, wide), Error);
}
