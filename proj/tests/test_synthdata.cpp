#include "doctest.h"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>

#include "neurovid/archive.hpp"
#include "neurovid/synthdata.hpp"
#include "neurovid/util.hpp"

using namespace neurovid;

namespace {

SynthConfig small_config() {
    SynthConfig cfg;
    cfg.n_train = 48;
    cfg.n_val = 16;
    cfg.n_test = 16;
    cfg.seed = 7;
    return cfg;
}

bool same_bytes(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0;
}

bool same_samples(const std::vector<SynthSample>& a, const std::vector<SynthSample>& b) {
    if (a.size() != b.size()) return false;
    for (size_t i = 0; i < a.size(); ++i) {
        if (a[i].category() != b[i].category() || a[i].direction() != b[i].direction())
            return false;
        if (!same_bytes(a[i].video, b[i].video) || !same_bytes(a[i].e_txt, b[i].e_txt) ||
            !same_bytes(a[i].e_img, b[i].e_img))
            return false;
        if (a[i].fmri.size() != b[i].fmri.size()) return false;
        for (size_t k = 0; k < a[i].fmri.size(); ++k)
            if (std::memcmp(a[i].fmri[k].voxels.data(), b[i].fmri[k].voxels.data(),
                            a[i].fmri[k].voxels.size() * sizeof(float)) != 0)
                return false;
    }
    return true;
}

// Per-sample difference between consecutive window frames; static features
// cancel, leaving only the motion signal.
Eigen::MatrixXd design_diff(const std::vector<SynthSample>& split) {
    const int v = static_cast<int>(split[0].fmri[0].voxels.size());
    Eigen::MatrixXd x(split.size(), v);
    for (size_t i = 0; i < split.size(); ++i)
        for (int j = 0; j < v; ++j)
            x(static_cast<Eigen::Index>(i), j) =
                static_cast<double>(split[i].fmri[1].voxels[static_cast<size_t>(j)]) -
                split[i].fmri[0].voxels[static_cast<size_t>(j)];
    return x;
}

// fMRI design matrix: one row per sample, voxels of all window frames
// concatenated (optionally averaged across the window instead).
Eigen::MatrixXd design(const std::vector<SynthSample>& split, bool time_average) {
    const int w = static_cast<int>(split[0].fmri.size());
    const int v = static_cast<int>(split[0].fmri[0].voxels.size());
    Eigen::MatrixXd x(split.size(), time_average ? v : w * v);
    for (size_t i = 0; i < split.size(); ++i) {
        if (time_average) {
            for (int j = 0; j < v; ++j) {
                double acc = 0.0;
                for (int k = 0; k < w; ++k)
                    acc += split[i].fmri[static_cast<size_t>(k)].voxels[static_cast<size_t>(j)];
                x(static_cast<Eigen::Index>(i), j) = acc / w;
            }
        } else {
            for (int k = 0; k < w; ++k)
                for (int j = 0; j < v; ++j)
                    x(static_cast<Eigen::Index>(i), k * v + j) =
                        split[i].fmri[static_cast<size_t>(k)].voxels[static_cast<size_t>(j)];
        }
    }
    return x;
}

Eigen::MatrixXd onehot(const std::vector<SynthSample>& split, int classes, bool direction) {
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(split.size()), classes);
    for (size_t i = 0; i < split.size(); ++i)
        y(static_cast<Eigen::Index>(i),
          direction ? split[i].direction() : split[i].category()) = 1.0;
    return y;
}

// Ridge linear probe: fit on (xa, ya), return argmax accuracy on (xb, yb).
// The tiny ridge keeps float-rounding rank noise from exploding the weights.
double probe_accuracy(const Eigen::MatrixXd& xa, const Eigen::MatrixXd& ya,
                      const Eigen::MatrixXd& xb, const Eigen::MatrixXd& yb) {
    Eigen::MatrixXd xa1(xa.rows(), xa.cols() + 1);
    xa1 << xa, Eigen::VectorXd::Ones(xa.rows());
    Eigen::MatrixXd xb1(xb.rows(), xb.cols() + 1);
    xb1 << xb, Eigen::VectorXd::Ones(xb.rows());
    Eigen::MatrixXd gram = xa1.transpose() * xa1;
    gram.diagonal().array() += 1e-6 * gram.trace() / static_cast<double>(gram.cols());
    Eigen::MatrixXd beta = gram.ldlt().solve(xa1.transpose() * ya);
    Eigen::MatrixXd pred = xb1 * beta;
    int hits = 0;
    for (Eigen::Index i = 0; i < pred.rows(); ++i) {
        Eigen::Index pi, yi;
        pred.row(i).maxCoeff(&pi);
        yb.row(i).maxCoeff(&yi);
        hits += pi == yi;
    }
    return static_cast<double>(hits) / static_cast<double>(pred.rows());
}

std::filesystem::path tmpdir(const std::string& leaf) {
    auto p = std::filesystem::temp_directory_path() / "neurovid_synth_test" / leaf;
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("config validation rejects bad settings") {
    SynthConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    SynthConfig bad = cfg;
    bad.categories = 1;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.categories = 52;  // exceeds the 3x17 shape/hue grid
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.voxels = 64;  // 51 + 3 static features no longer fit the Vis budget
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.height = 16;
    bad.width = 16;  // no feasible start box at this speed
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.window = 1;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("roi layout partitions voxels as documented") {
    RoiLayout rois = make_roi_layout(128);
    CHECK(rois.names() ==
          std::vector<std::string>({"VisCent", "VisPeri", "DorsAttnA", "DorsAttnB", "DefaultA"}));
    std::vector<int> sizes;
    int assigned = 0;
    for (const auto& [name, mask] : rois.masks) {
        REQUIRE(mask.size() == 128);
        sizes.push_back(static_cast<int>(std::count(mask.begin(), mask.end(), 1)));
        assigned += sizes.back();
    }
    CHECK(sizes == std::vector<int>({28, 28, 16, 16, 24}));
    CHECK(assigned == 112);  // 16 voxels stay unassigned
    // Masks are pairwise disjoint.
    for (int v = 0; v < 128; ++v) {
        int owners = 0;
        for (const auto& [name, mask] : rois.masks) owners += mask[static_cast<size_t>(v)];
        CHECK(owners <= 1);
    }
    CHECK_THROWS_AS(rois.mask("nope"), Error);
}

TEST_CASE("dataset generation is deterministic in the seed") {
    const SynthConfig cfg = small_config();
    SynthDataset a = generate_dataset(cfg);
    SynthDataset b = generate_dataset(cfg);
    CHECK(same_samples(a.train, b.train));
    CHECK(same_samples(a.val, b.val));
    CHECK(same_samples(a.test, b.test));

    SynthConfig other = cfg;
    other.seed = 8;
    SynthDataset c = generate_dataset(other);
    CHECK_FALSE(same_samples(a.train, c.train));
}

TEST_CASE("videos are in range and scenes follow the category grid") {
    SynthDataset ds = generate_dataset(small_config());
    for (const auto& s : ds.train) {
        REQUIRE(s.video.shape == std::vector<int64_t>({12, 32, 32, 3}));
        float lo = 1e9f, hi = -1e9f;
        for (float v : s.video.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        CHECK(lo >= 0.0f);
        CHECK(hi <= 1.0f);
        CHECK(hi > 0.1f);  // the shape is actually visible
        CHECK(static_cast<int>(s.scene.shape_kind) == s.category() / 17);
        // Motion: first and last frame differ.
        bool moved = false;
        const int64_t n = 32 * 32 * 3;
        for (int64_t i = 0; i < n && !moved; ++i)
            moved = s.video.data[static_cast<size_t>(i)] !=
                    s.video.data[static_cast<size_t>(11 * n + i)];
        CHECK(moved);
        for (const auto& f : s.fmri) {
            REQUIRE(f.voxels.size() == 128);
            for (float v : f.voxels) CHECK(std::isfinite(v));
        }
        // Unit-norm embedding rows.
        for (const Tensor* e : {&s.e_txt, &s.e_img}) {
            REQUIRE(e->shape == std::vector<int64_t>({8, 16}));
            for (int64_t r = 0; r < 8; ++r) {
                double ss = 0.0;
                for (int64_t c = 0; c < 16; ++c)
                    ss += static_cast<double>(e->at({r, c})) * e->at({r, c});
                CHECK(std::abs(ss - 1.0) < 1e-5);
            }
        }
    }
}

TEST_CASE("embeddings are shared within a (category, direction) pair") {
    SynthDataset ds = generate_dataset(small_config());
    auto key = [](const SynthSample& s) { return s.category() * 4 + s.direction(); };
    for (const auto& a : ds.train)
        for (const auto& b : ds.val) {
            if (key(a) == key(b)) {
                CHECK(same_bytes(a.e_txt, b.e_txt));
                CHECK(same_bytes(a.e_img, b.e_img));
            } else {
                CHECK_FALSE(same_bytes(a.e_txt, b.e_txt));
            }
        }
}

TEST_CASE("trajectories stay inside the frame for the full feature span") {
    const SynthConfig cfg = small_config();
    for (int cat : {0, 17, 34, 50})
        for (int dir = 0; dir < 4; ++dir) {
            SceneSpec s = make_scene(cat, dir, cfg, Rng(99).child("jitter"));
            for (int t = -cfg.frames_per_fmri; t < cfg.video_frames(); ++t) {
                const double cx = s.start[0] + s.velocity[0] * t;
                const double cy = s.start[1] + s.velocity[1] * t;
                CHECK(cx >= 6.0);
                CHECK(cx <= 25.0);
                CHECK(cy >= 6.0);
                CHECK(cy <= 25.0);
            }
            // Rendering before frame 0 works (lagged periods).
            Tensor pre = render_video(s, -cfg.frames_per_fmri, 2, cfg.height, cfg.width);
            CHECK(pre.dim(0) == 2);
        }
}

TEST_CASE("window-averaged position features carry no direction information") {
    const SynthConfig cfg = small_config();
    for (int cat : {3, 20}) {
        std::vector<std::array<double, 2>> means;
        for (int dir = 0; dir < 4; ++dir) {
            // Same jitter stream for every direction isolates the direction effect.
            SceneSpec s = make_scene(cat, dir, cfg, Rng(5).child("jitter"));
            std::array<double, 2> m{0, 0};
            for (int k = 0; k < cfg.window; ++k) {
                const auto phi = scene_features(s, k - cfg.lag, cfg);
                m[0] += phi[static_cast<size_t>(cfg.categories + 3)] / cfg.window;
                m[1] += phi[static_cast<size_t>(cfg.categories + 4)] / cfg.window;
            }
            means.push_back(m);
        }
        for (size_t i = 1; i < means.size(); ++i) {
            CHECK(means[i][0] == doctest::Approx(means[0][0]).epsilon(1e-6));
            CHECK(means[i][1] == doctest::Approx(means[0][1]).epsilon(1e-6));
        }
        // ...while the per-period positions do differ strongly across directions.
        SceneSpec right = make_scene(cat, 0, cfg, Rng(5).child("jitter"));
        SceneSpec left = make_scene(cat, 1, cfg, Rng(5).child("jitter"));
        const auto pr = scene_features(right, 0, cfg);
        const auto pl = scene_features(left, 0, cfg);
        CHECK(std::abs(pr[static_cast<size_t>(cfg.categories + 3)] -
                       pl[static_cast<size_t>(cfg.categories + 3)]) > 0.05);
    }
}

TEST_CASE("noise-free fmri is linearly decodable from category and direction") {
    SynthConfig cfg = small_config();
    cfg.n_train = 200;
    cfg.n_val = 96;
    cfg.noise_sigma = 0.0f;
    SynthDataset ds = generate_dataset(cfg);

    const Eigen::MatrixXd xtr = design(ds.train, false);
    const Eigen::MatrixXd xva = design(ds.val, false);

    // Category: exact linear relation, so the probe is perfect on held-out data.
    CHECK(probe_accuracy(xtr, onehot(ds.train, cfg.categories, false), xva,
                         onehot(ds.val, cfg.categories, false)) == doctest::Approx(1.0));
    // Direction: carried by the temporal change between the window frames.
    // The frame difference isolates it exactly; the raw window still exposes
    // it to a linear probe, minus some leakage into category fitting.
    CHECK(probe_accuracy(design_diff(ds.train), onehot(ds.train, cfg.directions, true),
                         design_diff(ds.val), onehot(ds.val, cfg.directions, true)) ==
          doctest::Approx(1.0));
    CHECK(probe_accuracy(xtr, onehot(ds.train, cfg.directions, true), xva,
                         onehot(ds.val, cfg.directions, true)) > 0.8);

    // Averaging across time keeps category but destroys direction.
    const Eigen::MatrixXd xtr_avg = design(ds.train, true);
    const Eigen::MatrixXd xva_avg = design(ds.val, true);
    CHECK(probe_accuracy(xtr_avg, onehot(ds.train, cfg.categories, false), xva_avg,
                         onehot(ds.val, cfg.categories, false)) == doctest::Approx(1.0));
    CHECK(probe_accuracy(xtr_avg, onehot(ds.train, cfg.directions, true), xva_avg,
                         onehot(ds.val, cfg.directions, true)) < 0.45);
}

TEST_CASE("default-mode voxels are uncorrelated with category") {
    SynthConfig cfg = small_config();
    cfg.n_train = 500;
    SynthDataset ds = generate_dataset(cfg);
    const auto& mask = ds.rois.mask("DefaultA");
    const int n = cfg.n_train;

    double total = 0.0;
    int count = 0;
    for (int v = 0; v < cfg.voxels; ++v) {
        if (!mask[static_cast<size_t>(v)]) continue;
        std::vector<double> x(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i)
            x[static_cast<size_t>(i)] = ds.train[static_cast<size_t>(i)].fmri[0]
                                            .voxels[static_cast<size_t>(v)];
        const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
        double vx = 0.0;
        for (double e : x) vx += (e - mx) * (e - mx);
        for (int c = 0; c < cfg.categories; ++c) {
            double my = 0.0;
            for (int i = 0; i < n; ++i)
                my += ds.train[static_cast<size_t>(i)].category() == c ? 1.0 : 0.0;
            my /= n;
            if (my == 0.0) continue;
            double vy = 0.0, cov = 0.0;
            for (int i = 0; i < n; ++i) {
                const double y =
                    (ds.train[static_cast<size_t>(i)].category() == c ? 1.0 : 0.0) - my;
                vy += y * y;
                cov += (x[static_cast<size_t>(i)] - mx) * y;
            }
            if (vx > 0 && vy > 0) {
                total += std::abs(cov / std::sqrt(vx * vy));
                ++count;
            }
        }
    }
    REQUIRE(count > 500);
    CHECK(total / count < 0.05);
}

TEST_CASE("semantic overlap follows the set definition") {
    auto mk = [](std::vector<int> cats) {
        std::vector<SynthSample> out;
        for (int c : cats) {
            SynthSample s;
            s.scene.category_id = c;
            out.push_back(s);
        }
        return out;
    };
    CHECK(semantic_overlap(mk({0, 1, 2}), mk({0, 1, 2, 1})) == doctest::Approx(1.0));
    CHECK(semantic_overlap(mk({0, 1}), mk({2, 3})) == doctest::Approx(0.0));
    CHECK(semantic_overlap(mk({0, 1, 2, 3, 4, 5, 6, 7}), mk({4, 5, 6, 7, 8, 9, 10, 11})) ==
          doctest::Approx(1.0 / 3.0));
    CHECK_THROWS_AS(semantic_overlap(mk({}), mk({0})), Error);
}

TEST_CASE("default split hits the configured train/test overlap") {
    SynthDataset ds = generate_dataset(SynthConfig{});
    CHECK(ds.train.size() == 480);
    CHECK(ds.val.size() == 96);
    CHECK(ds.test.size() == 120);
    // round(0.56 * 51) = 29 shared categories over a 51-category union.
    CHECK(semantic_overlap(ds.train, ds.test) == doctest::Approx(29.0 / 51.0));
    // Val uses train categories only.
    std::set<int> train_cats, val_cats;
    for (const auto& s : ds.train) train_cats.insert(s.category());
    for (const auto& s : ds.val) val_cats.insert(s.category());
    CHECK(std::includes(train_cats.begin(), train_cats.end(), val_cats.begin(), val_cats.end()));
    CHECK(train_cats.size() == 40);
    CHECK(val_cats.size() == 40);
    // Val never repeats a (category, direction) pair and covers each direction.
    std::set<int> val_pairs;
    std::array<int, 4> dir_counts{0, 0, 0, 0};
    for (const auto& s : ds.val) {
        val_pairs.insert(s.category() * 4 + s.direction());
        dir_counts[static_cast<size_t>(s.direction())]++;
    }
    CHECK(val_pairs.size() == ds.val.size());
    for (int c : dir_counts) CHECK(c >= 16);
}

TEST_CASE("dataset save/load round trips exactly") {
    const SynthConfig cfg = small_config();
    SynthDataset ds = generate_dataset(cfg);
    const auto dir = tmpdir("roundtrip").string();
    save_dataset(dir, ds);
    SynthDataset back = load_dataset(dir);
    CHECK(same_samples(ds.train, back.train));
    CHECK(same_samples(ds.val, back.val));
    CHECK(same_samples(ds.test, back.test));
    CHECK(back.config.seed == cfg.seed);
    CHECK(back.config.n_train == cfg.n_train);
    CHECK(back.rois.names() == ds.rois.names());
    for (const auto& [name, mask] : ds.rois.masks) CHECK(back.rois.mask(name) == mask);
    for (size_t i = 0; i < ds.train.size(); ++i) {
        CHECK(ds.train[i].scene.start[0] == back.train[i].scene.start[0]);
        CHECK(ds.train[i].scene.velocity[1] == back.train[i].scene.velocity[1]);
    }

    // Saving twice produces identical bytes.
    const auto dir2 = tmpdir("roundtrip2").string();
    save_dataset(dir2, ds);
    for (const char* f : {"/train.nfta", "/val.nfta", "/test.nfta", "/rois.nfta",
                          "/manifest.json"})
        CHECK(sha256_file(dir + f) == sha256_file(dir2 + f));

    write_file_atomic(dir + "/manifest.json", "{not json");
    CHECK_THROWS_AS(load_dataset(dir), Error);
}
