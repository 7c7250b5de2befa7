#include "doctest.h"

#include <cmath>
#include <cstring>
#include <set>

#include "neurovid/augment.hpp"

using namespace neurovid;

namespace {

FmriWindow make_window(int64_t w, int64_t p, int64_t b, uint64_t seed, bool away_from_zero) {
    FmriWindow win;
    win.tokens = Tensor::zeros({w, p, b});
    Rng rng = Rng(seed).child("data");
    for (auto& v : win.tokens.data) {
        double x = rng.normal();
        if (away_from_zero && std::abs(x) < 0.25) x = x < 0 ? x - 0.5 : x + 0.5;
        v = static_cast<float>(x);
    }
    return win;
}

std::vector<int64_t> zero_columns(const FmriWindow& win) {
    std::vector<int64_t> cols;
    const int64_t b = win.token_dim();
    for (int64_t c = 0; c < b; ++c) {
        bool all_zero = true;
        for (int64_t f = 0; f < win.frames() && all_zero; ++f)
            for (int64_t p = 0; p < win.patches() && all_zero; ++p)
                all_zero = win.tokens.at({f, p, c}) == 0.0f;
        if (all_zero) cols.push_back(c);
    }
    return cols;
}

std::vector<int64_t> changed_frames(const FmriWindow& before, const FmriWindow& after) {
    std::vector<int64_t> out;
    const int64_t len = before.patches() * before.token_dim();
    for (int64_t f = 0; f < before.frames(); ++f)
        if (std::memcmp(before.tokens.data.data() + f * len, after.tokens.data.data() + f * len,
                        static_cast<size_t>(len) * sizeof(float)) != 0)
            out.push_back(f);
    return out;
}

// Independent statement of the interpolation target for frame i.
std::vector<float> interp_oracle(const FmriWindow& win, int64_t i, bool normalize) {
    const int64_t w = win.frames();
    const int64_t len = win.patches() * win.token_dim();
    std::vector<double> acc(static_cast<size_t>(len), 0.0);
    double wsum = 0.0;
    for (int64_t j = 0; j < w; ++j) {
        if (j == i) continue;
        const double weight = 1.0 - std::abs(static_cast<double>(i - j)) / static_cast<double>(w);
        wsum += weight;
        for (int64_t t = 0; t < len; ++t)
            acc[static_cast<size_t>(t)] +=
                weight * win.tokens.data[static_cast<size_t>(j * len + t)];
    }
    std::vector<float> out(static_cast<size_t>(len));
    for (int64_t t = 0; t < len; ++t)
        out[static_cast<size_t>(t)] =
            static_cast<float>(acc[static_cast<size_t>(t)] * (normalize ? 1.0 / wsum : 1.0));
    return out;
}

}  // namespace

TEST_CASE("spatial mask zeroes exactly round(gamma*b) shared columns") {
    for (int64_t b : {8, 20, 32}) {
        for (int g = 0; g <= 20; ++g) {
            const float gamma = static_cast<float>(g) / 20.0f;
            FmriWindow win = make_window(3, 5, b, 11 + static_cast<uint64_t>(g), true);
            Rng rng = Rng(42).child("mask").child(static_cast<uint64_t>(g));
            FmriWindow out = spatial_mask(win, gamma, rng);
            REQUIRE(out.tokens.shape == win.tokens.shape);
            const auto cols = zero_columns(out);
            CHECK(static_cast<int64_t>(cols.size()) ==
                  std::lround(static_cast<double>(gamma) * static_cast<double>(b)));
            // Untouched columns keep their exact bytes.
            std::set<int64_t> masked(cols.begin(), cols.end());
            for (int64_t f = 0; f < 3; ++f)
                for (int64_t p = 0; p < 5; ++p)
                    for (int64_t c = 0; c < b; ++c)
                        if (!masked.count(c))
                            CHECK(out.tokens.at({f, p, c}) == win.tokens.at({f, p, c}));
        }
    }
}

TEST_CASE("spatial mask edge rates and determinism") {
    FmriWindow win = make_window(2, 4, 16, 3, true);
    Rng r0 = Rng(1).child("a");
    FmriWindow id = spatial_mask(win, 0.0f, r0);
    CHECK(std::memcmp(id.tokens.data.data(), win.tokens.data.data(),
                      win.tokens.data.size() * sizeof(float)) == 0);

    Rng r1 = Rng(1).child("a");
    FmriWindow all = spatial_mask(win, 1.0f, r1);
    for (float v : all.tokens.data) CHECK(v == 0.0f);

    Rng ra = Rng(9).child("m"), rb = Rng(9).child("m"), rc = Rng(10).child("m");
    FmriWindow a = spatial_mask(win, 0.5f, ra);
    FmriWindow bwin = spatial_mask(win, 0.5f, rb);
    FmriWindow c = spatial_mask(win, 0.5f, rc);
    CHECK(std::memcmp(a.tokens.data.data(), bwin.tokens.data.data(),
                      a.tokens.data.size() * sizeof(float)) == 0);
    CHECK(zero_columns(a) != zero_columns(c));

    Rng r2 = Rng(0);
    CHECK_THROWS_AS(spatial_mask(win, 1.5f, r2), Error);
    CHECK_THROWS_AS(spatial_mask(win, -0.1f, r2), Error);
}

TEST_CASE("temporal interpolation matches the weighted-sum definition") {
    // gamma = 1 replaces every frame, so each one can be checked against the
    // independent oracle evaluated on the original frames.
    for (uint64_t seed = 0; seed < 100; ++seed) {
        Rng shape_rng = Rng(seed).child("shape");
        const int64_t w = 2 + static_cast<int64_t>(shape_rng.below(3));
        const int64_t p = 1 + static_cast<int64_t>(shape_rng.below(4));
        const int64_t b = 1 + static_cast<int64_t>(shape_rng.below(6));
        FmriWindow win = make_window(w, p, b, seed, false);
        for (bool normalize : {false, true}) {
            Rng rng = Rng(seed).child("pick");
            FmriWindow out = temporal_interpolate(win, 1.0f, rng, normalize);
            const int64_t len = p * b;
            for (int64_t i = 0; i < w; ++i) {
                const auto want = interp_oracle(win, i, normalize);
                for (int64_t t = 0; t < len; ++t)
                    CHECK(std::abs(out.tokens.data[static_cast<size_t>(i * len + t)] -
                                   want[static_cast<size_t>(t)]) < 1e-6f);
            }
        }
    }
}

TEST_CASE("temporal interpolation replaces round(gamma*w) frames using originals") {
    // w=2, gamma=0.5 -> one frame replaced by 0.5 * the other ORIGINAL frame.
    std::set<int64_t> seen;
    for (uint64_t seed = 0; seed < 20; ++seed) {
        FmriWindow win = make_window(2, 3, 4, seed, false);
        Rng rng = Rng(seed).child("pick");
        FmriWindow out = temporal_interpolate(win, 0.5f, rng);
        const auto changed = changed_frames(win, out);
        REQUIRE(changed.size() == 1);
        const int64_t i = changed[0], j = 1 - i;
        seen.insert(i);
        const int64_t len = 3 * 4;
        for (int64_t t = 0; t < len; ++t)
            CHECK(out.tokens.data[static_cast<size_t>(i * len + t)] ==
                  doctest::Approx(0.5f * win.tokens.data[static_cast<size_t>(j * len + t)])
                      .epsilon(1e-6));
    }
    CHECK(seen.size() == 2);  // both frames get picked across seeds

    // w=3, gamma=1/3 -> one frame; if it is the middle one the sum is
    // (2/3) * (v0 + v2).
    bool middle_seen = false;
    for (uint64_t seed = 0; seed < 40 && !middle_seen; ++seed) {
        FmriWindow win = make_window(3, 2, 2, seed, false);
        Rng rng = Rng(seed).child("pick3");
        FmriWindow out = temporal_interpolate(win, 1.0f / 3.0f, rng);
        const auto changed = changed_frames(win, out);
        REQUIRE(changed.size() == 1);
        if (changed[0] != 1) continue;
        middle_seen = true;
        const int64_t len = 2 * 2;
        for (int64_t t = 0; t < len; ++t)
            CHECK(out.tokens.data[static_cast<size_t>(len + t)] ==
                  doctest::Approx((2.0f / 3.0f) * (win.tokens.data[static_cast<size_t>(t)] +
                                                   win.tokens.data[static_cast<size_t>(2 * len +
                                                                                       t)]))
                      .epsilon(1e-6));
    }
    CHECK(middle_seen);
}

TEST_CASE("interpolation weights are not normalized by default") {
    // A constant window exposes silent normalization: the unnormalized sum for
    // w=2 gives 0.5*c, the normalized variant gives c back.
    FmriWindow win;
    win.tokens = Tensor::full({2, 2, 3}, 2.0f);
    Rng r1 = Rng(4).child("n");
    FmriWindow plain = temporal_interpolate(win, 1.0f, r1);
    for (float v : plain.tokens.data) CHECK(v == doctest::Approx(1.0f));
    Rng r2 = Rng(4).child("n");
    FmriWindow normed = temporal_interpolate(win, 1.0f, r2, true);
    for (float v : normed.tokens.data) CHECK(v == doctest::Approx(2.0f));
}

TEST_CASE("temporal interpolation edge cases") {
    FmriWindow win = make_window(4, 2, 3, 5, false);
    Rng r0 = Rng(0);
    FmriWindow id = temporal_interpolate(win, 0.0f, r0);
    CHECK(std::memcmp(id.tokens.data.data(), win.tokens.data.data(),
                      win.tokens.data.size() * sizeof(float)) == 0);
    // round(0.1 * 4) = 0 frames.
    FmriWindow still = temporal_interpolate(win, 0.1f, r0);
    CHECK(std::memcmp(still.tokens.data.data(), win.tokens.data.data(),
                      win.tokens.data.size() * sizeof(float)) == 0);

    FmriWindow one;
    one.tokens = Tensor::zeros({1, 2, 3});
    CHECK_THROWS_AS(temporal_interpolate(one, 1.0f, r0), Error);
    CHECK_THROWS_AS(temporal_interpolate(win, 2.0f, r0), Error);

    // Determinism.
    Rng ra = Rng(6).child("t"), rb = Rng(6).child("t");
    FmriWindow a = temporal_interpolate(win, 0.5f, ra);
    FmriWindow b = temporal_interpolate(win, 0.5f, rb);
    CHECK(std::memcmp(a.tokens.data.data(), b.tokens.data.data(),
                      a.tokens.data.size() * sizeof(float)) == 0);
}

TEST_CASE("augment config validation") {
    AugmentConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    cfg.gamma_spa = 1.2f;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg.gamma_spa = 0.2f;
    cfg.gamma_tem = -0.5f;
    CHECK_THROWS_AS(cfg.validate(), Error);
}
