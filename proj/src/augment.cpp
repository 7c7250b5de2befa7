#include "neurovid/augment.hpp"

#include <cmath>

namespace neurovid {

FmriWindow spatial_mask(const FmriWindow& window, float gamma_spa, Rng& rng) {
    require(gamma_spa >= 0.0f && gamma_spa <= 1.0f, ErrorKind::Config,
            "gamma_spa must be in [0,1]");
    const int64_t b = window.token_dim();
    const int64_t k = std::lround(static_cast<double>(gamma_spa) * static_cast<double>(b));
    FmriWindow out = window;
    if (k == 0) return out;
    const auto cols = sample_without_replacement(b, k, rng);
    const int64_t rows = window.frames() * window.patches();
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t col : cols) out.tokens.data[static_cast<size_t>(r * b + col)] = 0.0f;
    return out;
}

FmriWindow temporal_interpolate(const FmriWindow& window, float gamma_tem, Rng& rng,
                                bool normalize) {
    require(gamma_tem >= 0.0f && gamma_tem <= 1.0f, ErrorKind::Config,
            "gamma_tem must be in [0,1]");
    const int64_t w = window.frames();
    require(w >= 2, ErrorKind::Validation, "temporal interpolation needs at least 2 frames");
    const int64_t k = std::lround(static_cast<double>(gamma_tem) * static_cast<double>(w));
    FmriWindow out = window;
    if (k == 0) return out;
    const auto frames = sample_without_replacement(w, k, rng);
    const int64_t frame_len = window.patches() * window.token_dim();
    for (int64_t i : frames) {
        double weight_sum = 0.0;
        std::vector<double> acc(static_cast<size_t>(frame_len), 0.0);
        for (int64_t j = 0; j < w; ++j) {
            if (j == i) continue;
            const double weight =
                1.0 - static_cast<double>(std::llabs(i - j)) / static_cast<double>(w);
            weight_sum += weight;
            const float* src = window.tokens.data.data() + j * frame_len;
            for (int64_t t = 0; t < frame_len; ++t) acc[static_cast<size_t>(t)] += weight * src[t];
        }
        const double scale = normalize && weight_sum > 0.0 ? 1.0 / weight_sum : 1.0;
        float* dst = out.tokens.data.data() + i * frame_len;
        for (int64_t t = 0; t < frame_len; ++t)
            dst[t] = static_cast<float>(acc[static_cast<size_t>(t)] * scale);
    }
    return out;
}

}  // namespace neurovid
