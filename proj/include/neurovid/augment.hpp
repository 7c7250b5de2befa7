#pragma once

#include "neurovid/fmri.hpp"
#include "neurovid/rng.hpp"

namespace neurovid {

struct AugmentConfig {
    float gamma_spa = 0.2f;  // fraction of embedding columns zeroed
    float gamma_tem = 1.0f / 3.0f;  // fraction of frames replaced by interpolation
    // The interpolation weights (1 - |i-j|/w) are used as printed, without
    // normalizing them to sum to 1; set true to renormalize.
    bool normalize_interpolation = false;

    void validate() const {
        require(gamma_spa >= 0.0f && gamma_spa <= 1.0f, ErrorKind::Config,
                "gamma_spa must be in [0,1]");
        require(gamma_tem >= 0.0f && gamma_tem <= 1.0f, ErrorKind::Config,
                "gamma_tem must be in [0,1]");
    }
};

// Zeroes round(gamma_spa * b) embedding columns, the same columns in every
// frame and token of the window; the draw is per call (i.e. per batch element).
FmriWindow spatial_mask(const FmriWindow& window, float gamma_spa, Rng& rng);

// Replaces round(gamma_tem * w) distinct frames i with
//   v̂_i = Σ_{j≠i} (1 − |i−j|/w) · v_j
// evaluated over the original frames.
FmriWindow temporal_interpolate(const FmriWindow& window, float gamma_tem, Rng& rng,
                                bool normalize = false);

}  // namespace neurovid
