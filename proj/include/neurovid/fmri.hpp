#pragma once

#include <vector>

#include "neurovid/tensor.hpp"

namespace neurovid {

// One flattened fMRI scan.
struct FmriFrame {
    std::vector<float> voxels;
    int timestamp_index = 0;
    float repetition_time_s = 2.0f;
};

// Patch grouping and token-embedding geometry. Voxel counts that are not a
// multiple of patch_size are zero-padded; the padding is stripped again on
// the way back to voxel space.
struct PatchConfig {
    int patch_size = 8;
    int embed_dim = 8;
    float pad_value = 0.0f;

    void validate() const {
        require(patch_size >= 1, ErrorKind::Config, "patch_size must be >= 1");
        require(embed_dim >= 1, ErrorKind::Config, "embed_dim must be >= 1");
    }

    int num_patches(int voxel_count) const {
        return (voxel_count + patch_size - 1) / patch_size;
    }
};

// Windowed token block: tokens has shape [w, p, b].
struct FmriWindow {
    Tensor tokens;
    int window_start = 0;
    int subject_id = 0;

    int64_t frames() const { return tokens.dim(0); }
    int64_t patches() const { return tokens.dim(1); }
    int64_t token_dim() const { return tokens.dim(2); }
};

// Groups a frame's voxels into patches and projects each patch with the
// token-embedding weights [patch_size, b]. The identity-extended weight case
// reduces this to raw patch grouping.
Tensor patchify(const FmriFrame& frame, const PatchConfig& cfg, const Tensor& embed_weights);

// Maps tokens [p, b] back to voxel space through the pseudo-inverse of the
// embedding weights; padding voxels are stripped. voxel_count is the original
// (unpadded) V.
FmriFrame inverse_project(const Tensor& tokens, const PatchConfig& cfg,
                          const Tensor& embed_weights, int voxel_count);

// Sliding windows over a scan sequence. Each window holds w frames grouped
// into raw patches (identity embedding); the learned token projection is
// applied later inside the encoder.
std::vector<FmriWindow> make_windows(const std::vector<FmriFrame>& frames, int w, int stride,
                                     const PatchConfig& cfg);

inline int window_count(int n_frames, int w, int stride) {
    return n_frames < w ? 0 : (n_frames - w) / stride + 1;
}

}  // namespace neurovid
