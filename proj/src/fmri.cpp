#include "neurovid/fmri.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace neurovid {

Tensor patchify(const FmriFrame& frame, const PatchConfig& cfg, const Tensor& embed_weights) {
    cfg.validate();
    require(embed_weights.rank() == 2 && embed_weights.dim(0) == cfg.patch_size &&
                embed_weights.dim(1) == cfg.embed_dim,
            ErrorKind::Config, "embed_weights must have shape [patch_size, embed_dim]");
    require(embed_weights.all_finite(), ErrorKind::Validation, "embed_weights must be finite");
    const int v_count = static_cast<int>(frame.voxels.size());
    require(v_count > 0, ErrorKind::Validation, "frame has no voxels");
    for (float v : frame.voxels)
        require(std::isfinite(v), ErrorKind::Validation, "non-finite voxel value rejected");

    const int p = cfg.num_patches(v_count);
    const int ps = cfg.patch_size;
    const int b = cfg.embed_dim;
    Tensor out = Tensor::zeros({p, b});
    for (int i = 0; i < p; ++i) {
        for (int j = 0; j < b; ++j) {
            double acc = 0.0;
            for (int k = 0; k < ps; ++k) {
                const int vi = i * ps + k;
                const double voxel = vi < v_count ? frame.voxels[static_cast<size_t>(vi)]
                                                  : cfg.pad_value;
                acc += voxel * embed_weights.at({k, j});
            }
            out.at({i, j}) = static_cast<float>(acc);
        }
    }
    return out;
}

FmriFrame inverse_project(const Tensor& tokens, const PatchConfig& cfg,
                          const Tensor& embed_weights, int voxel_count) {
    cfg.validate();
    require(tokens.rank() == 2 && tokens.dim(1) == cfg.embed_dim, ErrorKind::Config,
            "tokens must have shape [p, embed_dim]");
    const int p = static_cast<int>(tokens.dim(0));
    require(p == cfg.num_patches(voxel_count), ErrorKind::Config,
            "token count inconsistent with voxel_count");
    const int ps = cfg.patch_size;
    const int b = cfg.embed_dim;

    // Right pseudo-inverse of W [ps, b]: pinv = W^T (W W^T)^-1, valid for
    // full row rank. Rank deficiency is a numerical error per contract.
    Eigen::MatrixXd W(ps, b);
    for (int i = 0; i < ps; ++i)
        for (int j = 0; j < b; ++j) W(i, j) = embed_weights.at({i, j});
    Eigen::MatrixXd gram = W * W.transpose();
    Eigen::FullPivLU<Eigen::MatrixXd> lu(gram);
    require(lu.isInvertible(), ErrorKind::Numeric,
            "embedding weights are rank-deficient; pseudo-inverse undefined");
    Eigen::MatrixXd pinv = W.transpose() * lu.inverse();  // [b, ps]

    FmriFrame out;
    out.voxels.assign(static_cast<size_t>(voxel_count), 0.0f);
    for (int i = 0; i < p; ++i) {
        for (int k = 0; k < ps; ++k) {
            const int vi = i * ps + k;
            if (vi >= voxel_count) break;  // padding stripped
            double acc = 0.0;
            for (int j = 0; j < b; ++j) acc += tokens.at({i, j}) * pinv(j, k);
            out.voxels[static_cast<size_t>(vi)] = static_cast<float>(acc);
        }
    }
    return out;
}

std::vector<FmriWindow> make_windows(const std::vector<FmriFrame>& frames, int w, int stride,
                                     const PatchConfig& cfg) {
    require(w >= 1, ErrorKind::Config, "window size must be >= 1");
    require(stride >= 1, ErrorKind::Config, "stride must be >= 1");
    require(static_cast<int>(frames.size()) >= w, ErrorKind::Validation,
            "not enough frames for one window");
    cfg.validate();

    const int v_count = static_cast<int>(frames.front().voxels.size());
    const int p = cfg.num_patches(v_count);
    const int ps = cfg.patch_size;

    // Raw grouping: identity embedding with b == patch_size.
    Tensor identity = Tensor::zeros({ps, ps});
    for (int i = 0; i < ps; ++i) identity.at({i, i}) = 1.0f;
    PatchConfig raw_cfg = cfg;
    raw_cfg.embed_dim = ps;

    const int count = window_count(static_cast<int>(frames.size()), w, stride);
    std::vector<FmriWindow> out;
    out.reserve(static_cast<size_t>(count));
    for (int k = 0; k < count; ++k) {
        const int start = k * stride;
        FmriWindow win;
        win.window_start = start;
        win.tokens = Tensor::zeros({w, p, ps});
        for (int f = 0; f < w; ++f) {
            const FmriFrame& frame = frames[static_cast<size_t>(start + f)];
            require(static_cast<int>(frame.voxels.size()) == v_count, ErrorKind::Validation,
                    "frames must share a voxel count");
            Tensor tok = patchify(frame, raw_cfg, identity);
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < ps; ++j) win.tokens.at({f, i, j}) = tok.at({i, j});
        }
        out.push_back(std::move(win));
    }
    return out;
}

}  // namespace neurovid
