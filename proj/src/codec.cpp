#include <algorithm>
#include <cmath>

#include "neurovid/archive.hpp"
#include "neurovid/diffusion.hpp"

namespace neurovid {

using namespace ag;

void CodecConfig::validate() const {
    require(latent_channels >= 1, ErrorKind::Config, "codec: latent_channels must be >= 1");
    require(hidden >= 1, ErrorKind::Config, "codec: hidden must be >= 1");
}

void CodecTrainConfig::validate() const {
    require(steps >= 1 && batch >= 1, ErrorKind::Config, "codec: steps and batch must be >= 1");
    require(lr > 0.0, ErrorKind::Config, "codec: lr must be > 0");
}

namespace {

void check_video(const Tensor& video) {
    require(video.shape.size() == 4 && video.shape[1] == 3, ErrorKind::Validation,
            "codec: video is [m, 3, H, W]");
    require(video.shape[2] % 4 == 0 && video.shape[3] % 4 == 0, ErrorKind::Validation,
            "codec: H and W must be divisible by 4");
}

}  // namespace

Codec::Codec(CodecConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    if (cfg_.identity) return;
    Rng root(seed);
    auto conv = [&](const std::string& name, int co, int ci) {
        const double std = 1.0 / std::sqrt(static_cast<double>(ci * 9));
        params_.add(name + ".w", {co, ci, 3, 3},
                    [std](Rng& r) { return r.normal(0.0, std); }, root.child(name));
        params_.add_zeros(name + ".b", {co});
    };
    const int h = cfg_.hidden, c = cfg_.latent_channels;
    conv("e1", h, 3);
    conv("e2", h, h);
    conv("e3", c, h);
    conv("d1", h, c);
    conv("d2", h, h);
    conv("d3", 3, h);
    norm_mu_ = Tensor::zeros({c});
    norm_sigma_ = Tensor::zeros({c});
    for (auto& v : norm_sigma_.data) v = 1.0f;
}

Var Codec::encode_graph(const Var& frames) const {
    // Replicate padding keeps constant frames spatially constant end to end.
    Var h = silu(conv2d(frames, params_.get("e1.w"), params_.get("e1.b"), 1, true));
    h = avgpool2(h);
    h = silu(conv2d(h, params_.get("e2.w"), params_.get("e2.b"), 1, true));
    h = avgpool2(h);
    return conv2d(h, params_.get("e3.w"), params_.get("e3.b"), 1, true);
}

Var Codec::decode_graph(const Var& latent) const {
    Var h = silu(conv2d(latent, params_.get("d1.w"), params_.get("d1.b"), 1, true));
    h = upsample2(h);
    h = silu(conv2d(h, params_.get("d2.w"), params_.get("d2.b"), 1, true));
    h = upsample2(h);
    return conv2d(h, params_.get("d3.w"), params_.get("d3.b"), 1, true);
}

LatentVideo Codec::encode(const Tensor& video) const {
    check_video(video);
    const int64_t m = video.shape[0], H = video.shape[2], W = video.shape[3];
    LatentVideo out;
    if (cfg_.identity) {
        // Exact 4x4 block averages.
        out.z = Tensor::zeros({m, 3, H / 4, W / 4});
        for (int64_t n = 0; n < m; ++n)
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t ho = 0; ho < H / 4; ++ho)
                    for (int64_t wo = 0; wo < W / 4; ++wo) {
                        double s = 0.0;
                        for (int64_t dh = 0; dh < 4; ++dh)
                            for (int64_t dw = 0; dw < 4; ++dw)
                                s += video.at({n, c, ho * 4 + dh, wo * 4 + dw});
                        out.z.at({n, c, ho, wo}) = static_cast<float>(s / 16.0);
                    }
        return out;
    }
    Var z = encode_graph(from_tensor(video));
    out.z = Tensor::zeros(z.shape());
    const int64_t hw = z.dim(2) * z.dim(3);
    for (int64_t n = 0; n < m; ++n)
        for (int64_t c = 0; c < cfg_.latent_channels; ++c) {
            const double mu = norm_mu_.data[static_cast<size_t>(c)];
            const double sg = norm_sigma_.data[static_cast<size_t>(c)];
            const double* src = z.n->val.data() + (n * cfg_.latent_channels + c) * hw;
            float* dst = out.z.data.data() + (n * cfg_.latent_channels + c) * hw;
            for (int64_t i = 0; i < hw; ++i)
                dst[i] = static_cast<float>((src[i] - mu) / sg);
        }
    return out;
}

Tensor Codec::decode(const LatentVideo& latent) const {
    latent.validate();
    const int64_t m = latent.z.shape[0];
    if (cfg_.identity) {
        require(latent.z.shape[1] == 3, ErrorKind::Validation,
                "codec: identity latents keep 3 channels");
        const int64_t h = latent.z.shape[2], w = latent.z.shape[3];
        Tensor out = Tensor::zeros({m, 3, h * 4, w * 4});
        for (int64_t n = 0; n < m; ++n)
            for (int64_t c = 0; c < 3; ++c)
                for (int64_t y = 0; y < h * 4; ++y)
                    for (int64_t x = 0; x < w * 4; ++x)
                        out.at({n, c, y, x}) = latent.z.at({n, c, y / 4, x / 4});
        return out;
    }
    require(latent.z.shape[1] == cfg_.latent_channels, ErrorKind::Validation,
            "codec: latent channel mismatch");
    Tensor denorm = Tensor::zeros(latent.z.shape);
    const int64_t hw = latent.z.shape[2] * latent.z.shape[3];
    for (int64_t n = 0; n < m; ++n)
        for (int64_t c = 0; c < cfg_.latent_channels; ++c) {
            const double mu = norm_mu_.data[static_cast<size_t>(c)];
            const double sg = norm_sigma_.data[static_cast<size_t>(c)];
            const float* src = latent.z.data.data() + (n * cfg_.latent_channels + c) * hw;
            float* dst = denorm.data.data() + (n * cfg_.latent_channels + c) * hw;
            for (int64_t i = 0; i < hw; ++i)
                dst[i] = static_cast<float>(src[i] * sg + mu);
        }
    Var x = decode_graph(from_tensor(denorm));
    Tensor out = Tensor::zeros(x.shape());
    for (size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = static_cast<float>(std::clamp(x.n->val[i], 0.0, 1.0));
    return out;
}

std::vector<double> Codec::train(const std::vector<Tensor>& videos,
                                 const CodecTrainConfig& tcfg) {
    tcfg.validate();
    if (cfg_.identity) return {};
    require(!videos.empty(), ErrorKind::Validation, "codec: no training videos");
    for (const auto& v : videos) check_video(v);
    const int64_t H = videos[0].shape[2], W = videos[0].shape[3];

    // Flatten to a frame pool.
    std::vector<std::pair<size_t, int64_t>> pool;
    for (size_t v = 0; v < videos.size(); ++v)
        for (int64_t f = 0; f < videos[v].shape[0]; ++f) pool.emplace_back(v, f);

    const int64_t fsz = 3 * H * W;
    auto frame_at = [&](size_t idx) {
        const auto& [v, f] = pool[idx];
        return videos[v].data.data() + static_cast<size_t>(f * fsz);
    };

    Rng root(tcfg.seed);
    Adam adam({tcfg.lr});
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(tcfg.steps));

    NamedTensors good;
    params_.save(good, "codec.");
    int good_step = -1;

    for (int step = 0; step < tcfg.steps; ++step) {
        Rng pick = root.child("step").child(static_cast<uint64_t>(step));
        std::vector<double> batch(static_cast<size_t>(tcfg.batch * fsz));
        for (int i = 0; i < tcfg.batch; ++i) {
            const float* src = frame_at(static_cast<size_t>(pick.below(pool.size())));
            for (int64_t k = 0; k < fsz; ++k)
                batch[static_cast<size_t>(i * fsz + k)] = src[k];
        }
        Var x = constant({tcfg.batch, 3, H, W}, std::move(batch));
        Var loss = mse_loss(decode_graph(encode_graph(x)), x);
        const double value = loss.n->val[0];
        if (!std::isfinite(value)) {
            params_.load(good, "codec.");
            fail(ErrorKind::Numeric,
                 "codec: diverged at step " + std::to_string(step) +
                     "; rolled back to step " + std::to_string(good_step));
        }
        good = NamedTensors();
        params_.save(good, "codec.");
        good_step = step;

        params_.zero_grad();
        backward(loss);
        adam.step(params_);
        losses.push_back(value);
    }

    // Fit per-channel latent statistics on (a deterministic subset of) the pool.
    Rng fit_rng = root.child("normfit");
    const int64_t take = std::min<int64_t>(static_cast<int64_t>(pool.size()), 512);
    const auto chosen =
        sample_without_replacement(static_cast<int64_t>(pool.size()), take, fit_rng);
    std::vector<double> sum(static_cast<size_t>(cfg_.latent_channels), 0.0);
    std::vector<double> sq(static_cast<size_t>(cfg_.latent_channels), 0.0);
    int64_t count = 0;
    for (int64_t idx : chosen) {
        std::vector<double> one(frame_at(static_cast<size_t>(idx)),
                                frame_at(static_cast<size_t>(idx)) + fsz);
        Var z = encode_graph(constant({1, 3, H, W}, std::move(one)));
        const int64_t hw = z.dim(2) * z.dim(3);
        for (int64_t c = 0; c < cfg_.latent_channels; ++c) {
            const double* src = z.n->val.data() + c * hw;
            for (int64_t i = 0; i < hw; ++i) {
                sum[static_cast<size_t>(c)] += src[i];
                sq[static_cast<size_t>(c)] += src[i] * src[i];
            }
        }
        count += hw;
    }
    for (int64_t c = 0; c < cfg_.latent_channels; ++c) {
        const double mu = sum[static_cast<size_t>(c)] / static_cast<double>(count);
        const double var = sq[static_cast<size_t>(c)] / static_cast<double>(count) - mu * mu;
        norm_mu_.data[static_cast<size_t>(c)] = static_cast<float>(mu);
        norm_sigma_.data[static_cast<size_t>(c)] =
            static_cast<float>(std::sqrt(std::max(var, 1e-12)));
    }
    return losses;
}

void Codec::save(NamedTensors& out) const {
    if (cfg_.identity) return;
    params_.save(out, "codec.");
    out.add("codec.norm.mu", norm_mu_);
    out.add("codec.norm.sigma", norm_sigma_);
}

void Codec::load(const NamedTensors& in) {
    if (cfg_.identity) return;
    params_.load(in, "codec.");
    norm_mu_ = in.get("codec.norm.mu");
    norm_sigma_ = in.get("codec.norm.sigma");
}

}  // namespace neurovid
