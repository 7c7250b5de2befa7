#include <cmath>

#include "neurovid/archive.hpp"
#include "neurovid/diffusion.hpp"

namespace neurovid {

using namespace ag;

void DenoiserConfig::validate() const {
    require(in_channels >= 1, ErrorKind::Config, "denoiser: in_channels must be >= 1");
    require(base_channels >= 2, ErrorKind::Config, "denoiser: base_channels must be >= 2");
    require(heads >= 1 && base_channels % heads == 0, ErrorKind::Config,
            "denoiser: heads must divide base_channels");
    require(groups >= 1 && base_channels % groups == 0, ErrorKind::Config,
            "denoiser: groups must divide base_channels");
    require(cond_tokens >= 1 && cond_dim >= 1, ErrorKind::Config,
            "denoiser: conditioning shape must be positive");
    require(temporal_window >= 1, ErrorKind::Config, "denoiser: temporal window must be >= 1");
    require(time_dim >= 2 && time_dim % 2 == 0, ErrorKind::Config,
            "denoiser: time_dim must be even and >= 2");
}

namespace {

// Sinusoidal embedding of an integer timestep, [1, dim].
Var timestep_embedding(int t, int dim) {
    std::vector<double> e(static_cast<size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq =
            std::exp(-std::log(10000.0) * (half > 1 ? static_cast<double>(i) / (half - 1) : 0.0));
        e[static_cast<size_t>(2 * i)] = std::sin(t * freq);
        e[static_cast<size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    return constant({1, dim}, std::move(e));
}

}  // namespace

Denoiser::Denoiser(DenoiserConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng root(seed);
    const int b0 = cfg_.base_channels;
    const int b1 = 2 * b0;
    const int th = 2 * b0;  // time-embedding hidden width

    auto normal = [](double std) {
        return [std](Rng& r) { return r.normal(0.0, std); };
    };
    auto ones = [](Rng&) { return 1.0; };

    auto conv = [&](const std::string& name, int co, int ci, int k) {
        const double std = 1.0 / std::sqrt(static_cast<double>(ci * k * k));
        params_.add(name + ".w", {co, ci, k, k}, normal(std), root.child(name + ".w"));
        params_.add_zeros(name + ".b", {co});
    };
    auto gn = [&](const std::string& name, int c) {
        params_.add(name + ".g", {c}, ones, root.child(name + ".g"));
        params_.add_zeros(name + ".b", {c});
    };
    auto res = [&](const std::string& name, int ci, int co) {
        gn(name + ".gn1", ci);
        conv(name + ".conv1", co, ci, 3);
        params_.add(name + ".temb.w", {th, co}, normal(0.02), root.child(name + ".temb.w"));
        params_.add_zeros(name + ".temb.b", {co});
        gn(name + ".gn2", co);
        conv(name + ".conv2", co, co, 3);
        if (ci != co) conv(name + ".skip", co, ci, 1);
    };
    auto attn = [&](const std::string& name, int c) {
        for (const char* part : {"sa", "ta"}) {
            gn(name + "." + part + ".gn", c);
            for (const char* m : {"wq", "wk", "wv", "wo"})
                params_.add(name + "." + part + "." + m, {c, c}, normal(0.02),
                            root.child(name + "." + part + "." + m));
        }
        gn(name + ".ca.gn", c);
        params_.add(name + ".ca.wq", {c, c}, normal(0.02), root.child(name + ".ca.wq"));
        params_.add(name + ".ca.wk", {cfg_.cond_dim, c}, normal(0.02),
                    root.child(name + ".ca.wk"));
        params_.add(name + ".ca.wv", {cfg_.cond_dim, c}, normal(0.02),
                    root.child(name + ".ca.wv"));
        params_.add(name + ".ca.wo", {c, c}, normal(0.02), root.child(name + ".ca.wo"));
    };

    params_.add("time.w1", {cfg_.time_dim, th}, normal(0.02), root.child("time.w1"));
    params_.add_zeros("time.b1", {th});
    params_.add("time.w2", {th, th}, normal(0.02), root.child("time.w2"));
    params_.add_zeros("time.b2", {th});

    conv("conv_in", b0, cfg_.in_channels, 3);
    res("r0", b0, b0);
    attn("a0", b0);
    res("r1", b0, b1);
    attn("a1", b1);
    res("r2", b1, b1);
    res("r3", b1 + b0, b0);
    gn("gn_out", b0);
    // Zero-initialized output projection: a fresh denoiser predicts zero.
    params_.add_zeros("conv_out.w", {cfg_.in_channels, b0, 3, 3});
    params_.add_zeros("conv_out.b", {cfg_.in_channels});
}

Var Denoiser::res_block(const Var& x, const std::string& name, const Var& temb) const {
    const Var w1 = params_.get(name + ".conv1.w");
    const int64_t ci = x.dim(1);
    const int64_t co = w1.dim(0);
    Var h = conv2d(silu(groupnorm(x, params_.get(name + ".gn1.g"), params_.get(name + ".gn1.b"),
                                  cfg_.groups)),
                   w1, params_.get(name + ".conv1.b"), 1);
    Var tproj = add_rowvec(matmul(temb, params_.get(name + ".temb.w")),
                           params_.get(name + ".temb.b"));
    h = add_bias_chw(h, reshape(tproj, {co}));
    h = conv2d(silu(groupnorm(h, params_.get(name + ".gn2.g"), params_.get(name + ".gn2.b"),
                              cfg_.groups)),
               params_.get(name + ".conv2.w"), params_.get(name + ".conv2.b"), 1);
    Var skip = ci == co ? x
                        : conv2d(x, params_.get(name + ".skip.w"),
                                 params_.get(name + ".skip.b"), 0);
    return add(skip, h);
}

Var Denoiser::attn_stack(const Var& x, const std::string& name, const Tensor& condition) const {
    auto gnorm = [&](const Var& v, const std::string& part) {
        return groupnorm(v, params_.get(name + "." + part + ".gn.g"),
                         params_.get(name + "." + part + ".gn.b"), cfg_.groups);
    };
    auto w = [&](const std::string& part, const char* m) {
        return params_.get(name + "." + part + "." + m);
    };
    Var h = add(x, spatial_attention(gnorm(x, "sa"), w("sa", "wq"), w("sa", "wk"), w("sa", "wv"),
                                     w("sa", "wo"), cfg_.heads));
    h = add(h, temporal_attention(gnorm(h, "ta"), w("ta", "wq"), w("ta", "wk"), w("ta", "wv"),
                                  w("ta", "wo"), cfg_.heads, cfg_.temporal_window));
    std::vector<double> cd(condition.data.begin(), condition.data.end());
    Var cond = constant({cfg_.cond_tokens, cfg_.cond_dim}, std::move(cd));
    h = add(h, cross_attention(gnorm(h, "ca"), cond, w("ca", "wq"), w("ca", "wk"), w("ca", "wv"),
                               w("ca", "wo"), cfg_.heads));
    return h;
}

Var Denoiser::forward(const Var& z_t, int t, int T, const Tensor& condition) const {
    require(z_t.shape().size() == 4, ErrorKind::Validation, "denoiser: input is [m, c, h, w]");
    require(z_t.dim(1) == cfg_.in_channels, ErrorKind::Config, "denoiser: channel mismatch");
    require(z_t.dim(2) % 2 == 0 && z_t.dim(3) % 2 == 0 && z_t.dim(2) >= 2 && z_t.dim(3) >= 2,
            ErrorKind::Config, "denoiser: spatial dims must be even");
    require(T >= 1 && t >= 0 && t < T, ErrorKind::Index, "denoiser: timestep out of range");
    require(condition.shape ==
                std::vector<int64_t>({cfg_.cond_tokens, cfg_.cond_dim}),
            ErrorKind::Validation, "denoiser: condition shape mismatch");

    Var temb = add_rowvec(matmul(timestep_embedding(t, cfg_.time_dim), params_.get("time.w1")),
                          params_.get("time.b1"));
    temb = add_rowvec(matmul(silu(temb), params_.get("time.w2")), params_.get("time.b2"));

    Var h0 = conv2d(z_t, params_.get("conv_in.w"), params_.get("conv_in.b"), 1);
    h0 = res_block(h0, "r0", temb);
    h0 = attn_stack(h0, "a0", condition);
    Var d1 = avgpool2(h0);
    d1 = res_block(d1, "r1", temb);
    d1 = attn_stack(d1, "a1", condition);
    d1 = res_block(d1, "r2", temb);
    Var u = concat_channels(upsample2(d1), h0);
    u = res_block(u, "r3", temb);
    u = silu(groupnorm(u, params_.get("gn_out.g"), params_.get("gn_out.b"), cfg_.groups));
    return conv2d(u, params_.get("conv_out.w"), params_.get("conv_out.b"), 1);
}

Tensor Denoiser::predict(const Tensor& z_t, int t, int T, const Tensor& condition) const {
    Var out = forward(from_tensor(z_t), t, T, condition);
    Tensor r = Tensor::zeros(out.shape());
    for (size_t i = 0; i < r.data.size(); ++i) r.data[i] = static_cast<float>(out.n->val[i]);
    return r;
}

void Denoiser::save(NamedTensors& out) const { params_.save(out, "den."); }
void Denoiser::load(const NamedTensors& in) { params_.load(in, "den."); }

void Phase2Config::validate() const {
    require(steps >= 1, ErrorKind::Config, "phase2: steps must be >= 1");
    require(batch_clips >= 1, ErrorKind::Config, "phase2: batch_clips must be >= 1");
    require(lr > 0.0, ErrorKind::Config, "phase2: lr must be > 0");
    require(beta >= 0.0 && beta <= 1.0, ErrorKind::Config, "phase2: beta must lie in [0,1]");
}

std::vector<Phase2LogRow> train_phase2(Denoiser& den, const std::vector<LatentVideo>& latents,
                                       const std::vector<Tensor>& conditions,
                                       const NoiseSchedule& schedule, const Phase2Config& cfg) {
    cfg.validate();
    require(!latents.empty(), ErrorKind::Validation, "phase2: no training latents");
    require(conditions.size() == latents.size(), ErrorKind::Validation,
            "phase2: conditions must align with latents");
    for (const auto& l : latents) {
        l.validate();
        require(l.z.shape == latents[0].z.shape, ErrorKind::Validation,
                "phase2: latents must share one shape");
    }
    const auto& zshape = latents[0].z.shape;
    const std::vector<int64_t> frame_shape(zshape.begin() + 1, zshape.end());
    const int frames = static_cast<int>(zshape[0]);

    DependentNoiseSpec spec;
    spec.beta = cfg.use_dependent_noise ? cfg.beta : 0.0;
    spec.frames = frames;

    Rng root(cfg.seed);
    Adam adam({cfg.lr});
    std::vector<Phase2LogRow> log;
    log.reserve(static_cast<size_t>(cfg.steps));

    NamedTensors good;
    den.save(good);
    int good_step = -1;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng step_rng = root.child("step").child(static_cast<uint64_t>(step));
        Rng pick = step_rng.child("pick");
        Rng trng = step_rng.child("t");
        Var loss;
        for (int i = 0; i < cfg.batch_clips; ++i) {
            const size_t j =
                static_cast<size_t>(pick.below(static_cast<uint64_t>(latents.size())));
            const int t = static_cast<int>(trng.below(static_cast<uint64_t>(schedule.T)));
            Rng noise_rng = step_rng.child("noise").child(static_cast<uint64_t>(i));
            const Tensor noise = dependent_noise(spec, frame_shape, noise_rng);
            const LatentVideo z_t = forward_diffuse(latents[j], t, noise, schedule);
            Var err = mse_loss(den.forward(from_tensor(z_t.z), t, schedule.T, conditions[j]),
                               from_tensor(noise));
            loss = loss.defined() ? add(loss, err) : err;
        }
        loss = scale(loss, 1.0 / cfg.batch_clips);

        const double value = loss.n->val[0];
        if (!std::isfinite(value)) {
            den.load(good);
            fail(ErrorKind::Numeric,
                 "phase2: non-finite loss at step " + std::to_string(step) +
                     "; denoiser rolled back to step " + std::to_string(good_step));
        }
        good = NamedTensors();
        den.save(good);
        good_step = step;

        den.params().zero_grad();
        backward(loss);
        adam.step(den.params());
        log.push_back({step, value});
    }
    return log;
}

}  // namespace neurovid
