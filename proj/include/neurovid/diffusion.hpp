#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neurovid/autograd.hpp"
#include "neurovid/rng.hpp"
#include "neurovid/tensor.hpp"

namespace neurovid {

// ---------------------------------------------------------------------------
// Noise schedule

enum class ScheduleKind { Linear, Cosine };

ScheduleKind schedule_kind_from_string(const std::string& s);
std::string to_string(ScheduleKind k);

struct NoiseSchedule {
    int T = 0;
    std::vector<double> alpha_bar;  // length T, in (0,1], non-increasing
    ScheduleKind kind = ScheduleKind::Linear;
};

// Linear: per-step betas evenly spaced over [1e-4, 2e-2], alpha_bar is the
// running product of (1 - beta_t). Cosine: the squared-cosine ramp with the
// usual small offset.
NoiseSchedule make_schedule(int T, ScheduleKind kind);

// ---------------------------------------------------------------------------
// Dependent noise

struct DependentNoiseSpec {
    double beta = 0.5;  // shared-component weight; the mixing factor is sqrt(beta)
    int frames = 12;
    void validate() const;
};

// eps^j = sqrt(beta) * eps_s + sqrt(1 - beta) * eps_i^j, one shared draw plus
// one per-frame draw, all standard normal. Streams are split off `rng` by
// name so the shared and per-frame components are reproducible individually.
// Returns [frames, frame_shape...].
Tensor dependent_noise(const DependentNoiseSpec& spec, const std::vector<int64_t>& frame_shape,
                       Rng& rng);

// ---------------------------------------------------------------------------
// Latents and the forward process

struct LatentVideo {
    Tensor z;  // [m, c, h, w]
    void validate() const;
    int64_t frames() const { return z.shape[0]; }
};

// z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * noise
LatentVideo forward_diffuse(const LatentVideo& z0, int t, const Tensor& noise,
                            const NoiseSchedule& schedule);

// ---------------------------------------------------------------------------
// Denoiser

struct DenoiserConfig {
    int in_channels = 3;
    int base_channels = 8;    // second level uses twice this
    int cond_tokens = 8;      // rows of the conditioning matrix
    int cond_dim = 16;        // columns of the conditioning matrix
    int heads = 2;
    int temporal_window = 2;  // causal look-back, clamped at the clip start
    int time_dim = 16;        // sinusoidal timestep embedding width (even)
    int groups = 4;           // GroupNorm groups
    void validate() const;
};

// Two-level U-shaped denoiser over latent clips [m, c, h, w]. Convolutions
// are per-frame (pseudo-3D); each level applies spatial self-attention, then
// temporal attention over the causal look-back window, then cross-attention
// to the conditioning rows. No layer reads the absolute frame index, so a
// clip of identical frames stays identical through the network.
class Denoiser {
  public:
    Denoiser(DenoiserConfig cfg, uint64_t seed);

    const DenoiserConfig& config() const { return cfg_; }
    ag::ParamStore& params() { return params_; }
    const ag::ParamStore& params() const { return params_; }

    // Differentiable forward: z_t [m, c, h, w], timestep t of a T-step
    // schedule, condition [cond_tokens, cond_dim].
    ag::Var forward(const ag::Var& z_t, int t, int T, const Tensor& condition) const;

    // Evaluation wrapper over a plain tensor.
    Tensor predict(const Tensor& z_t, int t, int T, const Tensor& condition) const;

    void save(NamedTensors& out) const;
    void load(const NamedTensors& in);

  private:
    ag::Var res_block(const ag::Var& x, const std::string& name, const ag::Var& temb) const;
    ag::Var attn_stack(const ag::Var& x, const std::string& name, const Tensor& condition) const;

    DenoiserConfig cfg_;
    ag::ParamStore params_;
};

// ---------------------------------------------------------------------------
// Phase 2 training

struct Phase2Config {
    int steps = 400;
    int batch_clips = 4;
    double lr = 1e-3;
    double beta = 0.5;               // dependent-noise ratio used for corruption
    bool use_dependent_noise = true; // false trains with i.i.d. noise (beta 0)
    uint64_t seed = 0;
    void validate() const;
};

struct Phase2LogRow {
    int step;
    double loss;
};

// Each step samples clips, a uniform timestep per clip, and dependent noise;
// corrupts via the forward process; and minimizes the mean squared error
// between the drawn and predicted noise. A non-finite loss aborts with a
// Numeric error after rolling the denoiser back to the last parameters that
// produced a finite loss.
std::vector<Phase2LogRow> train_phase2(Denoiser& den, const std::vector<LatentVideo>& latents,
                                       const std::vector<Tensor>& conditions,
                                       const NoiseSchedule& schedule, const Phase2Config& cfg);

// ---------------------------------------------------------------------------
// DDIM sampling

// One DDIM update writes z_prev = a * z0_pred + b * eps_hat + sigma * xi.
// t_prev == -1 denotes the final step onto the clean estimate (alpha_bar 1).
struct DdimCoeffs {
    double a;
    double b;
    double sigma;
};
DdimCoeffs ddim_coeffs(const NoiseSchedule& schedule, int t, int t_prev, double eta);

struct SampleConfig {
    int ddim_steps = 10;
    double eta = 0.0;
    double beta = 0.5;  // dependent-noise ratio for the initial (and any step) noise
    void validate() const;
};

// Starts from dependent noise and runs the DDIM subsequence down to the clean
// estimate. `rng` drives the initial draw and, when eta > 0, the per-step
// noise (also dependent, same beta).
LatentVideo sample(const Denoiser& den, const Tensor& condition, const NoiseSchedule& schedule,
                   const std::vector<int64_t>& frame_shape, int frames, const SampleConfig& cfg,
                   Rng& rng);

// ---------------------------------------------------------------------------
// Latent codec

struct CodecConfig {
    bool identity = false;   // 4x average-pool encode / nearest-upsample decode
    int latent_channels = 4; // trained mode only; identity keeps input channels
    int hidden = 12;
    void validate() const;
};

struct CodecTrainConfig {
    int steps = 300;
    int batch = 8;
    double lr = 2e-3;
    uint64_t seed = 0;
    void validate() const;
};

// Maps [m, 3, H, W] videos in [0,1] to latents at H/4 x W/4 and back. The
// trained mode is a small conv autoencoder; after training, per-channel
// latent statistics are fitted so encoded latents are roughly standardized.
// Identity mode is exact block averaging and nearest upsampling.
class Codec {
  public:
    Codec(CodecConfig cfg, uint64_t seed);

    const CodecConfig& config() const { return cfg_; }
    int latent_channels() const { return cfg_.identity ? 3 : cfg_.latent_channels; }

    LatentVideo encode(const Tensor& video) const;
    Tensor decode(const LatentVideo& latent) const;  // clamped to [0,1]

    // Trains on frames drawn from the given videos, then fits the latent
    // normalization on the same pool. Returns the per-step loss curve.
    std::vector<double> train(const std::vector<Tensor>& videos, const CodecTrainConfig& tcfg);

    void save(NamedTensors& out) const;
    void load(const NamedTensors& in);

  private:
    ag::Var encode_graph(const ag::Var& frames) const;
    ag::Var decode_graph(const ag::Var& latent) const;

    CodecConfig cfg_;
    ag::ParamStore params_;
    Tensor norm_mu_, norm_sigma_;  // per-latent-channel statistics
};

double psnr(const Tensor& a, const Tensor& b);

}  // namespace neurovid
