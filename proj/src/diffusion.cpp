#include "neurovid/diffusion.hpp"

#include <cmath>

namespace neurovid {

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "linear") return ScheduleKind::Linear;
    if (s == "cosine") return ScheduleKind::Cosine;
    fail(ErrorKind::Config, "unknown schedule kind: " + s);
}

std::string to_string(ScheduleKind k) {
    return k == ScheduleKind::Linear ? "linear" : "cosine";
}

NoiseSchedule make_schedule(int T, ScheduleKind kind) {
    require(T >= 2, ErrorKind::Config, "make_schedule: T must be >= 2");
    NoiseSchedule s;
    s.T = T;
    s.kind = kind;
    s.alpha_bar.resize(static_cast<size_t>(T));
    if (kind == ScheduleKind::Linear) {
        const double lo = 1e-4, hi = 2e-2;
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            const double beta = lo + (hi - lo) * t / (T - 1);
            prod *= 1.0 - beta;
            s.alpha_bar[static_cast<size_t>(t)] = prod;
        }
    } else {
        // Squared-cosine ramp; per-step ratios are clipped away from zero so
        // alpha_bar stays strictly positive.
        const double off = 0.008;
        auto f = [&](double u) {
            const double c = std::cos((u + off) / (1.0 + off) * M_PI / 2.0);
            return c * c;
        };
        const double f0 = f(0.0);
        double prod = 1.0;
        for (int t = 0; t < T; ++t) {
            const double target = f(static_cast<double>(t + 1) / T) / f0;
            double ratio = target / prod;  // 1 - beta_t
            ratio = std::min(1.0, std::max(ratio, 0.001));
            prod *= ratio;
            s.alpha_bar[static_cast<size_t>(t)] = prod;
        }
    }
    return s;
}

void DependentNoiseSpec::validate() const {
    require(beta >= 0.0 && beta <= 1.0, ErrorKind::Config,
            "dependent noise: beta must lie in [0,1]");
    require(frames >= 1, ErrorKind::Config, "dependent noise: frames must be >= 1");
}

Tensor dependent_noise(const DependentNoiseSpec& spec, const std::vector<int64_t>& frame_shape,
                       Rng& rng) {
    spec.validate();
    int64_t per = 1;
    for (int64_t d : frame_shape) {
        require(d >= 1, ErrorKind::Validation, "dependent noise: bad frame shape");
        per *= d;
    }
    std::vector<int64_t> shape;
    shape.push_back(spec.frames);
    shape.insert(shape.end(), frame_shape.begin(), frame_shape.end());
    Tensor out = Tensor::zeros(shape);

    const double ws = std::sqrt(spec.beta);
    const double wi = std::sqrt(1.0 - spec.beta);
    Rng shared_rng = rng.child("shared");
    std::vector<double> shared(static_cast<size_t>(per));
    for (auto& v : shared) v = shared_rng.normal();
    for (int j = 0; j < spec.frames; ++j) {
        Rng frame_rng = rng.child("frame").child(static_cast<uint64_t>(j));
        float* dst = out.data.data() + static_cast<size_t>(j) * static_cast<size_t>(per);
        for (int64_t i = 0; i < per; ++i)
            dst[i] = static_cast<float>(ws * shared[static_cast<size_t>(i)] +
                                        wi * frame_rng.normal());
    }
    return out;
}

void LatentVideo::validate() const {
    require(z.shape.size() == 4, ErrorKind::Validation, "latent video: need [m, c, h, w]");
    require(z.all_finite(), ErrorKind::Numeric, "latent video: non-finite values");
}

LatentVideo forward_diffuse(const LatentVideo& z0, int t, const Tensor& noise,
                            const NoiseSchedule& schedule) {
    z0.validate();
    require(t >= 0 && t < schedule.T, ErrorKind::Index, "forward_diffuse: t out of range");
    require(noise.shape == z0.z.shape, ErrorKind::Validation,
            "forward_diffuse: noise shape mismatch");
    const double ab = schedule.alpha_bar[static_cast<size_t>(t)];
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    LatentVideo out;
    out.z = Tensor::zeros(z0.z.shape);
    for (size_t i = 0; i < out.z.data.size(); ++i)
        out.z.data[i] = static_cast<float>(a * z0.z.data[i] + b * noise.data[i]);
    return out;
}

DdimCoeffs ddim_coeffs(const NoiseSchedule& schedule, int t, int t_prev, double eta) {
    require(t >= 0 && t < schedule.T, ErrorKind::Index, "ddim: t out of range");
    require(t_prev >= -1 && t_prev < t, ErrorKind::Index, "ddim: t_prev must precede t");
    require(eta >= 0.0, ErrorKind::Config, "ddim: eta must be >= 0");
    const double ab_t = schedule.alpha_bar[static_cast<size_t>(t)];
    const double ab_p = t_prev < 0 ? 1.0 : schedule.alpha_bar[static_cast<size_t>(t_prev)];
    DdimCoeffs c;
    c.sigma = eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_p);
    c.a = std::sqrt(ab_p);
    c.b = std::sqrt(std::max(0.0, 1.0 - ab_p - c.sigma * c.sigma));
    return c;
}

void SampleConfig::validate() const {
    require(ddim_steps >= 1, ErrorKind::Config, "sample: ddim_steps must be >= 1");
    require(eta >= 0.0, ErrorKind::Config, "sample: eta must be >= 0");
    require(beta >= 0.0 && beta <= 1.0, ErrorKind::Config, "sample: beta must lie in [0,1]");
}

LatentVideo sample(const Denoiser& den, const Tensor& condition, const NoiseSchedule& schedule,
                   const std::vector<int64_t>& frame_shape, int frames, const SampleConfig& cfg,
                   Rng& rng) {
    cfg.validate();
    require(cfg.ddim_steps <= schedule.T, ErrorKind::Config,
            "sample: ddim_steps exceeds schedule length");
    require(frames >= 1, ErrorKind::Config, "sample: frames must be >= 1");
    require(frame_shape.size() == 3, ErrorKind::Validation, "sample: frame shape is [c, h, w]");

    // Evenly spaced timestep subsequence ending at T-1.
    std::vector<int> tau(static_cast<size_t>(cfg.ddim_steps));
    for (int i = 0; i < cfg.ddim_steps; ++i)
        tau[static_cast<size_t>(i)] = static_cast<int>(llround(
                                          static_cast<double>(i + 1) * schedule.T /
                                          cfg.ddim_steps)) -
                                      1;

    DependentNoiseSpec spec;
    spec.beta = cfg.beta;
    spec.frames = frames;
    Rng init_rng = rng.child("init");
    Tensor z = dependent_noise(spec, frame_shape, init_rng);

    for (int s = cfg.ddim_steps - 1; s >= 0; --s) {
        const int t = tau[static_cast<size_t>(s)];
        const int t_prev = s > 0 ? tau[static_cast<size_t>(s - 1)] : -1;
        const Tensor eps = den.predict(z, t, schedule.T, condition);
        const DdimCoeffs c = ddim_coeffs(schedule, t, t_prev, cfg.eta);
        const double ab_t = schedule.alpha_bar[static_cast<size_t>(t)];
        const double inv_sa = 1.0 / std::sqrt(ab_t);
        const double sb = std::sqrt(1.0 - ab_t);

        Tensor step_noise;
        if (c.sigma > 0.0) {
            Rng step_rng = rng.child("step").child(static_cast<uint64_t>(t));
            step_noise = dependent_noise(spec, frame_shape, step_rng);
        }
        for (size_t i = 0; i < z.data.size(); ++i) {
            const double z0_pred = (z.data[i] - sb * eps.data[i]) * inv_sa;
            double v = c.a * z0_pred + c.b * eps.data[i];
            if (c.sigma > 0.0) v += c.sigma * step_noise.data[i];
            z.data[i] = static_cast<float>(v);
        }
    }
    LatentVideo out;
    out.z = std::move(z);
    out.validate();
    return out;
}

double psnr(const Tensor& a, const Tensor& b) {
    require(a.shape == b.shape && a.numel() > 0, ErrorKind::Validation,
            "psnr: shape mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) {
        const double d = static_cast<double>(a.data[i]) - b.data[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.data.size());
    if (mse <= 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(1.0 / mse);
}

}  // namespace neurovid
