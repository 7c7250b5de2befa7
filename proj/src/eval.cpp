#include "neurovid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "neurovid/util.hpp"

namespace neurovid {

Tensor video_to_chw(const Tensor& video) {
    require(video.rank() == 4 && video.dim(3) == 3, ErrorKind::Validation,
            "expected [F, H, W, 3] video, got " + video.shape_str());
    const int64_t f = video.dim(0), h = video.dim(1), w = video.dim(2);
    Tensor out = Tensor::zeros({f, 3, h, w});
    for (int64_t i = 0; i < f; ++i)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t c = 0; c < 3; ++c)
                    out.at({i, c, y, x}) = video.at({i, y, x, c});
    return out;
}

Tensor video_to_hwc(const Tensor& video) {
    require(video.rank() == 4 && video.dim(1) == 3, ErrorKind::Validation,
            "expected [F, 3, H, W] video, got " + video.shape_str());
    const int64_t f = video.dim(0), h = video.dim(2), w = video.dim(3);
    Tensor out = Tensor::zeros({f, h, w, 3});
    for (int64_t i = 0; i < f; ++i)
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t c = 0; c < 3; ++c)
                    out.at({i, y, x, c}) = video.at({i, c, y, x});
    return out;
}

namespace {

constexpr int kWin = 11;
constexpr double kSsimC1 = 0.01 * 0.01;
constexpr double kSsimC2 = 0.03 * 0.03;

const std::vector<double>& ssim_window() {
    static const std::vector<double> win = [] {
        std::vector<double> w(kWin * kWin);
        const double sigma = 1.5;
        double sum = 0.0;
        for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
                const double dy = i - kWin / 2, dx = j - kWin / 2;
                w[i * kWin + j] = std::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                sum += w[i * kWin + j];
            }
        for (double& v : w) v /= sum;
        return w;
    }();
    return win;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b) {
    require(a.rank() == 3 && b.rank() == 3, ErrorKind::Validation,
            "ssim expects [c, H, W] images");
    require(a.same_shape(b), ErrorKind::Validation,
            "ssim shape mismatch: " + a.shape_str() + " vs " + b.shape_str());
    require(a.all_finite() && b.all_finite(), ErrorKind::Numeric, "ssim: non-finite input");
    const int64_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    require(h >= kWin && w >= kWin, ErrorKind::Validation,
            "ssim needs at least an 11x11 image");
    const auto& win = ssim_window();
    double total = 0.0;
    int64_t count = 0;
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t y0 = 0; y0 + kWin <= h; ++y0)
            for (int64_t x0 = 0; x0 + kWin <= w; ++x0) {
                double ma = 0, mb = 0, eaa = 0, ebb = 0, eab = 0;
                for (int i = 0; i < kWin; ++i)
                    for (int j = 0; j < kWin; ++j) {
                        const double g = win[i * kWin + j];
                        const double va = a.at({ch, y0 + i, x0 + j});
                        const double vb = b.at({ch, y0 + i, x0 + j});
                        ma += g * va;
                        mb += g * vb;
                        eaa += g * va * va;
                        ebb += g * vb * vb;
                        eab += g * va * vb;
                    }
                const double sa = eaa - ma * ma;
                const double sb = ebb - mb * mb;
                const double sab = eab - ma * mb;
                const double num = (2.0 * ma * mb + kSsimC1) * (2.0 * sab + kSsimC2);
                const double den = (ma * ma + mb * mb + kSsimC1) * (sa + sb + kSsimC2);
                total += num / den;
                ++count;
            }
    return total / static_cast<double>(count);
}

void NwayConfig::validate(int classes) const {
    require(classes >= 1, ErrorKind::Config, "classifier must expose at least one class");
    require(n >= 1, ErrorKind::Config, "n-way size must be positive");
    require(n <= classes, ErrorKind::Config,
            "n-way size " + std::to_string(n) + " exceeds the " + std::to_string(classes) +
                " available classes");
    require(k >= 1 && k <= n, ErrorKind::Config, "top-k must be in [1, n]");
    require(trials >= 1, ErrorKind::Config, "trial count must be positive");
}

double nway_topk(const std::vector<double>& probs, int gt_class, const NwayConfig& cfg,
                 Rng& rng) {
    const int classes = static_cast<int>(probs.size());
    cfg.validate(classes);
    require(gt_class >= 0 && gt_class < classes, ErrorKind::Validation,
            "ground-truth class out of range");
    for (double p : probs)
        require(std::isfinite(p), ErrorKind::Numeric, "nway_topk: non-finite probability");
    int wins = 0;
    std::vector<int> cand;
    for (int t = 0; t < cfg.trials; ++t) {
        Rng trial = rng.child(static_cast<uint64_t>(t));
        cand.assign(1, gt_class);
        for (int64_t v : sample_without_replacement(classes - 1, cfg.n - 1, trial))
            cand.push_back(static_cast<int>(v < gt_class ? v : v + 1));
        // Shuffle before a stable sort so ties are broken uniformly rather
        // than by class index (a constant classifier then scores k/n).
        for (size_t i = cand.size(); i > 1; --i)
            std::swap(cand[i - 1], cand[trial.below(i)]);
        std::stable_sort(cand.begin(), cand.end(),
                         [&](int x, int y) { return probs[x] > probs[y]; });
        for (int i = 0; i < cfg.k; ++i)
            if (cand[i] == gt_class) {
                ++wins;
                break;
            }
    }
    return static_cast<double>(wins) / static_cast<double>(cfg.trials);
}

std::string content_hash(const NamedTensors& tensors) {
    std::string buf;
    for (const auto& [name, t] : tensors.items()) {
        buf += name;
        buf.push_back('\0');
        for (int64_t d : t.shape) {
            uint64_t u = static_cast<uint64_t>(d);
            for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
        }
        const size_t off = buf.size();
        buf.resize(off + t.data.size() * sizeof(float));
        std::memcpy(buf.data() + off, t.data.data(), t.data.size() * sizeof(float));
    }
    return sha256_hex(buf);
}

FmriWindow time_average_control(const FmriWindow& window) {
    const int64_t w = window.frames();
    require(w >= 2, ErrorKind::Config,
            "time-averaged control needs at least two fMRI frames per window");
    const int64_t per_frame = window.patches() * window.token_dim();
    FmriWindow out = window;
    for (int64_t i = 0; i < per_frame; ++i) {
        double mean = 0.0;
        for (int64_t f = 0; f < w; ++f)
            mean += window.tokens.data[static_cast<size_t>(f * per_frame + i)];
        const float m = static_cast<float>(mean / static_cast<double>(w));
        for (int64_t f = 0; f < w; ++f)
            out.tokens.data[static_cast<size_t>(f * per_frame + i)] = m;
    }
    return out;
}

std::vector<FmriWindow> time_average_control(const std::vector<FmriWindow>& windows) {
    std::vector<FmriWindow> out;
    out.reserve(windows.size());
    for (const auto& w : windows) out.push_back(time_average_control(w));
    return out;
}

FrameScorer make_scorer(const SceneClassifier& clf) {
    FrameScorer s;
    s.image = [&clf](const Tensor& frame) { return clf.image_probs(frame); };
    s.video = [&clf](const Tensor& clip) { return clf.video_probs(clip); };
    s.image_classes = clf.image_classes();
    s.video_classes = clf.video_classes();
    s.hash = clf.content_hash();
    return s;
}

const std::vector<std::string> kMetricCsvHeader = {
    "clip_id", "frame_id", "ssim",  "img_acc", "vid_acc",
    "N",       "K",        "trials", "seed",    "classifier_hash"};

namespace {

Tensor frame_of(const Tensor& clip, int64_t f) {
    const int64_t c = clip.dim(1), h = clip.dim(2), w = clip.dim(3);
    Tensor out = Tensor::zeros({c, h, w});
    const size_t stride = static_cast<size_t>(c * h * w);
    std::copy_n(clip.data.begin() + static_cast<int64_t>(stride) * f, stride, out.data.begin());
    return out;
}

}  // namespace

MetricReport evaluate_run(const std::vector<Tensor>& decoded, const std::vector<Tensor>& gt,
                          const std::vector<std::pair<int, int>>& labels,
                          const FrameScorer& scorer, const EvalConfig& cfg,
                          std::vector<std::vector<std::string>>* csv_rows) {
    require(!decoded.empty(), ErrorKind::Validation, "evaluate_run: no clips");
    require(decoded.size() == gt.size() && decoded.size() == labels.size(),
            ErrorKind::Validation, "evaluate_run: decoded/gt/labels are misaligned");
    require(static_cast<bool>(scorer.image) && static_cast<bool>(scorer.video),
            ErrorKind::Config, "evaluate_run: scorer is missing a head");
    cfg.image.validate(scorer.image_classes);
    cfg.video.validate(scorer.video_classes);
    require(scorer.video_classes % scorer.image_classes == 0, ErrorKind::Config,
            "video classes must factor as image classes x directions");
    const int directions = scorer.video_classes / scorer.image_classes;

    MetricReport rep;
    rep.subject = cfg.subject;
    rep.checkpoint = cfg.checkpoint;
    rep.classifier_hash = scorer.hash;
    rep.seed = cfg.seed;

    Rng root(cfg.seed);
    double ssim_clip_sum = 0.0;
    double img_acc_sum = 0.0, vid_acc_sum = 0.0;
    int64_t frame_count = 0;

    for (size_t i = 0; i < decoded.size(); ++i) {
        const Tensor& d = decoded[i];
        const Tensor& g = gt[i];
        require(d.rank() == 4 && d.dim(1) == 3, ErrorKind::Validation,
                "evaluate_run expects [m, 3, H, W] clips, got " + d.shape_str());
        require(d.same_shape(g), ErrorKind::Validation,
                "clip " + std::to_string(i) + ": decoded/gt shape mismatch");
        const auto [cat, dir] = labels[i];
        require(cat >= 0 && cat < scorer.image_classes && dir >= 0 && dir < directions,
                ErrorKind::Validation, "clip " + std::to_string(i) + ": label out of range");
        const int64_t m = d.dim(0);

        const std::vector<double> vid_probs = scorer.video(d);
        require(static_cast<int>(vid_probs.size()) == scorer.video_classes, ErrorKind::Validation,
                "video scorer returned the wrong number of classes");
        Rng vid_rng = root.child("vid").child(i);
        const double vid_acc = nway_topk(vid_probs, cat * directions + dir, cfg.video, vid_rng);
        vid_acc_sum += vid_acc;

        double clip_ssim = 0.0;
        for (int64_t f = 0; f < m; ++f) {
            const Tensor df = frame_of(d, f);
            const double s = ssim(df, frame_of(g, f));
            rep.ssim_per_frame.push_back(s);
            clip_ssim += s;

            const std::vector<double> img_probs = scorer.image(df);
            require(static_cast<int>(img_probs.size()) == scorer.image_classes,
                    ErrorKind::Validation, "image scorer returned the wrong number of classes");
            Rng img_rng = root.child("img").child(i).child(static_cast<uint64_t>(f));
            const double acc = nway_topk(img_probs, cat, cfg.image, img_rng);
            img_acc_sum += acc;
            ++frame_count;

            if (csv_rows)
                csv_rows->push_back({std::to_string(i), std::to_string(f), fmt_double(s),
                                     fmt_double(acc), fmt_double(vid_acc),
                                     std::to_string(cfg.image.n), std::to_string(cfg.image.k),
                                     std::to_string(cfg.image.trials), std::to_string(cfg.seed),
                                     scorer.hash});
        }
        ssim_clip_sum += clip_ssim / static_cast<double>(m);
    }

    const auto nclips = static_cast<double>(decoded.size());
    rep.ssim_mean = ssim_clip_sum / nclips;

    const auto binomial = [](const NwayConfig& nc, double acc, int64_t units) {
        NwayResult r;
        r.n = nc.n;
        r.k = nc.k;
        r.trials = nc.trials;
        r.accuracy = acc;
        const double total = static_cast<double>(units) * nc.trials;
        r.stderr_est = std::sqrt(std::max(acc * (1.0 - acc), 0.0) / total);
        return r;
    };
    rep.nway_image = binomial(cfg.image, img_acc_sum / static_cast<double>(frame_count),
                              frame_count);
    rep.nway_video = binomial(cfg.video, vid_acc_sum / nclips,
                              static_cast<int64_t>(decoded.size()));
    return rep;
}

}  // namespace neurovid
