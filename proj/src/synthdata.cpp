#include "neurovid/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "json.hpp"
#include "neurovid/archive.hpp"
#include "neurovid/util.hpp"

namespace neurovid {

namespace {

constexpr int kHues = 17;        // categories = 3 shape kinds * kHues
constexpr double kSpeed = 0.6;   // px per video frame
constexpr double kMargin = 6.5;  // largest shape half-extent + soft edge
constexpr double kJitter = 0.5;  // px, uniform, per sample

std::array<float, 3> hsv_to_rgb(double h, double s, double v) {
    h = h - std::floor(h);
    const double hh = h * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    double r = 0, g = 0, b = 0;
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
    return {static_cast<float>(r), static_cast<float>(g), static_cast<float>(b)};
}

ShapeKind shape_of_category(int category) {
    switch (category / kHues) {
        case 0: return ShapeKind::Circle;
        case 1: return ShapeKind::Square;
        default: return ShapeKind::Bar;
    }
}

// Signed distance to the shape boundary (positive inside), in px.
double shape_distance(ShapeKind kind, double dx, double dy) {
    switch (kind) {
        case ShapeKind::Circle:
            return 4.0 - std::sqrt(dx * dx + dy * dy);
        case ShapeKind::Square:
            return std::min(3.6 - std::abs(dx), 3.6 - std::abs(dy));
        case ShapeKind::Bar:
            return std::min(6.0 - std::abs(dx), 2.0 - std::abs(dy));
    }
    return -1.0;
}

std::array<double, 2> direction_vector(int direction) {
    switch (direction & 3) {
        case 0: return {1.0, 0.0};
        case 1: return {-1.0, 0.0};
        case 2: return {0.0, 1.0};
        default: return {0.0, -1.0};
    }
}

// fMRI feature periods span video frames [-frames_per_fmri, video_frames).
struct FrameSpan {
    double first, last;
};

FrameSpan feature_frame_span(const SynthConfig& cfg) {
    return {-static_cast<double>(cfg.frames_per_fmri),
            static_cast<double>(cfg.video_frames() - 1)};
}

// Average over the sample's fMRI periods of each period's mean frame index.
// Centering trajectories on this index makes the time-averaged position
// feature equal the anchor exactly, so averaging a window across time leaves
// no trace of the motion direction.
double window_mean_frame(const SynthConfig& cfg) {
    return cfg.frames_per_fmri * (0.5 * (cfg.window - 1) - cfg.lag) +
           0.5 * (cfg.frames_per_fmri - 1);
}

// Mixing matrix routing scene features into voxels: static features (category
// one-hot + color) go to the Vis rows, the mean-position features to the
// DorsAttn rows; DefaultA and unassigned voxels stay all-zero (noise only).
Tensor build_mixing(const SynthConfig& cfg, int subject, const RoiLayout& rois) {
    const int static_dim = cfg.categories + 3;
    const int feat_dim = static_dim + 2;
    Tensor a = Tensor::zeros({cfg.voxels, feat_dim});
    Rng rng = Rng(cfg.seed).child("mixing").child(static_cast<uint64_t>(subject));
    Rng vis_rng = rng.child("vis");
    Rng dors_rng = rng.child("dors");
    const auto& vis_cent = rois.mask("VisCent");
    const auto& vis_peri = rois.mask("VisPeri");
    const auto& dors_a = rois.mask("DorsAttnA");
    const auto& dors_b = rois.mask("DorsAttnB");
    for (int vx = 0; vx < cfg.voxels; ++vx) {
        if (vis_cent[static_cast<size_t>(vx)] || vis_peri[static_cast<size_t>(vx)]) {
            for (int j = 0; j < static_dim; ++j)
                a.at({vx, j}) = static_cast<float>(vis_rng.normal(0.0, 0.5));
        } else if (dors_a[static_cast<size_t>(vx)] || dors_b[static_cast<size_t>(vx)]) {
            for (int j = static_dim; j < feat_dim; ++j)
                a.at({vx, j}) = static_cast<float>(dors_rng.normal(0.0, 3.0));
        }
    }
    return a;
}

Tensor unit_embedding(int q, int d, Rng rng) {
    Tensor e = Tensor::zeros({q, d});
    for (int i = 0; i < q; ++i) {
        double ss = 0.0;
        for (int j = 0; j < d; ++j) {
            const double v = rng.normal();
            e.at({i, j}) = static_cast<float>(v);
            ss += v * v;
        }
        const double inv = 1.0 / std::sqrt(std::max(ss, 1e-30));
        for (int j = 0; j < d; ++j)
            e.at({i, j}) = static_cast<float>(e.at({i, j}) * inv);
    }
    return e;
}

std::string split_name(int idx) {
    return idx == 0 ? "train" : idx == 1 ? "val" : "test";
}

nlohmann::json scene_to_json(const SynthSample& s) {
    return nlohmann::json{{"id", s.sample_id},
                          {"subject", s.subject_id},
                          {"category", s.scene.category_id},
                          {"direction", s.scene.direction_id},
                          {"shape", static_cast<int>(s.scene.shape_kind)},
                          {"color", {s.scene.color[0], s.scene.color[1], s.scene.color[2]}},
                          {"start", {s.scene.start[0], s.scene.start[1]}},
                          {"velocity", {s.scene.velocity[0], s.scene.velocity[1]}}};
}

}  // namespace

const std::vector<uint8_t>& RoiLayout::mask(const std::string& name) const {
    for (const auto& [n, m] : masks)
        if (n == name) return m;
    fail(ErrorKind::Validation, "unknown ROI: " + name);
}

bool RoiLayout::contains(const std::string& name) const {
    for (const auto& [n, m] : masks)
        if (n == name) return true;
    return false;
}

std::vector<std::string> RoiLayout::names() const {
    std::vector<std::string> out;
    for (const auto& [n, m] : masks) out.push_back(n);
    return out;
}

void SynthConfig::validate() const {
    require(categories >= 2, ErrorKind::Config, "need at least 2 categories");
    require(categories <= 3 * kHues, ErrorKind::Config, "categories exceed shape*hue grid");
    require(directions >= 1 && directions <= 4, ErrorKind::Config, "directions must be in [1,4]");
    require(voxels >= 32, ErrorKind::Config, "too few voxels");
    require(window >= 2, ErrorKind::Config, "window must be >= 2");
    require(frames_per_fmri >= 2, ErrorKind::Config, "frames_per_fmri must be >= 2");
    require(lag >= 0 && lag <= 1, ErrorKind::Config, "lag must be 0 or 1");
    require(noise_sigma >= 0.0f, ErrorKind::Config, "noise_sigma must be >= 0");
    require(overlap_target >= 0.0f && overlap_target <= 1.0f, ErrorKind::Config,
            "overlap_target must be in [0,1]");
    require(q >= 1 && d >= 1, ErrorKind::Config, "embedding dims must be positive");
    require(n_train > 0 && n_val > 0 && n_test > 0, ErrorKind::Config, "splits must be non-empty");
    // Static features must fit into the Vis voxel budget for linear decodability.
    const int vis_total = 2 * ((voxels * 7) / 32);
    require(categories + 3 <= vis_total, ErrorKind::Config,
            "voxel budget too small for category features");
    // Trajectories must have a feasible start box for every direction.
    const double lo = kMargin + kSpeed * frames_per_fmri * window + kJitter;
    require(2.0 * lo < std::min(width, height) - 1.0, ErrorKind::Config,
            "frame too small for configured motion");
}

RoiLayout make_roi_layout(int voxels) {
    const int vis = (voxels * 7) / 32;
    const int dors = (voxels * 4) / 32;
    const int def = (voxels * 6) / 32;
    RoiLayout layout;
    auto add = [&](const std::string& name, int begin, int count) {
        std::vector<uint8_t> m(static_cast<size_t>(voxels), 0);
        for (int i = begin; i < begin + count; ++i) m[static_cast<size_t>(i)] = 1;
        layout.masks.emplace_back(name, std::move(m));
    };
    int at = 0;
    add("VisCent", at, vis);
    at += vis;
    add("VisPeri", at, vis);
    at += vis;
    add("DorsAttnA", at, dors);
    at += dors;
    add("DorsAttnB", at, dors);
    at += dors;
    add("DefaultA", at, def);
    return layout;
}

SceneSpec make_scene(int category, int direction, const SynthConfig& cfg, Rng rng) {
    SceneSpec s;
    s.category_id = category;
    s.direction_id = direction;
    s.shape_kind = shape_of_category(category);
    s.color = hsv_to_rgb(static_cast<double>(category % kHues) / kHues, 0.85, 0.95);
    const auto u = direction_vector(direction);
    s.velocity = {static_cast<float>(kSpeed * u[0]), static_cast<float>(kSpeed * u[1])};

    // The anchor depends on the category only, never the direction: motion
    // direction must be carried by temporal change, not by where the shape
    // sits. The trajectory is centered on the window's mean frame index so
    // the window-averaged position is the anchor itself for every direction,
    // and the box keeps every direction's full trajectory in frame.
    const auto span = feature_frame_span(cfg);
    const double center = window_mean_frame(cfg);
    const double reach =
        kSpeed * std::max(std::abs(span.first - center), std::abs(span.last - center));
    Rng anchor_rng = Rng(cfg.seed).child("anchor").child(static_cast<uint64_t>(category));
    const double extent[2] = {static_cast<double>(cfg.width - 1),
                              static_cast<double>(cfg.height - 1)};
    for (int axis = 0; axis < 2; ++axis) {
        const double lo = kMargin + reach + kJitter;
        const double hi = extent[axis] - kMargin - reach - kJitter;
        require(hi > lo, ErrorKind::Config, "infeasible trajectory geometry");
        const double anchor = anchor_rng.uniform(lo, hi);
        s.start[static_cast<size_t>(axis)] = static_cast<float>(
            anchor + rng.uniform(-kJitter, kJitter) -
            s.velocity[static_cast<size_t>(axis)] * center);
    }
    return s;
}

Tensor render_video(const SceneSpec& scene, int first_frame, int n_frames, int height, int width) {
    require(n_frames >= 1, ErrorKind::Validation, "render_video: need at least one frame");
    Tensor video = Tensor::zeros({n_frames, height, width, 3});
    for (int f = 0; f < n_frames; ++f) {
        const double t = static_cast<double>(first_frame + f);
        const double cx = scene.start[0] + scene.velocity[0] * t;
        const double cy = scene.start[1] + scene.velocity[1] * t;
        for (int y = 0; y < height; ++y)
            for (int x = 0; x < width; ++x) {
                const double d = shape_distance(scene.shape_kind, x - cx, y - cy);
                if (d <= -0.5) continue;
                const double cover = std::clamp(d + 0.5, 0.0, 1.0);
                for (int c = 0; c < 3; ++c)
                    video.at({f, y, x, c}) =
                        static_cast<float>(cover * scene.color[static_cast<size_t>(c)]);
            }
    }
    return video;
}

std::vector<double> scene_features(const SceneSpec& scene, int period, const SynthConfig& cfg) {
    std::vector<double> phi(static_cast<size_t>(cfg.categories + 3 + 2), 0.0);
    phi[static_cast<size_t>(scene.category_id)] = 1.0;
    for (int c = 0; c < 3; ++c)
        phi[static_cast<size_t>(cfg.categories + c)] = scene.color[static_cast<size_t>(c)];
    // Mean shape position over the period's frames_per_fmri video frames.
    const double mid =
        cfg.frames_per_fmri * period + 0.5 * (cfg.frames_per_fmri - 1);
    phi[static_cast<size_t>(cfg.categories + 3)] =
        (scene.start[0] + scene.velocity[0] * mid) / (cfg.width - 1);
    phi[static_cast<size_t>(cfg.categories + 4)] =
        (scene.start[1] + scene.velocity[1] * mid) / (cfg.height - 1);
    return phi;
}

namespace {

SynthSample make_sample(int sample_id, int category, int direction, const SynthConfig& cfg,
                        const Tensor& mixing, const Rng& root) {
    SynthSample s;
    s.sample_id = sample_id;
    s.subject_id = 0;
    Rng sample_rng = root.child("sample").child(static_cast<uint64_t>(sample_id));
    s.scene = make_scene(category, direction, cfg, sample_rng.child("jitter"));
    s.video = render_video(s.scene, 0, cfg.video_frames(), cfg.height, cfg.width);

    Rng noise = sample_rng.child("noise");
    const int feat_dim = cfg.categories + 5;
    for (int k = 0; k < cfg.window; ++k) {
        const auto phi = scene_features(s.scene, k - cfg.lag, cfg);
        FmriFrame frame;
        frame.timestamp_index = k;
        frame.voxels.resize(static_cast<size_t>(cfg.voxels));
        for (int vx = 0; vx < cfg.voxels; ++vx) {
            double acc = 0.0;
            for (int j = 0; j < feat_dim; ++j)
                acc += static_cast<double>(mixing.at({vx, j})) * phi[static_cast<size_t>(j)];
            frame.voxels[static_cast<size_t>(vx)] =
                static_cast<float>(acc + noise.normal(0.0, cfg.noise_sigma));
        }
        s.fmri.push_back(std::move(frame));
    }

    Rng embed = Rng(cfg.seed).child("embed").child(
        static_cast<uint64_t>(category * cfg.directions + direction));
    s.e_txt = unit_embedding(cfg.q, cfg.d, embed.child("txt"));
    s.e_img = unit_embedding(cfg.q, cfg.d, embed.child("img"));
    return s;
}

std::vector<int> shuffled(std::vector<int> v, Rng rng) {
    for (size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[static_cast<size_t>(rng.below(i))]);
    return v;
}

}  // namespace

SynthDataset generate_dataset(const SynthConfig& cfg) {
    cfg.validate();
    SynthDataset ds;
    ds.config = cfg;
    ds.rois = make_roi_layout(cfg.voxels);
    const Tensor mixing = build_mixing(cfg, 0, ds.rois);
    Rng root(cfg.seed);

    // Category split with the requested train/test overlap.
    std::vector<int> cats(static_cast<size_t>(cfg.categories));
    std::iota(cats.begin(), cats.end(), 0);
    cats = shuffled(cats, root.child("catsplit"));
    const int shared = static_cast<int>(
        std::lround(static_cast<double>(cfg.overlap_target) * cfg.categories));
    const int rest = cfg.categories - shared;
    const int train_only = (rest + 1) / 2;
    std::vector<int> train_cats(cats.begin(), cats.begin() + shared + train_only);
    std::vector<int> test_cats(cats.begin(), cats.begin() + shared);
    test_cats.insert(test_cats.end(), cats.begin() + shared + train_only, cats.end());
    require(!train_cats.empty() && !test_cats.empty(), ErrorKind::Config,
            "category split left an empty side");

    int next_id = 0;
    auto build_split = [&](int count, const std::vector<int>& split_cats,
                           const std::string& order_key) {
        std::vector<SynthSample> out;
        std::vector<int> order(static_cast<size_t>(count));
        std::iota(order.begin(), order.end(), 0);
        order = shuffled(order, root.child(order_key));
        out.reserve(static_cast<size_t>(count));
        const int n = static_cast<int>(split_cats.size());
        // Spread samples evenly over categories, rotating the direction per
        // repeat from a random per-category phase. The random phase keeps
        // category and direction statistically unlinked across splits even
        // when the repeat count is not a multiple of the direction count.
        Rng phase_rng = root.child(order_key + ".dir_phase");
        std::vector<int> phase(static_cast<size_t>(n));
        for (int& p : phase) p = static_cast<int>(phase_rng.below(cfg.directions));
        for (int slot : order) {
            const int cat_pos = slot % n;
            const int rep = slot / n;
            const int dir = (phase[static_cast<size_t>(cat_pos)] + rep) % cfg.directions;
            out.push_back(
                make_sample(next_id++, split_cats[static_cast<size_t>(cat_pos)], dir, cfg,
                            mixing, root));
        }
        return out;
    };
    ds.train = build_split(cfg.n_train, train_cats, "order_train");
    ds.val = build_split(cfg.n_val, train_cats, "order_val");
    ds.test = build_split(cfg.n_test, test_cats, "order_test");
    return ds;
}

double semantic_overlap(const std::vector<SynthSample>& a, const std::vector<SynthSample>& b) {
    require(!a.empty() && !b.empty(), ErrorKind::Validation, "semantic_overlap: empty split");
    std::vector<int> ca, cb;
    for (const auto& s : a) ca.push_back(s.category());
    for (const auto& s : b) cb.push_back(s.category());
    std::sort(ca.begin(), ca.end());
    ca.erase(std::unique(ca.begin(), ca.end()), ca.end());
    std::sort(cb.begin(), cb.end());
    cb.erase(std::unique(cb.begin(), cb.end()), cb.end());
    std::vector<int> inter, uni;
    std::set_intersection(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(inter));
    std::set_union(ca.begin(), ca.end(), cb.begin(), cb.end(), std::back_inserter(uni));
    return static_cast<double>(inter.size()) / static_cast<double>(uni.size());
}

namespace {

void save_split(const std::string& path, const std::vector<SynthSample>& split) {
    NamedTensors nt;
    for (size_t i = 0; i < split.size(); ++i) {
        char key[32];
        std::snprintf(key, sizeof key, "s%05zu.", i);
        const SynthSample& s = split[i];
        nt.add(std::string(key) + "video", s.video);
        Tensor fm = Tensor::zeros({static_cast<int64_t>(s.fmri.size()),
                                   static_cast<int64_t>(s.fmri[0].voxels.size())});
        for (size_t k = 0; k < s.fmri.size(); ++k)
            std::copy(s.fmri[k].voxels.begin(), s.fmri[k].voxels.end(),
                      fm.data.begin() + static_cast<int64_t>(k * s.fmri[0].voxels.size()));
        nt.add(std::string(key) + "fmri", fm);
        nt.add(std::string(key) + "etxt", s.e_txt);
        nt.add(std::string(key) + "eimg", s.e_img);
    }
    archive_write(path, nt);
}

std::vector<SynthSample> load_split(const std::string& path, const nlohmann::json& meta,
                                    float repetition_time) {
    NamedTensors nt = archive_read(path);
    std::vector<SynthSample> out;
    for (size_t i = 0; i < meta.size(); ++i) {
        char key[32];
        std::snprintf(key, sizeof key, "s%05zu.", i);
        SynthSample s;
        const auto& m = meta[i];
        s.sample_id = m.at("id").get<int>();
        s.subject_id = m.at("subject").get<int>();
        s.scene.category_id = m.at("category").get<int>();
        s.scene.direction_id = m.at("direction").get<int>();
        s.scene.shape_kind = static_cast<ShapeKind>(m.at("shape").get<int>());
        for (int c = 0; c < 3; ++c)
            s.scene.color[static_cast<size_t>(c)] = m.at("color")[static_cast<size_t>(c)];
        for (int c = 0; c < 2; ++c) {
            s.scene.start[static_cast<size_t>(c)] = m.at("start")[static_cast<size_t>(c)];
            s.scene.velocity[static_cast<size_t>(c)] = m.at("velocity")[static_cast<size_t>(c)];
        }
        s.video = nt.get(std::string(key) + "video");
        const Tensor& fm = nt.get(std::string(key) + "fmri");
        for (int64_t k = 0; k < fm.dim(0); ++k) {
            FmriFrame f;
            f.timestamp_index = static_cast<int>(k);
            f.repetition_time_s = repetition_time;
            f.voxels.assign(fm.data.begin() + k * fm.dim(1),
                            fm.data.begin() + (k + 1) * fm.dim(1));
            s.fmri.push_back(std::move(f));
        }
        s.e_txt = nt.get(std::string(key) + "etxt");
        s.e_img = nt.get(std::string(key) + "eimg");
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

void save_dataset(const std::string& dir, const SynthDataset& ds) {
    std::filesystem::create_directories(dir);
    const std::vector<const std::vector<SynthSample>*> splits{&ds.train, &ds.val, &ds.test};
    nlohmann::json manifest;
    manifest["config"] = {{"n_train", ds.config.n_train},
                          {"n_val", ds.config.n_val},
                          {"n_test", ds.config.n_test},
                          {"categories", ds.config.categories},
                          {"directions", ds.config.directions},
                          {"voxels", ds.config.voxels},
                          {"height", ds.config.height},
                          {"width", ds.config.width},
                          {"window", ds.config.window},
                          {"frames_per_fmri", ds.config.frames_per_fmri},
                          {"lag", ds.config.lag},
                          {"noise_sigma", ds.config.noise_sigma},
                          {"overlap_target", ds.config.overlap_target},
                          {"q", ds.config.q},
                          {"d", ds.config.d},
                          {"seed", ds.config.seed}};
    for (int i = 0; i < 3; ++i) {
        nlohmann::json arr = nlohmann::json::array();
        for (const auto& s : *splits[static_cast<size_t>(i)]) arr.push_back(scene_to_json(s));
        manifest["samples"][split_name(i)] = std::move(arr);
        save_split(dir + "/" + split_name(i) + ".nfta", *splits[static_cast<size_t>(i)]);
    }
    NamedTensors rois;
    for (const auto& [name, mask] : ds.rois.masks) {
        Tensor t = Tensor::zeros({static_cast<int64_t>(mask.size())});
        for (size_t i = 0; i < mask.size(); ++i) t.data[i] = mask[i] ? 1.0f : 0.0f;
        rois.add("roi." + name, std::move(t));
    }
    archive_write(dir + "/rois.nfta", rois);
    write_file_atomic(dir + "/manifest.json", manifest.dump(2) + "\n");
}

SynthDataset load_dataset(const std::string& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_file(dir + "/manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("bad dataset manifest: ") + e.what());
    }
    SynthDataset ds;
    const auto& c = manifest.at("config");
    ds.config.n_train = c.at("n_train");
    ds.config.n_val = c.at("n_val");
    ds.config.n_test = c.at("n_test");
    ds.config.categories = c.at("categories");
    ds.config.directions = c.at("directions");
    ds.config.voxels = c.at("voxels");
    ds.config.height = c.at("height");
    ds.config.width = c.at("width");
    ds.config.window = c.at("window");
    ds.config.frames_per_fmri = c.at("frames_per_fmri");
    ds.config.lag = c.at("lag");
    ds.config.noise_sigma = c.at("noise_sigma");
    ds.config.overlap_target = c.at("overlap_target");
    ds.config.q = c.at("q");
    ds.config.d = c.at("d");
    ds.config.seed = c.at("seed");

    NamedTensors rois = archive_read(dir + "/rois.nfta");
    for (const auto& [name, t] : rois.items()) {
        require(name.rfind("roi.", 0) == 0, ErrorKind::Format, "unexpected ROI entry " + name);
        std::vector<uint8_t> mask(t.data.size());
        for (size_t i = 0; i < mask.size(); ++i) mask[i] = t.data[i] != 0.0f ? 1 : 0;
        ds.rois.masks.emplace_back(name.substr(4), std::move(mask));
    }

    ds.train = load_split(dir + "/train.nfta", manifest.at("samples").at("train"), 2.0f);
    ds.val = load_split(dir + "/val.nfta", manifest.at("samples").at("val"), 2.0f);
    ds.test = load_split(dir + "/test.nfta", manifest.at("samples").at("test"), 2.0f);
    return ds;
}

}  // namespace neurovid
