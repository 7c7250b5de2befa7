#include "neurovid/interpret.hpp"

#include <algorithm>
#include <cmath>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include "neurovid/util.hpp"

namespace neurovid {

std::string to_string(AttnLayer layer) {
    switch (layer) {
        case AttnLayer::First: return "first";
        case AttnLayer::Middle: return "middle";
        case AttnLayer::Last: return "last";
    }
    fail(ErrorKind::Config, "unknown attention layer tag");
}

std::string to_string(TrainStage stage) {
    switch (stage) {
        case TrainStage::Init: return "init";
        case TrainStage::PostMae: return "post_mae";
        case TrainStage::PostContrastive: return "post_contrastive";
        case TrainStage::PostFull: return "post_full";
    }
    fail(ErrorKind::Config, "unknown training stage tag");
}

AttnLayer attn_layer_from_string(const std::string& s) {
    if (s == "first") return AttnLayer::First;
    if (s == "middle") return AttnLayer::Middle;
    if (s == "last") return AttnLayer::Last;
    fail(ErrorKind::Config, "unknown attention layer '" + s + "'");
}

TrainStage train_stage_from_string(const std::string& s) {
    if (s == "init") return TrainStage::Init;
    if (s == "post_mae") return TrainStage::PostMae;
    if (s == "post_contrastive") return TrainStage::PostContrastive;
    if (s == "post_full") return TrainStage::PostFull;
    fail(ErrorKind::Config, "unknown training stage '" + s + "'");
}

int layer_index(AttnLayer layer, int layers) {
    require(layers >= 1, ErrorKind::Config, "layer_index: no layers");
    switch (layer) {
        case AttnLayer::First: return 0;
        case AttnLayer::Middle: return (layers + 1) / 2 - 1;
        case AttnLayer::Last: return layers - 1;
    }
    fail(ErrorKind::Config, "unknown attention layer tag");
}

std::vector<double> attention_to_voxels(const Encoder& enc, const FmriWindow& window, int layer,
                                        bool row_mean) {
    const EncoderConfig& cfg = enc.config();
    require(layer >= 0 && layer < cfg.layers, ErrorKind::Config,
            "attention layer " + std::to_string(layer) + " out of range");
    const Tensor maps = enc.attention_maps(window, layer);  // [heads, S, S]
    const int64_t heads = maps.dim(0), S = maps.dim(1);

    // Per-token salience, averaged over heads and the reduced axis.
    std::vector<double> score(static_cast<size_t>(S), 0.0);
    for (int64_t h = 0; h < heads; ++h)
        for (int64_t i = 0; i < S; ++i)
            for (int64_t j = 0; j < S; ++j) {
                const double v = maps.at({h, i, j});
                score[static_cast<size_t>(row_mean ? i : j)] += v;
            }
    for (double& v : score) v /= static_cast<double>(heads * S);

    const int V = cfg.voxels;
    const int ps = cfg.patch_size;
    const int p = enc.patches();
    require(S == static_cast<int64_t>(cfg.window) * p, ErrorKind::Validation,
            "attention map token count does not match the window geometry");
    std::vector<double> out(static_cast<size_t>(V), 0.0);
    for (int f = 0; f < cfg.window; ++f)
        for (int k = 0; k < p; ++k) {
            const int begin = k * ps;
            const int real = std::min(ps, V - begin);  // padding gets no mass
            const double share = score[static_cast<size_t>(f * p + k)] / real;
            for (int v = begin; v < begin + real; ++v) out[static_cast<size_t>(v)] += share;
        }
    return out;
}

std::vector<AttentionSummary> summarize(const Encoder& enc,
                                        const std::vector<FmriWindow>& windows,
                                        const std::vector<AttnLayer>& layers, TrainStage stage,
                                        bool row_mean) {
    require(!windows.empty(), ErrorKind::Validation, "summarize: no windows");
    require(!layers.empty(), ErrorKind::Config, "summarize: no layers requested");
    std::vector<AttentionSummary> out;
    for (AttnLayer layer : layers) {
        AttentionSummary s;
        s.layer = layer;
        s.stage = stage;
        s.n_samples = static_cast<int>(windows.size());
        s.per_voxel.assign(static_cast<size_t>(enc.config().voxels), 0.0);
        const int idx = layer_index(layer, enc.config().layers);
        for (const FmriWindow& w : windows) {
            const std::vector<double> m = attention_to_voxels(enc, w, idx, row_mean);
            for (size_t v = 0; v < m.size(); ++v) s.per_voxel[v] += m[v];
        }
        for (double& v : s.per_voxel) v /= static_cast<double>(windows.size());
        out.push_back(std::move(s));
    }
    return out;
}

std::map<std::string, double> roi_aggregate(const AttentionSummary& summary,
                                            const RoiLayout& layout) {
    require(!layout.masks.empty(), ErrorKind::Config, "roi_aggregate: no ROIs defined");
    std::map<std::string, double> out;
    for (const auto& [name, mask] : layout.masks) {
        require(mask.size() == summary.per_voxel.size(), ErrorKind::Validation,
                "ROI '" + name + "' mask length does not match the voxel count");
        double sum = 0.0;
        int64_t count = 0;
        for (size_t v = 0; v < mask.size(); ++v)
            if (mask[v]) {
                sum += summary.per_voxel[v];
                ++count;
            }
        require(count > 0, ErrorKind::Config, "ROI '" + name + "' selects no voxels");
        out[name] = sum / static_cast<double>(count);
    }
    return out;
}

TTestResult ttest_two_sample(const std::vector<double>& a, const std::vector<double>& b) {
    require(a.size() >= 2 && b.size() >= 2, ErrorKind::Validation,
            "t-test needs at least two observations per group");
    for (double v : a)
        require(std::isfinite(v), ErrorKind::Numeric, "t-test: non-finite observation");
    for (double v : b)
        require(std::isfinite(v), ErrorKind::Numeric, "t-test: non-finite observation");

    TTestResult r;
    r.n_a = static_cast<int>(a.size());
    r.n_b = static_cast<int>(b.size());
    const double na = static_cast<double>(r.n_a), nb = static_cast<double>(r.n_b);
    for (double v : a) r.mean_a += v / na;
    for (double v : b) r.mean_b += v / nb;
    double va = 0.0, vb = 0.0;
    for (double v : a) va += (v - r.mean_a) * (v - r.mean_a) / (na - 1.0);
    for (double v : b) vb += (v - r.mean_b) * (v - r.mean_b) / (nb - 1.0);

    const double sea = va / na, seb = vb / nb;
    const double se2 = sea + seb;
    if (se2 == 0.0) {
        // Degenerate groups: identical constants are indistinguishable;
        // different constants are unboundedly distinguishable.
        r.df = na + nb - 2.0;
        if (r.mean_a == r.mean_b) {
            r.t_stat = 0.0;
            r.p_value = 1.0;
        } else {
            r.t_stat = r.mean_a > r.mean_b ? std::numeric_limits<double>::infinity()
                                           : -std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        }
        return r;
    }
    r.t_stat = (r.mean_a - r.mean_b) / std::sqrt(se2);
    r.df = se2 * se2 / (sea * sea / (na - 1.0) + seb * seb / (nb - 1.0));
    const boost::math::students_t dist(r.df);
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t_stat)));
    return r;
}

TTestResult ttest_one_sample(const std::vector<double>& xs, double mu0) {
    require(xs.size() >= 2, ErrorKind::Validation,
            "one-sample t-test needs at least two observations");
    for (double v : xs)
        require(std::isfinite(v), ErrorKind::Numeric, "t-test: non-finite observation");
    TTestResult r;
    r.n_a = static_cast<int>(xs.size());
    r.n_b = 0;
    const double n = static_cast<double>(r.n_a);
    for (double v : xs) r.mean_a += v / n;
    r.mean_b = mu0;
    double var = 0.0;
    for (double v : xs) var += (v - r.mean_a) * (v - r.mean_a) / (n - 1.0);
    r.df = n - 1.0;
    const double se2 = var / n;
    if (se2 == 0.0) {
        if (r.mean_a == mu0) {
            r.t_stat = 0.0;
            r.p_value = 1.0;
        } else {
            r.t_stat = r.mean_a > mu0 ? std::numeric_limits<double>::infinity()
                                      : -std::numeric_limits<double>::infinity();
            r.p_value = 0.0;
        }
        return r;
    }
    r.t_stat = (r.mean_a - mu0) / std::sqrt(se2);
    const boost::math::students_t dist(r.df);
    r.p_value = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t_stat)));
    return r;
}

void save_summaries(const std::string& path, const std::vector<AttentionSummary>& summaries) {
    NamedTensors out;
    for (size_t i = 0; i < summaries.size(); ++i) {
        const AttentionSummary& s = summaries[i];
        require(!s.per_voxel.empty(), ErrorKind::Validation, "summary has no voxels");
        Tensor pv = Tensor::zeros({static_cast<int64_t>(s.per_voxel.size())});
        for (size_t v = 0; v < s.per_voxel.size(); ++v)
            pv.data[v] = static_cast<float>(s.per_voxel[v]);
        const std::string key = "summary." + std::to_string(i);
        out.add(key + ".per_voxel", std::move(pv));
        out.add(key + ".meta",
                Tensor({3}, {static_cast<float>(static_cast<int>(s.layer)),
                             static_cast<float>(static_cast<int>(s.stage)),
                             static_cast<float>(s.n_samples)}));
    }
    archive_write(path, out);
}

std::vector<AttentionSummary> load_summaries(const std::string& path) {
    const NamedTensors in = archive_read(path);
    std::vector<AttentionSummary> out;
    for (size_t i = 0;; ++i) {
        const std::string key = "summary." + std::to_string(i);
        if (!in.contains(key + ".per_voxel")) break;
        const Tensor& pv = in.get(key + ".per_voxel");
        const Tensor& meta = in.get(key + ".meta");
        require(meta.numel() == 3, ErrorKind::Format, "summary metadata malformed");
        AttentionSummary s;
        s.per_voxel.assign(pv.data.begin(), pv.data.end());
        const int layer = static_cast<int>(meta.data[0]);
        const int stage = static_cast<int>(meta.data[1]);
        require(layer >= 0 && layer <= 2 && stage >= 0 && stage <= 3, ErrorKind::Format,
                "summary tags out of range");
        s.layer = static_cast<AttnLayer>(layer);
        s.stage = static_cast<TrainStage>(stage);
        s.n_samples = static_cast<int>(meta.data[2]);
        out.push_back(std::move(s));
    }
    require(out.size() * 2 == in.size(), ErrorKind::Format,
            "summary archive has unexpected entries");
    return out;
}

void export_heatmap(const AttentionSummary& summary, const RoiLayout& layout,
                    const std::string& path) {
    const int V = static_cast<int>(summary.per_voxel.size());
    require(V >= 1, ErrorKind::Validation, "heatmap: empty summary");
    double lo = summary.per_voxel[0], hi = summary.per_voxel[0];
    for (double v : summary.per_voxel) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    // ROI id per voxel for outline detection; -1 marks unassigned.
    std::vector<int> roi_of(static_cast<size_t>(V), -1);
    for (size_t m = 0; m < layout.masks.size(); ++m) {
        const auto& mask = layout.masks[m].second;
        require(mask.size() == static_cast<size_t>(V), ErrorKind::Validation,
                "heatmap: ROI mask length mismatch");
        for (int v = 0; v < V; ++v)
            if (mask[static_cast<size_t>(v)]) roi_of[static_cast<size_t>(v)] = static_cast<int>(m);
    }

    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(V))));
    const int rows = (V + cols - 1) / cols;
    const int cell = 8;
    const int W = cols * cell, H = rows * cell;
    std::vector<uint8_t> rgb(static_cast<size_t>(W) * H * 3, 0);

    auto cell_roi = [&](int r, int c) {
        if (r < 0 || r >= rows || c < 0 || c >= cols) return -2;  // off the grid
        const int v = r * cols + c;
        return v < V ? roi_of[static_cast<size_t>(v)] : -2;
    };
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            const int v = r * cols + c;
            if (v >= V) continue;
            const double t =
                hi > lo ? (summary.per_voxel[static_cast<size_t>(v)] - lo) / (hi - lo) : 0.5;
            const uint8_t cr = static_cast<uint8_t>(std::lround(40.0 + 180.0 * t));
            const uint8_t cg = 40;
            const uint8_t cb = static_cast<uint8_t>(std::lround(220.0 - 180.0 * t));
            const int id = roi_of[static_cast<size_t>(v)];
            const bool edge_top = cell_roi(r - 1, c) != id;
            const bool edge_bottom = cell_roi(r + 1, c) != id;
            const bool edge_left = cell_roi(r, c - 1) != id;
            const bool edge_right = cell_roi(r, c + 1) != id;
            for (int y = 0; y < cell; ++y)
                for (int x = 0; x < cell; ++x) {
                    const bool outline = (y == 0 && edge_top) || (y == cell - 1 && edge_bottom) ||
                                         (x == 0 && edge_left) || (x == cell - 1 && edge_right);
                    const size_t at =
                        (static_cast<size_t>(r * cell + y) * W + (c * cell + x)) * 3;
                    rgb[at] = outline ? 20 : cr;
                    rgb[at + 1] = outline ? 20 : cg;
                    rgb[at + 2] = outline ? 20 : cb;
                }
        }
    write_png(path, H, W, rgb);

    nlohmann::json side;
    side["min"] = lo;
    side["max"] = hi;
    side["layer"] = to_string(summary.layer);
    side["stage"] = to_string(summary.stage);
    side["n_samples"] = summary.n_samples;
    side["voxels"] = V;
    write_file_atomic(path + ".json", side.dump(2) + "\n");
}

const std::vector<std::string> kRoiStatsCsvHeader = {"roi", "stage", "layer",
                                                     "mean", "t",     "p"};

std::vector<std::vector<std::string>> stage_comparison_rows(
    const std::vector<AttentionSummary>& current, const std::vector<AttentionSummary>& baseline,
    const RoiLayout& layout) {
    require(!current.empty(), ErrorKind::Validation, "stage comparison: no summaries");
    std::vector<std::vector<std::string>> rows;
    for (const AttentionSummary& cur : current) {
        const AttentionSummary* base = nullptr;
        for (const AttentionSummary& b : baseline)
            if (b.layer == cur.layer) base = &b;
        require(base != nullptr, ErrorKind::Validation,
                "stage comparison: baseline missing layer '" + to_string(cur.layer) + "'");
        require(base->per_voxel.size() == cur.per_voxel.size(), ErrorKind::Validation,
                "stage comparison: voxel counts differ");
        for (const auto& [name, mask] : layout.masks) {
            require(mask.size() == cur.per_voxel.size(), ErrorKind::Validation,
                    "stage comparison: ROI mask length mismatch");
            std::vector<double> a, b;
            for (size_t v = 0; v < mask.size(); ++v)
                if (mask[v]) {
                    a.push_back(cur.per_voxel[v]);
                    b.push_back(base->per_voxel[v]);
                }
            require(!a.empty(), ErrorKind::Config, "ROI '" + name + "' selects no voxels");
            double mean = 0.0;
            for (double v : a) mean += v / static_cast<double>(a.size());
            const TTestResult t = ttest_two_sample(a, b);
            rows.push_back({name, to_string(cur.stage), to_string(cur.layer), fmt_double(mean),
                            fmt_double(t.t_stat), fmt_double(t.p_value)});
        }
    }
    return rows;
}

}  // namespace neurovid
