#pragma once

#include <map>
#include <string>
#include <vector>

#include "neurovid/archive.hpp"
#include "neurovid/encoder.hpp"
#include "neurovid/synthdata.hpp"

namespace neurovid {

enum class AttnLayer { First, Middle, Last };
enum class TrainStage { Init, PostMae, PostContrastive, PostFull };

std::string to_string(AttnLayer layer);
std::string to_string(TrainStage stage);
AttnLayer attn_layer_from_string(const std::string& s);
TrainStage train_stage_from_string(const std::string& s);

// 0-based block index of a named layer in an L-layer encoder; "middle" is
// the ceil(L/2)-th block counted from one.
int layer_index(AttnLayer layer, int layers);

struct AttentionSummary {
    std::vector<double> per_voxel;  // length V, finite, >= 0
    AttnLayer layer = AttnLayer::First;
    TrainStage stage = TrainStage::Init;
    int n_samples = 0;
};

// Per-voxel attention salience of one window: the block's post-softmax maps,
// head-averaged, reduced per token (column mean = attention received; the
// row_mean flag swaps to attention paid), then each token's score spread
// uniformly over its patch's real voxels and accumulated across the window's
// frames. Padding positions carry no mass, so the token total is conserved.
std::vector<double> attention_to_voxels(const Encoder& enc, const FmriWindow& window, int layer,
                                        bool row_mean = false);

// Mean of attention_to_voxels over all windows, one summary per layer.
std::vector<AttentionSummary> summarize(const Encoder& enc,
                                        const std::vector<FmriWindow>& windows,
                                        const std::vector<AttnLayer>& layers, TrainStage stage,
                                        bool row_mean = false);

std::map<std::string, double> roi_aggregate(const AttentionSummary& summary,
                                            const RoiLayout& layout);

struct TTestResult {
    double t_stat = 0.0;
    double p_value = 1.0;
    double df = 0.0;
    double mean_a = 0.0, mean_b = 0.0;
    int n_a = 0, n_b = 0;
};

// Welch's unequal-variance two-sample test, two-sided p. If neither group
// varies and the means agree the result is t = 0, p = 1 by convention.
TTestResult ttest_two_sample(const std::vector<double>& a, const std::vector<double>& b);

// One-sample test of mean(xs) against mu0 (two-sided p; halve it for a
// directional read). Used for paired comparisons via per-item differences.
TTestResult ttest_one_sample(const std::vector<double>& xs, double mu0);

void save_summaries(const std::string& path, const std::vector<AttentionSummary>& summaries);
std::vector<AttentionSummary> load_summaries(const std::string& path);

// PNG heatmap of the per-voxel map on a near-square grid, blue -> red over
// [min, max], with outlines where adjacent cells belong to different ROIs.
// A JSON sidecar <path>.json records the colorbar endpoints and tags.
void export_heatmap(const AttentionSummary& summary, const RoiLayout& layout,
                    const std::string& path);

extern const std::vector<std::string> kRoiStatsCsvHeader;  // roi,stage,layer,mean,t,p

// One row per (summary in `current`, ROI): the ROI's mean attention at the
// current stage plus a Welch test of its voxel scores against the
// same-layer summary in `baseline`.
std::vector<std::vector<std::string>> stage_comparison_rows(
    const std::vector<AttentionSummary>& current, const std::vector<AttentionSummary>& baseline,
    const RoiLayout& layout);

}  // namespace neurovid
