#pragma once

#include <vector>

#include "neurovid/augment.hpp"
#include "neurovid/encoder.hpp"

namespace neurovid {

struct Phase1Config {
    double mu_spa = 1.0;
    double mu_tem = 1.0;
    double temperature = 0.07;
    int batch_size = 16;
    int steps = 300;
    double lr = 1e-3;
    AugmentConfig augment;
    // The printed form of the augmented-view losses swaps the two labels
    // (the "spatial" loss names the temporal view and vice versa). Default is
    // the consistent pairing; the flag restores the printed one. With
    // mu_spa == mu_tem the two are identical.
    bool literal_pairing = false;
    // Negative control: permute the target embeddings once before training so
    // window/target pairs are semantically unrelated.
    bool shuffle_pairing = false;
    uint64_t seed = 0;

    void validate() const {
        require(temperature > 0.0, ErrorKind::Config, "phase1: temperature must be > 0");
        require(mu_spa >= 0.0 && mu_tem >= 0.0, ErrorKind::Config,
                "phase1: loss weights must be >= 0");
        require(batch_size >= 2, ErrorKind::Config, "phase1: batch_size must be >= 2");
        require(steps >= 1, ErrorKind::Config, "phase1: steps must be >= 1");
        augment.validate();
    }
};

// Symmetric batch-contrastive cross-entropy over cosine-similarity logits:
// mean of the anchor->positive and positive->anchor directions, where row i's
// positive is row i of the other matrix. Rows are flattened embeddings.
ag::Var info_nce(const ag::Var& anchors, const ag::Var& positives, double temperature);

struct Phase1Losses {
    ag::Var spa, tem, emb, total;
};

// The three contrastive losses over one batch, combined into the weighted
// total. Augmentation draws come from `rng` (one child stream per view).
Phase1Losses phase1_losses(const Encoder& enc, const std::vector<FmriWindow>& batch,
                           const std::vector<Tensor>& e_txt, const std::vector<Tensor>& e_img,
                           const Phase1Config& cfg, Rng& rng);

struct Phase1LogRow {
    int step = 0;
    double spa = 0, tem = 0, emb = 0, total = 0;
};

// Contrastive training over aligned windows/targets. Deterministic given the
// config seed; a non-finite loss rolls the encoder back to the last finite
// step and raises a numeric error.
std::vector<Phase1LogRow> train_phase1(Encoder& enc, const std::vector<FmriWindow>& windows,
                                       const std::vector<Tensor>& e_txt,
                                       const std::vector<Tensor>& e_img,
                                       const Phase1Config& cfg);

// Fraction of batch items whose embedding ranks its own target first within
// the batch by cosine similarity. Each inner vector is one batch of indices.
double retrieval_top1(const Encoder& enc, const std::vector<FmriWindow>& windows,
                      const std::vector<Tensor>& targets,
                      const std::vector<std::vector<size_t>>& batches);

}  // namespace neurovid
