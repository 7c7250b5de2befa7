#pragma once

#include <optional>
#include <string>
#include <vector>

#include "neurovid/autograd.hpp"
#include "neurovid/fmri.hpp"

namespace neurovid {

struct EncoderConfig {
    int voxels = 128;
    int patch_size = 8;
    int embed_dim = 32;  // token width b
    int layers = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int q = 8;   // output rows
    int d = 16;  // output columns
    int window = 2;

    void validate() const {
        require(voxels >= 1, ErrorKind::Config, "encoder: bad voxel count");
        require(patch_size >= 1 && embed_dim >= 1, ErrorKind::Config,
                "encoder: bad token dims");
        require(layers >= 1, ErrorKind::Config, "encoder: need at least one layer");
        require(heads >= 1 && embed_dim % heads == 0, ErrorKind::Config,
                "encoder: embed_dim must divide by heads");
        require(mlp_ratio >= 1, ErrorKind::Config, "encoder: bad mlp_ratio");
        require(q >= 1 && d >= 1, ErrorKind::Config, "encoder: bad output shape");
        require(window >= 2, ErrorKind::Config, "encoder: window must be >= 2");
    }
};

// Transformer over windowed fMRI tokens. Raw patch tokens [w, p, patch_size]
// are projected to embed_dim, tagged with learned frame and patch position
// embeddings, run through pre-LN blocks, mean-pooled and mapped to a [q, d]
// embedding with unit-norm rows.
class Encoder {
  public:
    Encoder(EncoderConfig cfg, uint64_t seed);

    const EncoderConfig& config() const { return cfg_; }
    ag::ParamStore& params() { return params_; }
    const ag::ParamStore& params() const { return params_; }

    // Differentiable forward. If mask_rng is set, round(mask_ratio * S)
    // tokens are replaced by the learned mask token after projection (the
    // masked-autoencoding corruption); token_features receives the block
    // stack's per-token output [S, embed_dim] when requested.
    ag::Var embed(const FmriWindow& window, Rng* mask_rng = nullptr, double mask_ratio = 0.0,
              ag::Var* token_features = nullptr) const;

    // Reconstruction head over token features, [S, patch_size].
    ag::Var reconstruct(const ag::Var& token_features) const;

    // Inference-only embedding as a plain tensor.
    Tensor embed_eval(const FmriWindow& window) const;

    // Post-softmax attention of one block, [heads, S, S]; recomputed in
    // double precision outside the graph.
    Tensor attention_maps(const FmriWindow& window, int layer) const;

    int seq_len() const { return cfg_.window * patches_; }
    int patches() const { return patches_; }

    void save(NamedTensors& out) const { params_.save(out, "enc."); }
    void load(const NamedTensors& in) { params_.load(in, "enc."); }

  private:
    ag::Var tokens_to_embed(const FmriWindow& window) const;

    EncoderConfig cfg_;
    int patches_;
    ag::ParamStore params_;
};

struct MaePretrainConfig {
    int steps = 60;
    int batch = 16;
    double lr = 1e-3;
    double mask_ratio = 0.75;
    uint64_t seed = 1;

    void validate() const {
        require(steps >= 1 && batch >= 1, ErrorKind::Config, "mae: bad steps/batch");
        require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::Config,
                "mae: mask_ratio must be in [0,1]");
    }
};

// Masked-token pretraining over a pool of windows; returns the per-step
// reconstruction loss curve. Aborts with a Numeric error if the loss goes
// non-finite.
std::vector<double> mae_pretrain(Encoder& enc, const std::vector<FmriWindow>& windows,
                                 const MaePretrainConfig& cfg);

}  // namespace neurovid
