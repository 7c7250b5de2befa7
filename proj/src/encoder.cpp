#include "neurovid/encoder.hpp"

#include <algorithm>
#include <cmath>

namespace neurovid {

using namespace ag;

namespace {

// Constant one-hot selector [rows, choices] with row r hot at pick(r); used
// to broadcast learned embedding rows across the token sequence.
Var selector(int64_t rows, int64_t choices, const std::function<int64_t(int64_t)>& pick) {
    std::vector<double> m(static_cast<size_t>(rows * choices), 0.0);
    for (int64_t r = 0; r < rows; ++r) m[static_cast<size_t>(r * choices + pick(r))] = 1.0;
    return constant({rows, choices}, std::move(m));
}

std::function<double(Rng&)> normal_init(double stddev) {
    return [stddev](Rng& rng) { return rng.normal(0.0, stddev); };
}

}  // namespace

Encoder::Encoder(EncoderConfig cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    patches_ = (cfg_.patch_size - 1 + cfg_.voxels) / cfg_.patch_size;
    const int b = cfg_.embed_dim;
    Rng rng(seed);
    auto w02 = normal_init(0.02);

    params_.add("token_fc.w", {cfg_.patch_size, b}, w02, rng.child("token_fc.w"));
    params_.add_zeros("token_fc.b", {b});
    params_.add("frame_pos", {cfg_.window, b}, w02, rng.child("frame_pos"));
    params_.add("patch_pos", {patches_, b}, w02, rng.child("patch_pos"));
    params_.add("mask_token", {1, b}, w02, rng.child("mask_token"));
    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string p = "blk" + std::to_string(l) + ".";
        params_.add(p + "ln1.g", {b}, [](Rng&) { return 1.0; }, rng);
        params_.add_zeros(p + "ln1.b", {b});
        for (const char* nm : {"wq", "wk", "wv", "wo"})
            params_.add(p + "attn." + std::string(nm), {b, b}, w02,
                        rng.child(p + "attn." + nm));
        params_.add(p + "ln2.g", {b}, [](Rng&) { return 1.0; }, rng);
        params_.add_zeros(p + "ln2.b", {b});
        params_.add(p + "mlp.w1", {b, cfg_.mlp_ratio * b}, w02, rng.child(p + "mlp.w1"));
        params_.add_zeros(p + "mlp.b1", {cfg_.mlp_ratio * b});
        params_.add(p + "mlp.w2", {cfg_.mlp_ratio * b, b}, w02, rng.child(p + "mlp.w2"));
        params_.add_zeros(p + "mlp.b2", {b});
    }
    params_.add("final_ln.g", {b}, [](Rng&) { return 1.0; }, rng);
    params_.add_zeros("final_ln.b", {b});
    params_.add("head.w", {b, cfg_.q * cfg_.d}, w02, rng.child("head.w"));
    params_.add_zeros("head.b", {cfg_.q * cfg_.d});
    params_.add("mae.w", {b, cfg_.patch_size}, w02, rng.child("mae.w"));
    params_.add_zeros("mae.b", {cfg_.patch_size});
}

Var Encoder::tokens_to_embed(const FmriWindow& window) const {
    require(window.frames() == cfg_.window, ErrorKind::Validation,
            "encoder: window length mismatch");
    require(window.patches() == patches_ && window.token_dim() == cfg_.patch_size,
            ErrorKind::Validation, "encoder: token geometry mismatch");
    const int64_t s = seq_len();
    std::vector<double> raw(window.tokens.data.begin(), window.tokens.data.end());
    Var tok = constant({s, cfg_.patch_size}, std::move(raw));
    return add_rowvec(matmul(tok, params_.get("token_fc.w")), params_.get("token_fc.b"));
}

Var Encoder::embed(const FmriWindow& window, Rng* mask_rng, double mask_ratio,
                   Var* token_features) const {
    const int64_t s = seq_len();
    const int64_t b = cfg_.embed_dim;
    Var x = tokens_to_embed(window);

    if (mask_rng != nullptr) {
        require(mask_ratio >= 0.0 && mask_ratio <= 1.0, ErrorKind::Config,
                "encoder: mask_ratio must be in [0,1]");
        const int64_t k = std::lround(mask_ratio * static_cast<double>(s));
        if (k > 0) {
            const auto picked = sample_without_replacement(s, k, *mask_rng);
            std::vector<double> keep(static_cast<size_t>(s * b), 1.0);
            std::vector<double> drop(static_cast<size_t>(s), 0.0);
            for (int64_t i : picked) {
                drop[static_cast<size_t>(i)] = 1.0;
                for (int64_t c = 0; c < b; ++c) keep[static_cast<size_t>(i * b + c)] = 0.0;
            }
            x = add(mul(x, constant({s, b}, std::move(keep))),
                    matmul(constant({s, 1}, std::move(drop)), params_.get("mask_token")));
        }
    }

    const int64_t p = patches_;
    Var pos = add(matmul(selector(s, cfg_.window, [p](int64_t r) { return r / p; }),
                         params_.get("frame_pos")),
                  matmul(selector(s, p, [p](int64_t r) { return r % p; }),
                         params_.get("patch_pos")));
    x = add(x, pos);

    for (int l = 0; l < cfg_.layers; ++l) {
        const std::string pre = "blk" + std::to_string(l) + ".";
        Var h = layernorm_rows(x, params_.get(pre + "ln1.g"), params_.get(pre + "ln1.b"));
        Var hm = reshape(transpose(h), {1, b, 1, s});
        Var am = spatial_attention(hm, params_.get(pre + "attn.wq"),
                                   params_.get(pre + "attn.wk"), params_.get(pre + "attn.wv"),
                                   params_.get(pre + "attn.wo"), cfg_.heads);
        x = add(x, transpose(reshape(am, {b, s})));
        Var h2 = layernorm_rows(x, params_.get(pre + "ln2.g"), params_.get(pre + "ln2.b"));
        Var m = add_rowvec(matmul(h2, params_.get(pre + "mlp.w1")), params_.get(pre + "mlp.b1"));
        m = add_rowvec(matmul(gelu(m), params_.get(pre + "mlp.w2")),
                       params_.get(pre + "mlp.b2"));
        x = add(x, m);
    }

    x = layernorm_rows(x, params_.get("final_ln.g"), params_.get("final_ln.b"));
    if (token_features != nullptr) *token_features = x;

    Var pooled = mean_rows(x);
    Var out = add_rowvec(matmul(pooled, params_.get("head.w")), params_.get("head.b"));
    return l2normalize_rows(reshape(out, {cfg_.q, cfg_.d}));
}

Var Encoder::reconstruct(const Var& token_features) const {
    return add_rowvec(matmul(token_features, params_.get("mae.w")), params_.get("mae.b"));
}

Tensor Encoder::embed_eval(const FmriWindow& window) const {
    return to_tensor(embed(window));
}

Tensor Encoder::attention_maps(const FmriWindow& window, int layer) const {
    require(layer >= 0 && layer < cfg_.layers, ErrorKind::Validation,
            "attention_maps: layer out of range");
    const int64_t s = seq_len();
    const int64_t b = cfg_.embed_dim;
    const int heads = cfg_.heads;
    const int64_t dh = b / heads;

    // Replay the block stack up to the requested layer's first layernorm,
    // reusing the differentiable graph for the heavy lifting.
    Var x = tokens_to_embed(window);
    const int64_t p = patches_;
    x = add(x, add(matmul(selector(s, cfg_.window, [p](int64_t r) { return r / p; }),
                          params_.get("frame_pos")),
                   matmul(selector(s, p, [p](int64_t r) { return r % p; }),
                          params_.get("patch_pos"))));
    for (int l = 0; l < layer; ++l) {
        const std::string pre = "blk" + std::to_string(l) + ".";
        Var h = layernorm_rows(x, params_.get(pre + "ln1.g"), params_.get(pre + "ln1.b"));
        Var hm = reshape(transpose(h), {1, b, 1, s});
        Var am = spatial_attention(hm, params_.get(pre + "attn.wq"),
                                   params_.get(pre + "attn.wk"), params_.get(pre + "attn.wv"),
                                   params_.get(pre + "attn.wo"), cfg_.heads);
        x = add(x, transpose(reshape(am, {b, s})));
        Var h2 = layernorm_rows(x, params_.get(pre + "ln2.g"), params_.get(pre + "ln2.b"));
        Var m = add_rowvec(matmul(h2, params_.get(pre + "mlp.w1")), params_.get(pre + "mlp.b1"));
        m = add_rowvec(matmul(gelu(m), params_.get(pre + "mlp.w2")),
                       params_.get(pre + "mlp.b2"));
        x = add(x, m);
    }
    const std::string pre = "blk" + std::to_string(layer) + ".";
    Var h = layernorm_rows(x, params_.get(pre + "ln1.g"), params_.get(pre + "ln1.b"));

    const std::vector<double>& hv = h.n->val;
    const std::vector<double>& wq = params_.get(pre + "attn.wq").n->val;
    const std::vector<double>& wk = params_.get(pre + "attn.wk").n->val;

    // q = h Wq, k = h Wk, attn = softmax(q kT / sqrt(dh)) per head.
    std::vector<double> qm(static_cast<size_t>(s * b), 0.0), km(static_cast<size_t>(s * b), 0.0);
    for (int64_t i = 0; i < s; ++i)
        for (int64_t t = 0; t < b; ++t) {
            const double hv_it = hv[static_cast<size_t>(i * b + t)];
            for (int64_t j = 0; j < b; ++j) {
                qm[static_cast<size_t>(i * b + j)] += hv_it * wq[static_cast<size_t>(t * b + j)];
                km[static_cast<size_t>(i * b + j)] += hv_it * wk[static_cast<size_t>(t * b + j)];
            }
        }

    Tensor maps = Tensor::zeros({heads, s, s});
    const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<double> row(static_cast<size_t>(s));
    for (int hd = 0; hd < heads; ++hd) {
        const int64_t off = hd * dh;
        for (int64_t i = 0; i < s; ++i) {
            double mx = -1e300;
            for (int64_t j = 0; j < s; ++j) {
                double dot = 0.0;
                for (int64_t t = 0; t < dh; ++t)
                    dot += qm[static_cast<size_t>(i * b + off + t)] *
                           km[static_cast<size_t>(j * b + off + t)];
                row[static_cast<size_t>(j)] = dot * inv;
                mx = std::max(mx, row[static_cast<size_t>(j)]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j < s; ++j) {
                row[static_cast<size_t>(j)] = std::exp(row[static_cast<size_t>(j)] - mx);
                denom += row[static_cast<size_t>(j)];
            }
            for (int64_t j = 0; j < s; ++j)
                maps.at({hd, i, j}) = static_cast<float>(row[static_cast<size_t>(j)] / denom);
        }
    }
    return maps;
}

std::vector<double> mae_pretrain(Encoder& enc, const std::vector<FmriWindow>& windows,
                                 const MaePretrainConfig& cfg) {
    cfg.validate();
    require(!windows.empty(), ErrorKind::Validation, "mae: no windows");
    Rng rng(cfg.seed);
    Adam adam({cfg.lr});
    std::vector<double> losses;
    losses.reserve(static_cast<size_t>(cfg.steps));
    const int64_t s = enc.seq_len();
    const int64_t ps = enc.config().patch_size;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng step_rng = rng.child(static_cast<uint64_t>(step));
        Rng pick = step_rng.child("pick");
        Rng mask = step_rng.child("mask");
        Var loss;
        for (int i = 0; i < cfg.batch; ++i) {
            const FmriWindow& w =
                windows[static_cast<size_t>(pick.below(static_cast<uint64_t>(windows.size())))];
            Var tf;
            enc.embed(w, &mask, cfg.mask_ratio, &tf);
            std::vector<double> raw(w.tokens.data.begin(), w.tokens.data.end());
            Var term = mse_loss(enc.reconstruct(tf), constant({s, ps}, std::move(raw)));
            loss = i == 0 ? term : add(loss, term);
        }
        loss = scale(loss, 1.0 / static_cast<double>(cfg.batch));
        require(std::isfinite(loss.n->val[0]), ErrorKind::Numeric,
                "mae: loss went non-finite");
        enc.params().zero_grad();
        backward(loss);
        adam.step(enc.params());
        losses.push_back(loss.n->val[0]);
    }
    return losses;
}

}  // namespace neurovid
