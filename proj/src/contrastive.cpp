#include "neurovid/contrastive.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "neurovid/archive.hpp"

namespace neurovid {

using namespace ag;

namespace {

Var flat_constant(const Tensor& t) {
    std::vector<double> d(t.data.begin(), t.data.end());
    return constant({1, t.numel()}, std::move(d));
}

// Stacks per-sample [q, d] embeddings as flattened rows [n, q*d].
Var stack_rows(std::vector<Var> rows) {
    for (auto& r : rows) r = reshape(r, {1, r.numel()});
    return rows.size() == 1 ? rows[0] : concat_rows(rows);
}

std::vector<int> iota_targets(int64_t n) {
    std::vector<int> t(static_cast<size_t>(n));
    std::iota(t.begin(), t.end(), 0);
    return t;
}

}  // namespace

Var info_nce(const Var& anchors, const Var& positives, double temperature) {
    require(temperature > 0.0, ErrorKind::Config, "info_nce: temperature must be > 0");
    require(anchors.shape().size() == 2 && anchors.shape() == positives.shape(),
            ErrorKind::Validation, "info_nce: need matching [n, m] inputs");
    const int64_t n = anchors.dim(0);
    require(n >= 2, ErrorKind::Validation, "info_nce: batch of at least 2 required");
    for (double v : anchors.n->val)
        require(std::isfinite(v), ErrorKind::Numeric, "info_nce: non-finite anchor");
    for (double v : positives.n->val)
        require(std::isfinite(v), ErrorKind::Numeric, "info_nce: non-finite positive");

    Var an = l2normalize_rows(anchors);
    Var pn = l2normalize_rows(positives);
    Var sim = scale(matmul(an, transpose(pn)), 1.0 / temperature);
    const auto targets = iota_targets(n);
    Var fwd = cross_entropy_rows(sim, targets);
    Var bwd = cross_entropy_rows(transpose(sim), targets);
    return scale(add(fwd, bwd), 0.5);
}

Phase1Losses phase1_losses(const Encoder& enc, const std::vector<FmriWindow>& batch,
                           const std::vector<Tensor>& e_txt, const std::vector<Tensor>& e_img,
                           const Phase1Config& cfg, Rng& rng) {
    cfg.validate();
    const size_t n = batch.size();
    require(n >= 2, ErrorKind::Validation, "phase1_losses: batch of at least 2 required");
    require(e_txt.size() == n && e_img.size() == n, ErrorKind::Validation,
            "phase1_losses: targets must align with the batch");

    Rng spa_rng = rng.child("spa");
    Rng tem_rng = rng.child("tem");
    std::vector<Var> orig, spa, tem, txt, img;
    for (size_t i = 0; i < n; ++i) {
        orig.push_back(enc.embed(batch[i]));
        spa.push_back(enc.embed(spatial_mask(batch[i], cfg.augment.gamma_spa, spa_rng)));
        tem.push_back(enc.embed(temporal_interpolate(batch[i], cfg.augment.gamma_tem, tem_rng,
                                                     cfg.augment.normalize_interpolation)));
        txt.push_back(flat_constant(e_txt[i]));
        img.push_back(flat_constant(e_img[i]));
    }
    Var x = stack_rows(std::move(orig));
    Var x_spa = stack_rows(std::move(spa));
    Var x_tem = stack_rows(std::move(tem));

    Var against_spa = info_nce(x, x_spa, cfg.temperature);
    Var against_tem = info_nce(x, x_tem, cfg.temperature);

    Phase1Losses out;
    out.spa = cfg.literal_pairing ? against_tem : against_spa;
    out.tem = cfg.literal_pairing ? against_spa : against_tem;
    out.emb = add(info_nce(x, stack_rows(std::move(txt)), cfg.temperature),
                  info_nce(x, stack_rows(std::move(img)), cfg.temperature));
    out.total = add(add(scale(out.spa, cfg.mu_spa), scale(out.tem, cfg.mu_tem)), out.emb);
    return out;
}

std::vector<Phase1LogRow> train_phase1(Encoder& enc, const std::vector<FmriWindow>& windows,
                                       const std::vector<Tensor>& e_txt,
                                       const std::vector<Tensor>& e_img,
                                       const Phase1Config& cfg) {
    cfg.validate();
    require(windows.size() >= static_cast<size_t>(cfg.batch_size), ErrorKind::Validation,
            "phase1: dataset smaller than one batch");
    require(e_txt.size() == windows.size() && e_img.size() == windows.size(),
            ErrorKind::Validation, "phase1: targets must align with windows");

    Rng root(cfg.seed);
    std::vector<size_t> target_of(windows.size());
    std::iota(target_of.begin(), target_of.end(), 0);
    if (cfg.shuffle_pairing) {
        Rng sh = root.child("shuffle_pairing");
        for (size_t i = target_of.size(); i > 1; --i)
            std::swap(target_of[i - 1], target_of[static_cast<size_t>(sh.below(i))]);
    }

    Adam adam({cfg.lr});
    std::vector<Phase1LogRow> log;
    log.reserve(static_cast<size_t>(cfg.steps));

    // Last-good rollback state for the non-finite abort path.
    NamedTensors good;
    enc.save(good);
    int good_step = -1;

    for (int step = 0; step < cfg.steps; ++step) {
        Rng step_rng = root.child("step").child(static_cast<uint64_t>(step));
        Rng pick = step_rng.child("pick");
        std::vector<FmriWindow> batch;
        std::vector<Tensor> bt, bi;
        for (int i = 0; i < cfg.batch_size; ++i) {
            const size_t j =
                static_cast<size_t>(pick.below(static_cast<uint64_t>(windows.size())));
            batch.push_back(windows[j]);
            bt.push_back(e_txt[target_of[j]]);
            bi.push_back(e_img[target_of[j]]);
        }
        Rng aug_rng = step_rng.child("aug");
        auto abort_step = [&]() {
            enc.load(good);
            fail(ErrorKind::Numeric,
                 "phase1: non-finite loss at step " + std::to_string(step) +
                     "; encoder rolled back to step " + std::to_string(good_step));
        };
        Phase1Losses losses;
        try {
            losses = phase1_losses(enc, batch, bt, bi, cfg, aug_rng);
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::Numeric) abort_step();
            throw;
        }
        const double total = losses.total.n->val[0];
        if (!std::isfinite(total)) abort_step();

        // These parameters produced a finite loss; they are the rollback
        // target if a later step blows up.
        good = NamedTensors();
        enc.save(good);
        good_step = step;

        enc.params().zero_grad();
        backward(losses.total);
        adam.step(enc.params());
        log.push_back({step, losses.spa.n->val[0], losses.tem.n->val[0], losses.emb.n->val[0],
                       total});
    }
    return log;
}

double retrieval_top1(const Encoder& enc, const std::vector<FmriWindow>& windows,
                      const std::vector<Tensor>& targets,
                      const std::vector<std::vector<size_t>>& batches) {
    require(windows.size() == targets.size(), ErrorKind::Validation,
            "retrieval: targets must align with windows");
    require(!batches.empty(), ErrorKind::Validation, "retrieval: no batches");
    int hits = 0, total = 0;
    for (const auto& batch : batches) {
        require(batch.size() >= 2, ErrorKind::Validation, "retrieval: batch too small");
        std::vector<Tensor> emb;
        for (size_t idx : batch) {
            require(idx < windows.size(), ErrorKind::Validation, "retrieval: index out of range");
            emb.push_back(enc.embed_eval(windows[idx]));
        }
        auto cosine = [](const Tensor& a, const Tensor& b) {
            double dot = 0, na = 0, nb = 0;
            for (size_t i = 0; i < a.data.size(); ++i) {
                dot += static_cast<double>(a.data[i]) * b.data[i];
                na += static_cast<double>(a.data[i]) * a.data[i];
                nb += static_cast<double>(b.data[i]) * b.data[i];
            }
            return dot / std::sqrt(std::max(na * nb, 1e-30));
        };
        for (size_t i = 0; i < batch.size(); ++i) {
            double best = -2.0;
            size_t best_j = 0;
            for (size_t j = 0; j < batch.size(); ++j) {
                const double s = cosine(emb[i], targets[batch[j]]);
                if (s > best) {
                    best = s;
                    best_j = j;
                }
            }
            hits += best_j == i;
            ++total;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace neurovid
