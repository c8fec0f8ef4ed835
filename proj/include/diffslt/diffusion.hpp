#pragma once

// Diffusion core: cosine / shifted-cosine noise schedules on ᾱ with a
// logSNR table, the closed-form forward noising, the x-prediction denoiser
// (N attention blocks with self-attention over the latent, cross-attention
// into the fused guidance, feature-axis self-conditioning), and the L1
// training loop with condition dropout.

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/autoencoder.hpp"
#include "diffslt/config.hpp"
#include "diffslt/guidance.hpp"
#include "diffslt/nn.hpp"
#include "diffslt/visual.hpp"

namespace diffslt {

struct NoiseSchedule {
    int total_steps = 0;  // T
    std::string kind;
    double scale = 1.0;
    std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] = 1
    std::vector<double> log_snr;    // [T+1], +inf at t = 0
    std::vector<double> alpha;      // [T+1], alpha[t] = abar[t]/abar[t-1]
};

inline NoiseSchedule build_schedule(const std::string& kind, int total_steps, double scale) {
    if (total_steps < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (scale <= 0.0) throw std::invalid_argument("schedule: scale must be > 0");
    if (kind != "cosine" && kind != "shifted_cosine")
        throw std::invalid_argument("schedule: unknown kind '" + kind + "'");

    NoiseSchedule sched;
    sched.total_steps = total_steps;
    sched.kind = kind;
    sched.scale = scale;
    const double s = 0.008;
    const double half_pi = 1.5707963267948966;
    auto f = [&](double t) {
        const double c = std::cos((t / total_steps + s) / (1.0 + s) * half_pi);
        return c * c;
    };
    const double f0 = f(0.0);
    sched.alpha_bar.resize(static_cast<std::size_t>(total_steps) + 1);
    sched.log_snr.resize(static_cast<std::size_t>(total_steps) + 1);
    for (int t = 0; t <= total_steps; ++t) {
        double ab = f(static_cast<double>(t)) / f0;
        if (t == 0) ab = 1.0;
        double lsnr = (ab >= 1.0) ? std::numeric_limits<double>::infinity() : std::log(ab / (1.0 - ab));
        if (kind == "shifted_cosine" && std::isfinite(lsnr)) {
            lsnr += 2.0 * std::log(scale);
            ab = 1.0 / (1.0 + std::exp(-lsnr));
        }
        sched.alpha_bar[static_cast<std::size_t>(t)] = ab;
        sched.log_snr[static_cast<std::size_t>(t)] = lsnr;
    }
    sched.alpha.assign(static_cast<std::size_t>(total_steps) + 1, 1.0);
    for (int t = 1; t <= total_steps; ++t)
        sched.alpha[static_cast<std::size_t>(t)] =
            sched.alpha_bar[static_cast<std::size_t>(t)] / sched.alpha_bar[static_cast<std::size_t>(t - 1)];

    for (int t = 1; t <= total_steps; ++t) {
        if (!(sched.alpha_bar[static_cast<std::size_t>(t)] < sched.alpha_bar[static_cast<std::size_t>(t - 1)]))
            throw std::runtime_error("schedule: alpha_bar is not strictly decreasing at t=" + std::to_string(t));
        if (!(sched.alpha_bar[static_cast<std::size_t>(t)] > 0.0))
            throw std::runtime_error("schedule: alpha_bar reached zero at t=" + std::to_string(t));
    }
    if (sched.alpha_bar.back() > 1e-4)
        throw std::runtime_error("schedule: terminal alpha_bar " + std::to_string(sched.alpha_bar.back()) +
                                 " exceeds 1e-4; increase T or lower the scale");
    return sched;
}

// z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps, exactly.
template <typename S>
inline TensorT<S> forward_noise(const TensorT<S>& z0, int t, const TensorT<S>& eps, const NoiseSchedule& sched) {
    if (t < 0 || t > sched.total_steps)
        throw std::invalid_argument("forward_noise: t=" + std::to_string(t) + " outside [0," +
                                    std::to_string(sched.total_steps) + "]");
    if (z0.shape() != eps.shape())
        shape_error("forward_noise", "noise shape " + shape_str(eps.shape()) + " != latent " + shape_str(z0.shape()));
    const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
    return add(scale(z0, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

// x-prediction denoiser over latents [B, l, d].
template <typename S>
struct Denoiser {
    Linear<S> in_proj;   // 2d -> D (self-conditioning doubles the feature width)
    TensorT<S> time_emb;  // [T+1, D] learned
    TensorT<S> pos_emb;   // [l, D] learned
    std::vector<CrossBlock<S>> blocks;
    LayerNormP<S> final_ln;
    Linear<S> out_proj;       // D -> d
    TensorT<S> init_self_cond;  // [d] learned initial self-conditioning embedding
    int latent_len = 0, latent_dim = 0;
    mutable std::int64_t forward_calls = 0;  // network function evaluations

    Denoiser() = default;
    Denoiser(const RunConfig& cfg, Rng& rng)
        : in_proj(2 * cfg.latent_dim, cfg.d_model, rng),
          time_emb(TensorT<S>::randn({cfg.timesteps + 1, cfg.d_model}, rng, 0.02).set_requires_grad(true)),
          pos_emb(TensorT<S>::randn({cfg.latent_len, cfg.d_model}, rng, 0.02).set_requires_grad(true)),
          final_ln(cfg.d_model), out_proj(cfg.d_model, cfg.latent_dim, rng),
          init_self_cond(TensorT<S>::randn({cfg.latent_dim}, rng, 0.02).set_requires_grad(true)),
          latent_len(cfg.latent_len), latent_dim(cfg.latent_dim) {
        if (cfg.n_blocks < 1) throw std::invalid_argument("denoiser: n_blocks must be >= 1");
        for (int i = 0; i < cfg.n_blocks; ++i)
            blocks.emplace_back(cfg.d_model, cfg.heads, cfg.d_model * cfg.ffn_mult, /*causal=*/false, rng);
    }

    // The learned initial self-conditioning input, broadcast to a batch.
    TensorT<S> initial_self_cond(int batch) const {
        return add_bias(TensorT<S>::zeros({batch, latent_len, latent_dim}), init_self_cond);
    }

    TensorT<S> predict(const TensorT<S>& z_t, const TensorT<S>& self_cond, const FusedGuidance<S>& guidance,
                       int t) const {
        if (z_t.rank() != 3 || z_t.dim(1) != latent_len || z_t.dim(2) != latent_dim)
            shape_error("denoiser", "latent shape " + shape_str(z_t.shape()) + " does not match [B," +
                                        std::to_string(latent_len) + "," + std::to_string(latent_dim) + "]");
        if (self_cond.shape() != z_t.shape())
            shape_error("denoiser", "self-conditioning shape " + shape_str(self_cond.shape()) +
                                        " != latent shape " + shape_str(z_t.shape()));
        if (t < 0 || t >= time_emb.dim(0))
            throw std::invalid_argument("denoiser: timestep " + std::to_string(t) + " outside the trained range");
        ++forward_calls;
        TensorT<S> x = in_proj(concat(z_t, self_cond, 2));
        TensorT<S> trow = reshape(embedding(time_emb, {t}, {1}), {time_emb.dim(1)});
        x = add_bias(x, trow);
        x = add_bcast_rows(x, pos_emb);
        for (const auto& blk : blocks) x = blk(x, guidance.values, nullptr, guidance.mask);
        return out_proj(final_ln(x));
    }

    ParamList<S> params() const {
        ParamList<S> p;
        in_proj.collect("Z.in", p);
        p.push_back({"Z.time", time_emb});
        p.push_back({"Z.pos", pos_emb});
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("Z.blk" + std::to_string(i), p);
        final_ln.collect("Z.ln", p);
        out_proj.collect("Z.out", p);
        p.push_back({"Z.init_sc", init_self_cond});
        return p;
    }
};

// Per-sample conditioning cache: the frozen stage-1 features and the
// normalized clean latent never change during stage 2.
template <typename S>
struct ConditioningCache {
    std::vector<TensorT<S>> stream_a;  // F_w (diffslt) or F_p (diffslt_p), [L_a, D]
    std::vector<TensorT<S>> stream_b;  // F_v, [L_v, D]
    std::vector<TensorT<S>> z0;        // normalized clean latents [l, d]
};

template <typename S>
inline ConditioningCache<S> build_conditioning_cache(const std::vector<const SignSample*>& samples,
                                                     const VisualPipeline<S>& vp, const SeqAutoencoder<S>& ae,
                                                     const DatasetSplit& data, const RunConfig& cfg) {
    NoGradGuard ng;
    ConditioningCache<S> cache;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const SignSample* s = samples[i];
        std::vector<const SignSample*> one{s};
        const auto fb = build_frame_batch<S>(one, cfg.d_raw);
        TensorT<S> fw = vp.frame_extractor(fb.frames);
        TensorT<S> fv = vp.video_encoder(fw, fb.mask);
        if (cfg.mode == "diffslt_p") {
            // Deterministic per-sample pseudo-gloss, simulating a frozen
            // external recognizer.
            Rng grng = Rng::derive(cfg.data_seed, 0x9105500 + i);
            const auto pg = make_pseudo_gloss(s->gloss, cfg.pseudo_wer, grng, data.vocab);
            TensorT<S> fp = ae.embed_gloss(pg, 1, static_cast<int>(pg.size()), data.vocab);
            cache.stream_a.push_back(reshape(fp, {static_cast<int>(pg.size()), cfg.d_model}).clone());
        } else {
            cache.stream_a.push_back(reshape(fw, {fb.len, cfg.d_model}).clone());
        }
        cache.stream_b.push_back(reshape(fv, {fb.len, cfg.d_model}).clone());

        const auto tb = build_token_batch(one, cfg.max_sentence);
        TensorT<S> z = ae.encode_to_latent(tb.input, 1, tb.len, tb.mask);
        if (cfg.latent_norm) z = ae.normalize(z);
        cache.z0.push_back(reshape(z, {cfg.latent_len, cfg.latent_dim}).clone());
    }
    return cache;
}

// Stacks per-sample [L, D] streams into a padded batch with a mask.
template <typename S>
inline std::pair<TensorT<S>, KeyMask> stack_streams(const std::vector<const TensorT<S>*>& streams, int d_model) {
    const int batch = static_cast<int>(streams.size());
    int max_len = 0;
    std::vector<int> lengths;
    for (const auto* s : streams) {
        lengths.push_back(s->dim(0));
        max_len = std::max(max_len, s->dim(0));
    }
    TensorT<S> out = TensorT<S>::zeros({batch, max_len, d_model});
    for (int b = 0; b < batch; ++b) {
        const auto& src = streams[static_cast<std::size_t>(b)]->data();
        std::copy(src.begin(), src.end(),
                  out.data().begin() + static_cast<std::ptrdiff_t>(b) * max_len * d_model);
    }
    return {out, mask_from_lengths(lengths, max_len)};
}

template <typename S>
inline TensorT<S> stack_latents(const std::vector<const TensorT<S>*>& latents, int l, int d) {
    const int batch = static_cast<int>(latents.size());
    TensorT<S> out = TensorT<S>::zeros({batch, l, d});
    for (int b = 0; b < batch; ++b) {
        const auto& src = latents[static_cast<std::size_t>(b)]->data();
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(b) * l * d);
    }
    return out;
}

// t ~ Uniform{1..T}, one draw per optimization step.
inline int sample_timestep(Rng& rng, int total_steps) {
    return 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(total_steps)));
}

struct DiffusionStepInfo {
    double loss = 0.0;
    double weighted_loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    int t = 0;
    bool used_self_cond = false;
    bool dropped_condition = false;
};

// One optimization step of Algorithm-style training: sample t and eps,
// noise the clean latent, optionally run the detached first pass for
// self-conditioning, optionally replace the guidance by the null token,
// and take an L1 step on |z0_hat - z0|.
template <typename S>
inline DiffusionStepInfo diffusion_train_step(Denoiser<S>& dn, GuidanceFusion<S>& gf, AdamW<S>& opt,
                                              TapeT<S>& tape, const TensorT<S>& z0_batch,
                                              const TensorT<S>& stream_a, KeyMask mask_a,
                                              const TensorT<S>& stream_b, KeyMask mask_b,
                                              const NoiseSchedule& sched, const RunConfig& cfg, Rng& rng) {
    DiffusionStepInfo info;
    const int batch = z0_batch.dim(0);
    tape.clear();
    opt.zero_grad();

    info.t = sample_timestep(rng, sched.total_steps);
    TensorT<S> eps = TensorT<S>::randn(z0_batch.shape(), rng);
    TensorT<S> z_t = forward_noise(z0_batch, info.t, eps, sched);

    info.dropped_condition = rng.uniform() < cfg.cond_drop_prob;
    info.used_self_cond = rng.uniform() < cfg.self_cond_prob;

    FusedGuidance<S> guidance =
        info.dropped_condition ? gf.null_guidance(batch) : gf.fuse(stream_a, mask_a, stream_b, mask_b);

    TensorT<S> self_cond = dn.initial_self_cond(batch);
    if (info.used_self_cond) {
        NoGradGuard ng;
        self_cond = dn.predict(z_t, self_cond, guidance, info.t).detach();
    }
    TensorT<S> pred = dn.predict(z_t, self_cond, guidance, info.t);
    TensorT<S> loss = mean_all(abs_elem(sub(pred, z0_batch)));
    info.loss = static_cast<double>(loss.item());
    TensorT<S> weighted = cfg.lambda_t == 1.0 ? loss : scale(loss, cfg.lambda_t);
    info.weighted_loss = static_cast<double>(weighted.item());
    if (!std::isfinite(info.loss)) return info;  // caller handles the abort
    backward(weighted);
    info.lr = opt.lr();
    info.grad_norm = opt.step();
    return info;
}

struct DiffusionTrainResult {
    bool aborted = false;
    int steps = 0;
    double final_loss = 0.0;
    double tail_mean_loss = 0.0;  // mean loss over the last 100 steps
};

template <typename S>
inline DiffusionTrainResult train_diffusion(Denoiser<S>& dn, GuidanceFusion<S>& gf, const VisualPipeline<S>& vp,
                                               const SeqAutoencoder<S>& ae, const DatasetSplit& data,
                                               const NoiseSchedule& sched, const RunConfig& cfg, Rng& rng,
                                               NdjsonLogger* logger = nullptr) {
    DiffusionTrainResult res;

    // Stage-1 components stay frozen: exclude them from the optimizer and
    // from gradient tracking.
    {
        auto frozen = vp.all_params();
        set_trainable(frozen, false);
        auto frozen_ae = ae.params();
        set_trainable(frozen_ae, false);
    }
    ParamList<S> trainable = dn.params();
    for (auto& p : gf.params()) trainable.push_back(p);
    set_trainable(trainable, true);
    AdamW<S> opt(trainable, cfg.lr, cfg.weight_decay, cfg.grad_clip);

    std::vector<const SignSample*> train_ptrs;
    for (const auto& s : data.train) train_ptrs.push_back(&s);
    const auto cache = build_conditioning_cache(train_ptrs, vp, ae, data, cfg);

    TapeT<S> tape;
    TapeScope<S> scope(tape);

    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    std::vector<double> tail;
    auto snapshot = detail_train::snapshot_params(trainable);
    for (int step = 0; step < cfg.diffusion_steps; ++step) {
        if (cursor + static_cast<std::size_t>(cfg.batch_size) > order.size()) {
            order.resize(train_ptrs.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        std::vector<const TensorT<S>*> a_ptrs, b_ptrs, z_ptrs;
        for (int b = 0; b < cfg.batch_size && cursor < order.size(); ++b) {
            const std::size_t i = order[cursor++];
            a_ptrs.push_back(&cache.stream_a[i]);
            b_ptrs.push_back(&cache.stream_b[i]);
            z_ptrs.push_back(&cache.z0[i]);
        }
        auto [sa, ma] = stack_streams<S>(a_ptrs, cfg.d_model);
        auto [sb, mb] = stack_streams<S>(b_ptrs, cfg.d_model);
        TensorT<S> z0 = stack_latents<S>(z_ptrs, cfg.latent_len, cfg.latent_dim);

        if (cfg.lr_schedule == "cosine") opt.set_lr(cosine_decay_lr(cfg.lr, step, cfg.diffusion_steps));
        const auto info = diffusion_train_step(dn, gf, opt, tape, z0, sa, ma, sb, mb, sched, cfg, rng);
        if (!std::isfinite(info.loss)) {
            detail_train::restore_params(trainable, snapshot);
            res.aborted = true;
            break;
        }
        res.final_loss = info.loss;
        res.steps = step + 1;
        tail.push_back(info.loss);
        if (tail.size() > 100) tail.erase(tail.begin());
        if (step % 200 == 0) snapshot = detail_train::snapshot_params(trainable);
        if (logger && step % 50 == 0)
            logger->log({{"event", "diffusion_step"},
                         {"step", step},
                         {"loss", info.loss},
                         {"weighted_loss", info.weighted_loss},
                         {"grad_norm", info.grad_norm},
                         {"lr", info.lr},
                         {"t", info.t}});
    }
    if (!tail.empty()) {
        double acc = 0.0;
        for (double v : tail) acc += v;
        res.tail_mean_loss = acc / static_cast<double>(tail.size());
    }
    return res;
}

}  // namespace diffslt
