#pragma once

// Stage-1 text latent autoencoder: sentence encoder, learned-query
// compression to fixed-length low-dimensional latents, reconstruction back
// to embedding space, and an autoregressive sentence decoder, trained end
// to end with token cross-entropy. Also provides the per-dimension latent
// normalization statistics used by diffusion, and the frozen embedding
// path for pseudo-glosses.

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/config.hpp"
#include "diffslt/data.hpp"
#include "diffslt/log.hpp"
#include "diffslt/nn.hpp"
#include "diffslt/visual.hpp"

namespace diffslt {

// Psi_E: embedding + sinusoidal positions + 2 encoder blocks; pad
// positions are zeroed in the output.
template <typename S>
struct TextEncoder {
    TokenEmbedding<S> embed;
    TensorT<S> pos;
    std::vector<EncoderBlock<S>> blocks;
    LayerNormP<S> final_ln;
    int max_len = 0;

    TextEncoder() = default;
    TextEncoder(int vocab, int dim, int heads, int ffn_hidden, int max_positions, Rng& rng)
        : embed(vocab, dim, rng), pos(sinusoidal_positions<S>(max_positions, dim)), final_ln(dim),
          max_len(max_positions) {
        for (int i = 0; i < 2; ++i) blocks.emplace_back(dim, heads, ffn_hidden, rng);
    }

    TensorT<S> operator()(const std::vector<int>& ids, int batch, int len, KeyMask mask) const {
        if (len > max_len)
            throw std::invalid_argument("text encoder: length " + std::to_string(len) + " exceeds max " +
                                        std::to_string(max_len));
        TensorT<S> x = embed(ids, {batch, len});
        x = add_bcast_rows(x, first_rows(pos, len));
        for (const auto& blk : blocks) x = blk(x, mask);
        x = final_ln(x);
        if (mask) x = mul_const(x, expand_mask<S>(mask, batch, len, x.dim(2)));
        return x;
    }

    void collect(ParamList<S>& out) const {
        embed.collect("PsiE.embed", out);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("PsiE.blk" + std::to_string(i), out);
        final_ln.collect("PsiE.ln", out);
    }
};

// CN: l learned queries cross-attend over the text embeddings, project
// D -> d, then a linear layer plus learned positional embeddings.
// Learned-query cross-attention length reduction: l queries pass through
// two blocks of self-attention + cross-attention over F_t, then project to
// the low latent width, then a linear layer plus learned positions.
template <typename S>
struct Compressor {
    TensorT<S> queries;  // [l, D]
    std::vector<CrossBlock<S>> blocks;
    LayerNormP<S> ctx_ln;
    Linear<S> proj;     // D -> d
    Linear<S> post;     // d -> d
    TensorT<S> pos;     // learned [l, d]
    int latent_len = 0;

    Compressor() = default;
    Compressor(int dim, int l, int d, int heads, int ffn_hidden, Rng& rng)
        : queries(TensorT<S>::randn({l, dim}, rng, 0.5).set_requires_grad(true)), ctx_ln(dim),
          proj(dim, d, rng), post(d, d, rng),
          pos(TensorT<S>::randn({l, d}, rng, 0.02).set_requires_grad(true)), latent_len(l) {
        for (int i = 0; i < 2; ++i) blocks.emplace_back(dim, heads, ffn_hidden, /*causal=*/false, rng);
    }

    TensorT<S> operator()(const TensorT<S>& ft, KeyMask mask) const {
        const int b = ft.dim(0);
        TensorT<S> x = add_bcast_rows(TensorT<S>::zeros({b, latent_len, queries.dim(1)}), queries);
        for (const auto& blk : blocks) x = blk(x, ft, nullptr, mask);
        TensorT<S> z = post(proj(ctx_ln(x)));
        return add_bcast_rows(z, pos);
    }

    void collect(ParamList<S>& out) const {
        out.push_back({"CN.queries", queries});
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("CN.blk" + std::to_string(i), out);
        ctx_ln.collect("CN.ctx_ln", out);
        proj.collect("CN.proj", out);
        post.collect("CN.post", out);
        out.push_back({"CN.pos", pos});
    }
};

// RN: target-length learned queries cross-attend over the latent (lifted
// d -> D), with one residual feed-forward refinement.
// Reverses the compression: target-length learned queries attend over the
// lifted latent through two blocks, producing text embeddings.
template <typename S>
struct Reconstructor {
    TensorT<S> queries;  // [max_len, D]
    Linear<S> lift;      // d -> D
    std::vector<CrossBlock<S>> blocks;
    LayerNormP<S> out_ln;
    int max_len = 0;

    Reconstructor() = default;
    Reconstructor(int dim, int d, int heads, int ffn_hidden, int max_positions, Rng& rng)
        : queries(TensorT<S>::randn({max_positions, dim}, rng, 0.5).set_requires_grad(true)),
          lift(d, dim, rng), out_ln(dim), max_len(max_positions) {
        for (int i = 0; i < 2; ++i) blocks.emplace_back(dim, heads, ffn_hidden, /*causal=*/false, rng);
    }

    TensorT<S> operator()(const TensorT<S>& z, int target_len) const {
        if (target_len > max_len)
            throw std::invalid_argument("reconstructor: target length " + std::to_string(target_len) +
                                        " exceeds max " + std::to_string(max_len));
        const int b = z.dim(0);
        std::vector<int> iota(static_cast<std::size_t>(target_len));
        for (int i = 0; i < target_len; ++i) iota[static_cast<std::size_t>(i)] = i;
        TensorT<S> x = add_bcast_rows(TensorT<S>::zeros({b, target_len, queries.dim(1)}),
                                      embedding(queries, iota, {target_len}));
        TensorT<S> kv = lift(z);
        for (const auto& blk : blocks) x = blk(x, kv, nullptr, nullptr);
        return out_ln(x);
    }

    void collect(ParamList<S>& out) const {
        out.push_back({"RN.queries", queries});
        lift.collect("RN.lift", out);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("RN.blk" + std::to_string(i), out);
        out_ln.collect("RN.out_ln", out);
    }
};

// Per-dimension latent statistics over the training set (flattened l x d).
struct NormStats {
    std::vector<double> mean, std;

    bool valid() const { return !mean.empty() && mean.size() == std.size(); }
};

template <typename S>
struct SeqAutoencoder {
    TextEncoder<S> encoder;     // Psi_E
    Compressor<S> compressor;   // CN
    Reconstructor<S> reconstructor;  // RN
    TextDecoder<S> decoder;     // Psi_D
    NormStats norm;
    int latent_len = 0, latent_dim = 0;

    SeqAutoencoder() = default;
    SeqAutoencoder(const RunConfig& cfg, int vocab, Rng& rng)
        : encoder(vocab, cfg.d_model, cfg.heads, cfg.d_model * cfg.ffn_mult, cfg.max_sentence, rng),
          compressor(cfg.d_model, cfg.latent_len, cfg.latent_dim, cfg.heads, cfg.d_model * cfg.ffn_mult, rng),
          reconstructor(cfg.d_model, cfg.latent_dim, cfg.heads, cfg.d_model * cfg.ffn_mult, cfg.max_sentence, rng),
          decoder(vocab, cfg.d_model, 2, cfg.heads, cfg.d_model * cfg.ffn_mult, cfg.max_sentence, rng),
          latent_len(cfg.latent_len), latent_dim(cfg.latent_dim) {}

    ParamList<S> params() const {
        ParamList<S> p;
        encoder.collect(p);
        compressor.collect(p);
        reconstructor.collect(p);
        decoder.collect("PsiD", p);
        return p;
    }

    // encode + compress one token batch -> latents [B, l, d]
    TensorT<S> encode_to_latent(const std::vector<int>& ids, int batch, int len, KeyMask mask) const {
        return compressor(encoder(ids, batch, len, mask), mask);
    }

    TensorT<S> normalize(const TensorT<S>& z) const {
        if (!norm.valid()) throw std::runtime_error("latent normalization stats unavailable");
        const std::size_t dims = norm.mean.size();
        TensorT<S> out = z.clone();
        auto& v = out.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::size_t d = i % dims;
            v[i] = static_cast<S>((static_cast<double>(v[i]) - norm.mean[d]) / norm.std[d]);
        }
        return out;
    }

    TensorT<S> denormalize(const TensorT<S>& z) const {
        if (!norm.valid()) throw std::runtime_error("latent normalization stats unavailable");
        const std::size_t dims = norm.mean.size();
        TensorT<S> out = z.clone();
        auto& v = out.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const std::size_t d = i % dims;
            v[i] = static_cast<S>(static_cast<double>(v[i]) * norm.std[d] + norm.mean[d]);
        }
        return out;
    }

    // Greedy decode of an unnormalized latent back to token ids. The
    // reconstruction length is fixed to the trained maximum so inference
    // never depends on an unknown target length.
    std::vector<int> decode_latent(const TensorT<S>& z) const {
        NoGradGuard ng;
        TensorT<S> emb = reconstructor(z, reconstructor.max_len);
        return decoder.greedy_decode(emb, nullptr, Vocabulary::bos, Vocabulary::eos);
    }

    // Pseudo-gloss embedding: frozen token-embedding lookup through the
    // gloss's canonical surface word, plus sinusoidal positions.
    TensorT<S> embed_gloss(const std::vector<int>& gloss_ids, int batch, int len, const Vocabulary& vocab) const {
        std::vector<int> word_ids;
        word_ids.reserve(gloss_ids.size());
        for (int g : gloss_ids) {
            if (g < 0 || g >= vocab.gloss_size())
                throw std::invalid_argument("embed_gloss: gloss id " + std::to_string(g) + " out of range");
            word_ids.push_back(g < 3 ? Vocabulary::pad : vocab.gloss_to_word[static_cast<std::size_t>(g)]);
        }
        TensorT<S> x = encoder.embed(word_ids, {batch, len});
        return add_bcast_rows(x, first_rows(encoder.pos, len));
    }
};

template <typename S>
inline void compute_norm_stats(SeqAutoencoder<S>& ae, const DatasetSplit& data, const RunConfig& cfg) {
    NoGradGuard ng;
    const std::size_t dims = static_cast<std::size_t>(ae.latent_len * ae.latent_dim);
    std::vector<double> sum(dims, 0.0), sq(dims, 0.0);
    std::size_t count = 0;
    std::vector<const SignSample*> ptrs;
    for (const auto& s : data.train) ptrs.push_back(&s);
    for (std::size_t start = 0; start < ptrs.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<const SignSample*> chunk(
            ptrs.begin() + static_cast<std::ptrdiff_t>(start),
            ptrs.begin() + static_cast<std::ptrdiff_t>(std::min(ptrs.size(), start + static_cast<std::size_t>(cfg.batch_size))));
        const auto tb = build_token_batch(chunk, cfg.max_sentence);
        TensorT<S> z = ae.encode_to_latent(tb.input, tb.batch, tb.len, tb.mask);
        for (int b = 0; b < tb.batch; ++b) {
            for (std::size_t d = 0; d < dims; ++d) {
                const double v = static_cast<double>(z.data()[static_cast<std::size_t>(b) * dims + d]);
                sum[d] += v;
                sq[d] += v * v;
            }
            ++count;
        }
    }
    ae.norm.mean.resize(dims);
    ae.norm.std.resize(dims);
    for (std::size_t d = 0; d < dims; ++d) {
        ae.norm.mean[d] = sum[d] / static_cast<double>(count);
        const double var = sq[d] / static_cast<double>(count) - ae.norm.mean[d] * ae.norm.mean[d];
        ae.norm.std[d] = std::sqrt(std::max(var, 0.0));
        if (!(ae.norm.std[d] > 0.0))
            throw std::runtime_error("latent normalization: zero std in dimension " + std::to_string(d));
    }
}

// Exact greedy-reconstruction rate decode(RN(CN(PsiE(y)))) == y.
template <typename S>
inline double reconstruction_rate(const SeqAutoencoder<S>& ae, const std::vector<const SignSample*>& samples,
                                  const RunConfig& cfg) {
    NoGradGuard ng;
    std::size_t ok = 0;
    for (const auto* s : samples) {
        std::vector<const SignSample*> one{s};
        const auto tb = build_token_batch(one, cfg.max_sentence);
        TensorT<S> z = ae.encode_to_latent(tb.input, 1, tb.len, tb.mask);
        const auto decoded = ae.decode_latent(z);
        ok += (decoded == s->sentence);
    }
    return samples.empty() ? 0.0 : static_cast<double>(ok) / static_cast<double>(samples.size());
}

// End-to-end reconstruction cross-entropy training; computes NormStats
// afterwards. Aborts to the last good snapshot on a non-finite loss.
template <typename S>
inline PretrainResult pretrain_autoencoder(SeqAutoencoder<S>& ae, const DatasetSplit& data, const RunConfig& cfg,
                                              Rng& rng, NdjsonLogger* logger = nullptr) {
    PretrainResult res;
    ParamList<S> params = ae.params();
    set_trainable(params, true);
    AdamW<S> opt(params, cfg.ae_lr, cfg.weight_decay, cfg.grad_clip);

    TapeT<S> tape;
    TapeScope<S> scope(tape);

    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    auto snapshot = detail_train::snapshot_params(params);
    for (int step = 0; step < cfg.ae_steps; ++step) {
        if (cursor + static_cast<std::size_t>(cfg.batch_size) > order.size()) {
            order.resize(data.train.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        std::vector<const SignSample*> chunk;
        for (int b = 0; b < cfg.batch_size && cursor < order.size(); ++b) chunk.push_back(&data.train[order[cursor++]]);

        tape.clear();
        opt.zero_grad();
        const auto tb = build_token_batch(chunk, cfg.max_sentence);
        TensorT<S> z = ae.encode_to_latent(tb.input, tb.batch, tb.len, tb.mask);
        TensorT<S> emb = ae.reconstructor(z, cfg.max_sentence);
        TensorT<S> lg = ae.decoder.logits(tb.input, tb.batch, tb.len, emb, nullptr, tb.mask);
        TensorT<S> loss = cross_entropy(lg, tb.target, Vocabulary::pad);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) {
            detail_train::restore_params(params, snapshot);
            res.aborted = true;
            break;
        }
        backward(loss);
        if (cfg.lr_schedule == "cosine") opt.set_lr(cosine_decay_lr(cfg.ae_lr, step, cfg.ae_steps));
        const double gnorm = opt.step();
        res.final_loss = lv;
        res.steps = step + 1;
        if (step % 200 == 0) snapshot = detail_train::snapshot_params(params);
        if (logger && step % 50 == 0)
            logger->log({{"event", "ae_step"}, {"step", step}, {"loss", lv}, {"grad_norm", gnorm}, {"lr", opt.lr()}});
    }
    compute_norm_stats(ae, data, cfg);
    return res;
}

}  // namespace diffslt
