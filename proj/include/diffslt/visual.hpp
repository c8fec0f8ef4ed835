#pragma once

// Stage-1 visual pretraining: frame feature extractor W (per-frame MLP, no
// temporal mixing), transformer visual encoder V over frames, and a
// throwaway autoregressive text decoder trained with token cross-entropy.
// Only W and V are checkpointed; padded frames are masked in attention.

#include <algorithm>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/config.hpp"
#include "diffslt/data.hpp"
#include "diffslt/log.hpp"
#include "diffslt/nn.hpp"
#include "diffslt/optim.hpp"
#include "diffslt/tensor.hpp"

namespace diffslt {

template <typename S>
struct FrameBatch {
    TensorT<S> frames;  // [B, L, D_raw]
    KeyMask mask;       // [B, L] frame validity
    int batch = 0;
    int len = 0;
};

template <typename S>
inline FrameBatch<S> build_frame_batch(const std::vector<const SignSample*>& samples, int d_raw) {
    FrameBatch<S> fb;
    fb.batch = static_cast<int>(samples.size());
    std::vector<int> lengths;
    for (const auto* s : samples) {
        lengths.push_back(s->n_frames);
        fb.len = std::max(fb.len, s->n_frames);
    }
    fb.frames = TensorT<S>::zeros({fb.batch, fb.len, d_raw});
    auto& out = fb.frames.data();
    for (int b = 0; b < fb.batch; ++b) {
        const auto& src = samples[static_cast<std::size_t>(b)]->frames;
        for (std::size_t i = 0; i < src.size(); ++i)
            out[static_cast<std::size_t>(b * fb.len * d_raw) + i] = static_cast<S>(src[i]);
    }
    fb.mask = mask_from_lengths(lengths, fb.len);
    return fb;
}

struct TokenBatch {
    std::vector<int> input;   // [B, L] teacher forcing: bos y1..yn
    std::vector<int> target;  // [B, L]                 : y1..yn eos
    int batch = 0;
    int len = 0;
    KeyMask mask;  // [B, L] input validity
};

inline TokenBatch build_token_batch(const std::vector<const SignSample*>& samples, int max_sentence) {
    TokenBatch tb;
    tb.batch = static_cast<int>(samples.size());
    std::vector<int> lengths;
    for (const auto* s : samples) {
        const int n = static_cast<int>(s->sentence.size()) + 1;  // + bos/eos slot
        if (n > max_sentence)
            throw std::invalid_argument("sentence length " + std::to_string(n) + " exceeds max_sentence " +
                                        std::to_string(max_sentence));
        lengths.push_back(n);
        tb.len = std::max(tb.len, n);
    }
    tb.input.assign(static_cast<std::size_t>(tb.batch * tb.len), Vocabulary::pad);
    tb.target.assign(static_cast<std::size_t>(tb.batch * tb.len), Vocabulary::pad);
    for (int b = 0; b < tb.batch; ++b) {
        const auto& y = samples[static_cast<std::size_t>(b)]->sentence;
        tb.input[static_cast<std::size_t>(b * tb.len)] = Vocabulary::bos;
        for (std::size_t i = 0; i < y.size(); ++i) {
            tb.input[static_cast<std::size_t>(b * tb.len) + i + 1] = y[i];
            tb.target[static_cast<std::size_t>(b * tb.len) + i] = y[i];
        }
        tb.target[static_cast<std::size_t>(b * tb.len) + y.size()] = Vocabulary::eos;
    }
    tb.mask = mask_from_lengths(lengths, tb.len);
    return tb;
}

// W: per-frame 2-layer MLP with GELU; no temporal receptive field.
template <typename S>
struct FrameExtractor {
    Linear<S> l1, l2;

    FrameExtractor() = default;
    FrameExtractor(int d_raw, int d_model, Rng& rng) : l1(d_raw, d_model, rng), l2(d_model, d_model, rng) {}

    TensorT<S> operator()(const TensorT<S>& frames) const { return l2(gelu(l1(frames))); }

    void collect(ParamList<S>& out) const {
        l1.collect("W.l1", out);
        l2.collect("W.l2", out);
    }
};

// V: sinusoidal positions + pre-norm encoder stack over frames.
template <typename S>
struct VisualEncoder {
    TensorT<S> pos;
    std::vector<EncoderBlock<S>> blocks;
    LayerNormP<S> final_ln;
    int max_positions = 0;

    VisualEncoder() = default;
    VisualEncoder(int d_model, int depth, int heads, int ffn_hidden, int max_frames, Rng& rng)
        : pos(sinusoidal_positions<S>(max_frames, d_model)), final_ln(d_model), max_positions(max_frames) {
        for (int i = 0; i < depth; ++i) blocks.emplace_back(d_model, heads, ffn_hidden, rng);
    }

    TensorT<S> operator()(const TensorT<S>& fw, KeyMask mask) const {
        if (fw.dim(1) > max_positions)
            throw std::invalid_argument("visual encoder: " + std::to_string(fw.dim(1)) +
                                        " frames exceed max positions " + std::to_string(max_positions));
        TensorT<S> x = add_bcast_rows(fw, first_rows(pos, fw.dim(1)));
        for (const auto& blk : blocks) x = blk(x, mask);
        return final_ln(x);
    }

    void collect(ParamList<S>& out) const {
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("V.blk" + std::to_string(i), out);
        final_ln.collect("V.ln", out);
    }
};

template <typename S>
struct VisualPipeline {
    FrameExtractor<S> frame_extractor;
    VisualEncoder<S> video_encoder;
    TextDecoder<S> text_decoder;  // pretraining only, never checkpointed

    VisualPipeline() = default;
    VisualPipeline(const RunConfig& cfg, int vocab, Rng& rng)
        : frame_extractor(cfg.d_raw, cfg.d_model, rng),
          video_encoder(cfg.d_model, cfg.v_depth, cfg.heads, cfg.d_model * cfg.ffn_mult, cfg.max_frames, rng),
          text_decoder(vocab, cfg.d_model, 2, cfg.heads, cfg.d_model * cfg.ffn_mult, cfg.max_sentence, rng) {}

    ParamList<S> wv_params() const {
        ParamList<S> p;
        frame_extractor.collect(p);
        video_encoder.collect(p);
        return p;
    }

    ParamList<S> all_params() const {
        ParamList<S> p = wv_params();
        text_decoder.collect("TD", p);
        return p;
    }

    void set_trainable_all(bool t) {
        auto p = all_params();
        set_trainable(p, t);
    }
};

// Teacher-forced token accuracy of TD over V(W(frames)).
template <typename S>
inline double visual_token_accuracy(const VisualPipeline<S>& vp, const std::vector<const SignSample*>& samples,
                                    const RunConfig& cfg) {
    NoGradGuard ng;
    std::int64_t correct = 0, total = 0;
    for (std::size_t start = 0; start < samples.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<const SignSample*> chunk(
            samples.begin() + static_cast<std::ptrdiff_t>(start),
            samples.begin() + static_cast<std::ptrdiff_t>(std::min(samples.size(),
                                                                   start + static_cast<std::size_t>(cfg.batch_size))));
        const auto fb = build_frame_batch<S>(chunk, cfg.d_raw);
        const auto tb = build_token_batch(chunk, cfg.max_sentence);
        const TensorT<S> fv = vp.video_encoder(vp.frame_extractor(fb.frames), fb.mask);
        const TensorT<S> lg = vp.text_decoder.logits(tb.input, tb.batch, tb.len, fv, fb.mask, tb.mask);
        const int V = lg.dim(2);
        for (int r = 0; r < tb.batch * tb.len; ++r) {
            const int t = tb.target[static_cast<std::size_t>(r)];
            if (t == Vocabulary::pad) continue;
            const S* row = lg.data().data() + static_cast<std::size_t>(r) * V;
            int best = 0;
            for (int v = 1; v < V; ++v)
                if (row[v] > row[best]) best = v;
            correct += (best == t);
            ++total;
        }
    }
    return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

struct PretrainResult {
    bool aborted = false;
    int steps = 0;
    double final_loss = 0.0;
    std::vector<double> dev_accuracy;  // one entry per epoch
};

namespace detail_train {

template <typename S>
inline std::vector<std::vector<S>> snapshot_params(const ParamList<S>& params) {
    std::vector<std::vector<S>> snap;
    for (const auto& p : params) snap.push_back(p.tensor.data());
    return snap;
}

template <typename S>
inline void restore_params(ParamList<S>& params, const std::vector<std::vector<S>>& snap) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor.data() = snap[i];
}

}  // namespace detail_train

// Minimizes token cross-entropy of TD(V(W(X))) against Y. On a non-finite
// loss the parameters are rolled back to the last good snapshot and the
// run is marked aborted.
template <typename S>
inline PretrainResult pretrain_visual(VisualPipeline<S>& vp, const DatasetSplit& data, const RunConfig& cfg,
                                         Rng& rng, NdjsonLogger* logger = nullptr) {
    PretrainResult res;
    ParamList<S> params = vp.all_params();
    set_trainable(params, true);
    AdamW<S> opt(params, cfg.visual_lr, cfg.weight_decay, cfg.grad_clip);

    std::vector<const SignSample*> dev_ptrs;
    for (const auto& s : data.dev) dev_ptrs.push_back(&s);

    TapeT<S> tape;
    TapeScope<S> scope(tape);

    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    auto snapshot = detail_train::snapshot_params(params);
    for (int step = 0; step < cfg.visual_steps; ++step) {
        if (cursor + static_cast<std::size_t>(cfg.batch_size) > order.size()) {
            if (!order.empty() && !dev_ptrs.empty()) res.dev_accuracy.push_back(visual_token_accuracy(vp, dev_ptrs, cfg));
            order.resize(data.train.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        std::vector<const SignSample*> chunk;
        for (int b = 0; b < cfg.batch_size && cursor < order.size(); ++b) chunk.push_back(&data.train[order[cursor++]]);

        tape.clear();
        opt.zero_grad();
        const auto fb = build_frame_batch<S>(chunk, cfg.d_raw);
        const auto tb = build_token_batch(chunk, cfg.max_sentence);
        TensorT<S> fv = vp.video_encoder(vp.frame_extractor(fb.frames), fb.mask);
        TensorT<S> lg = vp.text_decoder.logits(tb.input, tb.batch, tb.len, fv, fb.mask, tb.mask);
        TensorT<S> loss = cross_entropy(lg, tb.target, Vocabulary::pad);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv)) {
            detail_train::restore_params(params, snapshot);
            res.aborted = true;
            break;
        }
        backward(loss);
        if (cfg.lr_schedule == "cosine") opt.set_lr(cosine_decay_lr(cfg.visual_lr, step, cfg.visual_steps));
        const double gnorm = opt.step();
        res.final_loss = lv;
        res.steps = step + 1;
        if (step % 200 == 0) snapshot = detail_train::snapshot_params(params);
        if (logger && step % 50 == 0)
            logger->log({{"event", "visual_step"},
                         {"step", step},
                         {"loss", lv},
                         {"grad_norm", gnorm},
                         {"lr", opt.lr()}});
    }
    if (!dev_ptrs.empty()) res.dev_accuracy.push_back(visual_token_accuracy(vp, dev_ptrs, cfg));
    return res;
}

}  // namespace diffslt
