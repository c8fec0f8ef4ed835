#pragma once

// Transformer building blocks on top of the tensor engine: linear layers,
// layer norm, token embeddings, sinusoidal positions and pre-norm
// encoder/decoder blocks with optional key-padding masks.

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "diffslt/optim.hpp"
#include "diffslt/rng.hpp"
#include "diffslt/tensor.hpp"

namespace diffslt {

using KeyMask = std::shared_ptr<const std::vector<std::uint8_t>>;

template <typename S>
inline void set_trainable(ParamList<S>& params, bool trainable) {
    for (auto& p : params) p.tensor.set_requires_grad(trainable);
}

template <typename S>
struct Linear {
    TensorT<S> weight;  // [in, out]
    TensorT<S> bias;    // [out]

    Linear() = default;
    // init_std = 0 selects the fan-based default.
    Linear(int in, int out, Rng& rng, double init_std = 0.0) {
        const double std = init_std > 0.0 ? init_std : std::sqrt(2.0 / static_cast<double>(in + out));
        weight = TensorT<S>::randn({in, out}, rng, std).set_requires_grad(true);
        bias = TensorT<S>::zeros({out}).set_requires_grad(true);
    }

    TensorT<S> operator()(const TensorT<S>& x) const { return add_bias(matmul(x, weight), bias); }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        out.push_back({prefix + ".weight", weight});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename S>
struct LayerNormP {
    TensorT<S> gain;
    TensorT<S> bias;
    double eps = 1e-5;

    LayerNormP() = default;
    explicit LayerNormP(int dim) {
        gain = TensorT<S>::full({dim}, S(1)).set_requires_grad(true);
        bias = TensorT<S>::zeros({dim}).set_requires_grad(true);
    }

    TensorT<S> operator()(const TensorT<S>& x) const { return layer_norm(x, gain, bias, eps); }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        out.push_back({prefix + ".gain", gain});
        out.push_back({prefix + ".bias", bias});
    }
};

template <typename S>
struct TokenEmbedding {
    TensorT<S> table;  // [V, D]

    TokenEmbedding() = default;
    // Unit-scale init so token identity is not drowned out by the O(1)
    // sinusoidal position signal it gets added to.
    TokenEmbedding(int vocab, int dim, Rng& rng) {
        table = TensorT<S>::randn({vocab, dim}, rng, 1.0).set_requires_grad(true);
    }

    TensorT<S> operator()(const std::vector<int>& ids, Shape id_shape) const {
        return embedding(table, ids, std::move(id_shape));
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        out.push_back({prefix + ".table", table});
    }
};

// Fixed sin/cos position table, returned as an untracked [L, D] tensor.
template <typename S>
inline TensorT<S> sinusoidal_positions(int length, int dim) {
    TensorT<S> pe = TensorT<S>::zeros({length, dim});
    auto& v = pe.data();
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < dim; i += 2) {
            const double angle = pos / std::pow(10000.0, static_cast<double>(i) / dim);
            v[static_cast<std::size_t>(pos * dim + i)] = static_cast<S>(std::sin(angle));
            if (i + 1 < dim) v[static_cast<std::size_t>(pos * dim + i + 1)] = static_cast<S>(std::cos(angle));
        }
    }
    return pe;
}

template <typename S>
struct MultiHeadAttention {
    Linear<S> wq, wk, wv, wo;
    int heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(int dim, int n_heads, Rng& rng)
        : wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng), heads(n_heads) {}

    TensorT<S> operator()(const TensorT<S>& q_src, const TensorT<S>& kv_src, KeyMask key_valid = nullptr,
                          bool causal = false) const {
        TensorT<S> ctx = attention(wq(q_src), wk(kv_src), wv(kv_src), heads, std::move(key_valid), causal);
        return wo(ctx);
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        wq.collect(prefix + ".q", out);
        wk.collect(prefix + ".k", out);
        wv.collect(prefix + ".v", out);
        wo.collect(prefix + ".o", out);
    }
};

template <typename S>
struct FeedForward {
    Linear<S> in, out;

    FeedForward() = default;
    FeedForward(int dim, int hidden, Rng& rng) : in(dim, hidden, rng), out(hidden, dim, rng) {}

    TensorT<S> operator()(const TensorT<S>& x) const { return out(gelu(in(x))); }

    void collect(const std::string& prefix, ParamList<S>& out_list) const {
        in.collect(prefix + ".in", out_list);
        out.collect(prefix + ".out", out_list);
    }
};

// Pre-norm encoder block: x += attn(ln(x)); x += ffn(ln(x)).
template <typename S>
struct EncoderBlock {
    LayerNormP<S> ln1, ln2;
    MultiHeadAttention<S> attn;
    FeedForward<S> ffn;

    EncoderBlock() = default;
    EncoderBlock(int dim, int heads, int ffn_hidden, Rng& rng)
        : ln1(dim), ln2(dim), attn(dim, heads, rng), ffn(dim, ffn_hidden, rng) {}

    TensorT<S> operator()(const TensorT<S>& x, KeyMask self_valid = nullptr) const {
        TensorT<S> h = add(x, attn(ln1(x), ln1(x), self_valid, false));
        return add(h, ffn(ln2(h)));
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
        attn.collect(prefix + ".attn", out);
        ffn.collect(prefix + ".ffn", out);
    }
};

// Pre-norm block with self-attention, cross-attention over a memory
// sequence, and a feed-forward sublayer. Used for text decoders (causal
// self-attention) and for the denoiser (bidirectional self-attention).
template <typename S>
struct CrossBlock {
    LayerNormP<S> ln1, ln2, ln3;
    MultiHeadAttention<S> self_attn, cross_attn;
    FeedForward<S> ffn;
    bool causal_self = false;

    CrossBlock() = default;
    CrossBlock(int dim, int heads, int ffn_hidden, bool causal, Rng& rng)
        : ln1(dim), ln2(dim), ln3(dim), self_attn(dim, heads, rng), cross_attn(dim, heads, rng),
          ffn(dim, ffn_hidden, rng), causal_self(causal) {}

    TensorT<S> operator()(const TensorT<S>& x, const TensorT<S>& memory, KeyMask self_valid = nullptr,
                          KeyMask mem_valid = nullptr) const {
        TensorT<S> h = add(x, self_attn(ln1(x), ln1(x), self_valid, causal_self));
        h = add(h, cross_attn(ln2(h), memory, mem_valid, false));
        return add(h, ffn(ln3(h)));
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        ln1.collect(prefix + ".ln1", out);
        ln2.collect(prefix + ".ln2", out);
        ln3.collect(prefix + ".ln3", out);
        self_attn.collect(prefix + ".self", out);
        cross_attn.collect(prefix + ".cross", out);
        ffn.collect(prefix + ".ffn", out);
    }
};

// First L rows of a constant table as an untracked value copy.
template <typename S>
inline TensorT<S> first_rows(const TensorT<S>& table, int length) {
    if (table.rank() != 2 || length > table.dim(0))
        shape_error("first_rows", "cannot take " + std::to_string(length) + " rows of " + shape_str(table.shape()));
    const int d = table.dim(1);
    std::vector<S> v(table.data().begin(), table.data().begin() + static_cast<std::ptrdiff_t>(length) * d);
    return TensorT<S>::from({length, d}, std::move(v));
}

// Expands a [B, L] validity mask to an elementwise [B, L, D] multiplier.
template <typename S>
inline std::shared_ptr<const std::vector<S>> expand_mask(const KeyMask& mask, int b, int l, int d) {
    auto out = std::make_shared<std::vector<S>>(static_cast<std::size_t>(b) * l * d, S(0));
    for (int i = 0; i < b; ++i)
        for (int j = 0; j < l; ++j)
            if ((*mask)[static_cast<std::size_t>(i * l + j)])
                for (int k = 0; k < d; ++k) (*out)[static_cast<std::size_t>((i * l + j) * d + k)] = S(1);
    return out;
}

// Autoregressive transformer decoder: token embedding + sinusoidal
// positions, causal blocks cross-attending over a memory sequence, and a
// vocabulary projection. Used for the throwaway pretraining decoder and
// the sentence decoder.
template <typename S>
struct TextDecoder {
    TokenEmbedding<S> embed;
    TensorT<S> pos;  // constant sinusoidal table
    std::vector<CrossBlock<S>> blocks;
    LayerNormP<S> final_ln;
    Linear<S> out_proj;
    int max_len = 0;

    TextDecoder() = default;
    TextDecoder(int vocab, int dim, int depth, int heads, int ffn_hidden, int max_positions, Rng& rng)
        : embed(vocab, dim, rng), pos(sinusoidal_positions<S>(max_positions, dim)), final_ln(dim),
          out_proj(dim, vocab, rng, 0.02), max_len(max_positions) {
        for (int i = 0; i < depth; ++i) blocks.emplace_back(dim, heads, ffn_hidden, /*causal=*/true, rng);
    }

    // ids [B, L] flattened row-major; returns logits [B, L, V].
    TensorT<S> logits(const std::vector<int>& ids, int batch, int len, const TensorT<S>& memory,
                      KeyMask mem_valid = nullptr, KeyMask self_valid = nullptr) const {
        if (len > max_len)
            throw std::invalid_argument("text decoder: length " + std::to_string(len) + " exceeds max " +
                                        std::to_string(max_len));
        TensorT<S> x = embed(ids, {batch, len});
        x = add_bcast_rows(x, first_rows(pos, len));
        for (const auto& blk : blocks) x = blk(x, memory, self_valid, mem_valid);
        return out_proj(final_ln(x));
    }

    // Greedy decode for one sample; memory [1, Lm, D]. Always terminates at
    // eos or max_len.
    std::vector<int> greedy_decode(const TensorT<S>& memory, KeyMask mem_valid, int bos, int eos,
                                   int hard_max = 0) const {
        NoGradGuard ng;
        const int limit = hard_max > 0 ? std::min(hard_max, max_len) : max_len;
        std::vector<int> ids{bos};
        std::vector<int> out;
        for (int step = 0; step < limit; ++step) {
            TensorT<S> lg = logits(ids, 1, static_cast<int>(ids.size()), memory, mem_valid);
            const int V = lg.dim(2);
            const std::size_t base = (ids.size() - 1) * static_cast<std::size_t>(V);
            int best = 0;
            S best_v = lg.data()[base];
            for (int v = 1; v < V; ++v)
                if (lg.data()[base + static_cast<std::size_t>(v)] > best_v) {
                    best_v = lg.data()[base + static_cast<std::size_t>(v)];
                    best = v;
                }
            if (best == eos) break;
            out.push_back(best);
            ids.push_back(best);
        }
        return out;
    }

    void collect(const std::string& prefix, ParamList<S>& out) const {
        embed.collect(prefix + ".embed", out);
        for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blk" + std::to_string(i), out);
        final_ln.collect(prefix + ".ln", out);
        out_proj.collect(prefix + ".head", out);
    }
};

// Builds a [B, L] validity mask (1 = real position, 0 = pad).
inline KeyMask make_key_mask(const std::vector<std::vector<std::uint8_t>>& per_sample) {
    if (per_sample.empty()) return nullptr;
    auto m = std::make_shared<std::vector<std::uint8_t>>();
    for (const auto& row : per_sample) m->insert(m->end(), row.begin(), row.end());
    return m;
}

inline KeyMask mask_from_lengths(const std::vector<int>& lengths, int padded_len) {
    auto m = std::make_shared<std::vector<std::uint8_t>>(lengths.size() * static_cast<std::size_t>(padded_len), 0);
    for (std::size_t b = 0; b < lengths.size(); ++b)
        for (int i = 0; i < lengths[b]; ++i) (*m)[b * static_cast<std::size_t>(padded_len) + static_cast<std::size_t>(i)] = 1;
    return m;
}

}  // namespace diffslt
