#pragma once

// Guidance Fusion Module: two guidance streams concatenated along the
// length axis and projected into the conditioning space by a three-layer
// position-wise feed-forward stack (layernorm -> linear -> GELU) with a
// residual skip around each layer. Ablation arms toggle layer count, the
// skips, early-vs-late fusion and which feature streams participate. Also
// owns the learned null token used for the unconditional branch.

#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/config.hpp"
#include "diffslt/nn.hpp"

namespace diffslt {

template <typename S>
struct FusedGuidance {
    TensorT<S> values;  // [B, L_a + L_b, D_c]
    KeyMask mask;       // [B, L_a + L_b]
};

template <typename S>
struct GuidanceFusion {
    struct FfnLayer {
        LayerNormP<S> ln;
        Linear<S> lin;

        FfnLayer() = default;
        FfnLayer(int dim, Rng& rng) : ln(dim), lin(dim, dim, rng) {}
    };

    std::vector<FfnLayer> layers;          // early-fusion stack (or stream-a stack when late)
    std::vector<FfnLayer> layers_b;        // second stream stack for late fusion
    Linear<S> out_proj;                    // D -> D_c
    TensorT<S> null_token;                 // [1, D_c]
    std::string features = "both";         // both | frame_only | video_only
    bool skip = true;
    bool early_fusion = true;
    std::string uncond_input = "null_token";

    GuidanceFusion() = default;
    GuidanceFusion(const RunConfig& cfg, Rng& rng)
        : out_proj(cfg.d_model, cfg.d_model, rng),
          null_token(TensorT<S>::randn({1, cfg.d_model}, rng, 0.02).set_requires_grad(true)),
          features(cfg.gfm_features), skip(cfg.gfm_skip), early_fusion(cfg.gfm_early_fusion),
          uncond_input(cfg.uncond_input) {
        for (int i = 0; i < cfg.gfm_layers; ++i) layers.emplace_back(cfg.d_model, rng);
        if (!early_fusion && features == "both")
            for (int i = 0; i < cfg.gfm_layers; ++i) layers_b.emplace_back(cfg.d_model, rng);
    }

    TensorT<S> run_stack(const std::vector<FfnLayer>& stack, TensorT<S> x) const {
        for (const auto& layer : stack) {
            TensorT<S> h = gelu(layer.lin(layer.ln(x)));
            x = skip ? add(x, h) : h;
        }
        return x;
    }

    // a = frame-level stream (F_w or F_p), b = video stream (F_v).
    FusedGuidance<S> fuse(const TensorT<S>& a, KeyMask mask_a, const TensorT<S>& b, KeyMask mask_b) const {
        if (features == "both" && a.dim(2) != b.dim(2))
            shape_error("guidance_fusion", "stream widths differ: " + shape_str(a.shape()) + " vs " +
                                               shape_str(b.shape()));
        FusedGuidance<S> out;
        if (features == "frame_only") {
            out.values = out_proj(run_stack(layers, a));
            out.mask = mask_a;
        } else if (features == "video_only") {
            out.values = out_proj(run_stack(layers, b));
            out.mask = mask_b;
        } else if (early_fusion) {
            TensorT<S> joint = concat(a, b, 1);
            out.values = out_proj(run_stack(layers, joint));
            out.mask = concat_masks(mask_a, a.dim(1), mask_b, b.dim(1), a.dim(0));
        } else {
            TensorT<S> ha = run_stack(layers, a);
            TensorT<S> hb = run_stack(layers_b, b);
            out.values = out_proj(concat(ha, hb, 1));
            out.mask = concat_masks(mask_a, a.dim(1), mask_b, b.dim(1), a.dim(0));
        }
        return out;
    }

    // Length-1 unconditional guidance, broadcast over the batch.
    FusedGuidance<S> null_guidance(int batch) const {
        FusedGuidance<S> out;
        if (uncond_input == "zero") {
            out.values = TensorT<S>::zeros({batch, 1, null_token.dim(1)});
        } else {
            out.values = add_bcast_rows(TensorT<S>::zeros({batch, 1, null_token.dim(1)}), null_token);
        }
        out.mask = nullptr;  // the single token is always valid
        return out;
    }

    static KeyMask concat_masks(KeyMask a, int len_a, KeyMask b, int len_b, int batch) {
        if (!a && !b) return nullptr;
        auto m = std::make_shared<std::vector<std::uint8_t>>(static_cast<std::size_t>(batch * (len_a + len_b)), 1);
        for (int i = 0; i < batch; ++i) {
            for (int j = 0; j < len_a; ++j)
                (*m)[static_cast<std::size_t>(i * (len_a + len_b) + j)] =
                    a ? (*a)[static_cast<std::size_t>(i * len_a + j)] : 1;
            for (int j = 0; j < len_b; ++j)
                (*m)[static_cast<std::size_t>(i * (len_a + len_b) + len_a + j)] =
                    b ? (*b)[static_cast<std::size_t>(i * len_b + j)] : 1;
        }
        return m;
    }

    ParamList<S> params() const {
        ParamList<S> p;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            layers[i].ln.collect("GF.layer" + std::to_string(i) + ".ln", p);
            layers[i].lin.collect("GF.layer" + std::to_string(i) + ".lin", p);
        }
        for (std::size_t i = 0; i < layers_b.size(); ++i) {
            layers_b[i].ln.collect("GF.late_b" + std::to_string(i) + ".ln", p);
            layers_b[i].lin.collect("GF.late_b" + std::to_string(i) + ".lin", p);
        }
        out_proj.collect("GF.out", p);
        p.push_back({"GF.null", null_token});
        return p;
    }
};

}  // namespace diffslt
