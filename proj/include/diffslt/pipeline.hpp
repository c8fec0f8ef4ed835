#pragma once

// End-to-end orchestration: the two-stage training procedure, checkpoint
// persistence with stage-ordering enforcement, candidate translation, the
// metrics report, trajectory export and ablation sweeps. Shared by the CLI
// and the acceptance suite.

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffslt/autoencoder.hpp"
#include "diffslt/checkpoint.hpp"
#include "diffslt/config.hpp"
#include "diffslt/data.hpp"
#include "diffslt/diffusion.hpp"
#include "diffslt/guidance.hpp"
#include "diffslt/log.hpp"
#include "diffslt/metrics.hpp"
#include "diffslt/pca.hpp"
#include "diffslt/sampler.hpp"
#include "diffslt/visual.hpp"

namespace diffslt {

template <typename S>
struct PipelineState {
    RunConfig cfg;
    DatasetSplit data;
    VisualPipeline<S> visual;
    SeqAutoencoder<S> ae;
    GuidanceFusion<S> gf;
    Denoiser<S> dn;
    NoiseSchedule sched;
    bool visual_ready = false;
    bool ae_ready = false;
    bool diffusion_ready = false;

    explicit PipelineState(const RunConfig& config) : cfg(config) {
        cfg.validate();
        data = generate_corpus(cfg.data_seed, cfg.n_train, cfg.n_dev, cfg.n_test, GrammarConfig::standard());
        Rng init_rng = Rng::derive(cfg.seed, 0x11117);
        visual = VisualPipeline<S>(cfg, data.vocab.sentence_size(), init_rng);
        ae = SeqAutoencoder<S>(cfg, data.vocab.sentence_size(), init_rng);
        gf = GuidanceFusion<S>(cfg, init_rng);
        dn = Denoiser<S>(cfg, init_rng);
        sched = build_schedule(cfg.schedule, cfg.timesteps, cfg.schedule_scale);
    }
};

// ---------------------------------------------------------------------------
// Checkpoint plumbing
// ---------------------------------------------------------------------------

inline std::string run_dir_or_default(const std::string& requested) {
    if (!requested.empty()) return requested;
    const char* env = std::getenv("DIFFSLT_RUN_DIR");
    return env ? std::string(env) : std::string("runs/default");
}

template <typename S>
inline void save_visual_checkpoint(const PipelineState<S>& st, const std::string& path, const Rng& rng) {
    Checkpoint ck;
    ck.config_text = st.cfg.serialize();
    ck.rng_state = rng.state();
    ck.add_params(st.visual.wv_params());
    ck.save(path);
}

template <typename S>
inline void save_ae_checkpoint(const PipelineState<S>& st, const std::string& path, const Rng& rng) {
    Checkpoint ck;
    ck.config_text = st.cfg.serialize();
    ck.rng_state = rng.state();
    ck.add_params(st.ae.params());
    TensorT<S> mean = TensorT<S>::zeros({static_cast<int>(st.ae.norm.mean.size())});
    TensorT<S> stdv = TensorT<S>::zeros({static_cast<int>(st.ae.norm.std.size())});
    for (std::size_t i = 0; i < st.ae.norm.mean.size(); ++i) {
        mean.data()[i] = static_cast<S>(st.ae.norm.mean[i]);
        stdv.data()[i] = static_cast<S>(st.ae.norm.std[i]);
    }
    ck.add("norm.mean", mean);
    ck.add("norm.std", stdv);
    ck.save(path);
}

template <typename S>
inline void save_diffusion_checkpoint(const PipelineState<S>& st, const std::string& path, const Rng& rng) {
    Checkpoint ck;
    ck.config_text = st.cfg.serialize();
    ck.rng_state = rng.state();
    ck.add_params(st.dn.params());
    auto gfp = st.gf.params();
    ck.add_params(gfp);
    ck.save(path);
}

// In-memory stage-1 snapshot, for experiment arms that share pretrained
// components while varying stage-2 seeds and settings.
template <typename S>
struct Stage1Snapshot {
    Checkpoint visual;
    Checkpoint ae;
};

template <typename S>
inline Stage1Snapshot<S> snapshot_stage1(const PipelineState<S>& st) {
    Stage1Snapshot<S> snap;
    snap.visual.config_text = st.cfg.serialize();
    snap.visual.add_params(st.visual.wv_params());
    snap.ae.config_text = st.cfg.serialize();
    snap.ae.add_params(st.ae.params());
    TensorT<S> mean = TensorT<S>::zeros({static_cast<int>(st.ae.norm.mean.size())});
    TensorT<S> stdv = TensorT<S>::zeros({static_cast<int>(st.ae.norm.std.size())});
    for (std::size_t i = 0; i < st.ae.norm.mean.size(); ++i) {
        mean.data()[i] = static_cast<S>(st.ae.norm.mean[i]);
        stdv.data()[i] = static_cast<S>(st.ae.norm.std[i]);
    }
    snap.ae.add("norm.mean", mean);
    snap.ae.add("norm.std", stdv);
    return snap;
}

template <typename S>
inline void adopt_stage1(PipelineState<S>& st, const Stage1Snapshot<S>& snap) {
    auto vparams = st.visual.wv_params();
    snap.visual.load_into(vparams);
    Checkpoint weights_only;
    for (const auto& [name, arr] : snap.ae.arrays)
        if (name != "norm.mean" && name != "norm.std") weights_only.arrays.emplace_back(name, arr);
    auto aparams = st.ae.params();
    weights_only.load_into(aparams);
    const CheckpointArray* mean = snap.ae.find("norm.mean");
    const CheckpointArray* stdv = snap.ae.find("norm.std");
    st.ae.norm.mean.assign(mean->values.begin(), mean->values.end());
    st.ae.norm.std.assign(stdv->values.begin(), stdv->values.end());
    st.visual_ready = true;
    st.ae_ready = true;
}

inline void require_stage1_hash(const Checkpoint& ck, const RunConfig& cfg, const std::string& which) {
    const RunConfig stored = RunConfig::parse_text(ck.config_text);
    if (stored.stage1_hash() != cfg.stage1_hash())
        throw std::runtime_error(which + " checkpoint was trained with a different stage-1 configuration; "
                                         "regenerate it or align the config");
}

template <typename S>
inline void load_visual_checkpoint(PipelineState<S>& st, const std::string& path) {
    auto ck = Checkpoint::load(path);
    require_stage1_hash(ck, st.cfg, "visual");
    auto params = st.visual.wv_params();
    ck.load_into(params);
    st.visual_ready = true;
}

template <typename S>
inline void load_ae_checkpoint(PipelineState<S>& st, const std::string& path) {
    auto ck = Checkpoint::load(path);
    require_stage1_hash(ck, st.cfg, "autoencoder");
    auto params = st.ae.params();
    const CheckpointArray* mean = ck.find("norm.mean");
    const CheckpointArray* stdv = ck.find("norm.std");
    if (!mean || !stdv) throw std::runtime_error("autoencoder checkpoint lacks normalization statistics");
    Checkpoint weights_only;
    weights_only.config_text = ck.config_text;
    for (auto& [name, arr] : ck.arrays)
        if (name != "norm.mean" && name != "norm.std") weights_only.arrays.emplace_back(name, arr);
    weights_only.load_into(params);
    st.ae.norm.mean.assign(mean->values.begin(), mean->values.end());
    st.ae.norm.std.assign(stdv->values.begin(), stdv->values.end());
    st.ae_ready = true;
}

template <typename S>
inline void load_diffusion_checkpoint(PipelineState<S>& st, const std::string& path) {
    auto ck = Checkpoint::load(path);
    require_stage1_hash(ck, st.cfg, "diffusion");
    ParamList<S> params = st.dn.params();
    for (auto& p : st.gf.params()) params.push_back(p);
    ck.load_into(params);
    st.diffusion_ready = true;
}

// ---------------------------------------------------------------------------
// Stage runners
// ---------------------------------------------------------------------------

template <typename S>
inline PretrainResult run_pretrain_visual(PipelineState<S>& st, NdjsonLogger* logger = nullptr) {
    Rng rng = Rng::derive(st.cfg.seed, 0x57a6e1);
    const auto res = pretrain_visual(st.visual, st.data, st.cfg, rng, logger);
    if (res.aborted) throw std::runtime_error("visual pretraining diverged; parameters rolled back to last snapshot");
    st.visual_ready = true;
    return res;
}

template <typename S>
inline PretrainResult run_pretrain_ae(PipelineState<S>& st, NdjsonLogger* logger = nullptr) {
    Rng rng = Rng::derive(st.cfg.seed, 0x57a6e2);
    const auto res = pretrain_autoencoder(st.ae, st.data, st.cfg, rng, logger);
    if (res.aborted) throw std::runtime_error("autoencoder pretraining diverged; parameters rolled back");
    st.ae_ready = true;
    return res;
}

template <typename S>
inline DiffusionTrainResult run_train_diffusion(PipelineState<S>& st, NdjsonLogger* logger = nullptr) {
    if (!st.visual_ready || !st.ae_ready)
        throw std::runtime_error("train-diffusion requires both stage-1 checkpoints (visual, autoencoder)");
    Rng rng = Rng::derive(st.cfg.seed, 0x57a6e3);
    const auto res = train_diffusion(st.dn, st.gf, st.visual, st.ae, st.data, st.sched, st.cfg, rng, logger);
    if (res.aborted) throw std::runtime_error("diffusion training hit a non-finite loss; parameters rolled back");
    st.diffusion_ready = true;
    return res;
}

// ---------------------------------------------------------------------------
// Translation
// ---------------------------------------------------------------------------

template <typename S>
struct SampleGuidance {
    FusedGuidance<S> cond;
    FusedGuidance<S> uncond;
};

// Builds the fused conditioning (and the null branch) for one sample.
template <typename S>
inline SampleGuidance<S> build_sample_guidance(const PipelineState<S>& st, const SignSample& sample,
                                               bool force_null) {
    NoGradGuard ng;
    SampleGuidance<S> out;
    out.uncond = st.gf.null_guidance(1);
    if (force_null) {
        out.cond = st.gf.null_guidance(1);
        return out;
    }
    std::vector<const SignSample*> one{&sample};
    const auto fb = build_frame_batch<S>(one, st.cfg.d_raw);
    TensorT<S> fw = st.visual.frame_extractor(fb.frames);
    TensorT<S> fv = st.visual.video_encoder(fw, fb.mask);
    if (st.cfg.mode == "diffslt_p") {
        // Same deterministic pseudo-gloss stream as training.
        std::size_t index = 0;
        bool found = false;
        auto scan = [&](const std::vector<SignSample>& split, std::size_t base) {
            for (std::size_t i = 0; i < split.size(); ++i)
                if (&split[i] == &sample) {
                    index = base + i;
                    found = true;
                }
        };
        scan(st.data.train, 0);
        scan(st.data.dev, st.data.train.size());
        scan(st.data.test, st.data.train.size() + st.data.dev.size());
        Rng grng = Rng::derive(st.cfg.data_seed, 0x9105500 + index);
        const auto pg = found ? make_pseudo_gloss(sample.gloss, st.cfg.pseudo_wer, grng, st.data.vocab)
                              : sample.gloss;
        TensorT<S> fp = st.ae.embed_gloss(pg, 1, static_cast<int>(pg.size()), st.data.vocab);
        out.cond = st.gf.fuse(fp, nullptr, fv, fb.mask);
    } else {
        out.cond = st.gf.fuse(fw, fb.mask, fv, fb.mask);
    }
    return out;
}

// n candidates for one source; candidate i is driven entirely by the rng
// stream derived from (seed_base, i), so the result does not depend on
// generation order.
template <typename S>
inline CandidateSet generate_candidates(const PipelineState<S>& st, const SignSample& sample, int source_id,
                                        int n, std::uint64_t seed_base, bool force_null = false,
                                        std::vector<SampleTrace<S>>* traces = nullptr) {
    if (n < 1) throw std::invalid_argument("generate_candidates: n must be >= 1");
    if (!st.diffusion_ready) throw std::runtime_error("generate_candidates: diffusion model not trained/loaded");
    NoGradGuard ng;
    const auto guidance = build_sample_guidance(st, sample, force_null);

    DenoiseFn<S> denoise = [&](const TensorT<S>& z, const TensorT<S>& sc, int t) {
        TensorT<S> cond = st.dn.predict(z, sc, guidance.cond, t);
        TensorT<S> uncond = st.dn.predict(z, sc, guidance.uncond, t);
        return cfg_combine(cond, uncond, st.cfg.cfg_scale);
    };

    CandidateSet set;
    set.source_id = source_id;
    set.seed_base = seed_base;
    const Shape latent_shape{1, st.cfg.latent_len, st.cfg.latent_dim};
    TensorT<S> init_sc = st.dn.initial_self_cond(1);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed_base, static_cast<std::uint64_t>(i));
        SampleTrace<S> trace;
        TensorT<S> z;
        if (st.cfg.sampler == "ddpm")
            z = ddpm_sample(denoise, st.sched, latent_shape, st.cfg.sample_steps, init_sc, rng,
                            traces ? &trace : nullptr);
        else
            z = ddim_sample(denoise, st.sched, latent_shape, st.cfg.sample_steps, st.cfg.eta, init_sc, rng,
                            traces ? &trace : nullptr);
        if (traces) traces->push_back(std::move(trace));
        set.latents.emplace_back(z.data().begin(), z.data().end());
        TensorT<S> raw = st.cfg.latent_norm ? st.ae.denormalize(z) : z;
        set.candidates.push_back(st.ae.decode_latent(raw));
    }
    set.mbr_pick = mbr_select(set);
    return set;
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

struct EvalOptions {
    bool force_null = false;
    int limit = 0;  // 0 = whole split
};

template <typename S>
struct EvalResult {
    std::vector<CandidateSet> sets;
    std::vector<TokenSeq> references;
    nlohmann::json report;
};

template <typename S>
inline std::vector<std::vector<double>> sentence_embedding_rows(const PipelineState<S>& st, const TokenSeq& tokens) {
    NoGradGuard ng;
    std::vector<int> ids{Vocabulary::bos};
    ids.insert(ids.end(), tokens.begin(), tokens.end());
    // A candidate that hit the decode length cap has no room for the bos
    // prefix; truncate to the encoder's trained positions.
    if (static_cast<int>(ids.size()) > st.cfg.max_sentence) ids.resize(static_cast<std::size_t>(st.cfg.max_sentence));
    const int len = static_cast<int>(ids.size());
    TensorT<S> emb = st.ae.encoder(ids, 1, len, mask_from_lengths({len}, len));
    std::vector<std::vector<double>> rows;
    for (int i = 1; i < len; ++i) {
        std::vector<double> r(static_cast<std::size_t>(st.cfg.d_model));
        for (int j = 0; j < st.cfg.d_model; ++j) r[static_cast<std::size_t>(j)] = emb.at({0, i, j});
        rows.push_back(std::move(r));
    }
    return rows;
}

template <typename S>
inline EvalResult<S> evaluate_split(const PipelineState<S>& st, const std::vector<SignSample>& split,
                                    const EvalOptions& opts = {}) {
    EvalResult<S> res;
    const int n_sources =
        (opts.limit > 0) ? std::min<int>(opts.limit, static_cast<int>(split.size())) : static_cast<int>(split.size());
    if (n_sources == 0) throw std::invalid_argument("evaluate_split: empty split");

    std::vector<TokenSeq> mbr_picks, oracle_picks, pool;
    for (int i = 0; i < n_sources; ++i) {
        const auto& sample = split[static_cast<std::size_t>(i)];
        const std::uint64_t seed_base = st.cfg.seed + 1000003ULL * static_cast<std::uint64_t>(i);
        CandidateSet set = generate_candidates(st, sample, i, st.cfg.n_candidates, seed_base, opts.force_null);
        set.oracle_pick = oracle_select(set, sample.sentence);
        for (const auto& c : set.candidates) pool.push_back(c);
        mbr_picks.push_back(set.candidates[static_cast<std::size_t>(set.mbr_pick)]);
        oracle_picks.push_back(set.candidates[static_cast<std::size_t>(set.oracle_pick)]);
        res.references.push_back(sample.sentence);
        res.sets.push_back(std::move(set));
    }

    auto accuracy_block = [&](const std::vector<TokenSeq>& picks) {
        nlohmann::json block;
        for (int n = 1; n <= 4; ++n) {
            nlohmann::json m;
            m["corpus"] = corpus_bleu(picks, res.references, n);
            double mean = 0.0;
            nlohmann::json per = nlohmann::json::array();
            for (std::size_t i = 0; i < picks.size(); ++i) {
                const double v = bleu_n(picks[i], res.references[i], n);
                mean += v;
                per.push_back(v);
            }
            m["sentence_mean"] = mean / static_cast<double>(picks.size());
            m["per_sample"] = std::move(per);
            block["bleu" + std::to_string(n)] = std::move(m);
        }
        {
            nlohmann::json m;
            double mean = 0.0;
            nlohmann::json per = nlohmann::json::array();
            for (std::size_t i = 0; i < picks.size(); ++i) {
                const double v = rouge_l(picks[i], res.references[i]);
                mean += v;
                per.push_back(v);
            }
            m["corpus"] = mean / static_cast<double>(picks.size());
            m["per_sample"] = std::move(per);
            block["rougeL"] = std::move(m);
        }
        {
            nlohmann::json m;
            double mean = 0.0;
            nlohmann::json per = nlohmann::json::array();
            for (std::size_t i = 0; i < picks.size(); ++i) {
                double v = 0.0;
                if (!picks[i].empty() && !res.references[i].empty())
                    v = embed_similarity_from_vectors(sentence_embedding_rows(st, picks[i]),
                                                      sentence_embedding_rows(st, res.references[i]));
                mean += v;
                per.push_back(v);
            }
            m["corpus"] = mean / static_cast<double>(picks.size());
            m["per_sample"] = std::move(per);
            block["embsim"] = std::move(m);
        }
        return block;
    };

    nlohmann::json report;
    report["n_sources"] = n_sources;
    report["n_candidates"] = st.cfg.n_candidates;
    report["mode"] = st.cfg.mode;
    report["mbr"] = accuracy_block(mbr_picks);
    report["oracle"] = accuracy_block(oracle_picks);

    std::vector<TokenSeq> train_corpus;
    for (const auto& s : st.data.train) train_corpus.push_back(s.sentence);
    // Degenerate predictions (too short for some n-gram order) are a
    // documented metric error; the report records them as null rather than
    // aborting the whole evaluation.
    auto guarded = [](nlohmann::json& d, const char* key, auto&& fn) {
        try {
            d[key] = fn();
        } catch (const std::invalid_argument&) {
            d[key] = nullptr;
        }
    };
    auto diversity_block = [&](const std::vector<TokenSeq>& preds) {
        nlohmann::json d;
        guarded(d, "diversity", [&]() { return diversity(preds); });
        std::vector<std::string> texts;
        for (const auto& p : preds) texts.push_back(st.data.vocab.detokenize(p));
        guarded(d, "compression_ratio", [&]() { return compression_ratio(texts); });
        guarded(d, "homogenization", [&]() { return homogenization(preds); });
        guarded(d, "memorization", [&]() { return memorization(preds, train_corpus); });
        return d;
    };
    report["diversity_suite"] = diversity_block(mbr_picks);
    report["diversity_suite_pool"] = diversity_block(pool);

    // Per-source mode: mean pairwise similarity within each source's own
    // candidate set (how homogeneous one source's candidates are).
    if (st.cfg.n_candidates >= 2) {
        double acc = 0.0;
        for (const auto& set : res.sets) acc += homogenization(set.candidates);
        report["diversity_suite_pool"]["homogenization_per_source"] = acc / static_cast<double>(res.sets.size());
    }
    res.report = std::move(report);
    return res;
}

// One record per source: source_id, candidates, mbr_index, oracle_index,
// seed_base.
template <typename S>
inline void write_candidates_jsonl(const EvalResult<S>& res, const Vocabulary& vocab, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open candidate dump '" + path + "'");
    for (const auto& set : res.sets) {
        nlohmann::json rec;
        rec["source_id"] = set.source_id;
        nlohmann::json cands = nlohmann::json::array();
        for (const auto& c : set.candidates) cands.push_back(vocab.detokenize(c));
        rec["candidates"] = std::move(cands);
        rec["mbr_index"] = set.mbr_pick;
        rec["oracle_index"] = set.oracle_pick;
        rec["seed_base"] = set.seed_base;
        out << rec.dump() << "\n";
    }
}

// ---------------------------------------------------------------------------
// Trajectory export
// ---------------------------------------------------------------------------

// Dumps z_t at every sampler step for k seeds plus the ground-truth z_0,
// with a 2-D PCA projection fitted on the dumped points. CSV columns:
// seed, step, t, pc1, pc2, z...
template <typename S>
inline int export_trajectory(const PipelineState<S>& st, const SignSample& sample, int k_seeds,
                             const std::string& path) {
    if (!st.diffusion_ready) throw std::runtime_error("export-trajectory: diffusion model not trained/loaded");
    NoGradGuard ng;
    std::vector<SampleTrace<S>> traces;
    generate_candidates(st, sample, 0, k_seeds, st.cfg.seed + 0xabc, false, &traces);

    // Ground-truth latent in the sampled (normalized) space.
    std::vector<const SignSample*> one{&sample};
    const auto tb = build_token_batch(one, st.cfg.max_sentence);
    TensorT<S> z0 = st.ae.encode_to_latent(tb.input, 1, tb.len, tb.mask);
    if (st.cfg.latent_norm) z0 = st.ae.normalize(z0);

    std::vector<std::vector<double>> rows;
    std::vector<std::tuple<int, int, int>> meta;  // seed, step index, t
    for (int s = 0; s < k_seeds; ++s) {
        const auto& tr = traces[static_cast<std::size_t>(s)];
        for (std::size_t k = 0; k < tr.states.size(); ++k) {
            rows.emplace_back(tr.states[k].begin(), tr.states[k].end());
            meta.emplace_back(s, static_cast<int>(k), tr.timesteps[k]);
        }
    }
    rows.emplace_back(z0.data().begin(), z0.data().end());
    meta.emplace_back(-1, -1, 0);

    const auto pca = Pca2::fit(rows);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open trajectory file '" + path + "'");
    out << "seed,step,t,pc1,pc2";
    for (std::size_t j = 0; j < rows[0].size(); ++j) out << ",z" << j;
    out << "\n";
    out.precision(10);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto [pc1, pc2] = pca.project(rows[i]);
        out << std::get<0>(meta[i]) << "," << std::get<1>(meta[i]) << "," << std::get<2>(meta[i]) << "," << pc1
            << "," << pc2;
        for (const double v : rows[i]) out << "," << v;
        out << "\n";
    }
    return static_cast<int>(rows.size());
}

}  // namespace diffslt
