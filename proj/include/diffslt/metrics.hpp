#pragma once

// Accuracy metrics (sentence/corpus BLEU, ROUGE-L) and the diversity suite
// (n-gram diversity, compression ratio, homogenization, memorization) plus
// a greedy-matching cosine similarity over supplied token embeddings. All
// functions are pure; token sequences are vocabulary ids.

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "diffslt/rng.hpp"

namespace diffslt {

using TokenSeq = std::vector<int>;

namespace detail_metrics {

// Packs an n-gram of small ids into one 64-bit key (16 bits per token).
inline std::uint64_t pack_ngram(const TokenSeq& seq, std::size_t start, int n) {
    std::uint64_t key = 0;
    for (int i = 0; i < n; ++i) {
        const int id = seq[start + static_cast<std::size_t>(i)];
        if (id < 0 || id > 0xFFFF) throw std::invalid_argument("metrics: token id out of 16-bit range");
        key = (key << 16) | static_cast<std::uint64_t>(id);
    }
    return key;
}

inline std::unordered_map<std::uint64_t, int> ngram_counts(const TokenSeq& seq, int n) {
    std::unordered_map<std::uint64_t, int> counts;
    if (static_cast<int>(seq.size()) >= n)
        for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) ++counts[pack_ngram(seq, i, n)];
    return counts;
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::size_t> prev(m + 1, 0), cur(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        for (std::size_t j = 1; j <= m; ++j)
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[m];
}

}  // namespace detail_metrics

// Sentence BLEU-n: geometric mean of modified n-gram precisions for
// n <= n_max, add-one smoothing on zero-count orders only (an order with no
// candidate n-grams counts as zero-count), times the brevity penalty
// exp(min(0, 1 - r/c)). Empty candidate scores 0.
inline double bleu_n(const TokenSeq& candidate, const TokenSeq& reference, int n_max) {
    if (n_max < 1 || n_max > 4) throw std::invalid_argument("bleu_n: n_max must be in [1,4]");
    if (candidate.empty()) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= n_max; ++n) {
        const auto cand = detail_metrics::ngram_counts(candidate, n);
        const auto ref = detail_metrics::ngram_counts(reference, n);
        std::int64_t total = 0, matched = 0;
        for (const auto& [key, count] : cand) {
            total += count;
            auto it = ref.find(key);
            if (it != ref.end()) matched += std::min(count, it->second);
        }
        const double p = (matched > 0) ? static_cast<double>(matched) / static_cast<double>(total)
                                       : 1.0 / static_cast<double>(total + 1);
        log_sum += std::log(p) / n_max;
    }
    const double r = static_cast<double>(reference.size());
    const double c = static_cast<double>(candidate.size());
    const double bp = std::exp(std::min(0.0, 1.0 - r / c));
    return bp * std::exp(log_sum);
}

// Corpus BLEU-n: n-gram counts pooled over all pairs before taking the
// geometric mean; same smoothing and brevity-penalty conventions.
inline double corpus_bleu(const std::vector<TokenSeq>& candidates, const std::vector<TokenSeq>& references,
                          int n_max = 4) {
    if (candidates.size() != references.size())
        throw std::invalid_argument("corpus_bleu: candidate/reference count mismatch");
    if (candidates.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
    std::int64_t cand_len = 0, ref_len = 0;
    std::vector<std::int64_t> total(static_cast<std::size_t>(n_max) + 1, 0);
    std::vector<std::int64_t> matched(static_cast<std::size_t>(n_max) + 1, 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        cand_len += static_cast<std::int64_t>(candidates[i].size());
        ref_len += static_cast<std::int64_t>(references[i].size());
        for (int n = 1; n <= n_max; ++n) {
            const auto cand = detail_metrics::ngram_counts(candidates[i], n);
            const auto ref = detail_metrics::ngram_counts(references[i], n);
            for (const auto& [key, count] : cand) {
                total[static_cast<std::size_t>(n)] += count;
                auto it = ref.find(key);
                if (it != ref.end()) matched[static_cast<std::size_t>(n)] += std::min(count, it->second);
            }
        }
    }
    if (cand_len == 0) return 0.0;
    double log_sum = 0.0;
    for (int n = 1; n <= n_max; ++n) {
        const auto m = matched[static_cast<std::size_t>(n)];
        const auto t = total[static_cast<std::size_t>(n)];
        const double p = (m > 0) ? static_cast<double>(m) / static_cast<double>(t) : 1.0 / static_cast<double>(t + 1);
        log_sum += std::log(p) / n_max;
    }
    const double bp = std::exp(std::min(0.0, 1.0 - static_cast<double>(ref_len) / static_cast<double>(cand_len)));
    return bp * std::exp(log_sum);
}

// ROUGE-L F1. Both empty -> 1 (identity convention), one empty -> 0.
inline double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
    if (candidate.empty() && reference.empty()) return 1.0;
    if (candidate.empty() || reference.empty()) return 0.0;
    const double lcs = static_cast<double>(detail_metrics::lcs_length(candidate, reference));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(candidate.size());
    const double r = lcs / static_cast<double>(reference.size());
    return 2.0 * p * r / (p + r);
}

// Product over n in {2,3,4} of unique-ngram / total-ngram ratios across the
// whole corpus. Sentences shorter than n contribute nothing at that n.
inline double diversity(const std::vector<TokenSeq>& preds) {
    double prod = 1.0;
    for (int n = 2; n <= 4; ++n) {
        std::unordered_set<std::uint64_t> unique;
        std::int64_t total = 0;
        for (const auto& p : preds) {
            if (static_cast<int>(p.size()) < n) continue;
            for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= p.size(); ++i) {
                unique.insert(detail_metrics::pack_ngram(p, i, n));
                ++total;
            }
        }
        if (total == 0)
            throw std::invalid_argument("diversity: corpus has no " + std::to_string(n) + "-grams");
        prod *= static_cast<double>(unique.size()) / static_cast<double>(total);
    }
    return prod;
}

// Byte size of the newline-joined text divided by its deflate(level 6)
// size. Tiny corpora can dip below 1 from compressor framing overhead.
inline double compression_ratio(const std::vector<std::string>& pred_texts) {
    if (pred_texts.empty()) throw std::invalid_argument("compression_ratio: empty corpus");
    std::string joined;
    for (std::size_t i = 0; i < pred_texts.size(); ++i) {
        if (i) joined += '\n';
        joined += pred_texts[i];
    }
    uLongf bound = compressBound(static_cast<uLong>(joined.size()));
    std::vector<Bytef> buf(bound);
    const int rc = compress2(buf.data(), &bound, reinterpret_cast<const Bytef*>(joined.data()),
                             static_cast<uLong>(joined.size()), 6);
    if (rc != Z_OK) throw std::runtime_error("compression_ratio: deflate failed with code " + std::to_string(rc));
    return static_cast<double>(joined.size()) / static_cast<double>(bound);
}

// Mean pairwise ROUGE-L over distinct unordered pairs; above max_pairs the
// pairs are subsampled with a fixed seed.
inline double homogenization(const std::vector<TokenSeq>& preds, std::int64_t max_pairs = 200000) {
    const std::int64_t n = static_cast<std::int64_t>(preds.size());
    if (n < 2) throw std::invalid_argument("homogenization: needs at least 2 predictions");
    const std::int64_t all_pairs = n * (n - 1) / 2;
    double sum = 0.0;
    std::int64_t used = 0;
    if (all_pairs <= max_pairs) {
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = i + 1; j < n; ++j) {
                sum += rouge_l(preds[static_cast<std::size_t>(i)], preds[static_cast<std::size_t>(j)]);
                ++used;
            }
    } else {
        Rng rng = Rng::derive(0x4a0b0e, 0);
        for (std::int64_t k = 0; k < max_pairs; ++k) {
            const auto i = rng.below(static_cast<std::uint64_t>(n));
            auto j = rng.below(static_cast<std::uint64_t>(n - 1));
            if (j >= i) ++j;
            sum += rouge_l(preds[static_cast<std::size_t>(i)], preds[static_cast<std::size_t>(j)]);
            ++used;
        }
    }
    return sum / static_cast<double>(used);
}

// Fraction of predicted 4-grams (with multiplicity) whose key appears
// anywhere in the training corpus.
inline double memorization(const std::vector<TokenSeq>& preds, const std::vector<TokenSeq>& train) {
    std::unordered_set<std::uint64_t> train_grams;
    for (const auto& t : train)
        if (t.size() >= 4)
            for (std::size_t i = 0; i + 4 <= t.size(); ++i) train_grams.insert(detail_metrics::pack_ngram(t, i, 4));
    std::int64_t total = 0, hit = 0;
    for (const auto& p : preds) {
        if (p.size() < 4) continue;
        for (std::size_t i = 0; i + 4 <= p.size(); ++i) {
            ++total;
            if (train_grams.count(detail_metrics::pack_ngram(p, i, 4))) ++hit;
        }
    }
    if (total == 0) throw std::invalid_argument("memorization: predictions contain no 4-grams");
    return static_cast<double>(hit) / static_cast<double>(total);
}

// Greedy token-matching cosine similarity with F1 aggregation over
// per-token embedding rows. Reported as `embsim`; this is a learned-
// embedding stand-in; never report it as a BERTScore-class number.
inline double embed_similarity_from_vectors(const std::vector<std::vector<double>>& cand,
                                            const std::vector<std::vector<double>>& ref) {
    if (cand.empty() || ref.empty()) throw std::invalid_argument("embed_similarity: empty input");
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
        }
        const double denom = std::sqrt(na) * std::sqrt(nb);
        return denom > 0 ? dot / denom : 0.0;
    };
    double precision = 0.0;
    for (const auto& c : cand) {
        double best = -1.0;
        for (const auto& r : ref) best = std::max(best, cosine(c, r));
        precision += best;
    }
    precision /= static_cast<double>(cand.size());
    double recall = 0.0;
    for (const auto& r : ref) {
        double best = -1.0;
        for (const auto& c : cand) best = std::max(best, cosine(r, c));
        recall += best;
    }
    recall /= static_cast<double>(ref.size());
    if (precision + recall == 0.0) return 0.0;
    return 2.0 * precision * recall / (precision + recall);
}

}  // namespace diffslt
