#pragma once

// Deterministic synthetic sign-language-style corpus. Sentences are
// weather-report templates over (time, location, entity, degree) slots;
// a gloss sequence fixes the slot values and maps to several surface
// realizations through templates and synonyms, so the same meaning has
// multiple valid sentences. Frames are rendered per gloss segment from
// fixed prototype vectors with signer transforms and low-pass noise.

#include <algorithm>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "diffslt/rng.hpp"

namespace diffslt {

struct Vocabulary {
    std::vector<std::string> sentence_tokens;  // id = index; 0..2 reserved
    std::vector<std::string> gloss_tokens;     // id = index; 0..2 reserved
    std::unordered_map<std::string, int> sentence_ids;
    std::unordered_map<std::string, int> gloss_ids;
    std::vector<int> gloss_to_word;  // gloss id -> canonical sentence token id

    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;

    int sentence_size() const { return static_cast<int>(sentence_tokens.size()); }
    int gloss_size() const { return static_cast<int>(gloss_tokens.size()); }

    std::vector<int> tokenize(const std::string& text) const {
        std::vector<int> out;
        std::istringstream is(text);
        std::string w;
        while (is >> w) {
            auto it = sentence_ids.find(w);
            if (it == sentence_ids.end())
                throw std::invalid_argument("tokenize: out-of-vocabulary token '" + w + "'");
            out.push_back(it->second);
        }
        return out;
    }

    std::string detokenize(const std::vector<int>& ids) const {
        std::string out;
        for (int id : ids) {
            if (id == pad || id == bos || id == eos) continue;
            if (id < 0 || id >= sentence_size())
                throw std::invalid_argument("detokenize: id " + std::to_string(id) + " out of range");
            if (!out.empty()) out += ' ';
            out += sentence_tokens[static_cast<std::size_t>(id)];
        }
        return out;
    }
};

struct SignSample {
    std::vector<double> frames;  // L_v x D_raw row-major
    int n_frames = 0;
    std::vector<int> gloss;     // gloss token ids (no bos/eos)
    std::vector<int> sentence;  // sentence token ids (no bos/eos)
    int signer_id = 0;
};

struct GrammarConfig {
    std::string version = "wx-1";
    int frame_dim = 16;      // D_raw
    int n_signers = 4;
    double noise_scale = 0.15;
    double signer_spread = 0.1;
    double lowpass = 0.7;
    double degree_drop = 1.0 / 6.0;  // fraction of gloss tuples without a degree

    // slot -> list of (gloss name, surface synonyms)
    std::vector<std::pair<std::string, std::vector<std::string>>> times, locations, entities, degrees;
    // templates over tokens; <T>, <L>, <E>, <D> are slot markers
    std::vector<std::string> templates;

    static GrammarConfig standard() {
        GrammarConfig g;
        g.times = {{"TODAY", {"today"}},     {"TOMORROW", {"tomorrow"}}, {"TONIGHT", {"tonight"}},
                   {"MORNING", {"morning"}}, {"EVENING", {"evening"}},   {"WEEKEND", {"weekend"}},
                   {"MIDDAY", {"midday", "noon"}}};
        g.locations = {{"NORTH", {"north"}},
                       {"SOUTH", {"south"}},
                       {"EAST", {"east"}},
                       {"WEST", {"west"}},
                       {"COAST", {"coast", "coastline"}},
                       {"MOUNTAINS", {"mountains", "highlands"}},
                       {"VALLEY", {"valley", "lowlands"}},
                       {"ISLANDS", {"islands"}}};
        g.entities = {{"RAIN", {"rain", "showers"}},      {"SNOW", {"snow", "snowfall"}},
                      {"WIND", {"wind", "gusts"}},        {"SUN", {"sun", "sunshine"}},
                      {"CLOUDS", {"clouds", "overcast"}}, {"STORM", {"storms", "thunderstorms"}},
                      {"FOG", {"fog", "mist"}},           {"FROST", {"frost", "ice"}},
                      {"HAIL", {"hail", "sleet"}}};
        g.degrees = {{"LIGHT", {"light", "weak"}},
                     {"STRONG", {"strong", "intense"}},
                     {"MODERATE", {"moderate"}},
                     {"HEAVY", {"heavy", "severe"}},
                     {"BRIEF", {"brief", "short"}},
                     {"SCATTERED", {"scattered", "patchy"}}};
        g.templates = {
            "<T> <D> <E> in the <L>",
            "in the <L> there will be <D> <E> <T>",
            "<T> the <L> expects <D> <E>",
            "<D> <E> is likely in the <L> <T>",
            "forecasters predict <D> <E> for the <L> <T>",
            "<T> brings <D> <E> to the <L>",
            "the <L> will see <D> <E> <T>",
            "<D> <E> will reach the <L> <T>",
            "<T> <D> <E> moves across the <L>",
            "people in the <L> face <D> <E> <T>",
            "chances of <D> <E> increase across the <L> <T>",
            "<T> residents of the <L> should expect <D> <E>",
        };
        return g;
    }

    Vocabulary build_vocab() const {
        Vocabulary v;
        v.sentence_tokens = {"<pad>", "<bos>", "<eos>"};
        v.gloss_tokens = {"<pad>", "<bos>", "<eos>"};
        auto add_sentence = [&](const std::string& w) {
            if (!v.sentence_ids.count(w)) {
                v.sentence_ids[w] = static_cast<int>(v.sentence_tokens.size());
                v.sentence_tokens.push_back(w);
            }
        };
        auto add_slot = [&](const std::vector<std::pair<std::string, std::vector<std::string>>>& slot) {
            for (const auto& [gloss, syns] : slot) {
                if (v.gloss_ids.count(gloss)) throw std::invalid_argument("grammar: duplicate gloss " + gloss);
                v.gloss_ids[gloss] = static_cast<int>(v.gloss_tokens.size());
                v.gloss_tokens.push_back(gloss);
                for (const auto& s : syns) add_sentence(s);
            }
        };
        for (int i = 0; i < 3; ++i) v.gloss_ids[v.gloss_tokens[static_cast<std::size_t>(i)]] = i;
        for (int i = 0; i < 3; ++i) v.sentence_ids[v.sentence_tokens[static_cast<std::size_t>(i)]] = i;
        add_slot(times);
        add_slot(locations);
        add_slot(entities);
        add_slot(degrees);
        for (const auto& t : templates) {
            std::istringstream is(t);
            std::string w;
            while (is >> w)
                if (w[0] != '<') add_sentence(w);
        }
        v.gloss_to_word.assign(static_cast<std::size_t>(v.gloss_size()), Vocabulary::pad);
        auto map_slot = [&](const std::vector<std::pair<std::string, std::vector<std::string>>>& slot) {
            for (const auto& [gloss, syns] : slot)
                v.gloss_to_word[static_cast<std::size_t>(v.gloss_ids.at(gloss))] = v.sentence_ids.at(syns[0]);
        };
        map_slot(times);
        map_slot(locations);
        map_slot(entities);
        map_slot(degrees);
        return v;
    }

    // Exact count of distinct surface sentences the grammar can produce:
    // per template, one word choice per present slot, where a slot offers
    // the synonyms of all its values.
    std::size_t capacity() const {
        auto words = [](const std::vector<std::pair<std::string, std::vector<std::string>>>& slot) {
            std::size_t n = 0;
            for (const auto& [_, syns] : slot) n += syns.size();
            return n;
        };
        const std::size_t wt = words(times), wl = words(locations), we = words(entities), wd = words(degrees);
        return templates.size() * wt * wl * we * (wd + 1);
    }
};

// Fixed per-gloss duration in [3, 8] frames, stable across runs.
inline int gloss_duration(const std::string& gloss_name) {
    std::uint64_t h = 1469598103934665603ULL;
    for (char c : gloss_name) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ULL;
    }
    return 3 + static_cast<int>(h % 6);
}

namespace detail_data {

inline std::vector<double> gloss_prototype(int gloss_id, int dim) {
    Rng r = Rng::derive(0x9eed5eedULL, static_cast<std::uint64_t>(gloss_id));
    std::vector<double> p(static_cast<std::size_t>(dim));
    for (auto& x : p) x = r.normal();
    return p;
}

struct SignerTransform {
    std::vector<double> matrix;  // dim x dim, I + spread * G
    std::vector<double> offset;
};

inline SignerTransform signer_transform(int signer_id, int dim, double spread) {
    Rng r = Rng::derive(0x51679e57ULL, static_cast<std::uint64_t>(signer_id));
    SignerTransform t;
    t.matrix.assign(static_cast<std::size_t>(dim * dim), 0.0);
    t.offset.assign(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i)
        for (int j = 0; j < dim; ++j)
            t.matrix[static_cast<std::size_t>(i * dim + j)] = (i == j ? 1.0 : 0.0) + spread * r.normal();
    for (auto& x : t.offset) x = 0.5 * spread * r.normal();
    return t;
}

inline std::vector<double> apply_transform(const SignerTransform& t, const std::vector<double>& v) {
    const int dim = static_cast<int>(v.size());
    std::vector<double> out(static_cast<std::size_t>(dim), 0.0);
    for (int i = 0; i < dim; ++i) {
        double acc = t.offset[static_cast<std::size_t>(i)];
        for (int j = 0; j < dim; ++j) acc += t.matrix[static_cast<std::size_t>(i * dim + j)] * v[static_cast<std::size_t>(j)];
        out[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

}  // namespace detail_data

// Renders L_v x D_raw frames: duration(g) frames per gloss around the
// signer-transformed prototype, plus AR(1) low-pass noise. The first frame
// of every segment after the first is the midpoint of the two adjacent
// prototypes (one-frame coarticulation blend). L_v always equals the sum
// of gloss durations.
inline std::vector<double> render_frames(const std::vector<int>& gloss, const Vocabulary& vocab, int signer_id,
                                         Rng& rng, const GrammarConfig& cfg, int* out_frames = nullptr) {
    if (gloss.empty()) throw std::invalid_argument("render_frames: empty gloss sequence");
    const int dim = cfg.frame_dim;
    const auto signer = detail_data::signer_transform(signer_id, dim, cfg.signer_spread);

    std::vector<std::vector<double>> protos;
    std::vector<int> durations;
    for (int g : gloss) {
        protos.push_back(detail_data::apply_transform(signer, detail_data::gloss_prototype(g, dim)));
        durations.push_back(gloss_duration(vocab.gloss_tokens[static_cast<std::size_t>(g)]));
    }

    int total = 0;
    for (int d : durations) total += d;
    if (out_frames) *out_frames = total;

    std::vector<double> frames(static_cast<std::size_t>(total * dim), 0.0);
    std::vector<double> noise(static_cast<std::size_t>(dim), 0.0);
    int fi = 0;
    for (std::size_t seg = 0; seg < protos.size(); ++seg) {
        for (int k = 0; k < durations[seg]; ++k, ++fi) {
            double* row = frames.data() + static_cast<std::size_t>(fi * dim);
            const bool blend = (k == 0 && seg > 0);
            for (int j = 0; j < dim; ++j) {
                noise[static_cast<std::size_t>(j)] =
                    cfg.lowpass * noise[static_cast<std::size_t>(j)] + cfg.noise_scale * rng.normal();
                const double base = blend ? 0.5 * (protos[seg - 1][static_cast<std::size_t>(j)] +
                                                   protos[seg][static_cast<std::size_t>(j)])
                                          : protos[seg][static_cast<std::size_t>(j)];
                row[j] = base + noise[static_cast<std::size_t>(j)];
            }
        }
    }
    return frames;
}

// Simulated gloss recognizer: substitution / deletion / insertion each at
// rate wer/3. Deletion never removes the last remaining token.
inline std::vector<int> make_pseudo_gloss(const std::vector<int>& gloss, double wer, Rng& rng,
                                          const Vocabulary& vocab) {
    if (wer < 0.0 || wer >= 1.0) throw std::invalid_argument("make_pseudo_gloss: wer must be in [0,1)");
    const double p = wer / 3.0;
    const int first_content = 3;
    const int n_content = vocab.gloss_size() - first_content;
    std::vector<int> out;
    for (std::size_t i = 0; i < gloss.size(); ++i) {
        const double u = rng.uniform();
        if (u < p) {
            // substitute with a different gloss token
            int repl = first_content + rng.below_int(n_content - 1);
            if (repl >= gloss[i]) ++repl;
            out.push_back(repl);
        } else if (u < 2 * p) {
            // delete, unless that would empty the output
            const bool last_chance = out.empty() && i + 1 == gloss.size();
            if (last_chance) out.push_back(gloss[i]);
        } else if (u < 3 * p) {
            out.push_back(gloss[i]);
            out.push_back(first_content + rng.below_int(n_content));
        } else {
            out.push_back(gloss[i]);
        }
    }
    return out;
}

struct DatasetSplit {
    std::vector<SignSample> train, dev, test;
    std::uint64_t seed = 0;
    std::string grammar_version;
    Vocabulary vocab;
    GrammarConfig grammar;
};

namespace detail_data {

struct GlossTuple {
    int time, loc, entity, degree;  // indices into slot lists; degree < 0 = absent
};

// Renders one surface realization; returns tokens.
inline std::vector<std::string> realize(const GrammarConfig& g, const GlossTuple& t, int template_idx, Rng& rng) {
    auto pick = [&rng](const std::vector<std::string>& syns) {
        return syns[static_cast<std::size_t>(rng.below_int(static_cast<int>(syns.size())))];
    };
    std::vector<std::string> out;
    std::istringstream is(g.templates[static_cast<std::size_t>(template_idx)]);
    std::string w;
    while (is >> w) {
        if (w == "<T>")
            out.push_back(pick(g.times[static_cast<std::size_t>(t.time)].second));
        else if (w == "<L>")
            out.push_back(pick(g.locations[static_cast<std::size_t>(t.loc)].second));
        else if (w == "<E>")
            out.push_back(pick(g.entities[static_cast<std::size_t>(t.entity)].second));
        else if (w == "<D>") {
            if (t.degree >= 0) out.push_back(pick(g.degrees[static_cast<std::size_t>(t.degree)].second));
        } else
            out.push_back(w);
    }
    return out;
}

}  // namespace detail_data

// Deterministic corpus generation. Gloss tuples cycle through every slot
// value (so every gloss token is covered); templates and synonyms are drawn
// from the seeded rng. Splits are disjoint by surface sentence.
inline DatasetSplit generate_corpus(std::uint64_t seed, int n_train, int n_dev, int n_test,
                                    const GrammarConfig& grammar) {
    if (n_train <= 0 || n_dev < 0 || n_test < 0)
        throw std::invalid_argument("generate_corpus: n_train must be > 0 and sizes non-negative");
    const std::size_t requested = static_cast<std::size_t>(n_train + n_dev + n_test);
    const std::size_t cap = grammar.capacity();
    if (requested > cap)
        throw std::runtime_error("generate_corpus: grammar capacity " + std::to_string(cap) +
                                 " cannot supply " + std::to_string(requested) + " distinct sentences");

    DatasetSplit ds;
    ds.seed = seed;
    ds.grammar_version = grammar.version;
    ds.grammar = grammar;
    ds.vocab = grammar.build_vocab();

    Rng rng = Rng::derive(seed, 0x10a1);

    // Shuffled cycle per slot keeps coverage near-uniform.
    auto cycle = [&rng](std::size_t n) {
        std::vector<int> order(n);
        for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
        rng.shuffle(order.begin(), order.end());
        return order;
    };
    const auto ot = cycle(grammar.times.size());
    const auto ol = cycle(grammar.locations.size());
    const auto oe = cycle(grammar.entities.size());
    const auto od = cycle(grammar.degrees.size());

    std::set<std::string> used;
    std::size_t tuple_idx = 0;
    std::size_t attempts = 0;
    const std::size_t max_attempts = 1000 * (requested + 16);

    auto draw_sample = [&](int global_index) {
        while (true) {
            if (++attempts > max_attempts)
                throw std::runtime_error("generate_corpus: grammar too small to satisfy split disjointness");
            detail_data::GlossTuple t;
            t.time = ot[tuple_idx % ot.size()];
            t.loc = ol[tuple_idx % ol.size()];
            t.entity = oe[tuple_idx % oe.size()];
            const bool drop_degree = rng.uniform() < grammar.degree_drop;
            t.degree = drop_degree ? -1 : od[tuple_idx % od.size()];
            ++tuple_idx;

            const int tmpl = rng.below_int(static_cast<int>(grammar.templates.size()));
            const auto words = detail_data::realize(grammar, t, tmpl, rng);
            std::string surface;
            for (const auto& w : words) {
                if (!surface.empty()) surface += ' ';
                surface += w;
            }
            if (used.count(surface)) continue;
            used.insert(surface);

            SignSample s;
            s.sentence = ds.vocab.tokenize(surface);
            s.gloss = {ds.vocab.gloss_ids.at(grammar.times[static_cast<std::size_t>(t.time)].first),
                       ds.vocab.gloss_ids.at(grammar.locations[static_cast<std::size_t>(t.loc)].first),
                       ds.vocab.gloss_ids.at(grammar.entities[static_cast<std::size_t>(t.entity)].first)};
            if (t.degree >= 0)
                s.gloss.push_back(ds.vocab.gloss_ids.at(grammar.degrees[static_cast<std::size_t>(t.degree)].first));
            s.signer_id = rng.below_int(grammar.n_signers);
            Rng frame_rng = Rng::derive(seed, 0xf0a3e5 + static_cast<std::uint64_t>(global_index));
            s.frames = render_frames(s.gloss, ds.vocab, s.signer_id, frame_rng, grammar, &s.n_frames);
            return s;
        }
    };

    int global = 0;
    for (int i = 0; i < n_train; ++i) ds.train.push_back(draw_sample(global++));
    for (int i = 0; i < n_dev; ++i) ds.dev.push_back(draw_sample(global++));
    for (int i = 0; i < n_test; ++i) ds.test.push_back(draw_sample(global++));

    // Coverage contract: every gloss token appears often enough in train to
    // be learnable. Only meaningful at realistic corpus sizes.
    if (n_train >= 300) {
        std::map<int, int> counts;
        for (const auto& s : ds.train)
            for (int g : s.gloss) ++counts[g];
        for (int gi = 3; gi < ds.vocab.gloss_size(); ++gi)
            if (counts[gi] < 20)
                throw std::runtime_error("generate_corpus: gloss token '" +
                                         ds.vocab.gloss_tokens[static_cast<std::size_t>(gi)] +
                                         "' appears only " + std::to_string(counts[gi]) + " times in train");
    }
    return ds;
}

}  // namespace diffslt

#include <fstream>
#include <json.hpp>

namespace diffslt {

// One JSON record per line: frames (L_v arrays of D_raw floats), gloss
// (array of strings), sentence (string), signer (int).
inline void write_corpus_jsonl(const std::string& path, const std::vector<SignSample>& samples,
                               const Vocabulary& vocab, int frame_dim) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open corpus file for writing: " + path);
    for (const auto& s : samples) {
        nlohmann::json rec;
        nlohmann::json frames = nlohmann::json::array();
        for (int f = 0; f < s.n_frames; ++f) {
            nlohmann::json row = nlohmann::json::array();
            for (int j = 0; j < frame_dim; ++j) row.push_back(s.frames[static_cast<std::size_t>(f * frame_dim + j)]);
            frames.push_back(std::move(row));
        }
        rec["frames"] = std::move(frames);
        nlohmann::json gl = nlohmann::json::array();
        for (int g : s.gloss) gl.push_back(vocab.gloss_tokens[static_cast<std::size_t>(g)]);
        rec["gloss"] = std::move(gl);
        rec["sentence"] = vocab.detokenize(s.sentence);
        rec["signer"] = s.signer_id;
        out << rec.dump() << "\n";
    }
}

inline std::vector<SignSample> read_corpus_jsonl(const std::string& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open corpus file: " + path);
    std::vector<SignSample> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line);
        SignSample s;
        for (const auto& row : rec.at("frames"))
            for (const auto& v : row) s.frames.push_back(v.get<double>());
        s.n_frames = static_cast<int>(rec.at("frames").size());
        for (const auto& g : rec.at("gloss")) s.gloss.push_back(vocab.gloss_ids.at(g.get<std::string>()));
        s.sentence = vocab.tokenize(rec.at("sentence").get<std::string>());
        s.signer_id = rec.at("signer").get<int>();
        out.push_back(std::move(s));
    }
    return out;
}

// One token per line; id = line number.
inline void write_vocab_file(const std::string& path, const std::vector<std::string>& tokens) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open vocab file for writing: " + path);
    for (const auto& t : tokens) out << t << "\n";
}

inline std::vector<std::string> read_vocab_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open vocab file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.push_back(line);
    return tokens;
}

}  // namespace diffslt
