#pragma once

// Flat key = value run configuration with '#' comments. Stock defaults:
// batch 8, diffusion lr 2e-4 with cosine decay, grad clip 0.4, L1
// x-prediction objective, CFG 1.5, self-cond 0.5, schedule scale 0.1 / 0.3
// and 30 / 15 sampling steps for the visual-only and pseudo-gloss modes;
// the attention block count defaults to the desk-scale 4 with 12 reachable
// by config.

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffslt {

struct RunConfig {
    std::string mode = "diffslt";  // diffslt | diffslt_p
    std::uint64_t seed = 0;        // master training/sampling seed
    std::uint64_t data_seed = 1;   // corpus generation seed

    // corpus
    int n_train = 2000;
    int n_dev = 200;
    int n_test = 200;
    double pseudo_wer = 0.15;

    // model dimensions
    int d_model = 48;
    int d_raw = 16;
    int latent_len = 8;
    int latent_dim = 32;
    int n_blocks = 4;  // denoiser attention blocks (full scale: 12)
    int heads = 4;
    int ffn_mult = 4;
    int v_depth = 4;  // visual encoder blocks
    int max_frames = 64;
    int max_sentence = 16;

    // optimization
    int batch_size = 8;
    double lr = 2e-4;        // diffusion stage
    double visual_lr = 5e-4;  // stage-1 rates are independent knobs
    double ae_lr = 5e-4;
    std::string lr_schedule = "cosine";  // cosine | constant
    double grad_clip = 0.4;
    double weight_decay = 0.01;
    int visual_steps = 3000;
    int ae_steps = 3000;
    int diffusion_steps = 6000;

    // diffusion
    int timesteps = 1000;  // training discretization T
    std::string schedule = "shifted_cosine";  // cosine | shifted_cosine
    double schedule_scale = 0.1;              // 0.1 diffslt, 0.3 diffslt_p
    double self_cond_prob = 0.5;
    double cond_drop_prob = 0.1;
    double lambda_t = 1.0;  // constant per-timestep loss weight
    bool latent_norm = true;
    std::string uncond_input = "null_token";  // null_token | zero

    // guidance fusion
    std::string gfm_features = "both";  // both | frame_only | video_only
    int gfm_layers = 3;
    bool gfm_skip = true;
    bool gfm_early_fusion = true;

    // sampling
    std::string sampler = "ddim";  // ddim | ddpm
    int sample_steps = 30;         // 30 diffslt, 15 diffslt_p
    double cfg_scale = 1.5;
    double eta = 0.0;
    int n_candidates = 5;
    int eval_limit = 0;  // 0 = whole split

    static RunConfig defaults(const std::string& mode) {
        RunConfig c;
        c.mode = mode;
        if (mode == "diffslt_p") {
            c.schedule_scale = 0.3;
            c.sample_steps = 15;
        } else if (mode != "diffslt") {
            throw std::invalid_argument("config: unknown mode '" + mode + "'");
        }
        return c;
    }

    void set(const std::string& key, const std::string& value);
    std::string get(const std::string& key) const;
    std::string serialize() const;
    void validate() const;

    // Hash over every key that influences stage-1 training outputs; stored
    // in checkpoints so stage 2 can refuse mismatched prerequisites.
    std::uint64_t stage1_hash() const;

    static RunConfig parse_text(const std::string& text, const std::string& base_mode = "");
    static RunConfig parse_file(const std::string& path);
    void apply_override(const std::string& assignment);  // "key=value"
};

namespace detail_config {

struct Field {
    const char* key;
    std::function<std::string(const RunConfig&)> get;
    std::function<void(RunConfig&, const std::string&)> set;
    bool stage1;
};

inline std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const long d = std::stol(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return static_cast<int>(d);
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const unsigned long long d = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("trailing");
        return d;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' expects true/false, got '" + v + "'");
}

#define DIFFSLT_CFG_STR(name, stage1_flag)                                                   \
    Field{#name, [](const RunConfig& c) { return c.name; },                                 \
          [](RunConfig& c, const std::string& v) { c.name = v; }, stage1_flag}
#define DIFFSLT_CFG_INT(name, stage1_flag)                                                  \
    Field{#name, [](const RunConfig& c) { return std::to_string(c.name); },                 \
          [](RunConfig& c, const std::string& v) { c.name = parse_int(#name, v); }, stage1_flag}
#define DIFFSLT_CFG_U64(name, stage1_flag)                                                  \
    Field{#name, [](const RunConfig& c) { return std::to_string(c.name); },                 \
          [](RunConfig& c, const std::string& v) { c.name = parse_u64(#name, v); }, stage1_flag}
#define DIFFSLT_CFG_DBL(name, stage1_flag)                                                  \
    Field{#name, [](const RunConfig& c) { return fmt_double(c.name); },                     \
          [](RunConfig& c, const std::string& v) { c.name = parse_double(#name, v); }, stage1_flag}
#define DIFFSLT_CFG_BOOL(name, stage1_flag)                                                 \
    Field{#name, [](const RunConfig& c) { return c.name ? "true" : "false"; },              \
          [](RunConfig& c, const std::string& v) { c.name = parse_bool(#name, v); }, stage1_flag}

inline const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        DIFFSLT_CFG_STR(mode, false),
        DIFFSLT_CFG_U64(seed, true),
        DIFFSLT_CFG_U64(data_seed, true),
        DIFFSLT_CFG_INT(n_train, true),
        DIFFSLT_CFG_INT(n_dev, true),
        DIFFSLT_CFG_INT(n_test, true),
        DIFFSLT_CFG_DBL(pseudo_wer, false),
        DIFFSLT_CFG_INT(d_model, true),
        DIFFSLT_CFG_INT(d_raw, true),
        DIFFSLT_CFG_INT(latent_len, true),
        DIFFSLT_CFG_INT(latent_dim, true),
        DIFFSLT_CFG_INT(n_blocks, false),
        DIFFSLT_CFG_INT(heads, true),
        DIFFSLT_CFG_INT(ffn_mult, true),
        DIFFSLT_CFG_INT(v_depth, true),
        DIFFSLT_CFG_INT(max_frames, true),
        DIFFSLT_CFG_INT(max_sentence, true),
        DIFFSLT_CFG_INT(batch_size, true),
        DIFFSLT_CFG_DBL(lr, true),
        DIFFSLT_CFG_DBL(visual_lr, true),
        DIFFSLT_CFG_DBL(ae_lr, true),
        DIFFSLT_CFG_STR(lr_schedule, true),
        DIFFSLT_CFG_DBL(grad_clip, true),
        DIFFSLT_CFG_DBL(weight_decay, true),
        DIFFSLT_CFG_INT(visual_steps, true),
        DIFFSLT_CFG_INT(ae_steps, true),
        DIFFSLT_CFG_INT(diffusion_steps, false),
        DIFFSLT_CFG_INT(timesteps, false),
        DIFFSLT_CFG_STR(schedule, false),
        DIFFSLT_CFG_DBL(schedule_scale, false),
        DIFFSLT_CFG_DBL(self_cond_prob, false),
        DIFFSLT_CFG_DBL(cond_drop_prob, false),
        DIFFSLT_CFG_DBL(lambda_t, false),
        DIFFSLT_CFG_BOOL(latent_norm, true),
        DIFFSLT_CFG_STR(uncond_input, false),
        DIFFSLT_CFG_STR(gfm_features, false),
        DIFFSLT_CFG_INT(gfm_layers, false),
        DIFFSLT_CFG_BOOL(gfm_skip, false),
        DIFFSLT_CFG_BOOL(gfm_early_fusion, false),
        DIFFSLT_CFG_STR(sampler, false),
        DIFFSLT_CFG_INT(sample_steps, false),
        DIFFSLT_CFG_DBL(cfg_scale, false),
        DIFFSLT_CFG_DBL(eta, false),
        DIFFSLT_CFG_INT(n_candidates, false),
        DIFFSLT_CFG_INT(eval_limit, false),
    };
    return f;
}

#undef DIFFSLT_CFG_STR
#undef DIFFSLT_CFG_INT
#undef DIFFSLT_CFG_U64
#undef DIFFSLT_CFG_DBL
#undef DIFFSLT_CFG_BOOL

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t h = 1469598103934665603ULL) {
    for (char c : s) {
        h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace detail_config

inline void RunConfig::set(const std::string& key, const std::string& value) {
    for (const auto& f : detail_config::fields()) {
        if (key == f.key) {
            f.set(*this, value);
            return;
        }
    }
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline std::string RunConfig::get(const std::string& key) const {
    for (const auto& f : detail_config::fields())
        if (key == f.key) return f.get(*this);
    throw std::invalid_argument("config: unknown key '" + key + "'");
}

inline std::string RunConfig::serialize() const {
    std::string out;
    for (const auto& f : detail_config::fields()) {
        out += f.key;
        out += " = ";
        out += f.get(*this);
        out += "\n";
    }
    return out;
}

inline void RunConfig::validate() const {
    auto expect = [](bool ok, const std::string& msg) {
        if (!ok) throw std::invalid_argument("config: " + msg);
    };
    expect(mode == "diffslt" || mode == "diffslt_p", "mode must be diffslt or diffslt_p");
    expect(schedule == "cosine" || schedule == "shifted_cosine", "schedule must be cosine or shifted_cosine");
    expect(sampler == "ddim" || sampler == "ddpm", "sampler must be ddim or ddpm");
    expect(lr_schedule == "cosine" || lr_schedule == "constant", "lr_schedule must be cosine or constant");
    expect(uncond_input == "null_token" || uncond_input == "zero", "uncond_input must be null_token or zero");
    expect(gfm_features == "both" || gfm_features == "frame_only" || gfm_features == "video_only",
           "gfm_features must be both, frame_only or video_only");
    expect(gfm_layers >= 1 && gfm_layers <= 3, "gfm_layers must be 1..3");
    expect(timesteps >= 1, "timesteps must be >= 1");
    expect(schedule_scale > 0.0, "schedule_scale must be > 0");
    expect(sample_steps >= 1, "sample_steps must be >= 1");
    expect(eta >= 0.0 && eta <= 1.0, "eta must be in [0,1]");
    expect(self_cond_prob >= 0.0 && self_cond_prob <= 1.0, "self_cond_prob must be in [0,1]");
    expect(cond_drop_prob >= 0.0 && cond_drop_prob <= 1.0, "cond_drop_prob must be in [0,1]");
    expect(lambda_t >= 0.0, "lambda_t must be >= 0");
    expect(n_candidates >= 1, "n_candidates must be >= 1");
    expect(d_model % heads == 0, "d_model must be divisible by heads");
    expect(pseudo_wer >= 0.0 && pseudo_wer < 1.0, "pseudo_wer must be in [0,1)");
    expect(batch_size >= 1, "batch_size must be >= 1");
}

inline std::uint64_t RunConfig::stage1_hash() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& f : detail_config::fields())
        if (f.stage1) h = detail_config::fnv1a(std::string(f.key) + "=" + f.get(*this) + ";", h);
    return h;
}

inline RunConfig RunConfig::parse_text(const std::string& text, const std::string& base_mode) {
    // Two passes: mode first so mode-dependent defaults apply before other
    // keys override them.
    std::string mode = base_mode.empty() ? "diffslt" : base_mode;
    std::vector<std::pair<std::string, std::string>> pairs;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: malformed line " + std::to_string(lineno) + ": '" + line + "'");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return (a == std::string::npos) ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw std::invalid_argument("config: malformed line " + std::to_string(lineno) + ": '" + line + "'");
        if (key == "mode") mode = value;
        pairs.emplace_back(key, value);
    }
    RunConfig cfg = RunConfig::defaults(mode);
    for (const auto& [k, v] : pairs)
        if (k != "mode") cfg.set(k, v);
    cfg.validate();
    return cfg;
}

inline RunConfig RunConfig::parse_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_text(ss.str());
}

inline void RunConfig::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos)
        throw std::invalid_argument("config: override must look like key=value, got '" + assignment + "'");
    std::string key = assignment.substr(0, eq);
    std::string value = assignment.substr(eq + 1);
    auto trim = [](std::string s) {
        const auto a = s.find_first_not_of(" \t");
        const auto b = s.find_last_not_of(" \t");
        return (a == std::string::npos) ? std::string() : s.substr(a, b - a + 1);
    };
    key = trim(key);
    value = trim(value);
    if (key == "mode") {
        // Switching mode re-applies mode-dependent defaults.
        RunConfig fresh = RunConfig::defaults(value);
        *this = fresh;
        return;
    }
    set(key, value);
    validate();
}

}  // namespace diffslt
