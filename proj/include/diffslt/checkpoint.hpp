#pragma once

// Binary checkpoint container: magic bytes, format version, the RunConfig
// snapshot, the RNG state, then named float32 arrays with shapes. All
// integers and payloads are little-endian; save -> load -> save is byte
// stable.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffslt/optim.hpp"
#include "diffslt/tensor.hpp"

namespace diffslt {

struct CheckpointArray {
    Shape shape;
    std::vector<float> values;
};

class Checkpoint {
public:
    static constexpr char magic[8] = {'D', 'S', 'L', 'T', 'C', 'K', 'P', '1'};
    static constexpr std::uint32_t current_version = 1;

    std::uint32_t version = current_version;
    std::string config_text;
    std::vector<std::uint64_t> rng_state;
    std::vector<std::pair<std::string, CheckpointArray>> arrays;

    template <typename S>
    void add(const std::string& name, const TensorT<S>& t) {
        CheckpointArray a;
        a.shape = t.shape();
        a.values.reserve(t.numel());
        for (const S v : t.data()) a.values.push_back(static_cast<float>(v));
        arrays.emplace_back(name, std::move(a));
    }

    template <typename S>
    void add_params(const ParamList<S>& params) {
        for (const auto& p : params) add(p.name, p.tensor);
    }

    const CheckpointArray* find(const std::string& name) const {
        for (const auto& [n, a] : arrays)
            if (n == name) return &a;
        return nullptr;
    }

    // Copies stored arrays into the parameter tensors. Every checkpoint
    // array must match a parameter (unknown names rejected) and every
    // parameter must be present.
    template <typename S>
    void load_into(ParamList<S>& params) const {
        std::map<std::string, TensorT<S>*> by_name;
        for (auto& p : params) by_name[p.name] = &p.tensor;
        std::map<std::string, bool> seen;
        for (const auto& [name, arr] : arrays) {
            auto it = by_name.find(name);
            if (it == by_name.end())
                throw std::runtime_error("checkpoint: unknown array name '" + name + "'");
            TensorT<S>& t = *it->second;
            if (t.shape() != arr.shape)
                throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': stored " +
                                         shape_str(arr.shape) + " vs model " + shape_str(t.shape()));
            for (std::size_t i = 0; i < arr.values.size(); ++i) t.data()[i] = static_cast<S>(arr.values[i]);
            seen[name] = true;
        }
        for (const auto& [name, _] : by_name)
            if (!seen.count(name)) throw std::runtime_error("checkpoint: missing array '" + name + "'");
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
        out.write(magic, sizeof(magic));
        write_u32(out, version);
        write_u32(out, static_cast<std::uint32_t>(config_text.size()));
        out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
        write_u32(out, static_cast<std::uint32_t>(rng_state.size()));
        for (const std::uint64_t v : rng_state) write_u64(out, v);
        write_u32(out, static_cast<std::uint32_t>(arrays.size()));
        for (const auto& [name, arr] : arrays) {
            write_u32(out, static_cast<std::uint32_t>(name.size()));
            out.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_u32(out, static_cast<std::uint32_t>(arr.shape.size()));
            for (const int d : arr.shape) write_u32(out, static_cast<std::uint32_t>(d));
            for (const float v : arr.values) write_f32(out, v);
        }
        if (!out) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
        char m[8];
        in.read(m, sizeof(m));
        if (!in || std::memcmp(m, magic, sizeof(magic)) != 0)
            throw std::runtime_error("checkpoint: bad magic in '" + path + "'");
        Checkpoint ck;
        ck.version = read_u32(in);
        if (ck.version != current_version)
            throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(ck.version));
        const auto cfg_len = read_u32(in);
        ck.config_text.resize(cfg_len);
        in.read(ck.config_text.data(), cfg_len);
        const auto rng_len = read_u32(in);
        ck.rng_state.resize(rng_len);
        for (auto& v : ck.rng_state) v = read_u64(in);
        const auto n_arrays = read_u32(in);
        for (std::uint32_t i = 0; i < n_arrays; ++i) {
            const auto name_len = read_u32(in);
            std::string name(name_len, '\0');
            in.read(name.data(), name_len);
            const auto rank = read_u32(in);
            CheckpointArray arr;
            std::size_t numel = 1;
            for (std::uint32_t r = 0; r < rank; ++r) {
                const auto d = read_u32(in);
                arr.shape.push_back(static_cast<int>(d));
                numel *= d;
            }
            arr.values.resize(numel);
            for (auto& v : arr.values) v = read_f32(in);
            ck.arrays.emplace_back(std::move(name), std::move(arr));
        }
        if (!in) throw std::runtime_error("checkpoint: truncated file '" + path + "'");
        return ck;
    }

private:
    static void write_u32(std::ofstream& out, std::uint32_t v) {
        char b[4] = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                     static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
        out.write(b, 4);
    }
    static void write_u64(std::ofstream& out, std::uint64_t v) {
        write_u32(out, static_cast<std::uint32_t>(v & 0xFFFFFFFFULL));
        write_u32(out, static_cast<std::uint32_t>(v >> 32));
    }
    static void write_f32(std::ofstream& out, float v) {
        std::uint32_t u;
        std::memcpy(&u, &v, 4);
        write_u32(out, u);
    }
    static std::uint32_t read_u32(std::ifstream& in) {
        unsigned char b[4];
        in.read(reinterpret_cast<char*>(b), 4);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }
    static std::uint64_t read_u64(std::ifstream& in) {
        const std::uint64_t lo = read_u32(in);
        const std::uint64_t hi = read_u32(in);
        return lo | (hi << 32);
    }
    static float read_f32(std::ifstream& in) {
        const std::uint32_t u = read_u32(in);
        float v;
        std::memcpy(&v, &u, 4);
        return v;
    }
};

}  // namespace diffslt
