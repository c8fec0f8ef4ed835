#pragma once

// Newline-delimited JSON event log.

#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace diffslt {

class NdjsonLogger {
public:
    NdjsonLogger() = default;

    explicit NdjsonLogger(const std::string& path) { open(path); }

    void open(const std::string& path) {
        out_.open(path, std::ios::binary | std::ios::app);
        if (!out_) throw std::runtime_error("log: cannot open '" + path + "'");
    }

    bool is_open() const { return out_.is_open(); }

    void log(const nlohmann::json& event) {
        if (!out_.is_open()) return;
        out_ << event.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

}  // namespace diffslt
