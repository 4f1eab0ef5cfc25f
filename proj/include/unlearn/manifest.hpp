#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "unlearn/common.hpp"

namespace unlearn {

/// Record of one CLI run: inputs, outputs with content hashes, timing.
struct RunManifest {
    std::string command;
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::pair<std::string, std::string>> outputs;  // path, content hash
    double duration_seconds = 0.0;

    void add_output(const std::string& path) {
        std::string content = read_text_file(path);
        outputs.emplace_back(path, to_hex(fnv1a64(content.data(), content.size())));
    }

    void save(const std::string& path) const {
        nlohmann::json j;
        j["command"] = command;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["inputs"] = inputs;
        nlohmann::json outs = nlohmann::json::array();
        for (const auto& [p, h] : outputs) {
            outs.push_back({{"path", p}, {"hash", h}});
        }
        j["outputs"] = outs;
        j["duration_seconds"] = duration_seconds;
        write_text_file(path, j.dump(2) + "\n");
    }
};

}  // namespace unlearn
