#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "episeg/manifest.hpp"
#include "episeg/model.hpp"
#include "episeg/params.hpp"
#include "episeg/tensor_io.hpp"

namespace episeg::ckpt {

// Checkpoint layout: one repo-format tensor file per parameter (named by its
// key) plus manifest.json with the serialized config, seed, epoch, and metric
// history.

inline void save_checkpoint(const std::string& dir, const num::Params& params,
                            const nlohmann::json& manifest) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json m = manifest;
    nlohmann::json names = nlohmann::json::array();
    nlohmann::json hashes;
    for (const auto& [name, v] : params.items) {
        const std::string path = (fs::path(dir) / (name + ".t")).string();
        num::save_tensor(path, v.value());
        names.push_back(name);
        hashes[name + ".t"] = util::file_hash(path);
    }
    m["params"] = names;
    m["artifacts"] = hashes;
    util::write_json_file((fs::path(dir) / "manifest.json").string(), m);
}

inline nlohmann::json checkpoint_manifest(const std::string& dir) {
    return util::read_json_file((std::filesystem::path(dir) / "manifest.json").string());
}

/// Load weights into an already-built network; shape or key mismatches mean
/// the checkpoint belongs to a different configuration.
inline void load_checkpoint(const std::string& dir, model::Network& net) {
    namespace fs = std::filesystem;
    const nlohmann::json m = checkpoint_manifest(dir);
    std::vector<std::string> stored = m.at("params").get<std::vector<std::string>>();
    std::vector<std::string> expected;
    for (const auto& [name, v] : net.params.items) expected.push_back(name);
    if (stored != expected)
        throw std::runtime_error("checkpoint/config mismatch: parameter sets differ under " + dir);
    for (auto& [name, v] : net.params.items) {
        num::Tensor t = num::load_tensor((fs::path(dir) / (name + ".t")).string());
        if (t.shape != v.shape())
            throw std::runtime_error("checkpoint/config mismatch: shape of " + name + " differs");
        v.mutable_value() = std::move(t);
    }
}

}  // namespace episeg::ckpt
