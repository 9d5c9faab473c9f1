#pragma once

#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "episeg/augment.hpp"
#include "episeg/manifest.hpp"
#include "episeg/memory.hpp"
#include "episeg/model.hpp"
#include "episeg/tensor.hpp"

namespace episeg::cfg {

using num::real;

/// Flat dotted-key run configuration. Every key round-trips through the
/// registry below, so unknown keys fail loudly and manifests capture the full
/// state of a run.
struct RunConfig {
    std::uint64_t seed = 1234;
    int epochs = 30;
    int batch_size = 4;
    int batches_per_epoch = 16;
    real lr = 0.05;
    real momentum = 0.9;
    int k_shot = 1;
    int threads = 1;

    int eval_episodes = 600;
    bool eval_kshot_retrain = true;
    bool eval_per_episode_iou = false;

    bool ufa_enabled = true;
    real ufa_gamma = 0.1;
    std::string ufa_target = "query_only";  // query_only | both
    std::string ufa_scale_mode = "variance";  // variance | stddev
    std::vector<int> ufa_positions{1, 2};

    bool csm_enabled = true;
    int csm_num_vectors = 50;
    std::string csm_k = "all";  // "all" or a positive integer
    real csm_temperature = 1.0;
    bool csm_loss_mean = false;
    bool csm_detach_features = false;

    real recon_weight = 1.0;

    std::vector<int> encoder_widths{8, 16, 24, 32};
    std::vector<int> encoder_pools{1, 1, 0, 0};
    int decoder_hidden = 48;
};

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoi(tok));
        } catch (...) {
            throw std::runtime_error("config: bad integer list for key " + key + ": " + s);
        }
    }
    if (out.empty()) throw std::runtime_error("config: empty list for key " + key);
    return out;
}

inline std::string int_list_str(const std::vector<int>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

inline bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw std::runtime_error("config: bad boolean for key " + key + ": " + s);
}

template <typename T>
T parse_num(const std::string& s, const std::string& key) {
    std::stringstream ss(s);
    T v{};
    ss >> v;
    if (ss.fail() || !ss.eof()) throw std::runtime_error("config: bad value for key " + key + ": " + s);
    return v;
}

}  // namespace detail

inline void set_key(RunConfig& c, const std::string& key, const std::string& val) {
    using detail::parse_bool;
    using detail::parse_num;
    if (key == "seed") c.seed = parse_num<std::uint64_t>(val, key);
    else if (key == "epochs") c.epochs = parse_num<int>(val, key);
    else if (key == "batch_size") c.batch_size = parse_num<int>(val, key);
    else if (key == "batches_per_epoch") c.batches_per_epoch = parse_num<int>(val, key);
    else if (key == "lr") c.lr = parse_num<real>(val, key);
    else if (key == "momentum") c.momentum = parse_num<real>(val, key);
    else if (key == "k_shot") c.k_shot = parse_num<int>(val, key);
    else if (key == "threads") c.threads = parse_num<int>(val, key);
    else if (key == "eval.episodes") c.eval_episodes = parse_num<int>(val, key);
    else if (key == "eval.kshot_retrain") c.eval_kshot_retrain = parse_bool(val, key);
    else if (key == "eval.per_episode_iou") c.eval_per_episode_iou = parse_bool(val, key);
    else if (key == "ufa.enabled") c.ufa_enabled = parse_bool(val, key);
    else if (key == "ufa.gamma") c.ufa_gamma = parse_num<real>(val, key);
    else if (key == "ufa.target") {
        if (val != "query_only" && val != "both")
            throw std::runtime_error("config: ufa.target must be query_only or both");
        c.ufa_target = val;
    } else if (key == "ufa.scale_mode") {
        if (val != "variance" && val != "stddev")
            throw std::runtime_error("config: ufa.scale_mode must be variance or stddev");
        c.ufa_scale_mode = val;
    } else if (key == "ufa.positions") c.ufa_positions = detail::parse_int_list(val, key);
    else if (key == "csm.enabled") c.csm_enabled = parse_bool(val, key);
    else if (key == "csm.num_vectors") c.csm_num_vectors = parse_num<int>(val, key);
    else if (key == "csm.k") {
        if (val != "all") (void)parse_num<int>(val, key);
        c.csm_k = val;
    } else if (key == "csm.temperature") c.csm_temperature = parse_num<real>(val, key);
    else if (key == "csm.loss_mean") c.csm_loss_mean = parse_bool(val, key);
    else if (key == "csm.detach_features") c.csm_detach_features = parse_bool(val, key);
    else if (key == "loss.recon_weight") c.recon_weight = parse_num<real>(val, key);
    else if (key == "encoder.widths") c.encoder_widths = detail::parse_int_list(val, key);
    else if (key == "encoder.pools") c.encoder_pools = detail::parse_int_list(val, key);
    else if (key == "decoder.hidden") c.decoder_hidden = parse_num<int>(val, key);
    else throw std::runtime_error("config: unknown key: " + key);
}

/// All keys with their current values, in registry order.
inline std::map<std::string, std::string> to_key_map(const RunConfig& c) {
    std::map<std::string, std::string> m;
    auto fmt = [](real v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        return ss.str();
    };
    m["seed"] = std::to_string(c.seed);
    m["epochs"] = std::to_string(c.epochs);
    m["batch_size"] = std::to_string(c.batch_size);
    m["batches_per_epoch"] = std::to_string(c.batches_per_epoch);
    m["lr"] = fmt(c.lr);
    m["momentum"] = fmt(c.momentum);
    m["k_shot"] = std::to_string(c.k_shot);
    m["threads"] = std::to_string(c.threads);
    m["eval.episodes"] = std::to_string(c.eval_episodes);
    m["eval.kshot_retrain"] = c.eval_kshot_retrain ? "true" : "false";
    m["eval.per_episode_iou"] = c.eval_per_episode_iou ? "true" : "false";
    m["ufa.enabled"] = c.ufa_enabled ? "true" : "false";
    m["ufa.gamma"] = fmt(c.ufa_gamma);
    m["ufa.target"] = c.ufa_target;
    m["ufa.scale_mode"] = c.ufa_scale_mode;
    m["ufa.positions"] = detail::int_list_str(c.ufa_positions);
    m["csm.enabled"] = c.csm_enabled ? "true" : "false";
    m["csm.num_vectors"] = std::to_string(c.csm_num_vectors);
    m["csm.k"] = c.csm_k;
    m["csm.temperature"] = fmt(c.csm_temperature);
    m["csm.loss_mean"] = c.csm_loss_mean ? "true" : "false";
    m["csm.detach_features"] = c.csm_detach_features ? "true" : "false";
    m["loss.recon_weight"] = fmt(c.recon_weight);
    m["encoder.widths"] = detail::int_list_str(c.encoder_widths);
    m["encoder.pools"] = detail::int_list_str(c.encoder_pools);
    m["decoder.hidden"] = std::to_string(c.decoder_hidden);
    return m;
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    for (const auto& [k, v] : to_key_map(c)) j[k] = v;
    return j;
}

inline RunConfig from_json(const nlohmann::json& j) {
    RunConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) set_key(c, it.key(), it.value().get<std::string>());
    return c;
}

inline std::string config_hash(const RunConfig& c) { return util::string_hash(to_json(c).dump()); }

/// Plain-text config file: `key = value` lines, '#' comments.
inline void apply_config_file(RunConfig& c, const std::string& path) {
    std::ifstream in(path);
    num::require(static_cast<bool>(in), "cannot open config file: " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        num::require(eq != std::string::npos,
                     "config: missing '=' at " + path + ":" + std::to_string(lineno));
        set_key(c, strip(line.substr(0, eq)), strip(line.substr(eq + 1)));
    }
}

/// EPISEG_SEED overrides the configured seed when set.
inline void apply_env_overrides(RunConfig& c) {
    if (const char* env = std::getenv("EPISEG_SEED")) set_key(c, "seed", env);
}

inline model::ModelOptions model_options(const RunConfig& c) {
    model::ModelOptions m;
    m.encoder.widths = c.encoder_widths;
    m.encoder.pools = c.encoder_pools;
    m.decoder_hidden = c.decoder_hidden;
    m.ufa.enabled = c.ufa_enabled;
    m.ufa.gamma = c.ufa_gamma;
    m.ufa.target = c.ufa_target == "both" ? aug::UfaTarget::Both : aug::UfaTarget::QueryOnly;
    m.ufa.scale_mode = c.ufa_scale_mode == "stddev" ? aug::ScaleMode::Stddev : aug::ScaleMode::Variance;
    m.ufa.positions = c.ufa_positions;
    m.csm.enabled = c.csm_enabled;
    m.csm.num_vectors = c.csm_num_vectors;
    m.csm.k = c.csm_k == "all" ? 0 : std::stoi(c.csm_k);
    m.csm.temperature = c.csm_temperature;
    m.csm.loss_mean = c.csm_loss_mean;
    m.csm.detach_features = c.csm_detach_features;
    m.recon_weight = c.recon_weight;
    return m;
}

}  // namespace episeg::cfg
