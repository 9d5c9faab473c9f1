#pragma once

#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "episeg/config.hpp"
#include "episeg/dataset.hpp"
#include "episeg/manifest.hpp"
#include "episeg/metrics.hpp"
#include "episeg/model.hpp"
#include "episeg/train.hpp"

namespace episeg::crossval {

using cfg::RunConfig;
using num::real;
using num::Rng;

struct FoldReport {
    int fold = 0;
    int k_shot = 1;
    real miou = 0.0;
    int episodes = 0;
    std::uint64_t seed = 0;
    std::map<int, real> per_class_iou;
};

struct Report {
    std::vector<FoldReport> folds;
    real average = 0.0;
    RunConfig config;
};

/// Evaluate a trained network on one fold's novel classes. Read-only: no
/// parameter is touched and no rng beyond the episode sampler is consumed.
inline FoldReport evaluate_fold(const model::Network& net, const data::Dataset& ds,
                                const data::FoldSplit& split, const RunConfig& config) {
    FoldReport rep;
    rep.fold = split.fold;
    rep.k_shot = config.k_shot;
    rep.episodes = config.eval_episodes;
    rep.seed = config.seed;
    const int factor = net.downsample_factor();
    const int hf = ds.image_size() / factor, wf = ds.image_size() / factor;
    // Fixed per-fold stream so every fold's episode set is reproducible.
    Rng sampler = Rng(config.seed).fork(1000 + static_cast<std::uint64_t>(split.fold));
    metrics::IoUAccumulator acc;
    for (int e = 0; e < config.eval_episodes; ++e) {
        const model::EpisodeData ep = train::sample_trainable_episode(
            ds, split.test_classes, config.k_shot, hf, wf, sampler);
        const num::Tensor probs = model::infer(net, ep);
        acc.update(ep.class_id, metrics::binarize(probs), ep.q_mask);
    }
    rep.miou = metrics::miou(acc, split.test_classes, config.eval_per_episode_iou);
    for (int c : split.test_classes)
        if (acc.per_class.count(c) && acc.per_class.at(c).uni > 0)
            rep.per_class_iou[c] = acc.iou(c, config.eval_per_episode_iou);
    return rep;
}

/// Full harness: for each fold, train on the other three folds' classes and
/// evaluate on the held-out ones; report per-fold mIoU and the average.
inline Report cross_validate(const data::Dataset& ds, const RunConfig& config,
                             const std::string& out_dir, const std::vector<int>& folds = {0, 1, 2, 3}) {
    Report report;
    report.config = config;
    real sum = 0.0;
    for (int f : folds) {
        const data::FoldSplit split = data::fold_split(ds.num_classes(), f);
        RunConfig fold_cfg = config;
        fold_cfg.seed = Rng(config.seed).fork(2000 + static_cast<std::uint64_t>(f)).seed();
        const std::string fold_dir = out_dir.empty() ? "" : out_dir + "/fold_" + std::to_string(f);
        train::RunOutput run = train::run_training(ds, split.train_classes, fold_cfg, fold_dir, f);
        FoldReport rep = evaluate_fold(run.net, ds, split, fold_cfg);
        sum += rep.miou;
        report.folds.push_back(std::move(rep));
    }
    report.average = sum / static_cast<real>(report.folds.size());
    return report;
}

inline nlohmann::json report_json(const Report& report) {
    nlohmann::json j;
    j["config"] = cfg::to_json(report.config);
    nlohmann::json folds = nlohmann::json::array();
    for (const auto& f : report.folds) {
        nlohmann::json pc;
        for (const auto& [c, v] : f.per_class_iou) pc[std::to_string(c)] = v;
        folds.push_back({{"fold", f.fold},
                         {"k_shot", f.k_shot},
                         {"miou", f.miou},
                         {"episodes", f.episodes},
                         {"seed", f.seed},
                         {"per_class_iou", pc}});
    }
    j["folds"] = folds;
    j["average_miou"] = report.average;
    return j;
}

inline std::string format_miou(real v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

inline std::string report_csv(const Report& report) {
    const auto keys = cfg::to_key_map(report.config);
    const std::string flags = keys.at("ufa.enabled") + "," + keys.at("csm.enabled") + "," +
                              keys.at("ufa.target") + "," + keys.at("csm.k") + "," +
                              keys.at("csm.num_vectors") + ",\"" + keys.at("ufa.positions") + "\"";
    std::string csv =
        "fold,k_shot,miou,episodes,seed,ufa.enabled,csm.enabled,ufa.target,csm.k,csm.num_vectors,"
        "ufa.positions\n";
    for (const auto& f : report.folds)
        csv += std::to_string(f.fold) + "," + std::to_string(f.k_shot) + "," + format_miou(f.miou) +
               "," + std::to_string(f.episodes) + "," + std::to_string(f.seed) + "," + flags + "\n";
    csv += "average,," + format_miou(report.average) + ",,," + flags + "\n";
    return csv;
}

inline void write_report(const Report& report, const std::string& out_dir) {
    util::write_json_file(out_dir + "/report.json", report_json(report));
    util::write_text_file(out_dir + "/report.csv", report_csv(report));
}

}  // namespace episeg::crossval
