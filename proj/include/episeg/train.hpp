#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include <json.hpp>

#include "episeg/checkpoint.hpp"
#include "episeg/config.hpp"
#include "episeg/dataset.hpp"
#include "episeg/memory.hpp"
#include "episeg/metrics.hpp"
#include "episeg/model.hpp"
#include "episeg/rng.hpp"

namespace episeg::train {

using cfg::RunConfig;
using num::real;
using num::Rng;
using num::Tensor;

struct EpochMetrics {
    int epoch = 0;
    real seg = 0.0;
    real recon = 0.0;
    real train_miou = 0.0;
    real probe_recon = 0.0;
};

struct TrainResult {
    std::vector<EpochMetrics> history;
    model::PathCounters counters;
};

// Rng stream tags; fixed so runs are reproducible regardless of call sites.
constexpr std::uint64_t kInitStream = 0;
constexpr std::uint64_t kSamplerStream = 1;
constexpr std::uint64_t kUfaStream = 2;
constexpr std::uint64_t kProbeStream = 3;

inline bool mask_fg_at_least(const Tensor& mask, int hf, int wf, int min_fg) {
    const Tensor m = num::downsample_mask_nearest(mask, hf, wf);
    int fg = 0;
    for (real v : m.data)
        if (v != 0.0 && ++fg >= min_fg) return true;
    return min_fg <= 0;
}

/// Episodes whose query or support foreground vanishes at feature resolution
/// are resampled, never zero-padded.
inline model::EpisodeData sample_trainable_episode(const data::Dataset& ds,
                                                   const std::vector<int>& pool, int k_shot,
                                                   int hf, int wf, Rng& rng) {
    for (int attempt = 0; attempt < 1000; ++attempt) {
        data::Episode ep = data::sample_episode(ds, pool, k_shot, rng);
        if (!mask_fg_at_least(ep.query.mask, hf, wf, 2)) continue;
        bool ok = true;
        for (const auto& s : ep.support)
            if (!mask_fg_at_least(s.mask, hf, wf, 1)) {
                ok = false;
                break;
            }
        if (!ok) continue;
        return model::to_episode_data(ep);
    }
    throw std::runtime_error("sample_trainable_episode: could not draw a usable episode");
}

namespace detail {

/// Reconstruction loss of the frozen probe episode under the current weights
/// (eval-mode forward; the probe never trains).
inline real probe_recon_value(const model::Network& net, const model::EpisodeData& probe) {
    if (!net.opts.csm.enabled) return 0.0;
    std::vector<model::EncodedEpisode> enc =
        model::encode_batch(net, {probe}, aug::Mode::Eval, nullptr);
    const auto& f = enc[0].q_feat;
    const Tensor mask = num::downsample_mask_nearest(probe.q_mask, f.shape()[0], f.shape()[1]);
    num::Var re = mem::reencode(f, net.params.at("memory.bank"), net.opts.csm.k,
                                net.opts.csm.temperature);
    return mem::recon_loss(f, re, mask, net.opts.csm.loss_mean).value().data[0];
}

}  // namespace detail

/// Episodic training on the given class pool: sample a batch of episodes,
/// run them jointly through the hooks, take one SGD step on the mean total
/// loss. Deterministic for a fixed seed.
inline TrainResult train_model(model::Network& net, const data::Dataset& ds,
                               const std::vector<int>& train_classes, const RunConfig& config) {
    num::require(config.epochs >= 0, "train: epochs must be nonnegative");
    num::require(config.batch_size >= 1 && config.batches_per_epoch >= 1,
                 "train: batch sizes must be positive");
    const int factor = net.downsample_factor();
    const int hf = ds.image_size() / factor;
    const int wf = ds.image_size() / factor;
    num::require(hf >= 1 && wf >= 1, "train: encoder downsamples below 1 pixel");

    const Rng root(config.seed);
    Rng sampler = root.fork(kSamplerStream);
    Rng ufa_rng = root.fork(kUfaStream);
    Rng probe_rng = root.fork(kProbeStream);

    const model::EpisodeData probe =
        sample_trainable_episode(ds, train_classes, config.k_shot, hf, wf, probe_rng);

    num::SgdOptimizer opt;
    opt.lr = config.lr;
    opt.momentum = config.momentum;

    TrainResult result;
    EpochMetrics init_row;
    init_row.epoch = 0;
    init_row.probe_recon = detail::probe_recon_value(net, probe);
    result.history.push_back(init_row);

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        real seg_sum = 0.0, recon_sum = 0.0;
        long episode_count = 0;
        metrics::IoUAccumulator train_iou;
        for (int b = 0; b < config.batches_per_epoch; ++b) {
            std::vector<model::EpisodeData> batch;
            for (int i = 0; i < config.batch_size; ++i)
                batch.push_back(
                    sample_trainable_episode(ds, train_classes, config.k_shot, hf, wf, sampler));
            std::vector<model::EncodedEpisode> enc =
                model::encode_batch(net, batch, aug::Mode::Train, &ufa_rng, &result.counters);
            std::vector<num::Var> totals;
            for (std::size_t i = 0; i < batch.size(); ++i) {
                model::EpisodeLosses l =
                    model::episode_losses(net, enc[i], batch[i], &result.counters);
                totals.push_back(l.total);
                seg_sum += l.seg.value().data[0];
                recon_sum += l.recon.value().data[0];
                train_iou.update(batch[i].class_id, metrics::binarize(l.pred_img.value()),
                                 batch[i].q_mask);
                ++episode_count;
            }
            num::Var batch_loss = scale(add_many(totals), 1.0 / static_cast<real>(totals.size()));
            const real loss_val = batch_loss.value().data[0];
            if (!std::isfinite(loss_val))
                throw std::runtime_error(
                    "train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                    std::to_string(b) + " (sampler seed " + std::to_string(sampler.seed()) +
                    ", draws " + std::to_string(sampler.draw_count()) + ")");
            net.params.zero_grad();
            num::backward(batch_loss);
            opt.step(net.params);
        }
        EpochMetrics m;
        m.epoch = epoch;
        m.seg = seg_sum / static_cast<real>(episode_count);
        m.recon = recon_sum / static_cast<real>(episode_count);
        std::vector<int> seen;
        for (const auto& [cls, counts] : train_iou.per_class) seen.push_back(cls);
        m.train_miou = metrics::miou(train_iou, seen);
        m.probe_recon = detail::probe_recon_value(net, probe);
        result.history.push_back(m);
        std::printf("[episeg] epoch %3d  seg %.4f  recon %.4f  train_miou %.4f  probe_recon %.4f\n",
                    m.epoch, m.seg, m.recon, m.train_miou, m.probe_recon);
        std::fflush(stdout);
    }
    return result;
}

inline nlohmann::json history_json(const std::vector<EpochMetrics>& history) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& m : history)
        arr.push_back({{"epoch", m.epoch},
                       {"seg", m.seg},
                       {"recon", m.recon},
                       {"train_miou", m.train_miou},
                       {"probe_recon", m.probe_recon}});
    return arr;
}

/// Build, train, and persist one run: `init/` and `final/` checkpoints plus a
/// manifest that alone reproduces the run.
struct RunOutput {
    model::Network net;
    TrainResult result;
};

inline RunOutput run_training(const data::Dataset& ds, const std::vector<int>& train_classes,
                              const RunConfig& config, const std::string& out_dir, int fold) {
    const Rng root(config.seed);
    Rng init_rng = root.fork(kInitStream);
    RunOutput out{model::build_network(cfg::model_options(config), init_rng), {}};

    nlohmann::json base;
    base["config"] = cfg::to_json(config);
    base["config_hash"] = cfg::config_hash(config);
    base["seed"] = config.seed;
    base["fold"] = fold;
    base["dataset"] = ds.manifest().at("seed");

    if (!out_dir.empty()) {
        nlohmann::json m = base;
        m["epoch"] = 0;
        m["metrics"] = nlohmann::json::array();
        ckpt::save_checkpoint(out_dir + "/init", out.net.params, m);
    }
    out.result = train_model(out.net, ds, train_classes, config);
    if (!out_dir.empty()) {
        nlohmann::json m = base;
        m["epoch"] = config.epochs;
        m["metrics"] = history_json(out.result.history);
        ckpt::save_checkpoint(out_dir + "/final", out.net.params, m);
    }
    return out;
}

}  // namespace episeg::train
