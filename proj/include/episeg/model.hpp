#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "episeg/augment.hpp"
#include "episeg/autodiff.hpp"
#include "episeg/dataset.hpp"
#include "episeg/memory.hpp"
#include "episeg/params.hpp"
#include "episeg/rng.hpp"
#include "episeg/stats.hpp"
#include "episeg/tensor.hpp"

namespace episeg::model {

using aug::Mode;
using num::Params;
using num::real;
using num::Rng;
using num::Tensor;
using num::Var;

struct EncoderOptions {
    std::vector<int> widths{8, 16, 24, 32};  // channels per block
    std::vector<int> pools{1, 1, 0, 0};      // 2x downsample after block i
};

struct ModelOptions {
    EncoderOptions encoder;
    int decoder_hidden = 48;
    aug::UfaOptions ufa;
    mem::BankOptions csm;
    real recon_weight = 1.0;
    real eps_std = num::kEpsStd;
};

struct PathCounters {
    long ufa_applied = 0;
    long csm_applied = 0;
};

struct Network {
    ModelOptions opts;
    Params params;

    int blocks() const { return static_cast<int>(opts.encoder.widths.size()); }
    int feature_channels() const { return opts.encoder.widths.back(); }
    int downsample_factor() const {
        int f = 1;
        for (int p : opts.encoder.pools) f *= p ? 2 : 1;
        return f;
    }
};

namespace detail {

inline Tensor he_normal(std::vector<int> shape, long fan_in, Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    const real sd = std::sqrt(2.0 / static_cast<real>(fan_in));
    for (auto& v : t.data) v = rng.normal() * sd;
    return t;
}

}  // namespace detail

/// Shared-weight encoder, pixel-wise decoder, and (when enabled) the memory
/// bank. The bank is initialized last so toggling it leaves the other
/// initializations untouched.
inline Network build_network(const ModelOptions& opts, Rng& rng) {
    num::require(!opts.encoder.widths.empty(), "build_network: encoder needs at least one block");
    num::require(opts.encoder.widths.size() == opts.encoder.pools.size(),
                 "build_network: widths/pools size mismatch");
    for (int p : opts.ufa.positions)
        num::require(p >= 0 && p < static_cast<int>(opts.encoder.widths.size()),
                     "config error: ufa position out of encoder range");
    Network net;
    net.opts = opts;
    int cin = 1;
    for (std::size_t i = 0; i < opts.encoder.widths.size(); ++i) {
        const int cout = opts.encoder.widths[i];
        const std::string base = "encoder.block" + std::to_string(i);
        net.params.add(base + ".weight", detail::he_normal({3, 3, cin, cout}, 9L * cin, rng));
        net.params.add(base + ".bias", Tensor::zeros({cout}));
        cin = cout;
    }
    const int c3 = 3 * net.feature_channels();
    net.params.add("decoder.fc1.weight", detail::he_normal({c3, opts.decoder_hidden}, c3, rng));
    net.params.add("decoder.fc1.bias", Tensor::zeros({opts.decoder_hidden}));
    net.params.add("decoder.fc2.weight",
                   detail::he_normal({opts.decoder_hidden, 2}, opts.decoder_hidden, rng));
    net.params.add("decoder.fc2.bias", Tensor::zeros({2}));
    if (opts.csm.enabled)
        net.params.add("memory.bank", mem::init_bank(opts.csm.num_vectors, net.feature_channels(), rng));
    return net;
}

/// One episode at image resolution, ready for the network.
struct EpisodeData {
    Tensor q_img;                 // (H,W)
    Tensor q_mask;                // (H,W) binary
    std::vector<Tensor> s_imgs;   // K entries
    std::vector<Tensor> s_masks;  // K entries
    int class_id = 0;
};

inline EpisodeData to_episode_data(const data::Episode& ep) {
    EpisodeData d;
    d.q_img = ep.query.image;
    d.q_mask = ep.query.mask;
    for (const auto& s : ep.support) {
        d.s_imgs.push_back(s.image);
        d.s_masks.push_back(s.mask);
    }
    d.class_id = ep.class_id;
    return d;
}

struct EncodedEpisode {
    Var q_feat;
    std::vector<Var> s_feats;
};

namespace detail {

inline Var encoder_block(const Network& net, const Var& x, int i) {
    const std::string base = "encoder.block" + std::to_string(i);
    Var y = conv2d(x, net.params.at(base + ".weight"), net.params.at(base + ".bias"), 1);
    y = relu(y);
    if (net.opts.encoder.pools[static_cast<std::size_t>(i)]) y = avgpool2(y);
    return y;
}

inline Var image_var(const Tensor& img) {
    num::require(img.rank() == 2, "encode: rank-2 grayscale image expected");
    return Var::constant(Tensor({img.dim(0), img.dim(1), 1}, img.data));
}

}  // namespace detail

/// Encode a batch of episodes through the shared encoder. In train mode the
/// query stream is routed through the augmentation hook after every block
/// listed in ufa.positions; uncertainties pool the whole batch.
inline std::vector<EncodedEpisode> encode_batch(const Network& net,
                                                const std::vector<EpisodeData>& batch, Mode mode,
                                                Rng* rng, PathCounters* counters = nullptr) {
    num::require(!batch.empty(), "encode_batch: empty batch");
    std::vector<aug::StreamPair> streams;
    streams.reserve(batch.size());
    for (const auto& ep : batch) {
        aug::StreamPair sp;
        sp.query = detail::image_var(ep.q_img);
        for (const auto& s : ep.s_imgs) sp.supports.push_back(detail::image_var(s));
        streams.push_back(std::move(sp));
    }
    const bool hook_active = mode == Mode::Train && net.opts.ufa.enabled;
    if (hook_active) num::require(rng != nullptr, "encode_batch: train mode requires an rng");
    for (int b = 0; b < net.blocks(); ++b) {
        for (auto& sp : streams) {
            sp.query = detail::encoder_block(net, sp.query, b);
            for (auto& s : sp.supports) s = detail::encoder_block(net, s, b);
        }
        const auto& pos = net.opts.ufa.positions;
        if (hook_active && std::find(pos.begin(), pos.end(), b) != pos.end())
            streams = aug::ufa_hook(streams, mode, net.opts.ufa, *rng,
                                    counters ? &counters->ufa_applied : nullptr, net.opts.eps_std);
    }
    std::vector<EncodedEpisode> out;
    out.reserve(streams.size());
    for (auto& sp : streams) out.push_back({sp.query, std::move(sp.supports)});
    return out;
}

/// Plain eval-mode encoding of one image (no hooks).
inline Var encode_single(const Network& net, const Tensor& img) {
    Var x = detail::image_var(img);
    for (int b = 0; b < net.blocks(); ++b) x = detail::encoder_block(net, x, b);
    return x;
}

/// Masked average pooling over foreground pixels of a support feature.
inline Var prototype(const Var& f_s, const Tensor& feat_mask) {
    num::require(f_s.shape().size() == 3, "prototype: rank-3 feature expected");
    const int h = f_s.shape()[0], w = f_s.shape()[1];
    num::require(feat_mask.rank() == 2 && feat_mask.dim(0) == h && feat_mask.dim(1) == w,
                 "prototype: mask must match feature resolution");
    real fg = 0.0;
    for (real v : feat_mask.data) fg += (v != 0.0) ? 1.0 : 0.0;
    num::require(fg >= 1.0, "empty support mask");
    Var masked = mul_spatial(f_s, Var::constant(feat_mask));
    return scale(spatial_mean(masked), static_cast<real>(h) * w / fg);
}

inline Var kshot_prototype(const std::vector<Var>& protos) {
    num::require(!protos.empty(), "kshot_prototype: K must be >= 1");
    if (protos.size() == 1) return protos[0];
    return scale(add_many(protos), 1.0 / static_cast<real>(protos.size()));
}

struct Decoded {
    Var probs_feat;  // (Hf,Wf) foreground probability
    Var probs_img;   // (H0,W0) bilinear upsample for scoring
};

/// Concatenate [re-encoded ; augmented ; broadcast prototype], run the
/// pixel-wise two-layer head, and upsample the foreground probability.
inline Decoded decode(const Network& net, const Var& f_re, const Var& f_aug, const Var& proto,
                      int img_h, int img_w) {
    num::require(f_re.shape() == f_aug.shape(), "decode: feature shape mismatch");
    const int h = f_re.shape()[0], w = f_re.shape()[1], c = f_re.shape()[2];
    num::require(proto.shape() == std::vector<int>{c}, "decode: prototype dimension mismatch");
    Var stacked = num::concat_channels({f_re, f_aug, broadcast_channels(proto, h, w)});
    Var flat = reshape(stacked, {h * w, 3 * c});
    Var hidden = relu(add_rowvec(matmul(flat, net.params.at("decoder.fc1.weight")),
                                 net.params.at("decoder.fc1.bias")));
    Var logits = add_rowvec(matmul(hidden, net.params.at("decoder.fc2.weight")),
                            net.params.at("decoder.fc2.bias"));
    Var probs = reshape(column(row_softmax(logits), 1), {h, w});
    Decoded out;
    out.probs_feat = probs;
    out.probs_img = bilinear_upsample(probs, img_h, img_w);
    return out;
}

inline Var seg_loss(const Var& probs_img, const Tensor& gt_mask) {
    return bce_loss(probs_img, gt_mask);
}

inline Var total_loss(const Var& seg, const Var& recon, real recon_weight = 1.0) {
    if (recon_weight == 1.0) return add(seg, recon);
    return add(seg, scale(recon, recon_weight));
}

struct EpisodeLosses {
    Var total;
    Var seg;
    Var recon;
    Var pred_img;
};

/// Assemble the per-episode objective from encoded streams: memory
/// re-encoding, prototype, decode, segmentation and reconstruction terms.
inline EpisodeLosses episode_losses(const Network& net, const EncodedEpisode& enc,
                                    const EpisodeData& ep, PathCounters* counters = nullptr,
                                    bool with_recon = true) {
    const auto& fshape = enc.q_feat.shape();
    const int hf = fshape[0], wf = fshape[1];
    const Tensor q_mask_f = num::downsample_mask_nearest(ep.q_mask, hf, wf);

    const auto& csm = net.opts.csm;
    long* csm_counter = counters ? &counters->csm_applied : nullptr;
    const int k = csm.k;

    Var f_aug = enc.q_feat;
    Var f_re = f_aug;
    Var recon;
    if (csm.enabled) {
        const Var& bank = net.params.at("memory.bank");
        f_re = mem::reencode(f_aug, bank, k, csm.temperature, csm_counter);
        if (with_recon) {
            Var q_orig = csm.detach_features ? f_aug.detach() : f_aug;
            Var q_re = csm.detach_features ? mem::reencode(q_orig, bank, k, csm.temperature) : f_re;
            std::vector<Var> terms;
            terms.push_back(mem::recon_loss(q_orig, q_re, q_mask_f, csm.loss_mean));
            std::vector<Var> sup_terms;
            for (std::size_t i = 0; i < enc.s_feats.size(); ++i) {
                Var s_orig = csm.detach_features ? enc.s_feats[i].detach() : enc.s_feats[i];
                Var s_re = mem::reencode(s_orig, bank, k, csm.temperature, csm_counter);
                const Tensor s_mask_f = num::downsample_mask_nearest(ep.s_masks[i], hf, wf);
                sup_terms.push_back(mem::recon_loss(s_orig, s_re, s_mask_f, csm.loss_mean));
            }
            terms.push_back(scale(add_many(sup_terms), 1.0 / static_cast<real>(sup_terms.size())));
            recon = add_many(terms);
        }
    }
    if (!recon.defined()) recon = Var::constant(Tensor::scalar(0.0));

    std::vector<Var> protos;
    for (std::size_t i = 0; i < enc.s_feats.size(); ++i) {
        const Tensor s_mask_f = num::downsample_mask_nearest(ep.s_masks[i], hf, wf);
        protos.push_back(prototype(enc.s_feats[i], s_mask_f));
    }
    Var proto = kshot_prototype(protos);

    Decoded dec = decode(net, f_re, f_aug, proto, ep.q_img.dim(0), ep.q_img.dim(1));
    EpisodeLosses out;
    out.pred_img = dec.probs_img;
    out.seg = seg_loss(dec.probs_img, ep.q_mask);
    out.recon = recon;
    out.total = csm.enabled && with_recon ? total_loss(out.seg, out.recon, net.opts.recon_weight)
                                          : out.seg;
    return out;
}

/// Inference: UFA off, trained memory re-encoding active, no rng consumed,
/// no parameter touched. Returns the image-resolution probability map.
inline Tensor infer(const Network& net, const EpisodeData& ep, PathCounters* counters = nullptr) {
    std::vector<EncodedEpisode> enc = encode_batch(net, {ep}, Mode::Eval, nullptr, counters);
    const Var& f_aug = enc[0].q_feat;
    Var f_re = f_aug;
    if (net.opts.csm.enabled)
        f_re = mem::reencode(f_aug, net.params.at("memory.bank"), net.opts.csm.k,
                             net.opts.csm.temperature, counters ? &counters->csm_applied : nullptr);
    const int hf = f_aug.shape()[0], wf = f_aug.shape()[1];
    std::vector<Var> protos;
    for (std::size_t i = 0; i < enc[0].s_feats.size(); ++i)
        protos.push_back(prototype(enc[0].s_feats[i], num::downsample_mask_nearest(ep.s_masks[i], hf, wf)));
    Decoded dec = decode(net, f_re, f_aug, kshot_prototype(protos), ep.q_img.dim(0), ep.q_img.dim(1));
    return dec.probs_img.value();
}

}  // namespace episeg::model
