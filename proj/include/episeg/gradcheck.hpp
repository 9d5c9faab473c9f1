#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "episeg/augment.hpp"
#include "episeg/manifest.hpp"
#include "episeg/autodiff.hpp"
#include "episeg/dataset.hpp"
#include "episeg/memory.hpp"
#include "episeg/model.hpp"
#include "episeg/rng.hpp"
#include "episeg/stats.hpp"

namespace episeg::gradcheck {

using num::real;
using num::Rng;
using num::Tensor;
using num::Var;

/// Central-difference comparison of tape gradients for a set of leaves.
/// `forward` must rebuild the scalar loss from the leaves' current values on
/// every call. Error metric per entry: |ad - fd| / max(|ad|, |fd|, 1).
struct FdResult {
    real max_err = 0.0;
    long checked = 0;
};

inline FdResult finite_diff_check(const std::vector<Var>& leaves,
                                  const std::function<Var()>& forward, real step = 1e-4,
                                  int max_per_leaf = 0, Rng* pick = nullptr,
                                  bool flip_sign = false) {
    for (const auto& l : leaves) num::require(l.needs_grad(), "finite_diff_check: leaf lacks grad");
    for (auto l : leaves) l.zero_grad();
    Var loss = forward();
    num::require(loss.numel() == 1, "finite_diff_check: loss must be scalar");
    num::backward(loss);

    FdResult res;
    for (auto leaf : leaves) {
        const std::vector<real> ad = leaf.grad();
        const long n = leaf.numel();
        std::vector<long> indices;
        if (max_per_leaf > 0 && n > max_per_leaf) {
            num::require(pick != nullptr, "finite_diff_check: sampling needs an rng");
            for (int i = 0; i < max_per_leaf; ++i)
                indices.push_back(static_cast<long>(pick->uniform_index(static_cast<std::uint64_t>(n))));
        } else {
            for (long i = 0; i < n; ++i) indices.push_back(i);
        }
        auto& w = leaf.mutable_value().data;
        for (long i : indices) {
            const real saved = w[static_cast<std::size_t>(i)];
            w[static_cast<std::size_t>(i)] = saved + step;
            const real up = forward().value().data[0];
            w[static_cast<std::size_t>(i)] = saved - step;
            const real down = forward().value().data[0];
            w[static_cast<std::size_t>(i)] = saved;
            const real fd = (up - down) / (2.0 * step);
            const real a = flip_sign ? -ad[static_cast<std::size_t>(i)] : ad[static_cast<std::size_t>(i)];
            const real err = std::fabs(a - fd) / std::max({std::fabs(a), std::fabs(fd), 1.0});
            res.max_err = std::max(res.max_err, err);
            ++res.checked;
        }
    }
    return res;
}

struct ComponentResult {
    std::string component;
    real max_rel_err = 0.0;
    real tolerance = 0.0;
    long checked = 0;
    bool pass = false;
};

namespace detail {

inline Tensor random_tensor(std::vector<int> shape, Rng& rng, real scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

inline Var weighted_sum(const Var& x, const Tensor& weights) {
    return sum_all(mul(x, Var::constant(weights)));
}

/// Core tape ops: softmax cross-entropy, the standardize chain and a small
/// conv/matmul stack reduced by fixed random weights.
inline FdResult check_numcore(Rng& rng, bool flip) {
    Var logits = Var::leaf(random_tensor({1, 5}, rng));
    Var fmap = Var::leaf(random_tensor({3, 4, 2}, rng));
    Var w = Var::leaf(random_tensor({3, 3, 2, 3}, rng, 0.5));
    Var b = Var::leaf(random_tensor({3}, rng, 0.1));
    Var m1 = Var::leaf(random_tensor({4, 3}, rng));
    const Tensor sw = random_tensor({3, 4, 3}, rng);
    const Tensor mw = random_tensor({4, 4}, rng);
    auto forward = [&]() {
        Var ce = diag_nll(matmul(transpose(logits), logits));
        auto [mu, sigma] = num::channel_stats(fmap, 1e-3);
        Var std_chain = div_channels(sub_channels(fmap, mu), sigma);
        Var conv = relu(conv2d(std_chain, w, b, 1));
        Var mm = matmul(reshape(spatial_mean(conv), {1, 3}), transpose(m1));
        return add(add(ce, weighted_sum(conv, sw)),
                   add(weighted_sum(reshape(mm, {1, 4}), Tensor({1, 4}, {0.3, -0.2, 0.5, 0.1})),
                       sum_all(bilinear_upsample(reshape(column(m1, 0), {2, 2}), 5, 7))));
    };
    return finite_diff_check({logits, fmap, w, b, m1}, forward, 1e-4, 0, nullptr, flip);
}

/// Gradient of a scalar readout through the full augmentation chain
/// (statistics, resampling offsets as constants, mixing, re-dressing).
inline FdResult check_ufa(Rng& rng, bool flip) {
    Var f_q = Var::leaf(random_tensor({4, 4, 3}, rng));
    Var f_s = Var::leaf(random_tensor({4, 4, 3}, rng));
    const Tensor noise_mu_q = random_tensor({3}, rng, 0.3);
    const Tensor noise_sg_q = random_tensor({3}, rng, 0.1);
    const Tensor noise_mu_s = random_tensor({3}, rng, 0.3);
    const Tensor noise_sg_s = random_tensor({3}, rng, 0.1);
    const real lambda = 0.3;
    const Tensor readout = random_tensor({4, 4, 3}, rng);
    auto forward = [&]() {
        auto [mu_q, sg_q] = num::channel_stats(f_q);
        auto [mu_s, sg_s] = num::channel_stats(f_s);
        Var alpha_q = add(mu_q, Var::constant(noise_mu_q));
        Var beta_q = relu(add(sg_q, Var::constant(noise_sg_q)));
        Var alpha_s = add(mu_s, Var::constant(noise_mu_s));
        Var beta_s = relu(add(sg_s, Var::constant(noise_sg_s)));
        Var alpha_hat = add(scale(alpha_q, lambda), scale(alpha_s, 1.0 - lambda));
        Var beta_hat = add(scale(beta_q, lambda), scale(beta_s, 1.0 - lambda));
        return weighted_sum(aug::apply_ufa(f_q, alpha_hat, beta_hat), readout);
    };
    return finite_diff_check({f_q, f_s}, forward, 1e-4, 0, nullptr, flip);
}

inline FdResult check_reencode(Rng& rng, bool flip) {
    Var f = Var::leaf(random_tensor({3, 3, 4}, rng));
    Var bank = Var::leaf(random_tensor({6, 4}, rng, 0.5));
    const Tensor readout = random_tensor({3, 3, 4}, rng);
    auto forward = [&]() { return weighted_sum(mem::reencode(f, bank), readout); };
    return finite_diff_check({f, bank}, forward, 1e-4, 0, nullptr, flip);
}

inline FdResult check_recon_loss(Rng& rng, bool flip) {
    Var f = Var::leaf(random_tensor({3, 3, 4}, rng));
    Var bank = Var::leaf(random_tensor({5, 4}, rng, 0.5));
    Tensor mask = Tensor::zeros({3, 3});
    mask.at2(0, 0) = 1.0;
    mask.at2(1, 2) = 1.0;
    mask.at2(2, 1) = 1.0;
    auto forward = [&]() {
        Var re = mem::reencode(f, bank);
        return mem::recon_loss(f, re, mask);
    };
    return finite_diff_check({f, bank}, forward, 1e-4, 0, nullptr, flip);
}

inline FdResult check_seg_loss(Rng& rng, bool flip) {
    Var logits = Var::leaf(random_tensor({12, 2}, rng));
    Tensor gt = Tensor::zeros({6, 8});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 8; ++j) gt.at2(i, j) = ((i + j) % 3 == 0) ? 1.0 : 0.0;
    auto forward = [&]() {
        Var probs = reshape(column(row_softmax(logits), 1), {3, 4});
        return model::seg_loss(bilinear_upsample(probs, 6, 8), gt);
    };
    return finite_diff_check({logits}, forward, 1e-4, 0, nullptr, flip);
}

/// Every trainable parameter of a full 8x8-image, C=8 pipeline instance,
/// training-style forward with frozen augmentation draws.
inline FdResult check_end_to_end(Rng& rng, bool flip) {
    model::ModelOptions opts;
    opts.encoder.widths = {4, 8};
    opts.encoder.pools = {1, 0};
    opts.decoder_hidden = 8;
    opts.ufa.positions = {0};
    opts.csm.num_vectors = 5;
    Rng init = rng.fork(77);
    model::Network net = model::build_network(opts, init);

    model::EpisodeData ep;
    ep.q_img = detail::random_tensor({8, 8}, rng, 0.25);
    for (auto& v : ep.q_img.data) v = std::fabs(v);
    Tensor s_img = detail::random_tensor({8, 8}, rng, 0.25);
    for (auto& v : s_img.data) v = std::fabs(v);
    ep.s_imgs.push_back(s_img);
    ep.q_mask = Tensor::zeros({8, 8});
    Tensor s_mask = Tensor::zeros({8, 8});
    for (int i = 2; i < 6; ++i)
        for (int j = 2; j < 6; ++j) {
            ep.q_mask.at2(i, j) = 1.0;
            s_mask.at2(i, j) = 1.0;
        }
    ep.s_masks.push_back(s_mask);

    const std::uint64_t ufa_seed = 99;
    auto forward = [&]() {
        Rng ufa_rng(ufa_seed);  // frozen draws: same noise every evaluation
        std::vector<model::EncodedEpisode> enc =
            model::encode_batch(net, {ep}, aug::Mode::Train, &ufa_rng);
        return model::episode_losses(net, enc[0], ep).total;
    };
    std::vector<Var> leaves;
    for (auto& [name, v] : net.params.items) leaves.push_back(v);
    return finite_diff_check(leaves, forward, 1e-4, 0, nullptr, flip);
}

}  // namespace detail

/// The component suite behind the gradcheck command. `inject_sign_flip`
/// names a component whose analytic gradient is negated before comparison
/// (mutation-test fixture).
inline std::vector<ComponentResult> run_suite(std::uint64_t seed = 20240901,
                                              const std::string& inject_sign_flip = "") {
    struct Entry {
        const char* name;
        real tol;
        FdResult (*fn)(Rng&, bool);
    };
    const Entry entries[] = {
        {"numcore", 1e-3, detail::check_numcore},
        {"ufa_path", 1e-3, detail::check_ufa},
        {"reencode", 1e-3, detail::check_reencode},
        {"recon_loss", 1e-3, detail::check_recon_loss},
        {"seg_loss", 1e-3, detail::check_seg_loss},
        {"end_to_end", 1e-2, detail::check_end_to_end},
    };
    std::vector<ComponentResult> out;
    for (const auto& e : entries) {
        Rng rng(seed + util::fnv1a64(e.name, std::string(e.name).size()) % 1000);
        const bool flip = inject_sign_flip == e.name;
        const FdResult r = e.fn(rng, flip);
        ComponentResult cr;
        cr.component = e.name;
        cr.max_rel_err = r.max_err;
        cr.tolerance = e.tol;
        cr.checked = r.checked;
        cr.pass = r.max_err <= e.tol;
        out.push_back(cr);
    }
    return out;
}

}  // namespace episeg::gradcheck
