#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "episeg/autodiff.hpp"
#include "episeg/rng.hpp"
#include "episeg/stats.hpp"
#include "episeg/tensor.hpp"

namespace episeg::aug {

using num::ChannelStats;
using num::real;
using num::Rng;
using num::Tensor;
using num::Var;

enum class Mode { Train, Eval };
enum class UfaTarget { QueryOnly, Both };
enum class ScaleMode { Variance, Stddev };

/// Mini-batch variance of the per-map channel statistics: the uncertainty
/// each statistic is later resampled under.
struct StatUncertainty {
    std::vector<real> var_mu;
    std::vector<real> var_sigma;
    int batch_size = 0;
};

struct SampledStats {
    std::vector<real> alpha;  // sampled mean
    std::vector<real> beta;   // sampled std, clamped >= 0
};

struct MixedStats {
    std::vector<real> alpha_hat;
    std::vector<real> beta_hat;
    real lambda = 0.0;
};

struct UfaOptions {
    bool enabled = true;
    real gamma = 0.1;
    UfaTarget target = UfaTarget::QueryOnly;
    ScaleMode scale_mode = ScaleMode::Variance;
    std::vector<int> positions{1, 2};
};

/// Population variance of each statistic across the mini-batch.
inline StatUncertainty estimate_uncertainty(const std::vector<ChannelStats>& batch) {
    num::require(!batch.empty(), "estimate_uncertainty: empty batch");
    const int c = batch[0].channels();
    for (const auto& s : batch)
        num::require(s.channels() == c, "estimate_uncertainty: channel count mismatch");
    const int n = static_cast<int>(batch.size());
    StatUncertainty u;
    u.batch_size = n;
    u.var_mu.assign(static_cast<std::size_t>(c), 0.0);
    u.var_sigma.assign(static_cast<std::size_t>(c), 0.0);
    // Shifted two-pass: identical batches and N_bs = 1 give exactly zero.
    auto pop_var = [n](auto&& get, real shift) {
        real mean = 0.0;
        for (int i = 0; i < n; ++i) mean += get(i) - shift;
        mean /= n;
        real var = 0.0;
        for (int i = 0; i < n; ++i) {
            const real d = (get(i) - shift) - mean;
            var += d * d;
        }
        return var / n;
    };
    for (int j = 0; j < c; ++j) {
        const std::size_t jj = static_cast<std::size_t>(j);
        u.var_mu[jj] = pop_var([&](int i) { return batch[static_cast<std::size_t>(i)].mu[jj]; },
                               batch[0].mu[jj]);
        u.var_sigma[jj] = pop_var([&](int i) { return batch[static_cast<std::size_t>(i)].sigma[jj]; },
                                  batch[0].sigma[jj]);
    }
    return u;
}

namespace detail {
inline real noise_scale(real variance, ScaleMode mode) {
    return mode == ScaleMode::Variance ? variance : std::sqrt(variance);
}
}  // namespace detail

/// Resample the statistics under their uncertainty with caller-supplied
/// per-channel noise (the test hook; the rng overload draws the noise).
inline SampledStats reparameterize_forced(const ChannelStats& s, const StatUncertainty& u,
                                          const std::vector<real>& eps_mu,
                                          const std::vector<real>& eps_sigma,
                                          ScaleMode mode = ScaleMode::Variance) {
    const int c = s.channels();
    num::require(static_cast<int>(u.var_mu.size()) == c && static_cast<int>(u.var_sigma.size()) == c,
                 "reparameterize: uncertainty shape mismatch");
    num::require(static_cast<int>(eps_mu.size()) == c && static_cast<int>(eps_sigma.size()) == c,
                 "reparameterize: noise shape mismatch");
    SampledStats out;
    out.alpha.resize(static_cast<std::size_t>(c));
    out.beta.resize(static_cast<std::size_t>(c));
    for (int j = 0; j < c; ++j) {
        const std::size_t i = static_cast<std::size_t>(j);
        out.alpha[i] = s.mu[i] + eps_mu[i] * detail::noise_scale(u.var_mu[i], mode);
        out.beta[i] = std::max<real>(0.0, s.sigma[i] + eps_sigma[i] * detail::noise_scale(u.var_sigma[i], mode));
    }
    return out;
}

inline SampledStats reparameterize(const ChannelStats& s, const StatUncertainty& u, Rng& rng,
                                   ScaleMode mode = ScaleMode::Variance) {
    const int c = s.channels();
    return reparameterize_forced(s, u, rng.normal_vector(c), rng.normal_vector(c), mode);
}

inline MixedStats mix_stats_forced(const SampledStats& q, const SampledStats& s, real lambda) {
    num::require(q.alpha.size() == s.alpha.size(), "mix_stats: channel count mismatch");
    MixedStats out;
    out.lambda = lambda;
    out.alpha_hat.resize(q.alpha.size());
    out.beta_hat.resize(q.beta.size());
    for (std::size_t i = 0; i < q.alpha.size(); ++i) {
        out.alpha_hat[i] = lambda * q.alpha[i] + (1.0 - lambda) * s.alpha[i];
        out.beta_hat[i] = lambda * q.beta[i] + (1.0 - lambda) * s.beta[i];
    }
    return out;
}

/// One Beta(gamma,gamma) weight per episode mixes query and support statistics.
inline MixedStats mix_stats(const SampledStats& q, const SampledStats& s, Rng& rng, real gamma = 0.1) {
    return mix_stats_forced(q, s, rng.beta_symmetric(gamma));
}

/// Strip the query feature's own statistics and re-dress it with the mixed
/// ones; differentiable in f_q (and in the mixed stats when they are on tape).
inline Var apply_ufa(const Var& f_q, const Var& alpha_hat, const Var& beta_hat,
                     real eps_std = num::kEpsStd) {
    for (real b : beta_hat.value().data)
        num::require(b >= 0.0, "apply_ufa: beta_hat must be nonnegative");
    auto [mu, sigma] = num::channel_stats(f_q, eps_std);
    Var standardized = div_channels(sub_channels(f_q, mu), sigma);
    return add_channels(mul_channels(standardized, beta_hat), alpha_hat);
}

inline Tensor apply_ufa(const Tensor& f_q, const MixedStats& m, real eps_std = num::kEpsStd) {
    Var out = apply_ufa(Var::constant(f_q), Var::constant(Tensor({static_cast<int>(m.alpha_hat.size())}, m.alpha_hat)),
                        Var::constant(Tensor({static_cast<int>(m.beta_hat.size())}, m.beta_hat)), eps_std);
    return out.value();
}

/// One episode's feature streams at a hook position.
struct StreamPair {
    Var query;
    std::vector<Var> supports;
};

namespace detail {

inline std::pair<Var, Var> episode_support_stats(const std::vector<Var>& supports, real eps_std) {
    num::require(!supports.empty(), "ufa_hook: episode without support features");
    std::vector<Var> mus, sigmas;
    for (const auto& s : supports) {
        auto [mu, sg] = num::channel_stats(s, eps_std);
        mus.push_back(mu);
        sigmas.push_back(sg);
    }
    const real inv = 1.0 / static_cast<real>(supports.size());
    return {scale(add_many(mus), inv), scale(add_many(sigmas), inv)};
}

inline std::vector<real> scaled_noise(const std::vector<real>& variance, Rng& rng, ScaleMode mode) {
    std::vector<real> out(variance.size());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = rng.normal() * noise_scale(variance[i], mode);
    return out;
}

inline Var sampled_mean(const Var& mu, const std::vector<real>& offset) {
    return add(mu, Var::constant(Tensor({static_cast<int>(offset.size())}, offset)));
}
inline Var sampled_std(const Var& sigma, const std::vector<real>& offset) {
    return relu(add(sigma, Var::constant(Tensor({static_cast<int>(offset.size())}, offset))));
}

}  // namespace detail

/// The feature-augmentation hook. Eval mode is the identity on both streams.
/// In train mode each query feature is re-dressed with statistics mixed from
/// the episode's resampled query/support statistics; uncertainties come from
/// the current mini-batch only and enter as detached constants.
inline std::vector<StreamPair> ufa_hook(const std::vector<StreamPair>& batch, Mode mode,
                                        const UfaOptions& opts, Rng& rng,
                                        long* applied_counter = nullptr,
                                        real eps_std = num::kEpsStd) {
    num::require(!batch.empty(), "ufa_hook: empty batch");
    if (mode == Mode::Eval || !opts.enabled) return batch;

    std::vector<ChannelStats> q_stats;
    std::vector<ChannelStats> s_stats;
    for (const auto& ep : batch) {
        q_stats.push_back(num::channel_stats(ep.query.value(), eps_std));
        for (const auto& s : ep.supports) s_stats.push_back(num::channel_stats(s.value(), eps_std));
    }
    const StatUncertainty u_q = estimate_uncertainty(q_stats);
    const StatUncertainty u_s = estimate_uncertainty(s_stats);

    std::vector<StreamPair> out;
    out.reserve(batch.size());
    for (const auto& ep : batch) {
        auto [mu_q, sg_q] = num::channel_stats(ep.query, eps_std);
        Var alpha_q = detail::sampled_mean(mu_q, detail::scaled_noise(u_q.var_mu, rng, opts.scale_mode));
        Var beta_q = detail::sampled_std(sg_q, detail::scaled_noise(u_q.var_sigma, rng, opts.scale_mode));

        auto [mu_s, sg_s] = detail::episode_support_stats(ep.supports, eps_std);
        Var alpha_s = detail::sampled_mean(mu_s, detail::scaled_noise(u_s.var_mu, rng, opts.scale_mode));
        Var beta_s = detail::sampled_std(sg_s, detail::scaled_noise(u_s.var_sigma, rng, opts.scale_mode));

        const real lambda = rng.beta_symmetric(opts.gamma);
        Var alpha_hat = add(scale(alpha_q, lambda), scale(alpha_s, 1.0 - lambda));
        Var beta_hat = add(scale(beta_q, lambda), scale(beta_s, 1.0 - lambda));

        StreamPair res;
        res.query = apply_ufa(ep.query, alpha_hat, beta_hat, eps_std);
        if (applied_counter) ++*applied_counter;

        if (opts.target == UfaTarget::Both) {
            const real lambda_s = rng.beta_symmetric(opts.gamma);
            for (const auto& s : ep.supports) {
                auto [mu_m, sg_m] = num::channel_stats(s, eps_std);
                Var a_m = detail::sampled_mean(mu_m, detail::scaled_noise(u_s.var_mu, rng, opts.scale_mode));
                Var b_m = detail::sampled_std(sg_m, detail::scaled_noise(u_s.var_sigma, rng, opts.scale_mode));
                Var a_mix = add(scale(a_m, lambda_s), scale(alpha_q, 1.0 - lambda_s));
                Var b_mix = add(scale(b_m, lambda_s), scale(beta_q, 1.0 - lambda_s));
                res.supports.push_back(apply_ufa(s, a_mix, b_mix, eps_std));
                if (applied_counter) ++*applied_counter;
            }
        } else {
            res.supports = ep.supports;
        }
        out.push_back(std::move(res));
    }
    return out;
}

}  // namespace episeg::aug
