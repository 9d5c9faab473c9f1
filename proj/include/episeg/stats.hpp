#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "episeg/autodiff.hpp"
#include "episeg/tensor.hpp"

namespace episeg::num {

/// Guard added inside the square root of the channel std so constant maps
/// never divide by zero downstream.
constexpr real kEpsStd = 1e-5;

/// Per-channel mean and standard deviation over the spatial positions of a
/// feature map. sigma uses the population (1/N) variance.
struct ChannelStats {
    std::vector<real> mu;
    std::vector<real> sigma;
    int channels() const { return static_cast<int>(mu.size()); }
};

inline ChannelStats channel_stats(const Tensor& f, real eps_std = kEpsStd) {
    require(f.rank() == 3, "channel_stats: rank-3 feature map expected");
    const int h = f.dim(0), w = f.dim(1), c = f.dim(2);
    const long hw = static_cast<long>(h) * w;
    require(hw >= 1, "degenerate feature map");
    ChannelStats s;
    s.mu.assign(static_cast<std::size_t>(c), 0.0);
    s.sigma.assign(static_cast<std::size_t>(c), 0.0);
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) s.mu[static_cast<std::size_t>(j)] += f.data[static_cast<std::size_t>(p * c + j)];
    for (auto& v : s.mu) v /= static_cast<real>(hw);
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) {
            const real d = f.data[static_cast<std::size_t>(p * c + j)] - s.mu[static_cast<std::size_t>(j)];
            s.sigma[static_cast<std::size_t>(j)] += d * d;
        }
    for (auto& v : s.sigma) v = std::sqrt(v / static_cast<real>(hw) + eps_std);
    return s;
}

/// Tape version: (mu, sigma) as differentiable vectors.
inline std::pair<Var, Var> channel_stats(const Var& f, real eps_std = kEpsStd) {
    Var mu = spatial_mean(f);
    Var centered = sub_channels(f, mu);
    Var var = spatial_mean(mul(centered, centered));
    Var sigma = sqrt(add_scalar(var, eps_std));
    return {mu, sigma};
}

inline Tensor standardize(const Tensor& f, const ChannelStats& s) {
    require(f.rank() == 3 && f.dim(2) == s.channels(), "standardize: shape mismatch");
    for (real v : s.sigma) require(v > 0.0, "standardize: sigma must be positive");
    Tensor out = f;
    const long hw = static_cast<long>(f.dim(0)) * f.dim(1);
    const int c = f.dim(2);
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) {
            real& x = out.data[static_cast<std::size_t>(p * c + j)];
            x = (x - s.mu[static_cast<std::size_t>(j)]) / s.sigma[static_cast<std::size_t>(j)];
        }
    return out;
}

inline Tensor destandardize(const Tensor& f, const ChannelStats& s) {
    require(f.rank() == 3 && f.dim(2) == s.channels(), "destandardize: shape mismatch");
    Tensor out = f;
    const long hw = static_cast<long>(f.dim(0)) * f.dim(1);
    const int c = f.dim(2);
    for (long p = 0; p < hw; ++p)
        for (int j = 0; j < c; ++j) {
            real& x = out.data[static_cast<std::size_t>(p * c + j)];
            x = x * s.sigma[static_cast<std::size_t>(j)] + s.mu[static_cast<std::size_t>(j)];
        }
    return out;
}

/// Max-shifted softmax of a plain vector.
inline std::vector<real> softmax(const std::vector<real>& v) {
    require(!v.empty(), "softmax: empty input");
    real mx = v[0];
    for (real x : v) {
        require(std::isfinite(x), "softmax: non-finite input");
        mx = std::max(mx, x);
    }
    std::vector<real> out(v.size());
    real z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        z += out[i];
    }
    for (auto& x : out) x /= z;
    return out;
}

}  // namespace episeg::num
