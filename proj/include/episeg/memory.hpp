#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <vector>

#include "episeg/autodiff.hpp"
#include "episeg/rng.hpp"
#include "episeg/tensor.hpp"

namespace episeg::mem {

using num::real;
using num::Rng;
using num::Tensor;
using num::Var;

struct BankOptions {
    bool enabled = true;
    int num_vectors = 50;
    int k = 0;  // 0 = all
    real temperature = 1.0;
    bool loss_mean = false;
    bool detach_features = false;
};

/// Bank entries i.i.d. N(0, 1/C) so dot products with unit-scale features
/// stay O(1) up to C=256.
inline Tensor init_bank(int n, int c, Rng& rng) {
    num::require(n >= 1 && c >= 1, "init_bank: N and C must be positive");
    Tensor bank = Tensor::zeros({n, c});
    const real sd = 1.0 / std::sqrt(static_cast<real>(c));
    for (auto& v : bank.data) v = rng.normal() * sd;
    return bank;
}

namespace detail {

/// Row mask keeping, per pixel, the k memory vectors of highest dot-product
/// similarity (ties broken toward the lower index).
inline Tensor topk_mask(const Tensor& scores, int k) {
    const int rows = scores.dim(0), cols = scores.dim(1);
    Tensor mask = Tensor::zeros({rows, cols});
    std::vector<int> idx(static_cast<std::size_t>(cols));
    for (int i = 0; i < rows; ++i) {
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            return scores.at2(i, a) > scores.at2(i, b);
        });
        for (int j = 0; j < k; ++j) mask.at2(i, idx[static_cast<std::size_t>(j)]) = 1.0;
    }
    return mask;
}

}  // namespace detail

/// Replace every pixel vector by the softmax-similarity weighted sum of the
/// memory vectors. Finite k restricts the softmax and sum to the k most
/// similar vectors (re-normalized over those k).
inline Var reencode(const Var& f, const Var& bank, int k = 0, real temperature = 1.0,
                    long* applied_counter = nullptr) {
    num::require(f.shape().size() == 3, "reencode: rank-3 feature expected");
    num::require(bank.shape().size() == 2, "reencode: rank-2 bank expected");
    const int h = f.shape()[0], w = f.shape()[1], c = f.shape()[2];
    const int n = bank.shape()[0];
    num::require(bank.shape()[1] == c, "reencode: channel dimension mismatch");
    num::require(k >= 0 && k <= n, "reencode: k exceeds bank size");

    Var flat = reshape(f, {h * w, c});
    Var scores = matmul(flat, transpose(bank));
    if (temperature != 1.0) {
        num::require(temperature > 0.0, "reencode: temperature must be positive");
        scores = scale(scores, 1.0 / temperature);
    }
    Var weights;
    if (k == 0 || k == n) {
        weights = row_softmax(scores);
    } else {
        const Tensor mask = detail::topk_mask(scores.value(), k);
        weights = row_softmax(scores, &mask);
    }
    Var out = matmul(weights, bank);
    if (applied_counter) ++*applied_counter;
    return reshape(out, {h, w, c});
}

/// Correlation matrix between two maps with background pixels zeroed:
/// entry (i,j) = dot(masked a at pixel i, masked b at pixel j).
inline Tensor correlation(const Tensor& f_orig, const Tensor& f_re, const Tensor& mask) {
    num::require(f_orig.shape == f_re.shape && f_orig.rank() == 3, "correlation: shape mismatch");
    const int h = f_orig.dim(0), w = f_orig.dim(1), c = f_orig.dim(2);
    const long hw = static_cast<long>(h) * w;
    num::require(mask.numel() == hw, "correlation: mask length mismatch");
    Tensor out = Tensor::zeros({static_cast<int>(hw), static_cast<int>(hw)});
    for (long i = 0; i < hw; ++i) {
        if (mask.data[static_cast<std::size_t>(i)] == 0.0) continue;
        for (long j = 0; j < hw; ++j) {
            if (mask.data[static_cast<std::size_t>(j)] == 0.0) continue;
            real s = 0.0;
            for (int cc = 0; cc < c; ++cc)
                s += f_orig.data[static_cast<std::size_t>(i * c + cc)] * f_re.data[static_cast<std::size_t>(j * c + cc)];
            out.at2(static_cast<int>(i), static_cast<int>(j)) = s;
        }
    }
    return out;
}

inline std::vector<int> foreground_indices(const Tensor& mask) {
    std::vector<int> idx;
    for (long i = 0; i < mask.numel(); ++i)
        if (mask.data[static_cast<std::size_t>(i)] != 0.0) idx.push_back(static_cast<int>(i));
    return idx;
}

/// Diagonal cross-entropy over the foreground block of the correlation
/// matrix: each foreground row is softmaxed over foreground columns and the
/// own-pixel probability is pulled up. Fewer than two foreground pixels leave
/// no off-diagonal competition, so the loss is 0.
inline Var recon_loss(const Var& f_orig, const Var& f_re, const Tensor& mask, bool mean = false) {
    num::require(f_orig.shape() == f_re.shape() && f_orig.shape().size() == 3,
                 "recon_loss: shape mismatch");
    const int h = f_orig.shape()[0], w = f_orig.shape()[1], c = f_orig.shape()[2];
    num::require(mask.numel() == static_cast<long>(h) * w, "recon_loss: mask length mismatch");
    const std::vector<int> fg = foreground_indices(mask);
    if (fg.size() < 2) {
        std::fprintf(stderr, "[episeg] recon_loss: degenerate mask (%zu foreground pixels), loss = 0\n",
                     fg.size());
        return Var::constant(Tensor::scalar(0.0));
    }
    Var a = gather_rows(reshape(f_orig, {h * w, c}), fg);
    Var b = gather_rows(reshape(f_re, {h * w, c}), fg);
    Var corr = matmul(a, transpose(b));
    return diag_nll(corr, mean);
}

}  // namespace episeg::mem
