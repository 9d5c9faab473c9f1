#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace episeg::num {

using real = double;

/// Dense row-major array, rank 1..4. Rank-3 maps use (height, width, channel)
/// layout with the channel index fastest.
struct Tensor {
    std::vector<int> shape;
    std::vector<real> data;

    Tensor() = default;
    Tensor(std::vector<int> s, std::vector<real> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<std::size_t>(numel_of(shape)) != data.size())
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static long numel_of(const std::vector<int>& s) {
        long n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
            n *= d;
        }
        return s.empty() ? 0 : n;
    }

    static Tensor zeros(std::vector<int> s) {
        long n = numel_of(s);
        return Tensor(std::move(s), std::vector<real>(static_cast<std::size_t>(n), 0.0));
    }
    static Tensor full(std::vector<int> s, real v) {
        long n = numel_of(s);
        return Tensor(std::move(s), std::vector<real>(static_cast<std::size_t>(n), v));
    }
    static Tensor scalar(real v) { return Tensor({1}, {v}); }

    int rank() const { return static_cast<int>(shape.size()); }
    long numel() const { return static_cast<long>(data.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

    real& at2(int i, int j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    real at2(int i, int j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
    real& at3(int h, int w, int c) {
        return data[static_cast<std::size_t>((h * shape[1] + w) * shape[2] + c)];
    }
    real at3(int h, int w, int c) const {
        return data[static_cast<std::size_t>((h * shape[1] + w) * shape[2] + c)];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (real v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::runtime_error(msg);
}

/// Nearest-neighbor downsample of a binary (H,W) mask to (h2,w2). Source index
/// is floor(i * H / h2), which keeps values exactly in {0,1}.
inline Tensor downsample_mask_nearest(const Tensor& mask, int h2, int w2) {
    require(mask.rank() == 2, "downsample_mask_nearest: mask must be rank 2");
    const int h = mask.dim(0), w = mask.dim(1);
    Tensor out = Tensor::zeros({h2, w2});
    for (int i = 0; i < h2; ++i) {
        const int si = static_cast<int>(static_cast<long>(i) * h / h2);
        for (int j = 0; j < w2; ++j) {
            const int sj = static_cast<int>(static_cast<long>(j) * w / w2);
            out.at2(i, j) = mask.at2(si, sj);
        }
    }
    return out;
}

}  // namespace episeg::num
