#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg::num {

// Repo tensor file format: magic "EPSG", u32 rank, u32 dims[rank], then the
// values as little-endian 32-bit floats in row-major order.

namespace detail {

inline void put_u32(std::string& buf, std::uint32_t v) {
    buf.push_back(static_cast<char>(v & 0xFF));
    buf.push_back(static_cast<char>((v >> 8) & 0xFF));
    buf.push_back(static_cast<char>((v >> 16) & 0xFF));
    buf.push_back(static_cast<char>((v >> 24) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
    std::string buf;
    buf.reserve(8 + 4 * t.shape.size() + 4 * t.data.size());
    buf += "EPSG";
    detail::put_u32(buf, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) detail::put_u32(buf, static_cast<std::uint32_t>(d));
    for (real v : t.data) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        detail::put_u32(buf, bits);
    }
    return buf;
}

inline Tensor decode_tensor(const std::string& buf, const std::string& what = "tensor") {
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());
    if (buf.size() < 8 || std::memcmp(p, "EPSG", 4) != 0)
        throw std::runtime_error(what + ": bad magic, not a tensor file");
    const std::uint32_t rank = detail::get_u32(p + 4);
    if (rank < 1 || rank > 4) throw std::runtime_error(what + ": unsupported rank");
    if (buf.size() < 8 + 4ull * rank) throw std::runtime_error(what + ": truncated header");
    std::vector<int> shape(rank);
    long n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int>(detail::get_u32(p + 8 + 4 * i));
        if (shape[i] <= 0) throw std::runtime_error(what + ": nonpositive dimension");
        n *= shape[i];
    }
    const std::size_t off = 8 + 4ull * rank;
    if (buf.size() != off + 4ull * static_cast<std::size_t>(n))
        throw std::runtime_error(what + ": payload size mismatch");
    std::vector<real> data(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) {
        const std::uint32_t bits = detail::get_u32(p + off + 4 * static_cast<std::size_t>(i));
        float f;
        std::memcpy(&f, &bits, 4);
        data[static_cast<std::size_t>(i)] = static_cast<real>(f);
    }
    return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    const std::string buf = encode_tensor(t);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open tensor file: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_tensor(buf, path);
}

}  // namespace episeg::num
