#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "episeg/autodiff.hpp"
#include "episeg/tensor.hpp"

namespace episeg::num {

/// Named collection of trainable leaf arrays with co-shaped gradients.
/// Ordered map so every iteration (optimizer steps, checkpointing, gradient
/// checks) is deterministic.
struct Params {
    std::map<std::string, Var> items;

    Var& add(const std::string& name, Tensor init) {
        if (items.count(name)) throw std::runtime_error("params: duplicate name " + name);
        auto [it, ok] = items.emplace(name, Var::leaf(std::move(init)));
        (void)ok;
        return it->second;
    }

    Var& at(const std::string& name) {
        auto it = items.find(name);
        if (it == items.end()) throw std::runtime_error("params: unknown name " + name);
        return it->second;
    }
    const Var& at(const std::string& name) const {
        auto it = items.find(name);
        if (it == items.end()) throw std::runtime_error("params: unknown name " + name);
        return it->second;
    }

    bool has(const std::string& name) const { return items.count(name) != 0; }

    void zero_grad() {
        for (auto& [name, v] : items) v.zero_grad();
    }

    long total_size() const {
        long n = 0;
        for (const auto& [name, v] : items) n += v.numel();
        return n;
    }
};

/// Plain SGD with optional momentum; velocity buffers keyed like the params.
struct SgdOptimizer {
    real lr = 0.05;
    real momentum = 0.9;
    std::map<std::string, std::vector<real>> velocity;

    void step(Params& params) {
        for (auto& [name, v] : params.items) {
            auto& w = v.mutable_value().data;
            const auto& g = v.grad();
            if (momentum > 0.0) {
                auto& vel = velocity[name];
                if (vel.size() != w.size()) vel.assign(w.size(), 0.0);
                for (std::size_t i = 0; i < w.size(); ++i) {
                    vel[i] = momentum * vel[i] + g[i];
                    w[i] -= lr * vel[i];
                }
            } else {
                for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * g[i];
            }
        }
    }
};

}  // namespace episeg::num
