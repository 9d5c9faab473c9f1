#pragma once

#include <cstdio>
#include <map>
#include <vector>

#include "episeg/tensor.hpp"

namespace episeg::metrics {

using num::real;
using num::Tensor;

inline Tensor binarize(const Tensor& probs, real threshold = 0.5) {
    Tensor out = probs;
    for (auto& v : out.data) v = v >= threshold ? 1.0 : 0.0;
    return out;
}

/// Per-class running intersection and union pixel counts accumulated over all
/// test episodes of that class (dataset-level IoU). The per-episode variant
/// averages one IoU per episode instead.
struct IoUAccumulator {
    struct Counts {
        long intersection = 0;
        long uni = 0;
        real episode_iou_sum = 0.0;
        long episodes = 0;
    };
    std::map<int, Counts> per_class;

    void update(int class_id, const Tensor& pred_bin, const Tensor& gt) {
        num::require(pred_bin.shape == gt.shape, "iou: shape mismatch");
        long inter = 0, uni = 0;
        for (std::size_t i = 0; i < gt.data.size(); ++i) {
            const bool p = pred_bin.data[i] != 0.0;
            const bool g = gt.data[i] != 0.0;
            inter += (p && g);
            uni += (p || g);
        }
        auto& c = per_class[class_id];
        c.intersection += inter;
        c.uni += uni;
        c.episode_iou_sum += uni > 0 ? static_cast<real>(inter) / static_cast<real>(uni) : 0.0;
        c.episodes += 1;
    }

    real iou(int class_id, bool per_episode = false) const {
        const auto& c = per_class.at(class_id);
        if (per_episode) return c.episodes > 0 ? c.episode_iou_sum / static_cast<real>(c.episodes) : 0.0;
        num::require(c.uni > 0, "iou: class has zero union");
        return static_cast<real>(c.intersection) / static_cast<real>(c.uni);
    }
};

/// Unweighted mean of per-class IoU; classes with zero union are excluded
/// with a warning.
inline real miou(const IoUAccumulator& acc, const std::vector<int>& classes,
                 bool per_episode = false) {
    real sum = 0.0;
    int used = 0;
    for (int c : classes) {
        auto it = acc.per_class.find(c);
        if (it == acc.per_class.end() || it->second.uni == 0) {
            std::fprintf(stderr, "[episeg] miou: class %d has zero union, excluded\n", c);
            continue;
        }
        sum += acc.iou(c, per_episode);
        ++used;
    }
    num::require(used > 0, "miou: no class with positive union");
    return sum / static_cast<real>(used);
}

}  // namespace episeg::metrics
