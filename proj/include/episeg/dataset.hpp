#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "episeg/rng.hpp"
#include "episeg/tensor.hpp"
#include "episeg/tensor_io.hpp"

namespace episeg::data {

using num::real;
using num::Rng;
using num::Tensor;

// Synthetic shape-segmentation corpus. Every class is one shape family plus
// an intensity/texture signature; images carry background noise and up to two
// distractor objects from other classes, so masks mark class identity rather
// than plain figure/ground.

inline const std::vector<std::string>& shape_families() {
    static const std::vector<std::string> families = {
        "circle", "ring", "square", "bar", "ellipse", "triangle",
        "diamond", "cross", "lshape", "tshape", "hshape", "ushape"};
    return families;
}

/// Membership test in the shape's local frame (unit scale, already rotated).
inline bool shape_contains(const std::string& family, real u, real v) {
    const real au = std::fabs(u), av = std::fabs(v);
    if (family == "circle") return u * u + v * v <= 1.0;
    if (family == "ring") {
        const real r2 = u * u + v * v;
        return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    if (family == "square") return au <= 0.85 && av <= 0.85;
    if (family == "bar") return au <= 1.0 && av <= 0.35;
    if (family == "ellipse") return u * u + (v / 0.55) * (v / 0.55) <= 1.0;
    if (family == "triangle") return v >= -0.75 && v <= 1.0 && au <= 0.9 * (1.0 - v) / 1.75;
    if (family == "diamond") return au + av <= 1.0;
    if (family == "cross") return (au <= 0.35 && av <= 1.0) || (av <= 0.35 && au <= 1.0);
    if (family == "lshape") return au <= 0.9 && av <= 0.9 && !(u > -0.2 && v > -0.2);
    if (family == "tshape")
        return (v >= 0.45 && v <= 0.95 && au <= 0.95) || (au <= 0.3 && v >= -0.95 && v < 0.45);
    if (family == "hshape")
        return (au >= 0.4 && au <= 0.95 && av <= 0.95) || (av <= 0.25 && au <= 0.95);
    if (family == "ushape") return au <= 0.95 && av <= 0.95 && !(au <= 0.5 && v >= -0.4);
    throw std::runtime_error("unknown shape family: " + family);
}

struct ShapeClass {
    int id = 0;
    std::string family;
    real intensity = 0.5;   // base foreground level
    bool striped = false;   // multiplicative stripe texture
    real stripe_period = 5.0;
    real stripe_angle = 0.0;
    real base_radius = 14.0;
};

struct GenOptions {
    int num_classes = 12;
    int samples_per_class = 200;
    int image_size = 64;
    std::uint64_t seed = 1;
    int threads = 1;
};

struct Sample {
    Tensor image;  // (H,W) in [0,1]
    Tensor mask;   // (H,W) binary
    int class_id = 0;
};

struct Episode {
    Sample query;
    std::vector<Sample> support;
    int class_id = 0;
};

struct FoldSplit {
    int fold = 0;
    std::vector<int> train_classes;
    std::vector<int> test_classes;
};

/// Contiguous class-id blocks per fold; fold i holds classes
/// [i*n/4, (i+1)*n/4) as the test set.
inline FoldSplit fold_split(int num_classes, int fold) {
    num::require(fold >= 0 && fold <= 3, "fold_split: fold index must be in 0..3");
    num::require(num_classes % 4 == 0,
                 "fold_split: number of classes must be divisible by 4 (no pad policy)");
    const int per = num_classes / 4;
    FoldSplit s;
    s.fold = fold;
    for (int c = 0; c < num_classes; ++c) {
        if (c >= fold * per && c < (fold + 1) * per)
            s.test_classes.push_back(c);
        else
            s.train_classes.push_back(c);
    }
    return s;
}

inline std::vector<ShapeClass> make_classes(const GenOptions& opt) {
    const auto& families = shape_families();
    std::vector<ShapeClass> out;
    // Multiplier coprime with the class count spreads neighbor intensities apart.
    int mult = 7;
    while (std::gcd(mult, opt.num_classes) != 1) mult += 2;
    for (int c = 0; c < opt.num_classes; ++c) {
        ShapeClass sc;
        sc.id = c;
        sc.family = families[static_cast<std::size_t>(c) % families.size()];
        const int p = (c * mult) % opt.num_classes;
        sc.intensity = 0.30 + 0.58 * static_cast<real>(p) / static_cast<real>(opt.num_classes - 1);
        sc.striped = (c % 3 == 1);
        sc.stripe_period = 4.0 + static_cast<real>(c % 4);
        sc.stripe_angle = (c % 2 == 0) ? 0.0 : M_PI / 3.0;
        sc.base_radius = 0.22 * static_cast<real>(opt.image_size);
        out.push_back(sc);
    }
    return out;
}

namespace detail {

struct Placement {
    real cx, cy, radius, angle;
};

inline void draw_shape(Tensor& img, Tensor* mask, const ShapeClass& sc, const Placement& pl,
                       real level) {
    const int size = img.dim(0);
    const real ca = std::cos(pl.angle), sa = std::sin(pl.angle);
    const int lo_y = std::max(0, static_cast<int>(std::floor(pl.cy - pl.radius - 1)));
    const int hi_y = std::min(size - 1, static_cast<int>(std::ceil(pl.cy + pl.radius + 1)));
    const int lo_x = std::max(0, static_cast<int>(std::floor(pl.cx - pl.radius - 1)));
    const int hi_x = std::min(size - 1, static_cast<int>(std::ceil(pl.cx + pl.radius + 1)));
    for (int y = lo_y; y <= hi_y; ++y) {
        for (int x = lo_x; x <= hi_x; ++x) {
            const real dx = (static_cast<real>(x) + 0.5 - pl.cx) / pl.radius;
            const real dy = (static_cast<real>(y) + 0.5 - pl.cy) / pl.radius;
            const real u = ca * dx + sa * dy;
            const real v = -sa * dx + ca * dy;
            if (!shape_contains(sc.family, u, v)) continue;
            real val = level;
            if (sc.striped) {
                const real t = (static_cast<real>(x) * std::cos(sc.stripe_angle) +
                                static_cast<real>(y) * std::sin(sc.stripe_angle)) /
                               sc.stripe_period;
                val *= 0.78 + 0.22 * std::sin(2.0 * M_PI * t);
            }
            img.at2(y, x) = val;
            if (mask) mask->at2(y, x) = 1.0;
        }
    }
}

inline Placement random_placement(const ShapeClass& sc, int size, Rng& rng, real scale_lo,
                                  real scale_hi) {
    Placement pl;
    pl.radius = sc.base_radius * (scale_lo + (scale_hi - scale_lo) * rng.uniform());
    const real margin = pl.radius + 2.0;
    num::require(2.0 * margin < static_cast<real>(size), "generation error: shape too large for canvas");
    pl.cx = margin + (static_cast<real>(size) - 2.0 * margin) * rng.uniform();
    pl.cy = margin + (static_cast<real>(size) - 2.0 * margin) * rng.uniform();
    pl.angle = 2.0 * M_PI * rng.uniform();
    return pl;
}

}  // namespace detail

/// Render one sample of class `target`. Distractors are drawn first so the
/// target always owns its pixels; the mask marks the target only. Rejection
/// keeps the mask foreground fraction within [2%, 60%].
inline Sample render_sample(const std::vector<ShapeClass>& classes, int target, int image_size,
                            Rng& rng) {
    const ShapeClass& tc = classes[static_cast<std::size_t>(target)];
    for (int attempt = 0; attempt < 200; ++attempt) {
        Tensor img = Tensor::full({image_size, image_size}, 0.12);
        Tensor mask = Tensor::zeros({image_size, image_size});
        const std::uint64_t n_distract = rng.uniform_index(3);
        for (std::uint64_t d = 0; d < n_distract; ++d) {
            std::uint64_t other = rng.uniform_index(static_cast<std::uint64_t>(classes.size() - 1));
            if (other >= static_cast<std::uint64_t>(target)) ++other;
            const ShapeClass& oc = classes[static_cast<std::size_t>(other)];
            const auto pl = detail::random_placement(oc, image_size, rng, 0.4, 1.0);
            const real jitter = (rng.uniform() - 0.5) * 0.16;
            detail::draw_shape(img, nullptr, oc, pl, oc.intensity + jitter);
        }
        const auto pl = detail::random_placement(tc, image_size, rng, 0.5, 1.5);
        const real jitter = (rng.uniform() - 0.5) * 0.16;
        detail::draw_shape(img, &mask, tc, pl, tc.intensity + jitter);

        long fg = 0;
        for (real v : mask.data) fg += (v != 0.0);
        const real frac = static_cast<real>(fg) / static_cast<real>(mask.numel());
        if (frac < 0.02 || frac > 0.60) continue;

        for (auto& v : img.data) {
            v += 0.1 * rng.normal();
            v = std::min(std::max(v, 0.0), 1.0);
        }
        Sample s;
        s.image = std::move(img);
        s.mask = std::move(mask);
        s.class_id = target;
        return s;
    }
    throw std::runtime_error("generation error: could not satisfy foreground bounds");
}

inline std::uint64_t sample_tag(int class_id, int sample_idx) {
    return (static_cast<std::uint64_t>(class_id) << 32) | static_cast<std::uint64_t>(sample_idx);
}

inline nlohmann::json dataset_manifest(const GenOptions& opt, const std::vector<ShapeClass>& classes) {
    nlohmann::json j;
    j["version"] = 1;
    j["seed"] = opt.seed;
    j["image_size"] = opt.image_size;
    j["samples_per_class"] = opt.samples_per_class;
    nlohmann::json cls = nlohmann::json::array();
    for (const auto& c : classes) {
        cls.push_back({{"id", c.id},
                       {"family", c.family},
                       {"params",
                        {{"intensity", c.intensity},
                         {"striped", c.striped},
                         {"stripe_period", c.stripe_period},
                         {"stripe_angle", c.stripe_angle},
                         {"base_radius", c.base_radius}}}});
    }
    j["classes"] = cls;
    nlohmann::json folds = nlohmann::json::array();
    for (int f = 0; f < 4; ++f) folds.push_back(fold_split(opt.num_classes, f).test_classes);
    j["folds"] = folds;
    return j;
}

/// Write the full dataset: per-class sample tensors plus dataset.json.
/// Per-sample derived rng streams make output bytes independent of thread
/// count and generation order.
inline void generate_dataset(const GenOptions& opt, const std::string& out_dir) {
    num::require(opt.num_classes >= 8, "generate_dataset: need at least 8 classes");
    num::require(opt.num_classes % 4 == 0, "generate_dataset: class count must be divisible by 4");
    num::require(opt.samples_per_class >= 2, "generate_dataset: need at least 2 samples per class");
    num::require(opt.image_size >= 32, "generate_dataset: image size too small");
    const auto classes = make_classes(opt);
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    const Rng root(opt.seed);
    auto generate_class = [&](int c) {
        const fs::path cdir = fs::path(out_dir) / ("class_" + std::to_string(c));
        fs::create_directories(cdir);
        for (int k = 0; k < opt.samples_per_class; ++k) {
            Rng rng = root.fork(sample_tag(c, k));
            const Sample s = render_sample(classes, c, opt.image_size, rng);
            num::save_tensor((cdir / ("sample_" + std::to_string(k) + ".img.t")).string(), s.image);
            num::save_tensor((cdir / ("sample_" + std::to_string(k) + ".mask.t")).string(), s.mask);
        }
    };

    const int workers = std::max(1, std::min(opt.threads, opt.num_classes));
    if (workers == 1) {
        for (int c = 0; c < opt.num_classes; ++c) generate_class(c);
    } else {
        std::vector<std::thread> pool;
        std::mutex mx;
        int next = 0;
        for (int t = 0; t < workers; ++t)
            pool.emplace_back([&] {
                for (;;) {
                    int c;
                    {
                        std::lock_guard<std::mutex> lock(mx);
                        if (next >= opt.num_classes) return;
                        c = next++;
                    }
                    generate_class(c);
                }
            });
        for (auto& th : pool) th.join();
    }

    std::ofstream out(fs::path(out_dir) / "dataset.json", std::ios::binary | std::ios::trunc);
    num::require(static_cast<bool>(out), "cannot write dataset.json");
    out << dataset_manifest(opt, classes).dump(2) << "\n";
}

/// Read-only view over a generated dataset directory with lazy caching.
class Dataset {
public:
    explicit Dataset(std::string dir) : dir_(std::move(dir)) {
        std::ifstream in(std::filesystem::path(dir_) / "dataset.json");
        num::require(static_cast<bool>(in), "cannot open dataset.json under " + dir_);
        in >> manifest_;
        num_classes_ = static_cast<int>(manifest_.at("classes").size());
        samples_per_class_ = manifest_.at("samples_per_class").get<int>();
        image_size_ = manifest_.at("image_size").get<int>();
    }

    const std::string& dir() const { return dir_; }
    const nlohmann::json& manifest() const { return manifest_; }
    int num_classes() const { return num_classes_; }
    int samples_per_class() const { return samples_per_class_; }
    int image_size() const { return image_size_; }

    const Sample& sample(int class_id, int idx) const {
        num::require(class_id >= 0 && class_id < num_classes_, "dataset: class id out of range");
        num::require(idx >= 0 && idx < samples_per_class_, "dataset: sample index out of range");
        std::lock_guard<std::mutex> lock(mx_);
        const std::uint64_t key = sample_tag(class_id, idx);
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            const auto base = std::filesystem::path(dir_) / ("class_" + std::to_string(class_id)) /
                              ("sample_" + std::to_string(idx));
            auto s = std::make_unique<Sample>();
            s->image = num::load_tensor(base.string() + ".img.t");
            s->mask = num::load_tensor(base.string() + ".mask.t");
            s->class_id = class_id;
            it = cache_.emplace(key, std::move(s)).first;
        }
        return *it->second;
    }

private:
    std::string dir_;
    nlohmann::json manifest_;
    int num_classes_ = 0;
    int samples_per_class_ = 0;
    int image_size_ = 0;
    mutable std::mutex mx_;
    mutable std::map<std::uint64_t, std::unique_ptr<Sample>> cache_;
};

/// Uniform class draw from the pool, then K+1 distinct samples of that class
/// without replacement; the first drawn sample is the query.
inline Episode sample_episode(const Dataset& ds, const std::vector<int>& class_pool, int k_shot,
                              Rng& rng) {
    num::require(!class_pool.empty(), "sample_episode: empty class pool");
    num::require(k_shot >= 1, "sample_episode: k_shot must be >= 1");
    num::require(ds.samples_per_class() >= k_shot + 1,
                 "sample_episode: class has too few samples for K+1 distinct draws");
    const int cls = class_pool[rng.uniform_index(class_pool.size())];
    std::vector<int> idx(static_cast<std::size_t>(ds.samples_per_class()));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k_shot + 1; ++i) {
        const auto j = i + static_cast<int>(rng.uniform_index(idx.size() - static_cast<std::size_t>(i)));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    Episode ep;
    ep.class_id = cls;
    ep.query = ds.sample(cls, idx[0]);
    for (int i = 1; i <= k_shot; ++i) ep.support.push_back(ds.sample(cls, idx[static_cast<std::size_t>(i)]));
    return ep;
}

}  // namespace episeg::data
