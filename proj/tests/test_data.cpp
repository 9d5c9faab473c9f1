#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "episeg/dataset.hpp"
#include "episeg/manifest.hpp"

using namespace episeg;
using num::real;
using num::Rng;
using num::Tensor;

namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, std::string> dir_hashes(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file())
            out[fs::relative(e.path(), dir).string()] = util::file_hash(e.path().string());
    return out;
}

data::GenOptions small_options(std::uint64_t seed = 11) {
    data::GenOptions opt;
    opt.num_classes = 8;
    opt.samples_per_class = 6;
    opt.image_size = 32;
    opt.seed = seed;
    return opt;
}

}  // namespace

TEST_CASE("fold splits follow the contiguous-block convention", "[data]") {
    SECTION("12 classes, fold 0") {
        const auto s = data::fold_split(12, 0);
        CHECK(s.test_classes == std::vector<int>{0, 1, 2});
        CHECK(s.train_classes.size() == 9);
        for (int c : s.train_classes) CHECK(c >= 3);
    }
    SECTION("20 classes, fold 2 tests classes 10..14") {
        const auto s = data::fold_split(20, 2);
        CHECK(s.test_classes == std::vector<int>{10, 11, 12, 13, 14});
    }
    SECTION("union of test sets covers all classes, pairwise disjoint") {
        std::set<int> seen;
        for (int f = 0; f < 4; ++f) {
            const auto s = data::fold_split(12, f);
            for (int c : s.test_classes) {
                CHECK(!seen.count(c));
                seen.insert(c);
            }
            for (int c : s.test_classes)
                CHECK(std::find(s.train_classes.begin(), s.train_classes.end(), c) ==
                      s.train_classes.end());
        }
        CHECK(seen.size() == 12);
    }
    SECTION("invalid inputs") {
        CHECK_THROWS(data::fold_split(12, 4));
        CHECK_THROWS(data::fold_split(12, -1));
        CHECK_THROWS(data::fold_split(10, 0));
    }
}

TEST_CASE("generation is deterministic and masks stay in bounds", "[data]") {
    TempDir d1("episeg_data_a"), d2("episeg_data_b");
    const auto opt = small_options();
    data::generate_dataset(opt, d1.path.string());
    data::generate_dataset(opt, d2.path.string());

    SECTION("byte-identical directories for the same seed") {
        CHECK(dir_hashes(d1.path) == dir_hashes(d2.path));
    }
    SECTION("threaded generation produces the same bytes") {
        TempDir d3("episeg_data_c");
        auto threaded = opt;
        threaded.threads = 4;
        data::generate_dataset(threaded, d3.path.string());
        CHECK(dir_hashes(d1.path) == dir_hashes(d3.path));
    }
    SECTION("different seed differs") {
        TempDir d4("episeg_data_d");
        data::generate_dataset(small_options(99), d4.path.string());
        CHECK(dir_hashes(d1.path) != dir_hashes(d4.path));
    }
    SECTION("every mask binary, aligned, foreground within [2%, 60%]") {
        data::Dataset ds(d1.path.string());
        for (int c = 0; c < ds.num_classes(); ++c)
            for (int k = 0; k < ds.samples_per_class(); ++k) {
                const auto& s = ds.sample(c, k);
                REQUIRE(s.image.shape == s.mask.shape);
                long fg = 0;
                for (real v : s.mask.data) {
                    REQUIRE((v == 0.0 || v == 1.0));
                    fg += v != 0.0;
                }
                const real frac = static_cast<real>(fg) / static_cast<real>(s.mask.numel());
                CHECK(frac >= 0.02);
                CHECK(frac <= 0.60);
                for (real v : s.image.data) {
                    CHECK(v >= 0.0);
                    CHECK(v <= 1.0);
                }
            }
    }
    SECTION("manifest records classes, folds, seed") {
        data::Dataset ds(d1.path.string());
        const auto& m = ds.manifest();
        CHECK(m.at("seed").get<std::uint64_t>() == opt.seed);
        CHECK(m.at("classes").size() == 8);
        CHECK(m.at("folds").size() == 4);
        CHECK(ds.image_size() == 32);
    }
}

TEST_CASE("generation rejects impossible constraints", "[data]") {
    auto opt = small_options();
    opt.num_classes = 6;
    CHECK_THROWS(data::generate_dataset(opt, (fs::temp_directory_path() / "episeg_bad").string()));
    opt = small_options();
    opt.image_size = 8;  // below minimum canvas
    CHECK_THROWS(data::generate_dataset(opt, (fs::temp_directory_path() / "episeg_bad").string()));
}

TEST_CASE("episode sampling", "[data]") {
    TempDir d("episeg_data_ep");
    data::generate_dataset(small_options(), d.path.string());
    data::Dataset ds(d.path.string());

    SECTION("k=1 gives a distinct support/query pair of one class") {
        Rng rng(3);
        const auto ep = data::sample_episode(ds, {0, 1, 2, 3}, 1, rng);
        CHECK(ep.support.size() == 1);
        CHECK(ep.query.class_id == ep.class_id);
        CHECK(ep.support[0].class_id == ep.class_id);
        CHECK(ep.query.image.data != ep.support[0].image.data);
    }
    SECTION("k=5 gives six distinct samples of one class") {
        Rng rng(5);
        const auto ep = data::sample_episode(ds, {2}, 5, rng);
        CHECK(ep.support.size() == 5);
        std::set<std::string> unique;
        unique.insert(util::hex64(util::fnv1a64(ep.query.image.data.data(),
                                                ep.query.image.data.size() * sizeof(real))));
        for (const auto& s : ep.support)
            unique.insert(util::hex64(
                util::fnv1a64(s.image.data.data(), s.image.data.size() * sizeof(real))));
        CHECK(unique.size() == 6);
        for (const auto& s : ep.support) CHECK(s.class_id == ep.class_id);
    }
    SECTION("training sampler never yields a held-out class") {
        const auto split = data::fold_split(8, 1);
        Rng rng(7);
        for (int i = 0; i < 500; ++i) {
            const auto ep = data::sample_episode(ds, split.train_classes, 1, rng);
            CHECK(std::find(split.test_classes.begin(), split.test_classes.end(), ep.class_id) ==
                  split.test_classes.end());
        }
    }
    SECTION("class draw uniform within 3 sigma over 10k draws") {
        const std::vector<int> pool = {0, 1, 2, 3, 4, 5, 6, 7};
        Rng rng(9);
        std::map<int, long> counts;
        const int n = 10000;
        for (int i = 0; i < n; ++i) counts[data::sample_episode(ds, pool, 1, rng).class_id]++;
        const real p = 1.0 / static_cast<real>(pool.size());
        const real sigma = std::sqrt(n * p * (1 - p));
        for (int c : pool) CHECK(std::fabs(counts[c] - n * p) <= 3.0 * sigma);
    }
    SECTION("insufficient samples rejected") {
        Rng rng(1);
        CHECK_THROWS(data::sample_episode(ds, {0}, ds.samples_per_class(), rng));
        CHECK_THROWS(data::sample_episode(ds, {}, 1, rng));
    }
}

TEST_CASE("nearest-neighbor mask downsampling is exact", "[data]") {
    Tensor mask = Tensor::zeros({4, 4});
    mask.at2(0, 0) = 1.0;
    mask.at2(2, 2) = 1.0;
    const Tensor down = num::downsample_mask_nearest(mask, 2, 2);
    CHECK(down.at2(0, 0) == 1.0);
    CHECK(down.at2(1, 1) == 1.0);
    CHECK(down.at2(0, 1) == 0.0);
    CHECK(down.at2(1, 0) == 0.0);
    for (real v : down.data) CHECK((v == 0.0 || v == 1.0));
}
