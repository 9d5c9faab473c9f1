#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "episeg/autodiff.hpp"
#include "episeg/gradcheck.hpp"
#include "episeg/params.hpp"
#include "episeg/rng.hpp"
#include "episeg/stats.hpp"
#include "episeg/tensor.hpp"
#include "episeg/tensor_io.hpp"

using namespace episeg;
using num::real;
using num::Rng;
using num::Tensor;
using num::Var;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& rng, real scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

real fd_op(const std::vector<Var>& leaves, const std::function<Var()>& fwd) {
    return gradcheck::finite_diff_check(leaves, fwd).max_err;
}

}  // namespace

TEST_CASE("channel stats: hand-computed and degenerate cases", "[numcore]") {
    SECTION("all zeros") {
        const auto s = num::channel_stats(Tensor::zeros({2, 2, 3}));
        for (real m : s.mu) CHECK(m == 0.0);
        for (real sd : s.sigma) CHECK(sd == Catch::Approx(std::sqrt(num::kEpsStd)).epsilon(1e-12));
    }
    SECTION("channel {1,1,3,3} with eps 0") {
        Tensor f({2, 2, 1}, {1, 1, 3, 3});
        const auto s = num::channel_stats(f, 0.0);
        CHECK(s.mu[0] == Catch::Approx(2.0));
        CHECK(s.sigma[0] == Catch::Approx(1.0));
    }
    SECTION("constant map per channel") {
        Tensor f = Tensor::zeros({3, 3, 2});
        for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) {
                f.at3(h, w, 0) = 4.5;
                f.at3(h, w, 1) = -1.25;
            }
        const auto s = num::channel_stats(f);
        CHECK(s.mu[0] == Catch::Approx(4.5));
        CHECK(s.mu[1] == Catch::Approx(-1.25));
        for (real sd : s.sigma) CHECK(sd == Catch::Approx(std::sqrt(num::kEpsStd)).epsilon(1e-12));
    }
    SECTION("empty map rejected by construction") {
        CHECK_THROWS(Tensor::zeros({0, 2, 3}));
    }
}

TEST_CASE("standardize: hand case and round trip", "[numcore]") {
    Tensor f({2, 2, 1}, {1, 1, 3, 3});
    num::ChannelStats s;
    s.mu = {2.0};
    s.sigma = {1.0};
    const Tensor out = num::standardize(f, s);
    CHECK(out.data == std::vector<real>{-1, -1, 1, 1});

    SECTION("constant map standardizes to ~0 with its own stats") {
        Tensor g = Tensor::full({2, 3, 2}, 7.0);
        const Tensor z = num::standardize(g, num::channel_stats(g));
        for (real v : z.data) CHECK(std::fabs(v) < 1e-9);
    }
    SECTION("destandardize inverts") {
        Rng rng(5);
        Tensor g = random_tensor({4, 5, 3}, rng);
        const auto st = num::channel_stats(g);
        const Tensor back = num::destandardize(num::standardize(g, st), st);
        for (std::size_t i = 0; i < g.data.size(); ++i)
            CHECK(back.data[i] == Catch::Approx(g.data[i]).margin(1e-6));
    }
    SECTION("zero sigma rejected") {
        num::ChannelStats bad;
        bad.mu = {0.0};
        bad.sigma = {0.0};
        CHECK_THROWS(num::standardize(f, bad));
    }
}

TEST_CASE("softmax vector contract", "[numcore]") {
    SECTION("symmetry") {
        const auto p = num::softmax({0.0, 0.0});
        CHECK(p[0] == Catch::Approx(0.5));
        CHECK(p[1] == Catch::Approx(0.5));
    }
    SECTION("max-shift stability at 1000") {
        const auto p = num::softmax({1000.0, 0.0});
        CHECK(p[0] == Catch::Approx(1.0).margin(1e-9));
        CHECK(p[1] == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("closed form ln 1..3") {
        const auto p = num::softmax({std::log(1.0), std::log(2.0), std::log(3.0)});
        CHECK(p[0] == Catch::Approx(1.0 / 6).margin(1e-9));
        CHECK(p[1] == Catch::Approx(2.0 / 6).margin(1e-9));
        CHECK(p[2] == Catch::Approx(3.0 / 6).margin(1e-9));
    }
    SECTION("probability vector at extremes") {
        Rng rng(11);
        for (int trial = 0; trial < 50; ++trial) {
            std::vector<real> v(5);
            for (auto& x : v) x = (rng.uniform() * 2 - 1) * 1e4;
            const auto p = num::softmax(v);
            real sum = 0.0;
            for (real x : p) {
                CHECK(x >= 0.0);
                sum += x;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-9));
        }
    }
}

TEST_CASE("standardize of own stats has zero mean unit std", "[numcore]") {
    Rng rng(17);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor f = random_tensor({6, 5, 4}, rng, 2.0);
        const Tensor z = num::standardize(f, num::channel_stats(f, 0.0));
        const auto zs = num::channel_stats(z, 0.0);
        for (real m : zs.mu) CHECK(std::fabs(m) <= 1e-6);
        for (real sd : zs.sigma) CHECK(std::fabs(sd - 1.0) <= 1e-6);
    }
}

TEST_CASE("sampling: reproducibility and moments", "[numcore]") {
    SECTION("fixed seed 42 is bit-exact across two generators") {
        Rng a(42), b(42);
        for (int i = 0; i < 100; ++i) {
            CHECK(a.normal() == b.normal());
            CHECK(a.beta_symmetric(0.1) == b.beta_symmetric(0.1));
        }
    }
    SECTION("normal moments") {
        Rng rng(7);
        const int n = 100000;
        real sum = 0, sq = 0;
        for (int i = 0; i < n; ++i) {
            const real x = rng.normal();
            sum += x;
            sq += x * x;
        }
        const real mean = sum / n;
        const real sd = std::sqrt(sq / n - mean * mean);
        CHECK(std::fabs(mean) < 0.02);
        CHECK(std::fabs(sd - 1.0) < 0.02);
    }
    SECTION("beta(0.1, 0.1) in range with mean near 0.5") {
        Rng rng(9);
        const int n = 100000;
        real sum = 0;
        for (int i = 0; i < n; ++i) {
            const real x = rng.beta_symmetric(0.1);
            REQUIRE(x >= 0.0);
            REQUIRE(x <= 1.0);
            sum += x;
        }
        CHECK(std::fabs(sum / n - 0.5) < 0.01);
    }
    SECTION("beta symmetry: x and 1-x identically distributed") {
        // Compare empirical CDF of x against 1-x at a few quantile points.
        Rng rng(13);
        const int n = 20000;
        std::vector<real> xs(n);
        for (auto& x : xs) x = rng.beta_symmetric(0.1);
        for (real q : {0.1, 0.25, 0.5}) {
            long below = 0, above = 0;
            for (real x : xs) {
                below += x <= q;
                above += x >= 1.0 - q;
            }
            CHECK(std::fabs(below - above) < 4.0 * std::sqrt(static_cast<real>(n)));
        }
    }
    SECTION("gamma parameter validation") {
        Rng rng(1);
        CHECK_THROWS(rng.beta_symmetric(0.0));
        CHECK_THROWS(rng.beta_symmetric(-1.0));
    }
}

TEST_CASE("gradients: simple closed forms", "[numcore]") {
    SECTION("sum of squares") {
        Var w = Var::leaf(Tensor({2}, {1.0, 2.0}));
        Var loss = sum_all(mul(w, w));
        backward(loss);
        CHECK(w.grad()[0] == Catch::Approx(2.0));
        CHECK(w.grad()[1] == Catch::Approx(4.0));
    }
    SECTION("non-scalar loss rejected") {
        Var w = Var::leaf(Tensor({2}, {1.0, 2.0}));
        CHECK_THROWS(backward(mul(w, w)));
    }
    SECTION("softmax cross-entropy on a 3-vector vs finite differences") {
        Rng rng(23);
        for (int trial = 0; trial < 5; ++trial) {
            Var v = Var::leaf(random_tensor({1, 3}, rng));
            auto fwd = [&]() {
                Var p = row_softmax(v);
                // cross-entropy against class 1
                return scale(num::log(column(p, 1)), -1.0);
            };
            CHECK(fd_op({v}, fwd) <= 1e-3);
        }
    }
    SECTION("standardize + weighted-sum chain vs finite differences") {
        Rng rng(29);
        for (int trial = 0; trial < 5; ++trial) {
            Var f = Var::leaf(random_tensor({3, 4, 2}, rng));
            const Tensor wts = random_tensor({3, 4, 2}, rng);
            auto fwd = [&]() {
                auto [mu, sigma] = num::channel_stats(f);
                Var z = div_channels(sub_channels(f, mu), sigma);
                return sum_all(mul(z, Var::constant(wts)));
            };
            CHECK(fd_op({f}, fwd) <= 1e-3);
        }
    }
}

TEST_CASE("every differentiable op passes finite differences", "[numcore]") {
    Rng rng(31);
    struct OpCase {
        const char* name;
        std::function<real()> run;
    };
    auto t = [&](std::vector<int> s, real sc = 1.0) { return random_tensor(std::move(s), rng, sc); };
    std::vector<OpCase> cases;
    auto add_case = [&](const char* name, std::function<real()> run) {
        cases.push_back({name, std::move(run)});
    };

    add_case("add_sub_mul", [&] {
        Var a = Var::leaf(t({3, 4})), b = Var::leaf(t({3, 4}));
        return fd_op({a, b}, [&] { return sum_all(mul(add(a, b), sub(a, b))); });
    });
    add_case("scale_add_scalar", [&] {
        Var a = Var::leaf(t({5}));
        return fd_op({a}, [&] { return sum_all(add_scalar(scale(a, -2.5), 3.0)); });
    });
    add_case("relu", [&] {
        Var a = Var::leaf(t({4, 4}));
        return fd_op({a}, [&] { return sum_all(mul(relu(a), a)); });
    });
    add_case("sqrt_exp_log", [&] {
        Var a = Var::leaf(t({6}, 0.3));
        return fd_op({a}, [&] { return sum_all(num::log(add_scalar(num::sqrt(num::exp(a)), 1.0))); });
    });
    add_case("mean_all_add_many", [&] {
        Var a = Var::leaf(t({3, 3})), b = Var::leaf(t({3, 3})), c = Var::leaf(t({3, 3}));
        return fd_op({a, b, c}, [&] { return mean_all(num::add_many({a, b, c, a})); });
    });
    add_case("spatial_mean", [&] {
        Var f = Var::leaf(t({3, 5, 2}));
        const Tensor w = t({2});
        return fd_op({f}, [&] { return sum_all(mul(spatial_mean(f), Var::constant(w))); });
    });
    add_case("channel_broadcasts", [&] {
        Var f = Var::leaf(t({3, 4, 2}));
        Var v = Var::leaf(t({2}, 0.4));
        const Tensor w = t({3, 4, 2});
        return fd_op({f, v}, [&] {
            Var x = add_channels(sub_channels(f, v), v);
            Var y = div_channels(mul_channels(x, add_scalar(mul(v, v), 1.0)), add_scalar(mul(v, v), 1.0));
            return sum_all(mul(y, Var::constant(w)));
        });
    });
    add_case("mul_spatial_broadcast_channels", [&] {
        Var f = Var::leaf(t({3, 4, 2}));
        Var m = Var::leaf(t({3, 4}));
        Var v = Var::leaf(t({2}));
        const Tensor w = t({3, 4, 2});
        return fd_op({f, m, v}, [&] {
            return sum_all(mul(add(mul_spatial(f, m), broadcast_channels(v, 3, 4)), Var::constant(w)));
        });
    });
    add_case("reshape_concat_gather_column", [&] {
        Var a = Var::leaf(t({2, 3, 2})), b = Var::leaf(t({2, 3, 1}));
        return fd_op({a, b}, [&] {
            Var cat = num::concat_channels({a, b, a});
            Var rows = gather_rows(reshape(cat, {6, 5}), {0, 3, 5, 3});
            return sum_all(mul(column(rows, 2), column(rows, 4)));
        });
    });
    add_case("matmul_transpose_add_rowvec", [&] {
        Var a = Var::leaf(t({3, 4})), b = Var::leaf(t({3, 2})), c = Var::leaf(t({2}));
        const Tensor w = t({4, 2});
        return fd_op({a, b, c}, [&] {
            return sum_all(mul(add_rowvec(matmul(transpose(a), b), c), Var::constant(w)));
        });
    });
    add_case("row_softmax", [&] {
        Var s = Var::leaf(t({4, 5}));
        const Tensor w = t({4, 5});
        return fd_op({s}, [&] { return sum_all(mul(row_softmax(s), Var::constant(w))); });
    });
    add_case("row_softmax_masked", [&] {
        Var s = Var::leaf(t({4, 5}));
        Tensor mask = Tensor::zeros({4, 5});
        for (int i = 0; i < 4; ++i)
            for (int j = 0; j < 5; ++j) mask.at2(i, j) = ((i + j) % 2 == 0) ? 1.0 : 0.0;
        const Tensor w = t({4, 5});
        return fd_op({s}, [&] { return sum_all(mul(row_softmax(s, &mask), Var::constant(w))); });
    });
    add_case("diag_nll", [&] {
        Var s = Var::leaf(t({4, 4}));
        return fd_op({s}, [&] { return diag_nll(s); });
    });
    add_case("diag_nll_mean", [&] {
        Var s = Var::leaf(t({4, 4}));
        return fd_op({s}, [&] { return diag_nll(s, true); });
    });
    add_case("conv2d", [&] {
        Var x = Var::leaf(t({5, 6, 2}));
        Var w = Var::leaf(t({3, 3, 2, 3}, 0.5));
        Var b = Var::leaf(t({3}, 0.2));
        const Tensor rd = t({5, 6, 3});
        return fd_op({x, w, b}, [&] { return sum_all(mul(conv2d(x, w, b, 1), Var::constant(rd))); });
    });
    add_case("avgpool2", [&] {
        Var x = Var::leaf(t({4, 6, 2}));
        const Tensor rd = t({2, 3, 2});
        return fd_op({x}, [&] { return sum_all(mul(avgpool2(x), Var::constant(rd))); });
    });
    add_case("bilinear_upsample", [&] {
        Var x = Var::leaf(t({3, 4}));
        const Tensor rd = t({7, 9});
        return fd_op({x}, [&] { return sum_all(mul(bilinear_upsample(x, 7, 9), Var::constant(rd))); });
    });
    add_case("bce_loss", [&] {
        Var logits = Var::leaf(t({6, 2}));
        Tensor gt = Tensor::zeros({2, 3});
        gt.at2(0, 1) = 1.0;
        gt.at2(1, 2) = 1.0;
        return fd_op({logits}, [&] {
            return bce_loss(reshape(column(row_softmax(logits), 1), {2, 3}), gt);
        });
    });

    for (auto& c : cases) {
        INFO(c.name);
        // several random input draws per op
        for (int rep = 0; rep < 3; ++rep) CHECK(c.run() <= 1e-3);
    }
}

TEST_CASE("params: zero_grad and accumulation", "[numcore]") {
    num::Params params;
    Var w = params.add("w", Tensor({3}, {1.0, -2.0, 0.5}));
    CHECK(params.total_size() == 3);
    backward(sum_all(mul(w, w)));
    backward(sum_all(mul(w, w)));
    CHECK(w.grad()[0] == Catch::Approx(4.0));  // accumulated twice
    params.zero_grad();
    for (real g : w.grad()) CHECK(g == 0.0);
    CHECK_THROWS(params.add("w", Tensor({3}, {0, 0, 0})));
    CHECK_THROWS(params.at("missing"));
}

TEST_CASE("sgd step with momentum", "[numcore]") {
    num::Params params;
    Var w = params.add("w", Tensor({1}, {1.0}));
    num::SgdOptimizer opt;
    opt.lr = 0.1;
    opt.momentum = 0.5;
    params.zero_grad();
    backward(sum_all(mul(w, w)));  // grad 2w = 2
    opt.step(params);
    CHECK(w.value().data[0] == Catch::Approx(1.0 - 0.1 * 2.0));
    params.zero_grad();
    backward(sum_all(mul(w, w)));  // grad 1.6, velocity 0.5*2+1.6 = 2.6
    opt.step(params);
    CHECK(w.value().data[0] == Catch::Approx(0.8 - 0.1 * 2.6));
}

TEST_CASE("tensor file format round trip", "[numcore]") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "episeg_io_test";
    fs::create_directories(dir);
    Rng rng(3);
    Tensor t = random_tensor({3, 5, 2}, rng);
    // values quantize to f32 on disk
    for (auto& v : t.data) v = static_cast<real>(static_cast<float>(v));
    const std::string path = (dir / "x.t").string();
    num::save_tensor(path, t);
    const Tensor back = num::load_tensor(path);
    CHECK(back.shape == t.shape);
    CHECK(back.data == t.data);

    const std::string buf = util::read_file(path);
    CHECK(buf.substr(0, 4) == "EPSG");
    // rank-2 headers are exactly 16 bytes: magic + rank + two dims
    Tensor m = Tensor::zeros({4, 4});
    const std::string enc = num::encode_tensor(m);
    CHECK(enc.size() == 16 + 4 * 16);
    CHECK_THROWS(num::decode_tensor("XXXX????"));
    fs::remove_all(dir);
}
