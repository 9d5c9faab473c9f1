#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "episeg/augment.hpp"
#include "episeg/gradcheck.hpp"
#include "episeg/stats.hpp"

using namespace episeg;
using aug::Mode;
using aug::ScaleMode;
using aug::UfaTarget;
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

num::ChannelStats stats_of(std::vector<real> mu, std::vector<real> sigma) {
    num::ChannelStats s;
    s.mu = std::move(mu);
    s.sigma = std::move(sigma);
    return s;
}

}  // namespace

TEST_CASE("uncertainty estimation over a mini-batch", "[augment]") {
    SECTION("identical stats give zero variance") {
        const auto s = stats_of({1.0, 2.0}, {0.5, 0.7});
        const auto u = aug::estimate_uncertainty({s, s, s});
        for (real v : u.var_mu) CHECK(v == 0.0);
        for (real v : u.var_sigma) CHECK(v == 0.0);
        CHECK(u.batch_size == 3);
    }
    SECTION("single sample degenerates to zeros") {
        const auto u = aug::estimate_uncertainty({stats_of({3.0}, {1.0})});
        CHECK(u.var_mu[0] == 0.0);
        CHECK(u.var_sigma[0] == 0.0);
        CHECK(u.batch_size == 1);
    }
    SECTION("mu values {1,3} give population variance 1") {
        const auto u = aug::estimate_uncertainty({stats_of({1.0}, {1.0}), stats_of({3.0}, {1.0})});
        CHECK(u.var_mu[0] == Catch::Approx(1.0));
        CHECK(u.var_sigma[0] == 0.0);
    }
    SECTION("errors") {
        CHECK_THROWS(aug::estimate_uncertainty({}));
        CHECK_THROWS(aug::estimate_uncertainty({stats_of({1.0}, {1.0}), stats_of({1.0, 2.0}, {1.0, 1.0})}));
    }
}

TEST_CASE("reparameterization", "[augment]") {
    SECTION("zero uncertainty returns the stats unchanged") {
        const auto s = stats_of({1.5, -0.5}, {0.3, 0.8});
        aug::StatUncertainty u;
        u.var_mu = {0.0, 0.0};
        u.var_sigma = {0.0, 0.0};
        u.batch_size = 1;
        Rng rng(3);
        const auto sampled = aug::reparameterize(s, u, rng);
        CHECK(sampled.alpha == s.mu);
        CHECK(sampled.beta == s.sigma);
    }
    SECTION("forced noise eps_mu=2 with mu=0, Var=1 gives alpha=2") {
        const auto s = stats_of({0.0}, {1.0});
        aug::StatUncertainty u;
        u.var_mu = {1.0};
        u.var_sigma = {0.0};
        const auto sampled = aug::reparameterize_forced(s, u, {2.0}, {0.0});
        CHECK(sampled.alpha[0] == Catch::Approx(2.0));
    }
    SECTION("beta clamped at zero") {
        const auto s = stats_of({0.0}, {0.1});
        aug::StatUncertainty u;
        u.var_mu = {0.0};
        u.var_sigma = {1.0};
        const auto sampled = aug::reparameterize_forced(s, u, {0.0}, {-5.0});
        CHECK(sampled.beta[0] == 0.0);
    }
    SECTION("stddev scale mode takes the square root of the variance") {
        const auto s = stats_of({0.0}, {1.0});
        aug::StatUncertainty u;
        u.var_mu = {4.0};
        u.var_sigma = {0.0};
        const auto sampled = aug::reparameterize_forced(s, u, {1.0}, {0.0}, ScaleMode::Stddev);
        CHECK(sampled.alpha[0] == Catch::Approx(2.0));  // eps * sqrt(4)
        const auto lin = aug::reparameterize_forced(s, u, {1.0}, {0.0}, ScaleMode::Variance);
        CHECK(lin.alpha[0] == Catch::Approx(4.0));  // eps * 4
    }
}

TEST_CASE("statistic mixing", "[augment]") {
    aug::SampledStats q, s;
    q.alpha = {0.0, 2.0};
    q.beta = {1.0, 1.0};
    s.alpha = {2.0, 0.0};
    s.beta = {3.0, 5.0};
    SECTION("endpoints") {
        const auto at1 = aug::mix_stats_forced(q, s, 1.0);
        CHECK(at1.alpha_hat == q.alpha);
        CHECK(at1.beta_hat == q.beta);
        const auto at0 = aug::mix_stats_forced(q, s, 0.0);
        CHECK(at0.alpha_hat == s.alpha);
        CHECK(at0.beta_hat == s.beta);
    }
    SECTION("midpoint") {
        const auto mid = aug::mix_stats_forced(q, s, 0.5);
        CHECK(mid.alpha_hat[0] == Catch::Approx(1.0));
        CHECK(mid.alpha_hat[1] == Catch::Approx(1.0));
    }
    SECTION("mixture stays in the interval hull") {
        Rng rng(7);
        for (int i = 0; i < 200; ++i) {
            const auto m = aug::mix_stats(q, s, rng, 0.1);
            CHECK(m.lambda >= 0.0);
            CHECK(m.lambda <= 1.0);
            for (std::size_t c = 0; c < q.alpha.size(); ++c) {
                CHECK(m.alpha_hat[c] >= std::min(q.alpha[c], s.alpha[c]) - 1e-12);
                CHECK(m.alpha_hat[c] <= std::max(q.alpha[c], s.alpha[c]) + 1e-12);
                CHECK(m.beta_hat[c] >= std::min(q.beta[c], s.beta[c]) - 1e-12);
                CHECK(m.beta_hat[c] <= std::max(q.beta[c], s.beta[c]) + 1e-12);
            }
        }
    }
}

TEST_CASE("feature synthesis", "[augment]") {
    SECTION("original stats reconstruct the input") {
        Rng rng(11);
        Tensor f = random_tensor({4, 5, 3}, rng);
        const auto st = num::channel_stats(f);
        aug::MixedStats m;
        m.alpha_hat = st.mu;
        m.beta_hat = st.sigma;
        m.lambda = 1.0;
        const Tensor out = aug::apply_ufa(f, m);
        for (std::size_t i = 0; i < f.data.size(); ++i)
            CHECK(out.data[i] == Catch::Approx(f.data[i]).margin(1e-5));
    }
    SECTION("constant map becomes alpha everywhere") {
        Tensor f = Tensor::zeros({3, 3, 2});
        aug::MixedStats m;
        m.alpha_hat = {4.0, -2.0};
        m.beta_hat = {1.0, 3.0};
        const Tensor out = aug::apply_ufa(f, m);
        for (int h = 0; h < 3; ++h)
            for (int w = 0; w < 3; ++w) {
                CHECK(out.at3(h, w, 0) == Catch::Approx(4.0).margin(1e-9));
                CHECK(out.at3(h, w, 1) == Catch::Approx(-2.0).margin(1e-9));
            }
    }
    SECTION("hand case: 1x2x1 map {0,2}, alpha 10, beta 3 gives {7,13}") {
        Tensor f({1, 2, 1}, {0.0, 2.0});
        aug::MixedStats m;
        m.alpha_hat = {10.0};
        m.beta_hat = {3.0};
        const Tensor out = aug::apply_ufa(f, m);
        CHECK(out.data[0] == Catch::Approx(7.0).margin(1e-4));
        CHECK(out.data[1] == Catch::Approx(13.0).margin(1e-4));
    }
    SECTION("synthesized feature carries exactly the mixed statistics") {
        Rng rng(13);
        Tensor f = random_tensor({6, 6, 2}, rng);
        aug::MixedStats m;
        m.alpha_hat = {2.5, -1.0};
        m.beta_hat = {0.7, 1.9};
        // eps_std = 0 end to end so the identity is exact
        Var out = aug::apply_ufa(Var::constant(f), Var::constant(Tensor({2}, m.alpha_hat)),
                                 Var::constant(Tensor({2}, m.beta_hat)), 0.0);
        const auto st = num::channel_stats(out.value(), 0.0);
        CHECK(st.mu[0] == Catch::Approx(2.5).margin(1e-9));
        CHECK(st.mu[1] == Catch::Approx(-1.0).margin(1e-9));
        CHECK(st.sigma[0] == Catch::Approx(0.7).margin(1e-9));
        CHECK(st.sigma[1] == Catch::Approx(1.9).margin(1e-9));
    }
    SECTION("negative beta_hat rejected") {
        Tensor f = Tensor::zeros({2, 2, 1});
        CHECK_THROWS(aug::apply_ufa(Var::constant(f), Var::constant(Tensor({1}, {0.0})),
                                    Var::constant(Tensor({1}, {-0.5}))));
    }
}

namespace {

std::vector<aug::StreamPair> make_batch(Rng& rng, int n, int k, std::vector<int> shape) {
    std::vector<aug::StreamPair> batch;
    for (int i = 0; i < n; ++i) {
        aug::StreamPair sp;
        sp.query = Var::constant(random_tensor(shape, rng));
        for (int j = 0; j < k; ++j) sp.supports.push_back(Var::constant(random_tensor(shape, rng)));
        batch.push_back(std::move(sp));
    }
    return batch;
}

}  // namespace

TEST_CASE("ufa hook: inference identity and train behavior", "[augment]") {
    Rng data_rng(17);
    aug::UfaOptions opts;

    SECTION("eval mode is bitwise identity on both streams") {
        auto batch = make_batch(data_rng, 3, 2, {4, 4, 3});
        Rng rng(1);
        const auto out = aug::ufa_hook(batch, Mode::Eval, opts, rng);
        REQUIRE(out.size() == batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            CHECK(out[i].query.value().data == batch[i].query.value().data);
            for (std::size_t j = 0; j < batch[i].supports.size(); ++j)
                CHECK(out[i].supports[j].value().data == batch[i].supports[j].value().data);
        }
        CHECK(rng.draw_count() == 0);
    }

    SECTION("train mode, N_bs=1: finite output, support untouched") {
        auto batch = make_batch(data_rng, 1, 1, {4, 4, 3});
        Rng rng(2);
        long counter = 0;
        const auto out = aug::ufa_hook(batch, Mode::Train, opts, rng, &counter);
        CHECK(counter == 1);
        CHECK(out[0].query.value().all_finite());
        CHECK(out[0].supports[0].value().data == batch[0].supports[0].value().data);
    }

    SECTION("shapes preserved, support stream bitwise fixed in query_only mode") {
        auto batch = make_batch(data_rng, 4, 2, {6, 5, 4});
        Rng rng(3);
        const auto out = aug::ufa_hook(batch, Mode::Train, opts, rng);
        for (std::size_t i = 0; i < batch.size(); ++i) {
            CHECK(out[i].query.shape() == batch[i].query.shape());
            for (std::size_t j = 0; j < batch[i].supports.size(); ++j)
                CHECK(out[i].supports[j].value().data == batch[i].supports[j].value().data);
        }
    }

    SECTION("target=both augments the support stream too") {
        auto batch = make_batch(data_rng, 2, 2, {4, 4, 2});
        aug::UfaOptions both = opts;
        both.target = UfaTarget::Both;
        Rng rng(4);
        long counter = 0;
        const auto out = aug::ufa_hook(batch, Mode::Train, both, rng, &counter);
        CHECK(counter == 2 + 4);
        bool support_changed = false;
        for (std::size_t i = 0; i < batch.size(); ++i)
            for (std::size_t j = 0; j < batch[i].supports.size(); ++j)
                if (out[i].supports[j].value().data != batch[i].supports[j].value().data)
                    support_changed = true;
        CHECK(support_changed);
    }

    SECTION("deterministic under a fixed rng seed") {
        auto batch = make_batch(data_rng, 2, 1, {4, 4, 2});
        Rng r1(42), r2(42);
        const auto o1 = aug::ufa_hook(batch, Mode::Train, opts, r1);
        const auto o2 = aug::ufa_hook(batch, Mode::Train, opts, r2);
        for (std::size_t i = 0; i < o1.size(); ++i)
            CHECK(o1[i].query.value().data == o2[i].query.value().data);
        CHECK(r1.draw_count() == r2.draw_count());
    }
}

TEST_CASE("ufa chain collapse: zero variance and lambda 1 reproduce the input", "[augment]") {
    Rng rng(19);
    Tensor fq = random_tensor({5, 4, 3}, rng);
    Tensor fs = random_tensor({5, 4, 3}, rng);
    const auto qs = num::channel_stats(fq);
    aug::StatUncertainty u;
    u.var_mu.assign(3, 0.0);
    u.var_sigma.assign(3, 0.0);
    u.batch_size = 1;
    const auto sampled_q = aug::reparameterize_forced(qs, u, {0, 0, 0}, {0, 0, 0});
    const auto ss = num::channel_stats(fs);
    const auto sampled_s = aug::reparameterize_forced(ss, u, {0, 0, 0}, {0, 0, 0});
    const auto mixed = aug::mix_stats_forced(sampled_q, sampled_s, 1.0);
    const Tensor out = aug::apply_ufa(fq, mixed);
    for (std::size_t i = 0; i < fq.data.size(); ++i)
        CHECK(out.data[i] == Catch::Approx(fq.data[i]).margin(1e-4));
}

TEST_CASE("gradient through the ufa path matches finite differences", "[augment]") {
    const auto rows = gradcheck::run_suite(123);
    for (const auto& r : rows)
        if (r.component == "ufa_path") {
            INFO("max rel err " << r.max_rel_err);
            CHECK(r.pass);
            CHECK(r.max_rel_err <= 1e-3);
        }
}
