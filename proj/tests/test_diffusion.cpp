#include <doctest.h>

#include <cmath>

#include "xmreg/diffusion.hpp"
#include "xmreg/optim.hpp"
#include "xmreg/errors.hpp"
#include "xmreg/ops.hpp"

using namespace xmreg;
using namespace xmreg::diffusion;

TEST_CASE("noise schedule construction and validation") {
    const auto s = NoiseSchedule::linear(100);
    REQUIRE(s.total_steps == 100);
    CHECK(s.beta.front() == doctest::Approx(1e-4));
    CHECK(s.beta.back() == doctest::Approx(0.02));
    for (int t = 2; t <= 100; ++t) CHECK(s.alphabar(t) < s.alphabar(t - 1));
    CHECK(s.alphabar(100) > 0.0);

    CHECK_THROWS_AS(s.alphabar(0), TimestepOutOfRange);
    CHECK_THROWS_AS(s.alphabar(101), TimestepOutOfRange);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({0.5, 1.0}), Error);
    CHECK_THROWS_AS(NoiseSchedule::from_betas({-0.1}), Error);
}

TEST_CASE("forward_noise closed forms") {
    Rng rng(300);
    Tensor x0 = Tensor::rand_uniform({1, 4, 4}, rng, -1.0, 1.0);
    const auto sched = NoiseSchedule::linear(10, 0.01, 0.3);

    // eps = 0 -> sqrt(abar_t) * x0
    Tensor zero(x0.shape());
    const Tensor a = forward_noise(x0, 7, zero, sched);
    const double sa = std::sqrt(sched.alphabar(7));
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(a[i] == doctest::Approx(sa * x0[i]));

    // beta == 0 schedule -> x_t = x0 for all t
    const auto degenerate = NoiseSchedule::from_betas({0.0, 0.0, 0.0});
    Tensor eps = Tensor::randn(x0.shape(), rng);
    for (int t = 1; t <= 3; ++t) {
        const Tensor b = forward_noise(x0, t, eps, degenerate);
        for (int64_t i = 0; i < x0.numel(); ++i) CHECK(b[i] == doctest::Approx(x0[i]));
    }

    // scalar hand computation: 1x1 image, beta=[0.5], t=1
    const auto half = NoiseSchedule::from_betas({0.5});
    Tensor px = Tensor::from({1, 1, 1}, {0.8});
    Tensor pe = Tensor::from({1, 1, 1}, {-0.4});
    const Tensor c = forward_noise(px, 1, pe, half);
    CHECK(c[0] == doctest::Approx(std::sqrt(0.5) * 0.8 + std::sqrt(0.5) * -0.4));

    CHECK_THROWS_AS(forward_noise(px, 2, pe, half), TimestepOutOfRange);
    CHECK_THROWS_AS(forward_noise(px, 1, Tensor({1, 2, 2}), half), ShapeMismatch);
}

TEST_CASE("tweedie inverts the forward process") {
    Rng rng(301);
    const auto sched = NoiseSchedule::linear(50);
    Tensor x0 = Tensor::rand_uniform({1, 6, 6}, rng, -1.0, 1.0);

    for (int trial = 0; trial < 100; ++trial) {
        const int t = 1 + static_cast<int>(rng.uniform_int(50));
        Tensor eps = Tensor::randn(x0.shape(), rng);
        const Tensor xt = forward_noise(x0, t, eps, sched);
        const Tensor rec = tweedie_one_step(xt, eps, t, sched);
        for (int64_t i = 0; i < x0.numel(); ++i) CHECK(std::abs(rec[i] - x0[i]) < 1e-5);
    }

    // eps_hat = 0 -> x_t / sqrt(abar)
    const int t = 20;
    Tensor eps = Tensor::randn(x0.shape(), rng);
    const Tensor xt = forward_noise(x0, t, eps, sched);
    const Tensor est = tweedie_one_step(xt, Tensor(x0.shape()), t, sched);
    const double inv = 1.0 / std::sqrt(sched.alphabar(t));
    for (int64_t i = 0; i < x0.numel(); ++i) CHECK(est[i] == doctest::Approx(xt[i] * inv));
}

TEST_CASE("algebraic identity of the substitution") {
    // substituting the forward expression into the one-step estimate gives
    // x0 + sqrt(1-abar)/sqrt(abar) * (eps - eps_hat); with eps_hat = eps the
    // residual vanishes for every (x0, eps, t)
    Rng rng(302);
    const auto sched = NoiseSchedule::linear(30, 5e-3, 0.1);
    for (int trial = 0; trial < 50; ++trial) {
        const double x0 = rng.uniform(-2, 2), eps = rng.normal();
        const int t = 1 + static_cast<int>(rng.uniform_int(30));
        const double ab = sched.alphabar(t);
        const double xt = std::sqrt(ab) * x0 + std::sqrt(1 - ab) * eps;
        const double estimate = xt / std::sqrt(ab) - std::sqrt(1 - ab) / std::sqrt(ab) * eps;
        CHECK(std::abs(estimate - x0) < 1e-10);
    }
}

TEST_CASE("loss arithmetic") {
    Tensor a = Tensor::full({1, 1, 2, 2}, 0.5);
    CHECK(loss_noise(constant(a), a)->value[0] == 0.0);
    Tensor b = Tensor::full({1, 1, 2, 2}, 1.5);
    CHECK(loss_noise(constant(a), b)->value[0] == doctest::Approx(1.0));
    Tensor c({1, 1, 2, 2});
    c[0] = 1.0; c[1] = 0.5; c[2] = 0.5; c[3] = 0.5; // diffs: 0.5, 0, 0, 0
    CHECK(loss_noise(constant(a), c)->value[0] == doctest::Approx(0.125));

    Tensor mask({1, 1, 2, 2});
    mask[0] = 1.0; mask[1] = 1.0;
    Tensor tgt({1, 1, 2, 2});
    tgt[0] = 2.5; tgt[1] = 2.5; tgt[2] = 99.0; tgt[3] = -99.0;
    CHECK(loss_translate(constant(a), tgt, mask)->value[0] == doctest::Approx(2.0));
}

TEST_CASE("model: zero head, determinism, shape checks") {
    Rng rng(303);
    UNetConfig cfg;
    cfg.base_channels = 8;
    cfg.channel_mult = {1, 2};
    cfg.time_embed_dim = 16;
    DiffusionModel model(cfg, rng);

    Tensor xt = Tensor::randn({2, 1, 16, 16}, rng);
    Tensor ci = Tensor::randn({2, 1, 16, 16}, rng);
    Tensor cm = Tensor::randn({2, 1, 16, 16}, rng);
    NoGradGuard ng;
    Var e1 = model.predict_noise(constant(xt), constant(ci), constant(cm), {3, 7});
    // freshly initialized output head is zero
    CHECK(e1->value.abs_max() == 0.0);

    // perturb the head; evaluation stays deterministic
    std::vector<nn::NamedParam> params;
    model.collect_params("d", params);
    Rng prng(9);
    for (auto& p : params)
        if (p.name.find("oconv") != std::string::npos)
            p.var->value = Tensor::randn(p.var->value.shape(), prng);
    Var e2 = model.predict_noise(constant(xt), constant(ci), constant(cm), {3, 7});
    Var e3 = model.predict_noise(constant(xt), constant(ci), constant(cm), {3, 7});
    CHECK(e2->value.abs_max() > 0.0);
    for (int64_t i = 0; i < e2->value.numel(); ++i) CHECK(e2->value[i] == e3->value[i]);

    CHECK_THROWS_AS(
        model.predict_noise(constant(xt), constant(Tensor({2, 1, 8, 8})), constant(cm), {1, 1}),
        ShapeMismatch);
    CHECK_THROWS_AS(model.predict_noise(constant(Tensor({2, 1, 15, 15})),
                                        constant(Tensor({2, 1, 15, 15})),
                                        constant(Tensor({2, 1, 15, 15})), {1, 1}),
                    ShapeNotDivisible);
}

TEST_CASE("translate with a zero-head model reduces to scaled noise injection") {
    Rng rng(304);
    UNetConfig cfg;
    cfg.base_channels = 8;
    cfg.channel_mult = {1, 2};
    cfg.time_embed_dim = 16;
    DiffusionModel model(cfg, rng); // zero output head by construction
    const auto sched = NoiseSchedule::linear(20);
    Tensor ref = Tensor::rand_uniform({1, 16, 16}, rng, -1.0, 1.0);
    Tensor cond = Tensor::rand_uniform({1, 16, 16}, rng, -1.0, 1.0);

    Rng s1(77), s2(77);
    const Tensor out1 = translate(model, ref, cond, 18, sched, s1);
    // reproduce: eps-hat = 0 so the result is clamp(forward_noise / sqrt(abar))
    Tensor eps = Tensor::randn({1, 1, 16, 16}, s2);
    const Tensor xt = forward_noise(ref.reshaped({1, 1, 16, 16}), 18, eps, sched);
    const double inv = 1.0 / std::sqrt(sched.alphabar(18));
    for (int64_t i = 0; i < out1.numel(); ++i) {
        const double expect = std::min(1.0, std::max(-1.0, xt[i] * inv));
        CHECK(out1[i] == doctest::Approx(expect));
    }

    // fixed seed -> bit-identical output
    Rng s3(77);
    const Tensor out2 = translate(model, ref, cond, 18, sched, s3);
    for (int64_t i = 0; i < out1.numel(); ++i) CHECK(out1[i] == out2[i]);
}

TEST_CASE("toy training reduces held-out noise-prediction error") {
    Rng rng(305);
    UNetConfig cfg;
    cfg.base_channels = 8;
    cfg.channel_mult = {1, 2};
    cfg.time_embed_dim = 16;
    DiffusionModel model(cfg, rng);
    const auto sched = NoiseSchedule::linear(20);

    // tiny structured dataset
    std::vector<Tensor> imgs;
    for (int i = 0; i < 4; ++i) {
        Tensor img({1, 1, 16, 16});
        for (int64_t y = 0; y < 16; ++y)
            for (int64_t x = 0; x < 16; ++x)
                img[y * 16 + x] = std::sin(0.4 * x + i) * std::cos(0.3 * y - i);
        imgs.push_back(img);
    }
    auto heldout_err = [&] {
        NoGradGuard ng;
        Rng erng(555);
        double total = 0.0;
        for (int k = 0; k < 8; ++k) {
            const auto& img = imgs[static_cast<size_t>(k) % imgs.size()];
            const int t = 1 + static_cast<int>(erng.uniform_int(20));
            Tensor eps = Tensor::randn(img.shape(), erng);
            const Tensor xt = forward_noise(img, t, eps, sched);
            Var eh = model.predict_noise(constant(xt), constant(img), constant(img), {t});
            total += ops::l1_mean(eh, constant(eps))->value[0];
        }
        return total / 8.0;
    };

    const double before = heldout_err();
    nn::Adam opt(model.params(), 2e-3);
    Rng trng(306);
    for (int step = 0; step < 120; ++step) {
        const auto& img = imgs[static_cast<size_t>(trng.uniform_int(4))];
        const int t = 1 + static_cast<int>(trng.uniform_int(20));
        Tensor eps = Tensor::randn(img.shape(), trng);
        const Tensor xt = forward_noise(img, t, eps, sched);
        Var eh = model.predict_noise(constant(xt), constant(img), constant(img), {t});
        Var loss = loss_noise(eh, eps);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(heldout_err() < before);
}
