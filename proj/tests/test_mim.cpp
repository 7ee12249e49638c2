#include <doctest.h>

#include <cmath>
#include <complex>

#include "xmreg/errors.hpp"
#include "xmreg/mim.hpp"
#include "xmreg/optim.hpp"
#include "xmreg/ops.hpp"

using namespace xmreg;
using namespace xmreg::mim;

namespace {

// brute-force circular convolution of img with a wrap-around kernel
Tensor circular_conv(const Tensor& img, const Tensor& kernel) {
    const int64_t h = img.dim(1), w = img.dim(2);
    Tensor out({1, h, w});
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int64_t v = 0; v < h; ++v)
                for (int64_t u = 0; u < w; ++u) {
                    const int64_t ky = ((y - v) % h + h) % h;
                    const int64_t kx = ((x - u) % w + w) % w;
                    acc += img.data()[v * w + u] * kernel.data()[ky * w + kx];
                }
            out.data()[y * w + x] = acc;
        }
    return out;
}

// spatial-domain oracle for the full map: per orientation, sum over scales
// of sqrt(even^2 + odd^2), then max over orientations
Tensor spatial_mim_oracle(const Tensor& img, const LogGaborParams& p) {
    const int64_t h = img.dim(1), w = img.dim(2);
    LogGaborBank bank(h, w, p);
    Tensor best({1, h, w});
    for (int o = 0; o < p.num_orients; ++o) {
        Tensor amp({1, h, w});
        for (int s = 0; s < p.num_scales; ++s) {
            const auto [even, odd] = bank.spatial_kernel(s, o);
            const Tensor e = circular_conv(img, even);
            const Tensor od = circular_conv(img, odd);
            for (int64_t i = 0; i < h * w; ++i)
                amp.data()[i] += std::hypot(e.data()[i], od.data()[i]);
        }
        for (int64_t i = 0; i < h * w; ++i)
            best.data()[i] = o == 0 ? amp.data()[i] : std::max(best.data()[i], amp.data()[i]);
    }
    return best;
}

} // namespace

TEST_CASE("constant image maps to exactly zero") {
    Tensor img = Tensor::full({1, 32, 32}, 0.37);
    const auto f = compute_mim(img);
    CHECK(f.map.abs_max() == 0.0);
    CHECK(f.provenance == Provenance::Handcrafted);
}

TEST_CASE("filter kernels are zero-mean quadrature pairs") {
    LogGaborParams p;
    LogGaborBank bank(32, 32, p);
    for (int o = 0; o < p.num_orients; ++o)
        for (int s = 0; s < p.num_scales; ++s) {
            const auto [even, odd] = bank.spatial_kernel(s, o);
            CHECK(std::abs(even.sum()) < 1e-12);
            CHECK(std::abs(odd.sum()) < 1e-12);
        }
    // quadrature: even + i*odd transforms back to the (real) transfer function
    const auto [even, odd] = bank.spatial_kernel(1, 2);
    const Tensor& tf = bank.transfer(1, 2);
    const int64_t n = 32;
    // direct DFT at a few frequency samples
    for (auto [fy, fx] : {std::array<int64_t, 2>{1, 3}, {5, 0}, {12, 20}}) {
        std::complex<double> acc = 0.0;
        for (int64_t y = 0; y < n; ++y)
            for (int64_t x = 0; x < n; ++x) {
                const double ph = -2.0 * 3.14159265358979323846 *
                                  (static_cast<double>(fy * y) / n + static_cast<double>(fx * x) / n);
                acc += std::complex<double>(even.data()[y * n + x], odd.data()[y * n + x]) *
                       std::exp(std::complex<double>(0.0, ph));
            }
        CHECK(std::abs(acc.imag()) < 1e-9);
        CHECK(acc.real() == doctest::Approx(tf.data()[fy * n + fx]).epsilon(1e-7));
    }
}

TEST_CASE("single-orientation bank reduces to that orientation's amplitude") {
    Rng rng(200);
    Tensor img = Tensor::rand_uniform({1, 16, 16}, rng, 0.0, 1.0);
    LogGaborParams p;
    p.num_orients = 1;
    p.num_scales = 2;
    const auto f = compute_mim(img, p);
    const Tensor oracle = spatial_mim_oracle(img, p);
    for (int64_t i = 0; i < f.map.numel(); ++i)
        CHECK(f.map[i] == doctest::Approx(oracle[i]).epsilon(1e-8));
}

TEST_CASE("frequency path matches the spatial convolution oracle on 32x32") {
    Rng rng(201);
    Tensor img = Tensor::rand_uniform({1, 32, 32}, rng, -1.0, 1.0);
    LogGaborParams p; // full default bank
    const auto f = compute_mim(img, p);
    const Tensor oracle = spatial_mim_oracle(img, p);
    double worst = 0.0;
    const double scale = oracle.abs_max();
    for (int64_t i = 0; i < f.map.numel(); ++i)
        worst = std::max(worst, std::abs(f.map[i] - oracle[i]) / scale);
    CHECK(worst < 1e-4);
}

TEST_CASE("intensity-affine invariance") {
    Rng rng(202);
    Tensor img = Tensor::rand_uniform({1, 24, 24}, rng, 0.0, 1.0);
    const Tensor base = compute_mim(img).map;
    const Tensor base_norm = normalize_per_channel(base);
    for (double a : {0.5, 2.0, 10.0})
        for (double b : {-0.3, 0.4}) {
            Tensor scaled = img;
            for (int64_t i = 0; i < scaled.numel(); ++i) scaled[i] = a * img[i] + b;
            const Tensor m = compute_mim(scaled).map;
            double worst = 0.0;
            for (int64_t i = 0; i < m.numel(); ++i)
                worst = std::max(worst, std::abs(m[i] - a * base[i]));
            CHECK(worst < 1e-9 * std::max(1.0, a * base.abs_max()));

            const Tensor mn = normalize_per_channel(m);
            double worst_n = 0.0;
            for (int64_t i = 0; i < mn.numel(); ++i)
                worst_n = std::max(worst_n, std::abs(mn[i] - base_norm[i]));
            CHECK(worst_n < 1e-5);
        }
}

TEST_CASE("normalization trivia") {
    // channel with min=0, max=2: value 1 sits at the midpoint
    Tensor t({1, 1, 3});
    t[0] = 0.0; t[1] = 1.0; t[2] = 2.0;
    const Tensor n = normalize_per_channel(t);
    CHECK(n[0] == doctest::Approx(-1.0));
    CHECK(n[1] == doctest::Approx(0.0));
    CHECK(n[2] == doctest::Approx(1.0));

    // already spanning [-1,1]: fixed point
    Rng rng(203);
    Tensor u = Tensor::rand_uniform({1, 8, 8}, rng, -1.0, 1.0);
    u[0] = -1.0;
    u[1] = 1.0;
    const Tensor un = normalize_per_channel(u);
    for (int64_t i = 0; i < u.numel(); ++i) CHECK(std::abs(un[i] - u[i]) < 1e-7);

    // constant channel collapses to zero
    const Tensor c = normalize_per_channel(Tensor::full({1, 4, 4}, 3.3));
    CHECK(c.abs_max() == 0.0);

    // range always lands in [-1,1] with extremes hit
    Tensor r = Tensor::rand_uniform({2, 6, 6}, rng, -5.0, 7.0);
    const Tensor rn = normalize_per_channel(r);
    CHECK(rn.min() == doctest::Approx(-1.0));
    CHECK(rn.max() == doctest::Approx(1.0));
}

TEST_CASE("encoder output shape, determinism, zero head") {
    Rng rng(204);
    MimEncoderConfig cfg;
    cfg.layers = 3;
    cfg.hidden = 8;
    MimEncoder enc(cfg, rng);

    // odd sizes pass through unchanged (stride-1 network)
    Tensor img = Tensor::rand_uniform({1, 1, 17, 23}, rng, -1.0, 1.0);
    NoGradGuard ng;
    Var out1 = enc(constant(img));
    CHECK(out1->value.shape() == std::vector<int64_t>({1, 1, 17, 23}));
    Var out2 = enc(constant(img));
    for (int64_t i = 0; i < out1->value.numel(); ++i)
        CHECK(out1->value[i] == out2->value[i]);
    CHECK(out1->value.min() >= -1.0);
    CHECK(out1->value.max() <= 1.0);

    // zeroing the final conv forces an all-zero map (tanh(0) = 0)
    std::vector<nn::NamedParam> params;
    enc.collect_params("e", params);
    for (auto& p : params)
        if (p.name.find("conv2") != std::string::npos) p.var->value.fill(0.0);
    Var out3 = enc(constant(img));
    CHECK(out3->value.abs_max() == 0.0);
}

TEST_CASE("target-encoder loss decreases with training on aligned toys") {
    Rng rng(205);
    MimEncoderConfig cfg;
    cfg.layers = 3;
    cfg.hidden = 8;
    MimEncoder enc(cfg, rng);

    // toy aligned set: targets are normalized handcrafted maps of the inputs
    std::vector<Tensor> imgs, targets;
    for (int i = 0; i < 6; ++i) {
        Tensor img = Tensor::rand_uniform({1, 1, 16, 16}, rng, -1.0, 1.0);
        imgs.push_back(img);
        targets.push_back(normalize_per_channel(
            compute_mim(img.reshaped({1, 16, 16})).map).reshaped({1, 1, 16, 16}));
    }
    Tensor mask = Tensor::full({1, 1, 16, 16}, 1.0);

    auto total_loss = [&] {
        NoGradGuard ng;
        double s = 0.0;
        for (size_t i = 0; i < imgs.size(); ++i) {
            Var out = enc(constant(imgs[i]));
            s += loss_mim_target(constant(targets[i]), out, mask)->value[0];
        }
        return s;
    };
    const double before = total_loss();
    nn::Adam opt(enc.params(), 3e-3);
    for (int step = 0; step < 60; ++step) {
        const size_t i = static_cast<size_t>(step) % imgs.size();
        Var out = enc(constant(imgs[i]));
        Var loss = loss_mim_target(constant(targets[i]), out, mask);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(total_loss() < before);
}

TEST_CASE("mim loss values on crafted tensors") {
    // identical inputs -> 0
    Tensor a = Tensor::full({1, 1, 2, 2}, 0.25);
    Tensor mask = Tensor::full({1, 1, 2, 2}, 1.0);
    CHECK(loss_mim_target(constant(a), constant(a), mask)->value[0] == 0.0);

    // +1 offset everywhere under a full mask -> 1
    Tensor b = Tensor::full({1, 1, 2, 2}, 1.25);
    CHECK(loss_mim_target(constant(a), constant(b), mask)->value[0] == doctest::Approx(1.0));

    // half mask, difference 2 on the valid half -> 2
    Tensor c({1, 1, 2, 2});
    c[0] = 2.25; c[1] = 2.25; c[2] = -50.0; c[3] = 50.0;
    Tensor half({1, 1, 2, 2});
    half[0] = 1.0; half[1] = 1.0;
    CHECK(loss_mim_target(constant(a), constant(c), half)->value[0] == doctest::Approx(2.0));

    CHECK_THROWS_AS(loss_mim_target(constant(a), constant(b), Tensor({1, 1, 2, 2})), EmptyMask);

    // source loss: both-zero case
    Tensor xs = Tensor::full({1, 1, 2, 2}, 0.5);
    CHECK(loss_mim_source(constant(xs), xs, mask, constant(a), a, 0.7)->value[0] == 0.0);

    // only the mim-drift term: +0.5 everywhere, any lambda
    Tensor drift = Tensor::full({1, 1, 2, 2}, 0.75);
    CHECK(loss_mim_source(constant(xs), xs, mask, constant(drift), a, 123.0)->value[0] ==
          doctest::Approx(0.5));

    // mixed case with lambda = 1: translated off by 0.2, mim off by 0.5
    Tensor xt = Tensor::full({1, 1, 2, 2}, 0.7);
    CHECK(loss_mim_source(constant(xs), xt, mask, constant(drift), a, 1.0)->value[0] ==
          doctest::Approx(0.2 + 0.5));
}
