#include <doctest.h>

#include "gradcheck.hpp"
#include "xmreg/errors.hpp"
#include "xmreg/layers.hpp"
#include "xmreg/optim.hpp"
#include "xmreg/ops.hpp"
#include "xmreg/serialize.hpp"

using namespace xmreg;
using xmreg::testing::max_rel_grad_error;

namespace {

Var randn_leaf(std::vector<int64_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::randn(std::move(shape), rng);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] *= scale;
    return leaf(std::move(t));
}

} // namespace

TEST_CASE("elementwise ops match central differences") {
    Rng rng(1);
    Var a = randn_leaf({2, 3, 4, 4}, rng);
    Var b = randn_leaf({2, 3, 4, 4}, rng);

    CHECK(max_rel_grad_error({a, b}, [&] {
        return ops::mean_all(ops::mul(ops::add(a, b), ops::sub(a, b)));
    }) < 1e-6);

    CHECK(max_rel_grad_error({a}, [&] {
        return ops::mean_all(ops::silu(ops::mul_scalar(a, 1.7)));
    }) < 1e-6);

    CHECK(max_rel_grad_error({a}, [&] {
        return ops::mean_all(ops::tanh(ops::add_scalar(a, 0.3)));
    }) < 1e-6);
}

TEST_CASE("clamp gradient is zero outside the band") {
    Var x = leaf(Tensor::from({3}, {-2.0, 0.5, 2.0}));
    Var y = ops::mean_all(ops::clamp(x, -1.0, 1.0));
    backward(y);
    CHECK(x->grad[0] == 0.0);
    CHECK(x->grad[1] == doctest::Approx(1.0 / 3.0));
    CHECK(x->grad[2] == 0.0);
}

TEST_CASE("conv2d forward matches direct convolution") {
    Rng rng(2);
    Var x = randn_leaf({1, 2, 5, 5}, rng);
    Var w = randn_leaf({3, 2, 3, 3}, rng);
    Var b = randn_leaf({3}, rng);
    Var y = ops::conv2d(x, w, b, 1, 1);
    REQUIRE(y->value.shape() == std::vector<int64_t>({1, 3, 5, 5}));
    // direct sum at a few positions
    for (auto [co, oy, ox] : {std::array<int64_t, 3>{0, 0, 0}, {1, 2, 3}, {2, 4, 4}}) {
        double acc = b->value[co];
        for (int64_t ci = 0; ci < 2; ++ci)
            for (int64_t ky = 0; ky < 3; ++ky)
                for (int64_t kx = 0; kx < 3; ++kx) {
                    const int64_t iy = oy - 1 + ky, ix = ox - 1 + kx;
                    if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                    acc += x->value.at(0, ci, iy, ix) * w->value.at(co, ci, ky, kx);
                }
        CHECK(y->value.at(0, co, oy, ox) == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("conv2d gradients (stride 1 and 2)") {
    Rng rng(3);
    for (int stride : {1, 2}) {
        Var x = randn_leaf({2, 2, 6, 6}, rng);
        Var w = randn_leaf({3, 2, 3, 3}, rng);
        Var b = randn_leaf({3}, rng);
        CHECK(max_rel_grad_error({x, w, b}, [&] {
            return ops::mean_all(ops::mul(ops::conv2d(x, w, b, stride, 1),
                                          ops::conv2d(x, w, b, stride, 1)));
        }) < 1e-5);
    }
}

TEST_CASE("linear gradients") {
    Rng rng(4);
    Var x = randn_leaf({3, 5}, rng);
    Var w = randn_leaf({4, 5}, rng);
    Var b = randn_leaf({4}, rng);
    CHECK(max_rel_grad_error({x, w, b}, [&] {
        Var y = ops::linear(x, w, b);
        return ops::mean_all(ops::mul(y, y));
    }) < 1e-6);
}

TEST_CASE("group_norm normalizes and differentiates") {
    Rng rng(5);
    Var x = randn_leaf({2, 4, 3, 3}, rng);
    Var g = leaf(Tensor::full({4}, 1.0));
    Var be = leaf(Tensor::zeros({4}));
    Var y = ops::group_norm(x, g, be, 2);
    // per (sample, group) mean ~ 0
    double m = 0;
    for (int64_t i = 0; i < 2 * 3 * 3; ++i) m += y->value[i];
    CHECK(std::abs(m / (2 * 3 * 3)) < 1e-10);

    CHECK(max_rel_grad_error({x, g, be}, [&] {
        Var out = ops::group_norm(x, g, be, 2);
        return ops::mean_all(ops::mul(out, ops::add_scalar(out, 0.5)));
    }, 1e-5) < 1e-4);
}

TEST_CASE("grid_sample matches bilinear taps and backpropagates") {
    Rng rng(6);
    Var x = randn_leaf({1, 2, 4, 4}, rng);
    Tensor coords({1, 2, 2, 2});
    coords.at(0, 0, 0, 0) = 1.25; coords.at(0, 1, 0, 0) = 2.5;
    coords.at(0, 0, 0, 1) = 0.0;  coords.at(0, 1, 0, 1) = 0.0;
    coords.at(0, 0, 1, 0) = 3.0;  coords.at(0, 1, 1, 0) = 3.0;
    coords.at(0, 0, 1, 1) = -2.0; coords.at(0, 1, 1, 1) = 1.0; // fully out of bounds

    Var y = ops::grid_sample(x, coords);
    CHECK(y->value.at(0, 0, 0, 1) == doctest::Approx(x->value.at(0, 0, 0, 0)));
    CHECK(y->value.at(0, 0, 1, 0) == doctest::Approx(x->value.at(0, 0, 3, 3)));
    CHECK(y->value.at(0, 0, 1, 1) == doctest::Approx(0.0));

    CHECK(max_rel_grad_error({x}, [&] {
        Var out = ops::grid_sample(x, coords);
        return ops::mean_all(ops::mul(out, out));
    }) < 1e-6);
}

TEST_CASE("correlation forward and gradients") {
    Rng rng(7);
    Var f1 = randn_leaf({1, 3, 4, 4}, rng);
    Var f2 = randn_leaf({1, 3, 4, 4}, rng);
    Var c = ops::correlation(f1, f2, 1);
    REQUIRE(c->value.shape() == std::vector<int64_t>({1, 9, 4, 4}));
    // center tap (dy=dx=0) equals the normalized dot product
    double acc = 0;
    for (int64_t ch = 0; ch < 3; ++ch) acc += f1->value.at(0, ch, 2, 1) * f2->value.at(0, ch, 2, 1);
    CHECK(c->value.at(0, 4, 2, 1) == doctest::Approx(acc / std::sqrt(3.0)));
    // out-of-bounds shifts are zero
    CHECK(c->value.at(0, 0, 0, 0) == 0.0);

    CHECK(max_rel_grad_error({f1, f2}, [&] {
        Var out = ops::correlation(f1, f2, 1);
        return ops::mean_all(ops::mul(out, out));
    }) < 1e-5);
}

TEST_CASE("upsample, pooling, channel bias, per-sample scale") {
    Rng rng(8);
    Var x = randn_leaf({2, 3, 3, 3}, rng);
    Var b = randn_leaf({2, 3}, rng);
    CHECK(max_rel_grad_error({x, b}, [&] {
        Var u = ops::upsample_nearest2x(ops::add_channel_bias(x, b));
        Var p = ops::global_mean_pool(ops::scale_per_sample(u, {0.7, -1.3}));
        return ops::mean_all(ops::mul(p, p));
    }) < 1e-6);
}

TEST_CASE("concat and reshape route gradients") {
    Rng rng(9);
    Var a = randn_leaf({2, 2, 3, 3}, rng);
    Var b = randn_leaf({2, 1, 3, 3}, rng);
    CHECK(max_rel_grad_error({a, b}, [&] {
        Var c = ops::concat_channels({a, b});
        Var r = ops::reshape(c, {2, 27});
        return ops::mean_all(ops::mul(r, r));
    }) < 1e-6);
}

TEST_CASE("masked losses") {
    // hand-computed case: half mask, difference 2 on the valid half -> 2
    Tensor a({1, 1, 2, 2}), b({1, 1, 2, 2}), m({1, 1, 2, 2});
    a.fill(0.0);
    b[0] = -2.0; b[1] = -2.0; b[2] = 100.0; b[3] = 100.0;
    m[0] = 1.0; m[1] = 1.0; m[2] = 0.0; m[3] = 0.0;
    Var loss = ops::masked_l1_mean(constant(a), constant(b), m);
    CHECK(loss->value[0] == doctest::Approx(2.0));

    Tensor zero_mask({1, 1, 2, 2});
    CHECK_THROWS_AS(ops::masked_l1_mean(constant(a), constant(b), zero_mask), EmptyMask);

    Rng rng(10);
    Var x = randn_leaf({2, 2, 3, 3}, rng);
    Tensor tgt = Tensor::randn({2, 2, 3, 3}, rng);
    Tensor mask({2, 1, 3, 3});
    for (int64_t i = 0; i < mask.numel(); ++i) mask[i] = (i % 3 == 0) ? 1.0 : 0.0;
    CHECK(max_rel_grad_error({x}, [&] {
        return ops::masked_l1_mean(x, constant(tgt), mask);
    }) < 1e-5);
}

TEST_CASE("adam minimizes a quadratic") {
    Var w = leaf(Tensor::from({2}, {5.0, -3.0}));
    nn::Adam opt({w}, 0.1);
    for (int i = 0; i < 500; ++i) {
        Var loss = ops::mean_all(ops::mul(w, w));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    CHECK(std::abs(w->value[0]) < 1e-2);
    CHECK(std::abs(w->value[1]) < 1e-2);
}

TEST_CASE("one-cycle schedule ramps up then anneals") {
    nn::OneCycleLr s(4e-4, 1000);
    CHECK(s.at(0) == doctest::Approx(4e-4 / 25.0));
    CHECK(s.at(300) == doctest::Approx(4e-4));
    CHECK(s.at(999) < 1e-6);
    double prev = s.at(0);
    for (int64_t t = 1; t <= 300; ++t) {
        CHECK(s.at(t) >= prev - 1e-12);
        prev = s.at(t);
    }
}

TEST_CASE("checkpoint round-trip is bit-exact") {
    Rng rng(11);
    Checkpoint ck;
    ck.kind = "test";
    ck.it = 3;
    ck.rng_state = rng.save_state();
    ck.meta["note"] = "x";
    ck.tensors.emplace("a.w", Tensor::randn({3, 4}, rng));
    ck.tensors.emplace("b.w", Tensor::randn({2, 2, 2, 2}, rng));
    const std::string path = "/tmp/xmreg_test_ckpt.bin";
    save_checkpoint(path, ck);
    const Checkpoint rt = load_checkpoint(path);
    CHECK(rt.kind == ck.kind);
    CHECK(rt.it == ck.it);
    CHECK(rt.rng_state == ck.rng_state);
    CHECK(tensor_map_hash(rt.tensors) == tensor_map_hash(ck.tensors));
    for (const auto& [name, t] : ck.tensors) {
        const auto& o = rt.tensors.at(name);
        for (int64_t i = 0; i < t.numel(); ++i) CHECK(o[i] == t[i]);
    }
}

TEST_CASE("no-grad guard suppresses graph building") {
    Rng rng(12);
    Var x = randn_leaf({2, 2}, rng);
    {
        NoGradGuard ng;
        Var y = ops::mul(x, x);
        CHECK_FALSE(y->requires_grad);
    }
    Var y = ops::mul(x, x);
    CHECK(y->requires_grad);
}

TEST_CASE("rng determinism and state save/load") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    const std::string st = a.save_state();
    const double next = a.normal();
    Rng c;
    c.load_state(st);
    CHECK(c.normal() == next);
}
