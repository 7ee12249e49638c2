#include <benchmark/benchmark.h>

#include "xmreg/diffusion.hpp"
#include "xmreg/geometry.hpp"
#include "xmreg/mim.hpp"
#include "xmreg/ops.hpp"
#include "xmreg/regnet.hpp"

using namespace xmreg;

static void BM_Warp128(benchmark::State& state) {
    Rng rng(1);
    Tensor img = Tensor::rand_uniform({1, 128, 128}, rng, -1, 1);
    auto [h, dp] = geometry::random_homography(rng, 16.0, {128, 128});
    (void)dp;
    for (auto _ : state) benchmark::DoNotOptimize(geometry::warp(img, h));
}
BENCHMARK(BM_Warp128);

static void BM_CornersToHomography(benchmark::State& state) {
    Rng rng(2);
    geometry::CornerDisplacement dp;
    for (auto& c : dp.dp) c = {rng.uniform(-16, 16), rng.uniform(-16, 16)};
    for (auto _ : state)
        benchmark::DoNotOptimize(geometry::corners_to_homography(dp, {128, 128}));
}
BENCHMARK(BM_CornersToHomography);

static void BM_Mim64(benchmark::State& state) {
    Rng rng(3);
    Tensor img = Tensor::rand_uniform({1, 64, 64}, rng, -1, 1);
    for (auto _ : state) benchmark::DoNotOptimize(mim::compute_mim(img));
}
BENCHMARK(BM_Mim64);

static void BM_Conv2d64(benchmark::State& state) {
    Rng rng(4);
    Var x = constant(Tensor::randn({4, 32, 64, 64}, rng));
    Var w = leaf(Tensor::randn({32, 32, 3, 3}, rng));
    Var b = leaf(Tensor::randn({32}, rng));
    NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(ops::conv2d(x, w, b, 1, 1));
}
BENCHMARK(BM_Conv2d64);

static void BM_RegnetInfer64(benchmark::State& state) {
    Rng rng(5);
    regnet::RegNetConfig cfg;
    cfg.channels = {16, 24, 32, 48};
    cfg.corr_radius = 3;
    cfg.head_hidden = 48;
    regnet::RegNetwork net(cfg, rng);
    Tensor a = Tensor::rand_uniform({1, 1, 64, 64}, rng, -1, 1);
    Tensor b = Tensor::rand_uniform({1, 1, 64, 64}, rng, -1, 1);
    NoGradGuard ng;
    for (auto _ : state) benchmark::DoNotOptimize(net.estimate(constant(a), constant(b)));
}
BENCHMARK(BM_RegnetInfer64);

static void BM_Translate64(benchmark::State& state) {
    Rng rng(6);
    diffusion::UNetConfig cfg;
    cfg.base_channels = 16;
    cfg.time_embed_dim = 32;
    diffusion::DiffusionModel model(cfg, rng);
    const auto sched = diffusion::NoiseSchedule::linear(50);
    Tensor ref = Tensor::rand_uniform({1, 64, 64}, rng, -1, 1);
    Tensor cond = Tensor::rand_uniform({1, 64, 64}, rng, -1, 1);
    for (auto _ : state)
        benchmark::DoNotOptimize(diffusion::translate(model, ref, cond, 45, sched, rng));
}
BENCHMARK(BM_Translate64);

BENCHMARK_MAIN();
