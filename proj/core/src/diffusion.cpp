#include "xmreg/diffusion.hpp"

#include <cmath>

#include "xmreg/errors.hpp"
#include "xmreg/ops.hpp"

namespace xmreg::diffusion {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
    std::vector<double> betas(static_cast<size_t>(steps));
    for (int i = 0; i < steps; ++i)
        betas[static_cast<size_t>(i)] =
            steps == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * i / (steps - 1);
    return from_betas(std::move(betas));
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
    NoiseSchedule s;
    s.total_steps = static_cast<int>(betas.size());
    s.beta = std::move(betas);
    s.alpha_bar.resize(s.beta.size());
    double prod = 1.0;
    for (size_t i = 0; i < s.beta.size(); ++i) {
        // beta == 0 is tolerated (degenerate identity schedule); 1 is not
        if (!(s.beta[i] >= 0.0 && s.beta[i] < 1.0))
            throw Error("noise schedule requires 0 <= beta < 1");
        prod *= 1.0 - s.beta[i];
        s.alpha_bar[i] = prod;
    }
    return s;
}

void NoiseSchedule::check_timestep(int t) const {
    if (t < 1 || t > total_steps)
        throw TimestepOutOfRange("timestep " + std::to_string(t) + " outside [1, " +
                                 std::to_string(total_steps) + "]");
}

double NoiseSchedule::alphabar(int t) const {
    check_timestep(t);
    return alpha_bar[static_cast<size_t>(t - 1)];
}

Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw ShapeMismatch("forward_noise: x0 " + x0.shape_str() + " vs eps " + eps.shape_str());
    const double ab = sched.alphabar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    Tensor out = x0;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

Tensor forward_noise_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                           const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw ShapeMismatch("forward_noise_batch: shapes differ");
    const int64_t n = x0.dim(0), per = x0.numel() / n;
    Tensor out = x0;
    for (int64_t b = 0; b < n; ++b) {
        const double ab = sched.alphabar(t[static_cast<size_t>(b)]);
        const double ca = std::sqrt(ab), cb = std::sqrt(1.0 - ab);
        for (int64_t i = 0; i < per; ++i)
            out[b * per + i] = ca * x0[b * per + i] + cb * eps[b * per + i];
    }
    return out;
}

Tensor tweedie_one_step(const Tensor& x_t, const Tensor& eps_hat, int t,
                        const NoiseSchedule& sched) {
    if (!x_t.same_shape(eps_hat))
        throw ShapeMismatch("tweedie_one_step: shapes differ");
    const double ab = sched.alphabar(t);
    const double inv = 1.0 / std::sqrt(ab);
    const double c = std::sqrt(1.0 - ab) * inv;
    Tensor out = x_t;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = inv * x_t[i] - c * eps_hat[i];
    return out;
}

Var tweedie_one_step_batch(const Tensor& x_t, const Var& eps_hat, const std::vector<int>& t,
                           const NoiseSchedule& sched) {
    const int64_t n = x_t.dim(0);
    std::vector<double> inv(static_cast<size_t>(n)), c(static_cast<size_t>(n));
    for (int64_t b = 0; b < n; ++b) {
        const double ab = sched.alphabar(t[static_cast<size_t>(b)]);
        inv[static_cast<size_t>(b)] = 1.0 / std::sqrt(ab);
        c[static_cast<size_t>(b)] = -std::sqrt(1.0 - ab) / std::sqrt(ab);
    }
    Var base = ops::scale_per_sample(constant(x_t), inv);
    Var corr = ops::scale_per_sample(eps_hat, c);
    return ops::add(base, corr);
}

Var loss_noise(const Var& eps_hat, const Tensor& eps) {
    return ops::l1_mean(eps_hat, constant(eps));
}

Var loss_translate(const Var& x_hat, const Tensor& x_target, const Tensor& mask) {
    return ops::masked_l1_mean(x_hat, constant(x_target), mask);
}

// ---- model ----

Var DiffusionModel::ResBlock::forward(const Var& x, const Var& emb) const {
    Var h = ops::silu(n1(x));
    h = c1(h);
    h = ops::add_channel_bias(h, temb(emb));
    h = ops::silu(n2(h));
    h = c2(h);
    return ops::add(h, has_skip ? skip(x) : x);
}

void DiffusionModel::ResBlock::collect(const std::string& prefix,
                                       std::vector<nn::NamedParam>& out) const {
    n1.collect_params(prefix + ".n1", out);
    n2.collect_params(prefix + ".n2", out);
    c1.collect_params(prefix + ".c1", out);
    c2.collect_params(prefix + ".c2", out);
    temb.collect_params(prefix + ".temb", out);
    if (has_skip) skip.collect_params(prefix + ".skip", out);
}

DiffusionModel::DiffusionModel(const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int64_t td = cfg.time_embed_dim;
    time1_ = nn::Linear(td, td, rng);
    time2_ = nn::Linear(td, td, rng);

    auto make_block = [&](int64_t ci, int64_t co) {
        ResBlock b;
        b.n1 = nn::GroupNorm(ci, nn::groups_for(ci));
        b.c1 = nn::Conv2d(ci, co, 3, 1, 1, rng);
        b.temb = nn::Linear(td, co, rng);
        b.n2 = nn::GroupNorm(co, nn::groups_for(co));
        b.c2 = nn::Conv2d(co, co, 3, 1, 1, rng);
        b.has_skip = ci != co;
        if (b.has_skip) b.skip = nn::Conv2d(ci, co, 1, 1, 0, rng);
        return b;
    };

    const size_t levels = cfg.channel_mult.size();
    std::vector<int64_t> chans(levels);
    for (size_t i = 0; i < levels; ++i) chans[i] = cfg.base_channels * cfg.channel_mult[i];

    stem_ = nn::Conv2d(cfg.in_channels(), chans[0], 3, 1, 1, rng);
    for (size_t i = 0; i < levels; ++i) {
        down_blocks_.push_back(make_block(chans[i], chans[i]));
        if (i + 1 < levels) down_convs_.emplace_back(chans[i], chans[i + 1], 3, 2, 1, rng);
    }
    mid_ = make_block(chans.back(), chans.back());
    for (size_t i = levels - 1; i > 0; --i) {
        up_convs_.emplace_back(chans[i], chans[i - 1], 3, 1, 1, rng);
        // concat with the skip feature doubles the channel count
        up_blocks_.push_back(make_block(2 * chans[i - 1], chans[i - 1]));
    }
    out_norm_ = nn::GroupNorm(chans[0], nn::groups_for(chans[0]));
    out_conv_ = nn::Conv2d(chans[0], cfg.image_channels, 3, 1, 1, rng, /*zero_init=*/true);
}

Var DiffusionModel::predict_noise(const Var& x_t, const Var& cond_img, const Var& cond_mim,
                                  const std::vector<int>& t) const {
    const auto& s = x_t->value.shape();
    if (!(cond_img->value.dim(0) == s[0] && cond_img->value.dim(2) == s[2] &&
          cond_img->value.dim(3) == s[3]) ||
        !(cond_mim->value.dim(0) == s[0] && cond_mim->value.dim(2) == s[2] &&
          cond_mim->value.dim(3) == s[3]))
        throw ShapeMismatch("predict_noise: condition shapes do not match x_t");
    const int64_t div = int64_t{1} << (cfg_.channel_mult.size() - 1);
    if (s[2] % div != 0 || s[3] % div != 0)
        throw ShapeNotDivisible("predict_noise: spatial dims must be divisible by " +
                                std::to_string(div));

    Var emb = constant(ops::timestep_embedding(t, static_cast<int>(cfg_.time_embed_dim)));
    emb = ops::silu(time1_(emb));
    emb = time2_(emb);

    Var x = stem_(ops::concat_channels({x_t, cond_img, cond_mim}));
    std::vector<Var> skips;
    for (size_t i = 0; i < down_blocks_.size(); ++i) {
        x = down_blocks_[i].forward(x, emb);
        skips.push_back(x);
        if (i < down_convs_.size()) x = down_convs_[i](x);
    }
    x = mid_.forward(x, emb);
    for (size_t i = 0; i < up_blocks_.size(); ++i) {
        x = up_convs_[i](ops::upsample_nearest2x(x));
        const Var& skip = skips[skips.size() - 2 - i];
        x = ops::concat_channels({x, skip});
        x = up_blocks_[i].forward(x, emb);
    }
    x = ops::silu(out_norm_(x));
    return out_conv_(x);
}

void DiffusionModel::collect_params(const std::string& prefix,
                                    std::vector<nn::NamedParam>& out) const {
    stem_.collect_params(prefix + ".stem", out);
    time1_.collect_params(prefix + ".time1", out);
    time2_.collect_params(prefix + ".time2", out);
    for (size_t i = 0; i < down_blocks_.size(); ++i)
        down_blocks_[i].collect(prefix + ".down" + std::to_string(i), out);
    for (size_t i = 0; i < down_convs_.size(); ++i)
        down_convs_[i].collect_params(prefix + ".dconv" + std::to_string(i), out);
    mid_.collect(prefix + ".mid", out);
    for (size_t i = 0; i < up_convs_.size(); ++i)
        up_convs_[i].collect_params(prefix + ".uconv" + std::to_string(i), out);
    for (size_t i = 0; i < up_blocks_.size(); ++i)
        up_blocks_[i].collect(prefix + ".up" + std::to_string(i), out);
    out_norm_.collect_params(prefix + ".onorm", out);
    out_conv_.collect_params(prefix + ".oconv", out);
}

Tensor translate(const DiffusionModel& model, const Tensor& x_ref, const Tensor& cond_mim,
                 int t2, const NoiseSchedule& sched, Rng& rng) {
    NoGradGuard ng;
    const bool single = x_ref.ndim() == 3;
    const Tensor ref = single
        ? x_ref.reshaped({1, x_ref.dim(0), x_ref.dim(1), x_ref.dim(2)})
        : x_ref;
    const Tensor mimc = single
        ? cond_mim.reshaped({1, cond_mim.dim(0), cond_mim.dim(1), cond_mim.dim(2)})
        : cond_mim;
    const int64_t n = ref.dim(0);
    Tensor eps = Tensor::randn(ref.shape(), rng);
    std::vector<int> ts(static_cast<size_t>(n), t2);
    Tensor x_t = forward_noise_batch(ref, ts, eps, sched);
    Var eh = model.predict_noise(constant(x_t), constant(ref), constant(mimc), ts);
    Var x0 = tweedie_one_step_batch(x_t, eh, ts, sched);
    Tensor out = x0->value;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = std::min(1.0, std::max(-1.0, out[i]));
    if (single) return out.reshaped({x_ref.dim(0), x_ref.dim(1), x_ref.dim(2)});
    return out;
}

Var translate_batch(const DiffusionModel& model, const Tensor& x_ref, const Var& cond_mim,
                    const std::vector<int>& t2, const Tensor& eps, const NoiseSchedule& sched) {
    Tensor x_t = forward_noise_batch(x_ref, t2, eps, sched);
    Var eh = model.predict_noise(constant(x_t), constant(x_ref), cond_mim, t2);
    Var x0 = tweedie_one_step_batch(x_t, eh, t2, sched);
    return ops::clamp(x0, -1.0, 1.0);
}

} // namespace xmreg::diffusion
