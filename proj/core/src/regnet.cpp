#include "xmreg/regnet.hpp"

#include <cmath>

#include "xmreg/errors.hpp"
#include "xmreg/ops.hpp"

namespace xmreg::regnet {

using geometry::CornerDisplacement;
using geometry::Frame;
using geometry::Homography;

CornerDisplacement RegPrediction::final_dp(int64_t n) const {
    return dp_at(final()->value, n);
}

CornerDisplacement dp_at(const Tensor& batch, int64_t n) {
    CornerDisplacement dp;
    for (int c = 0; c < 4; ++c) {
        dp.dp[static_cast<size_t>(c)][0] = batch[(n * 4 + c) * 2 + 0];
        dp.dp[static_cast<size_t>(c)][1] = batch[(n * 4 + c) * 2 + 1];
    }
    return dp;
}

Tensor dp_batch(const std::vector<CornerDisplacement>& dps) {
    const int64_t n = static_cast<int64_t>(dps.size());
    Tensor out({n, 4, 2});
    for (int64_t b = 0; b < n; ++b)
        for (int c = 0; c < 4; ++c) {
            out[(b * 4 + c) * 2 + 0] = dps[static_cast<size_t>(b)].dp[static_cast<size_t>(c)][0];
            out[(b * 4 + c) * 2 + 1] = dps[static_cast<size_t>(b)].dp[static_cast<size_t>(c)][1];
        }
    return out;
}

RegNetwork::RegNetwork(const RegNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (static_cast<int>(cfg.channels.size()) != cfg.num_scales ||
        static_cast<int>(cfg.iters_per_scale.size()) != cfg.num_scales)
        throw ConfigError("regnet: channels/iters_per_scale must have num_scales entries");
    for (int l = 0; l < cfg.num_scales; ++l) {
        EncLevel e;
        const int64_t ci = l == 0 ? 1 : cfg.channels[static_cast<size_t>(l - 1)];
        const int64_t co = cfg.channels[static_cast<size_t>(l)];
        e.reduce = nn::Conv2d(ci, co, 3, l == 0 ? 1 : 2, 1, rng);
        e.n1 = nn::GroupNorm(co, nn::groups_for(co));
        e.conv = nn::Conv2d(co, co, 3, 1, 1, rng);
        e.n2 = nn::GroupNorm(co, nn::groups_for(co));
        enc_.push_back(std::move(e));
    }
    const int64_t d = 2 * cfg.corr_radius + 1;
    const int64_t corr_ch = d * d + 2; // cost volume + normalized coords
    for (int l = 0; l < cfg.num_scales; ++l) {
        Head h;
        h.in1x1 = nn::Conv2d(corr_ch, cfg.head_hidden, 1, 1, 0, rng);
        h.mid1 = nn::Conv2d(cfg.head_hidden, cfg.head_hidden, 3, 2, 1, rng);
        h.mid2 = nn::Conv2d(cfg.head_hidden, cfg.head_hidden, 3, 2, 1, rng);
        h.fc1 = nn::Linear(cfg.head_hidden, cfg.head_hidden, rng);
        h.fc2 = nn::Linear(cfg.head_hidden, 8, rng, /*zero_init=*/true);
        heads_.push_back(std::move(h));
    }
}

std::vector<Var> RegNetwork::encode(const Var& x) const {
    std::vector<Var> feats;
    Var h = x;
    for (const auto& e : enc_) {
        h = e.reduce(h);
        h = ops::silu(e.n1(h));
        h = e.conv(h);
        h = ops::silu(e.n2(h));
        feats.push_back(h);
    }
    return feats;
}

Var RegNetwork::head_forward(const Head& h, const Var& inp) const {
    Var x = ops::silu(h.in1x1(inp));
    x = ops::silu(h.mid1(x));
    x = ops::silu(h.mid2(x));
    x = ops::global_mean_pool(x);
    x = ops::silu(h.fc1(x));
    return h.fc2(x);
}

namespace {

// sampling grid that warps the level-l feature map of x1 by the current
// full-resolution estimate
Tensor batched_coords(const Tensor& base_dp, const Frame& full, int64_t lh, int64_t lw,
                      double scale) {
    const int64_t n = base_dp.dim(0);
    Tensor coords({n, 2, lh, lw});
    for (int64_t b = 0; b < n; ++b) {
        const Homography h = geometry::corners_to_homography(dp_at(base_dp, b), full);
        const Tensor c = geometry::warp_coords(h, lh, lw, scale);
        std::copy(c.data(), c.data() + 2 * lh * lw, coords.data() + b * 2 * lh * lw);
    }
    return coords;
}

Tensor coord_channels(int64_t n, int64_t lh, int64_t lw) {
    Tensor out({n, 2, lh, lw});
    for (int64_t b = 0; b < n; ++b)
        for (int64_t y = 0; y < lh; ++y)
            for (int64_t x = 0; x < lw; ++x) {
                out.at(b, 0, y, x) = lw > 1 ? 2.0 * x / (lw - 1) - 1.0 : 0.0;
                out.at(b, 1, y, x) = lh > 1 ? 2.0 * y / (lh - 1) - 1.0 : 0.0;
            }
    return out;
}

} // namespace

RegPrediction RegNetwork::estimate(const Var& x1, const Var& x2) const {
    if (!x1->value.same_shape(x2->value))
        throw ShapeMismatch("estimate: " + x1->value.shape_str() + " vs " +
                            x2->value.shape_str());
    const int64_t n = x1->value.dim(0);
    const int64_t ih = x1->value.dim(2), iw = x1->value.dim(3);
    const int64_t div = int64_t{1} << (cfg_.num_scales - 1);
    if (ih % div != 0 || iw % div != 0)
        throw ShapeNotDivisible("estimate: spatial dims must be divisible by " +
                                std::to_string(div));

    const auto f1 = encode(x1);
    const auto f2 = encode(x2);
    const Frame full{iw, ih};

    Tensor base({n, 4, 2}); // running estimate, detached between iterations
    RegPrediction pred;
    for (int level = cfg_.num_scales - 1; level >= 0; --level) {
        const double scale = static_cast<double>(int64_t{1} << level);
        const Var& feat1 = f1[static_cast<size_t>(level)];
        const Var& feat2 = f2[static_cast<size_t>(level)];
        const int64_t lh = feat1->value.dim(2), lw = feat1->value.dim(3);
        const Tensor cc = coord_channels(n, lh, lw);
        for (int q = 0; q < cfg_.iters_per_scale[static_cast<size_t>(level)]; ++q) {
            const Tensor coords = batched_coords(base, full, lh, lw, scale);
            Var warped = ops::grid_sample(feat1, coords);
            Var corr = ops::correlation(warped, feat2, cfg_.corr_radius);
            Var inp = ops::concat_channels({corr, constant(cc)});
            Var residual = head_forward(heads_[static_cast<size_t>(level)], inp);
            residual = ops::mul_scalar(residual, scale); // level px -> full-res px
            Var iterate =
                ops::reshape(ops::add(constant(base.reshaped({n, 8})), residual), {n, 4, 2});
            base = iterate->value;
            pred.iterates.push_back(std::move(iterate));
        }
    }
    return pred;
}

void RegNetwork::collect_params(const std::string& prefix,
                                std::vector<nn::NamedParam>& out) const {
    for (size_t l = 0; l < enc_.size(); ++l) {
        const std::string p = prefix + ".enc" + std::to_string(l);
        enc_[l].reduce.collect_params(p + ".reduce", out);
        enc_[l].n1.collect_params(p + ".n1", out);
        enc_[l].conv.collect_params(p + ".conv", out);
        enc_[l].n2.collect_params(p + ".n2", out);
    }
    for (size_t l = 0; l < heads_.size(); ++l) {
        const std::string p = prefix + ".head" + std::to_string(l);
        heads_[l].in1x1.collect_params(p + ".in", out);
        heads_[l].mid1.collect_params(p + ".mid1", out);
        heads_[l].mid2.collect_params(p + ".mid2", out);
        heads_[l].fc1.collect_params(p + ".fc1", out);
        heads_[l].fc2.collect_params(p + ".fc2", out);
    }
}

void RegNetwork::copy_parameters_from(const RegNetwork& src) {
    if (!(cfg_ == src.cfg_))
        throw ArchitectureMismatch("copy_parameters_from: configurations differ");
    auto dst_params = named_params();
    auto src_params = src.named_params();
    for (size_t i = 0; i < dst_params.size(); ++i)
        dst_params[i].var->value = src_params[i].var->value;
}

RegNetwork RegNetwork::clone() const {
    Rng scratch(0);
    RegNetwork out(cfg_, scratch);
    out.copy_parameters_from(*this);
    return out;
}

Var loss_displacement(const RegPrediction& pred, const Tensor& gt, double gamma) {
    if (pred.iterates.empty()) throw Error("loss_displacement: empty prediction");
    Var total;
    for (const auto& it : pred.iterates) {
        Var term = ops::l1_mean(it, constant(gt));
        total = total ? ops::add(total, term) : term;
    }
    return ops::add(total, fgo_surrogate(pred.iterates, gt, gamma));
}

Var loss_pseudo(const RegPrediction& pred, const Tensor& pl, double gamma) {
    return loss_displacement(pred, pl, gamma);
}

Var fgo_surrogate(const std::vector<Var>& iterates, const Tensor& gt, double gamma) {
    const int n = static_cast<int>(iterates.size());
    Var total;
    for (int i = 0; i < n; ++i) {
        const double w = std::pow(gamma, static_cast<double>(n - 1 - i));
        Var term = ops::mul_scalar(ops::l1_mean(iterates[static_cast<size_t>(i)], constant(gt)), w);
        total = total ? ops::add(total, term) : term;
    }
    return total;
}

} // namespace xmreg::regnet
