#pragma once

#include <vector>

#include "xmreg/layers.hpp"
#include "xmreg/mim.hpp"
#include "xmreg/rng.hpp"

namespace xmreg::diffusion {

/// beta_t / cumulative alpha-bar table; timesteps are 1-based (1..T).
struct NoiseSchedule {
    int total_steps = 0;
    std::vector<double> beta;      // beta[t-1]
    std::vector<double> alpha_bar; // alpha_bar[t-1] = prod_{s<=t} (1 - beta_s)

    static NoiseSchedule linear(int steps, double beta_start = 1e-4, double beta_end = 0.02);
    static NoiseSchedule from_betas(std::vector<double> betas);

    double alphabar(int t) const; // validates 1 <= t <= T
    void check_timestep(int t) const;
};

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
Tensor forward_noise(const Tensor& x0, int t, const Tensor& eps, const NoiseSchedule& sched);
Tensor forward_noise_batch(const Tensor& x0, const std::vector<int>& t, const Tensor& eps,
                           const NoiseSchedule& sched);

/// One-step clean-image estimate: x_t / sqrt(abar_t) - sqrt(1-abar_t)/sqrt(abar_t) * eps_hat
Tensor tweedie_one_step(const Tensor& x_t, const Tensor& eps_hat, int t,
                        const NoiseSchedule& sched);
Var tweedie_one_step_batch(const Tensor& x_t, const Var& eps_hat, const std::vector<int>& t,
                           const NoiseSchedule& sched);

Var loss_noise(const Var& eps_hat, const Tensor& eps);
Var loss_translate(const Var& x_hat, const Tensor& x_target, const Tensor& mask);

struct UNetConfig {
    int64_t image_channels = 1;
    int64_t cond_image_channels = 1;
    int64_t cond_mim_channels = 1;
    int64_t base_channels = 64;
    std::vector<int64_t> channel_mult = {1, 2, 2}; // one entry per resolution
    int64_t time_embed_dim = 64;

    int64_t in_channels() const {
        return image_channels + cond_image_channels + cond_mim_channels;
    }
};

/// Conditional noise predictor: a small encoder-decoder over
/// concat(x_t, condition image, condition MIM map) with sinusoidal timestep
/// embeddings injected per block.
class DiffusionModel : public nn::Module {
public:
    DiffusionModel() = default;
    DiffusionModel(const UNetConfig& cfg, Rng& rng);

    /// All inputs [N,*,H,W]; H and W must be divisible by 2^(levels-1).
    Var predict_noise(const Var& x_t, const Var& cond_img, const Var& cond_mim,
                      const std::vector<int>& t) const;

    void collect_params(const std::string& prefix, std::vector<nn::NamedParam>& out) const override;
    const UNetConfig& config() const { return cfg_; }

private:
    struct ResBlock {
        nn::GroupNorm n1, n2;
        nn::Conv2d c1, c2, skip;
        nn::Linear temb;
        bool has_skip = false;

        Var forward(const Var& x, const Var& emb) const;
        void collect(const std::string& prefix, std::vector<nn::NamedParam>& out) const;
    };

    UNetConfig cfg_;
    nn::Conv2d stem_;
    nn::Linear time1_, time2_;
    std::vector<ResBlock> down_blocks_;
    std::vector<nn::Conv2d> down_convs_;
    ResBlock mid_;
    std::vector<nn::Conv2d> up_convs_;
    std::vector<ResBlock> up_blocks_;
    nn::GroupNorm out_norm_;
    nn::Conv2d out_conv_;
};

/// One-step translation: noise the reference image to t2, predict noise
/// under (reference, MIM) conditioning, apply the one-step estimate, clip
/// to [-1,1]. Deterministic given the rng state.
Tensor translate(const DiffusionModel& model, const Tensor& x_ref, const Tensor& cond_mim,
                 int t2, const NoiseSchedule& sched, Rng& rng);

/// Training-path variant with gradient flowing through the MIM condition;
/// noise and timesteps are supplied by the caller.
Var translate_batch(const DiffusionModel& model, const Tensor& x_ref, const Var& cond_mim,
                    const std::vector<int>& t2, const Tensor& eps, const NoiseSchedule& sched);

} // namespace xmreg::diffusion
