#pragma once

#include <vector>

#include "xmreg/layers.hpp"
#include "xmreg/tensor.hpp"

namespace xmreg::mim {

/// Log-Gabor filter-bank configuration. Defaults follow common
/// phase-congruency practice; all values are config-exposed.
struct LogGaborParams {
    int num_scales = 4;      // N_s
    int num_orients = 6;     // N_o
    double min_wavelength = 3.0;
    double mult = 2.1;           // wavelength scaling between scales
    double sigma_on_f = 0.55;    // radial bandwidth (sigma of log-Gabor over f0)
    double d_theta_ratio = 1.2;  // angular sigma = (pi/N_o) / d_theta_ratio

    bool operator==(const LogGaborParams&) const = default;
};

/// Frequency-domain transfer functions of the bank for one image size.
/// Each (scale, orientation) entry is a real transfer function whose
/// inverse FFT is the complex quadrature kernel (real part even-symmetric,
/// imaginary part odd-symmetric). All entries have exactly zero DC gain.
class LogGaborBank {
public:
    LogGaborBank(int64_t h, int64_t w, const LogGaborParams& p);

    const Tensor& transfer(int scale, int orient) const {
        return transfers_[static_cast<size_t>(orient * params_.num_scales + scale)];
    }
    int64_t height() const { return h_; }
    int64_t width() const { return w_; }
    const LogGaborParams& params() const { return params_; }

    /// Spatial-domain quadrature kernel (even, odd) for one filter,
    /// centered at (0,0) with wrap-around; used by the convolution oracle.
    std::pair<Tensor, Tensor> spatial_kernel(int scale, int orient) const;

private:
    int64_t h_, w_;
    LogGaborParams params_;
    std::vector<Tensor> transfers_; // [N_o * N_s] of [H,W]
};

enum class Provenance { Handcrafted, LearnedSource, LearnedTarget };

/// A maximum-index-map feature: handcrafted (single channel) or the output
/// of a learned encoder.
struct MimFeature {
    Tensor map; // [C,H,W]
    Provenance provenance = Provenance::Handcrafted;
    bool normalized = false;
};

/// Per-pixel max over orientations of the multi-scale log-Gabor amplitude
/// sum. Multichannel inputs are reduced to luminance first. Output [1,H,W].
MimFeature compute_mim(const Tensor& img, const LogGaborParams& params = {});

/// Orientation-argmax variant (index of the winning orientation per pixel),
/// kept behind this separate entry point for comparison experiments.
Tensor compute_mim_argmax(const Tensor& img, const LogGaborParams& params = {});

/// Per-channel affine map onto [-1,1]; constant channels map to zero
/// (denominator max(max-min, 1e-8)).
MimFeature normalize_mim(const MimFeature& f);
Tensor normalize_per_channel(const Tensor& t);        // [C,H,W]
Tensor normalize_per_channel_batch(const Tensor& t);  // [N,C,H,W], per (n,c)

struct MimEncoderConfig {
    int layers = 6;
    int64_t hidden = 64;
    int64_t out_channels = 1;
};

/// Small stride-1 convolutional encoder producing MIM-like maps, output
/// bounded to [-1,1] by a final tanh. Spatial shape is preserved.
class MimEncoder : public nn::Module {
public:
    MimEncoder() = default;
    MimEncoder(const MimEncoderConfig& cfg, Rng& rng);

    Var operator()(const Var& img) const; // [N,1,H,W] -> [N,out,H,W]
    void collect_params(const std::string& prefix, std::vector<nn::NamedParam>& out) const override;

    const MimEncoderConfig& config() const { return cfg_; }

private:
    MimEncoderConfig cfg_;
    std::vector<nn::Conv2d> convs_;
    std::vector<nn::GroupNorm> norms_;
};

/// Masked mean L1 between the warped source MIM-like map and the target
/// encoder output.
Var loss_mim_target(const Var& xs_warped, const Var& xt, const Tensor& mask);

/// lambda_mds * maskedL1(x_trans, x_tw) + L1(xs_mim, xs_mim_frozen),
/// both mean-normalized.
Var loss_mim_source(const Var& x_trans, const Tensor& x_tw, const Tensor& mask,
                    const Var& xs_mim, const Tensor& xs_mim_frozen, double lambda_mds);

} // namespace xmreg::mim
