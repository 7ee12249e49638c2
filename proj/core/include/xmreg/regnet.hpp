#pragma once

#include <vector>

#include "xmreg/geometry.hpp"
#include "xmreg/layers.hpp"

namespace xmreg::regnet {

struct RegNetConfig {
    int num_scales = 4;                              // pyramid levels, level 0 = finest
    std::vector<int64_t> channels = {64, 96, 128, 128};
    std::vector<int> iters_per_scale = {2, 2, 2, 2}; // q per level, index = pyramid level
    int corr_radius = 4;
    int64_t head_hidden = 64;

    bool operator==(const RegNetConfig&) const = default;
    int total_iterations() const {
        int n = 0;
        for (int q : iters_per_scale) n += q;
        return n;
    }
};

/// Per-iteration corner-displacement estimates, finest last. Each iterate is
/// a [N,4,2] Var; gradients flow through each iterate's own residual only
/// (the running estimate is detached between iterations).
struct RegPrediction {
    std::vector<Var> iterates;
    const Var& final() const { return iterates.back(); }
    geometry::CornerDisplacement final_dp(int64_t n) const;
};

geometry::CornerDisplacement dp_at(const Tensor& batch, int64_t n);
Tensor dp_batch(const std::vector<geometry::CornerDisplacement>& dps);

/// Iterative multi-scale registration network: a shared feature pyramid on
/// both inputs, and per-scale correlation + update heads that refine a
/// running corner-displacement estimate coarse to fine.
class RegNetwork : public nn::Module {
public:
    RegNetwork() = default;
    RegNetwork(const RegNetConfig& cfg, Rng& rng);

    /// Estimates the transform aligning x1 with x2 (both [N,1,H,W]):
    /// warp(x2, H^-1) matches x1 where H = corners_to_homography(final dp).
    /// The initial estimate is zero; output length is sum(q).
    RegPrediction estimate(const Var& x1, const Var& x2) const;

    void collect_params(const std::string& prefix, std::vector<nn::NamedParam>& out) const override;
    const RegNetConfig& config() const { return cfg_; }

    /// Deep parameter copy; architectures must match.
    void copy_parameters_from(const RegNetwork& src);
    RegNetwork clone() const;

private:
    struct EncLevel {
        nn::Conv2d reduce; // stride 2 except at the finest level
        nn::GroupNorm n1;
        nn::Conv2d conv;
        nn::GroupNorm n2;
    };
    struct Head {
        nn::Conv2d in1x1;
        nn::Conv2d mid1, mid2;
        nn::Linear fc1, fc2;
    };

    std::vector<Var> encode(const Var& x) const; // features, index 0 = finest
    Var head_forward(const Head& h, const Var& inp) const;

    RegNetConfig cfg_;
    std::vector<EncLevel> enc_;
    std::vector<Head> heads_; // per level
};

/// Sum over iterations of mean |dp_i - gt| plus the fine-grained
/// refinement term (exponentially weighted surrogate, see fgo_surrogate).
Var loss_displacement(const RegPrediction& pred, const Tensor& gt, double gamma = 0.85);

/// Identical functional form with a pseudo-label as the target.
Var loss_pseudo(const RegPrediction& pred, const Tensor& pl, double gamma = 0.85);

/// Surrogate for the cited fine-grained optimization term: per-iteration
/// mean L1 weighted gamma^(N-i). Zero at zero residual and monotone in
/// residual magnitude. Swap this function out for a faithful port if the
/// original formulation is needed.
Var fgo_surrogate(const std::vector<Var>& iterates, const Tensor& gt, double gamma);

} // namespace xmreg::regnet
