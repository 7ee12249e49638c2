#pragma once

#include <string>
#include <vector>

#include "xmreg/ops.hpp"
#include "xmreg/rng.hpp"

namespace xmreg::nn {

struct NamedParam {
    std::string name;
    Var var;
};

/// Anything that owns trainable parameters.
class Module {
public:
    virtual ~Module() = default;
    virtual void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const = 0;

    std::vector<NamedParam> named_params() const {
        std::vector<NamedParam> out;
        collect_params("", out);
        return out;
    }
    std::vector<Var> params() const {
        std::vector<Var> out;
        for (auto& p : named_params()) out.push_back(p.var);
        return out;
    }
    int64_t param_count() const {
        int64_t n = 0;
        for (auto& p : named_params()) n += p.var->value.numel();
        return n;
    }
};

class Conv2d : public Module {
public:
    Conv2d() = default;
    Conv2d(int64_t ci, int64_t co, int64_t k, int stride, int pad, Rng& rng,
           bool zero_init = false)
        : stride_(stride), pad_(pad) {
        // torch-style uniform init, bound 1/sqrt(fan_in)
        const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(ci * k * k));
        w = leaf(Tensor::rand_uniform({co, ci, k, k}, rng, -bound, bound));
        b = leaf(Tensor::rand_uniform({co}, rng, -bound, bound));
    }

    Var operator()(const Var& x) const { return ops::conv2d(x, w, b, stride_, pad_); }

    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    Var w, b;

private:
    int stride_ = 1, pad_ = 0;
};

class Linear : public Module {
public:
    Linear() = default;
    Linear(int64_t fi, int64_t fo, Rng& rng, bool zero_init = false) {
        const double bound = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(fi));
        w = leaf(Tensor::rand_uniform({fo, fi}, rng, -bound, bound));
        b = leaf(Tensor::rand_uniform({fo}, rng, -bound, bound));
    }

    Var operator()(const Var& x) const { return ops::linear(x, w, b); }

    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override {
        out.push_back({prefix + ".w", w});
        out.push_back({prefix + ".b", b});
    }

    Var w, b;
};

class GroupNorm : public Module {
public:
    GroupNorm() = default;
    GroupNorm(int64_t c, int groups) : groups_(groups) {
        gamma = leaf(Tensor::full({c}, 1.0));
        beta = leaf(Tensor::zeros({c}));
    }

    Var operator()(const Var& x) const { return ops::group_norm(x, gamma, beta, groups_); }

    void collect_params(const std::string& prefix, std::vector<NamedParam>& out) const override {
        out.push_back({prefix + ".gamma", gamma});
        out.push_back({prefix + ".beta", beta});
    }

    Var gamma, beta;

private:
    int groups_ = 1;
};

/// Picks a group count that divides c (8 when possible).
inline int groups_for(int64_t c) {
    for (int g : {8, 4, 2})
        if (c % g == 0) return g;
    return 1;
}

} // namespace xmreg::nn
