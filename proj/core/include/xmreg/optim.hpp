#pragma once

#include <cmath>
#include <vector>

#include "xmreg/autograd.hpp"

namespace xmreg::nn {

class Adam {
public:
    Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
         double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(Tensor::zeros(p->value.shape()));
            v_.emplace_back(Tensor::zeros(p->value.shape()));
        }
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t step_count() const { return t_; }

    void zero_grad() {
        for (auto& p : params_) p->grad = Tensor();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i];
            if (p->grad.empty()) continue;
            double* w = p->value.data();
            const double* g = p->grad.data();
            double* m = m_[i].data();
            double* v = v_[i].data();
            for (int64_t j = 0, n = p->value.numel(); j < n; ++j) {
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
                const double mh = m[j] / bc1;
                const double vh = v[j] / bc2;
                w[j] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

private:
    std::vector<Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

/// One-cycle learning-rate schedule: cosine ramp from max_lr/div up to
/// max_lr over pct_start of the run, cosine anneal down to
/// max_lr/final_div afterwards.
class OneCycleLr {
public:
    OneCycleLr(double max_lr, int64_t total_steps, double pct_start = 0.3,
               double div = 25.0, double final_div = 1e4)
        : max_lr_(max_lr), total_(total_steps), pct_(pct_start), div_(div),
          final_div_(final_div) {}

    double at(int64_t step) const {
        const double up = pct_ * static_cast<double>(total_);
        auto cosine = [](double a, double b, double t) {
            return b + (a - b) * 0.5 * (1.0 + std::cos(3.141592653589793 * t));
        };
        if (static_cast<double>(step) < up)
            return cosine(max_lr_ / div_, max_lr_, static_cast<double>(step) / up);
        const double t = (static_cast<double>(step) - up) /
                         std::max(1.0, static_cast<double>(total_) - up);
        return cosine(max_lr_, max_lr_ / final_div_, std::min(1.0, t));
    }

private:
    double max_lr_;
    int64_t total_;
    double pct_, div_, final_div_;
};

} // namespace xmreg::nn
