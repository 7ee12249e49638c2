#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "xmreg/autograd.hpp"

namespace xmreg::testing {

/// Central-difference gradient check. build_loss must rebuild the graph from
/// the current parameter values on every call. Returns the max relative
/// error max(|a-n| / max(|a|,|n|,floor)) over all coordinates.
inline double max_rel_grad_error(const std::vector<Var>& params,
                                 const std::function<Var()>& build_loss, double eps = 1e-6,
                                 double floor_ = 1e-6) {
    Var loss = build_loss();
    for (const auto& p : params) p->grad = Tensor();
    backward(loss);
    std::vector<Tensor> analytic;
    for (const auto& p : params)
        analytic.push_back(p->grad.empty() ? Tensor::zeros(p->value.shape()) : p->grad);

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& v = params[pi]->value;
        for (int64_t i = 0; i < v.numel(); ++i) {
            const double keep = v[i];
            v[i] = keep + eps;
            const double up = build_loss()->value[0];
            v[i] = keep - eps;
            const double dn = build_loss()->value[0];
            v[i] = keep;
            const double numeric = (up - dn) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor_});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

} // namespace xmreg::testing
