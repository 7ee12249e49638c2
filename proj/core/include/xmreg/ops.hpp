#pragma once

#include <vector>

#include "xmreg/autograd.hpp"

namespace xmreg::ops {

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var mul_scalar(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var silu(const Var& x);
Var tanh(const Var& x);
Var clamp(const Var& x, double lo, double hi);

// ---- shape ----
Var reshape(const Var& x, std::vector<int64_t> shape);
Var concat_channels(const std::vector<Var>& xs);

// ---- reductions / losses ----
Var mean_all(const Var& x);
/// mean(|a - b|); subgradient 0 at equality.
Var l1_mean(const Var& a, const Var& b);
/// sum(|a - b| * mask) / (channels * sum(mask)); mask is [N,1,H,W] and is
/// broadcast over channels. Throws EmptyMask when mask sums to zero.
Var masked_l1_mean(const Var& a, const Var& b, const Tensor& mask);

// ---- neural net ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var linear(const Var& x, const Var& w, const Var& b);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var upsample_nearest2x(const Var& x);
Var global_mean_pool(const Var& x); // [N,C,H,W] -> [N,C]
/// y[n,c,h,w] = x[n,c,h,w] + b[n,c]
Var add_channel_bias(const Var& x, const Var& b);

/// y[n,...] = x[n,...] * s[n]  (per-sample scalar broadcast)
Var scale_per_sample(const Var& x, const std::vector<double>& s);

/// Bilinear sampling of x at coords (pixel units, zero padding).
/// coords is [N,2,Ho,Wo] holding (x,y) source positions and is NOT
/// differentiated through; gradient flows to x only.
Var grid_sample(const Var& x, const Tensor& coords);

/// Local cost volume: out[n,(dy+r)*(2r+1)+(dx+r),h,w] =
/// sum_c f1[n,c,h,w] * f2[n,c,h+dy,w+dx] / sqrt(C), zero out of bounds.
Var correlation(const Var& f1, const Var& f2, int radius);

/// Sinusoidal timestep embedding, shape [N, dim]; plain data, no grad.
Tensor timestep_embedding(const std::vector<int>& t, int dim, int max_period = 10000);

} // namespace xmreg::ops
