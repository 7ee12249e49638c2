#include "xmreg/ops.hpp"

#include <Eigen/Dense>

#include <cassert>
#include <cmath>
#include <cstring>

#include "xmreg/errors.hpp"

namespace xmreg::ops {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw ShapeMismatch(std::string(op) + ": " + a->value.shape_str() + " vs " +
                            b->value.shape_str());
}

} // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out = a->value;
    const double* pb = b->value.data();
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] += pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate_grad(n.grad);
        if (n.parents[1]->requires_grad) n.parents[1]->accumulate_grad(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a->value;
    const double* pb = b->value.data();
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] -= pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate_grad(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor g = n.grad;
            double* p = g.data();
            for (int64_t i = 0, m = g.numel(); i < m; ++i) p[i] = -p[i];
            n.parents[1]->accumulate_grad(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a->value;
    const double* pb = b->value.data();
    double* po = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) po[i] *= pb[i];
    return detail::make_op(std::move(out), {a, b}, [](Node& n) {
        const int64_t m = n.grad.numel();
        if (n.parents[0]->requires_grad) {
            Tensor g = n.grad;
            double* p = g.data();
            const double* vb = n.parents[1]->value.data();
            for (int64_t i = 0; i < m; ++i) p[i] *= vb[i];
            n.parents[0]->accumulate_grad(g);
        }
        if (n.parents[1]->requires_grad) {
            Tensor g = n.grad;
            double* p = g.data();
            const double* va = n.parents[0]->value.data();
            for (int64_t i = 0; i < m; ++i) p[i] *= va[i];
            n.parents[1]->accumulate_grad(g);
        }
    });
}

Var mul_scalar(const Var& a, double s) {
    Tensor out = a->value;
    double* p = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) p[i] *= s;
    return detail::make_op(std::move(out), {a}, [s](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g = n.grad;
        double* p = g.data();
        for (int64_t i = 0, m = g.numel(); i < m; ++i) p[i] *= s;
        n.parents[0]->accumulate_grad(g);
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out = a->value;
    double* p = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) p[i] += s;
    return detail::make_op(std::move(out), {a}, [](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate_grad(n.grad);
    });
}

Var silu(const Var& x) {
    Tensor out = x->value;
    double* p = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) {
        double s = 1.0 / (1.0 + std::exp(-p[i]));
        p[i] = p[i] * s;
    }
    return detail::make_op(std::move(out), {x}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g = n.grad;
        double* p = g.data();
        const double* v = n.parents[0]->value.data();
        for (int64_t i = 0, m = g.numel(); i < m; ++i) {
            double s = 1.0 / (1.0 + std::exp(-v[i]));
            p[i] *= s * (1.0 + v[i] * (1.0 - s));
        }
        n.parents[0]->accumulate_grad(g);
    });
}

Var tanh(const Var& x) {
    Tensor out = x->value;
    double* p = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) p[i] = std::tanh(p[i]);
    Tensor saved = out;
    return detail::make_op(std::move(out), {x}, [saved](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g = n.grad;
        double* p = g.data();
        const double* y = saved.data();
        for (int64_t i = 0, m = g.numel(); i < m; ++i) p[i] *= 1.0 - y[i] * y[i];
        n.parents[0]->accumulate_grad(g);
    });
}

Var clamp(const Var& x, double lo, double hi) {
    Tensor out = x->value;
    double* p = out.data();
    for (int64_t i = 0, n = out.numel(); i < n; ++i) p[i] = std::min(hi, std::max(lo, p[i]));
    return detail::make_op(std::move(out), {x}, [lo, hi](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g = n.grad;
        double* p = g.data();
        const double* v = n.parents[0]->value.data();
        for (int64_t i = 0, m = g.numel(); i < m; ++i)
            if (v[i] < lo || v[i] > hi) p[i] = 0.0;
        n.parents[0]->accumulate_grad(g);
    });
}

Var reshape(const Var& x, std::vector<int64_t> shape) {
    Tensor out = x->value.reshaped(shape);
    return detail::make_op(std::move(out), {x}, [](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        n.parents[0]->accumulate_grad(n.grad.reshaped(n.parents[0]->value.shape()));
    });
}

Var concat_channels(const std::vector<Var>& xs) {
    assert(!xs.empty());
    const auto& s0 = xs[0]->value.shape();
    int64_t N = s0[0], H = s0[2], W = s0[3], Ctot = 0;
    for (const auto& x : xs) {
        const auto& s = x->value.shape();
        if (s[0] != N || s[2] != H || s[3] != W)
            throw ShapeMismatch("concat_channels: incompatible " + x->value.shape_str());
        Ctot += s[1];
    }
    Tensor out({N, Ctot, H, W});
    const int64_t plane = H * W;
    int64_t coff = 0;
    for (const auto& x : xs) {
        int64_t C = x->value.dim(1);
        for (int64_t n = 0; n < N; ++n)
            std::memcpy(out.data() + ((n * Ctot + coff) * plane),
                        x->value.data() + n * C * plane,
                        static_cast<size_t>(C * plane) * sizeof(double));
        coff += C;
    }
    return detail::make_op(std::move(out), xs, [N, Ctot, plane](Node& n) {
        int64_t coff2 = 0;
        for (auto& p : n.parents) {
            int64_t C = p->value.dim(1);
            if (p->requires_grad) {
                Tensor g(p->value.shape());
                for (int64_t b = 0; b < N; ++b)
                    std::memcpy(g.data() + b * C * plane,
                                n.grad.data() + ((b * Ctot + coff2) * plane),
                                static_cast<size_t>(C * plane) * sizeof(double));
                p->accumulate_grad(g);
            }
            coff2 += C;
        }
    });
}

Var mean_all(const Var& x) {
    Tensor out({1});
    out[0] = x->value.mean();
    const double inv = 1.0 / static_cast<double>(x->value.numel());
    return detail::make_op(std::move(out), {x}, [inv](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g(n.parents[0]->value.shape());
        g.fill(n.grad[0] * inv);
        n.parents[0]->accumulate_grad(g);
    });
}

Var l1_mean(const Var& a, const Var& b) {
    check_same_shape(a, b, "l1_mean");
    const int64_t m = a->value.numel();
    Tensor out({1});
    double s = 0.0;
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    for (int64_t i = 0; i < m; ++i) s += std::abs(pa[i] - pb[i]);
    out[0] = s / static_cast<double>(m);
    return detail::make_op(std::move(out), {a, b}, [m](Node& n) {
        const double* pa = n.parents[0]->value.data();
        const double* pb = n.parents[1]->value.data();
        const double scale = n.grad[0] / static_cast<double>(m);
        auto emit = [&](int which, double sgn) {
            Tensor g(n.parents[0]->value.shape());
            double* p = g.data();
            for (int64_t i = 0; i < m; ++i) {
                double d = pa[i] - pb[i];
                p[i] = sgn * scale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
            }
            n.parents[static_cast<size_t>(which)]->accumulate_grad(g);
        };
        if (n.parents[0]->requires_grad) emit(0, 1.0);
        if (n.parents[1]->requires_grad) emit(1, -1.0);
    });
}

Var masked_l1_mean(const Var& a, const Var& b, const Tensor& mask) {
    check_same_shape(a, b, "masked_l1_mean");
    const auto& s = a->value.shape();
    assert(s.size() == 4 && mask.ndim() == 4 && mask.dim(1) == 1);
    if (mask.dim(0) != s[0] || mask.dim(2) != s[2] || mask.dim(3) != s[3])
        throw ShapeMismatch("masked_l1_mean: mask " + mask.shape_str());
    const double msum = mask.sum();
    if (msum <= 0.0) throw EmptyMask("masked_l1_mean: mask is all zero");

    const int64_t N = s[0], C = s[1], plane = s[2] * s[3];
    const double denom = msum * static_cast<double>(C);
    double acc = 0.0;
    const double* pa = a->value.data();
    const double* pb = b->value.data();
    const double* pm = mask.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* ra = pa + (n * C + c) * plane;
            const double* rb = pb + (n * C + c) * plane;
            const double* rm = pm + n * plane;
            for (int64_t i = 0; i < plane; ++i) acc += std::abs(ra[i] - rb[i]) * rm[i];
        }
    Tensor out({1});
    out[0] = acc / denom;
    Tensor maskc = mask;
    return detail::make_op(std::move(out), {a, b}, [maskc, denom, N, C, plane](Node& n) {
        const double* pa = n.parents[0]->value.data();
        const double* pb = n.parents[1]->value.data();
        const double* pm = maskc.data();
        const double scale = n.grad[0] / denom;
        auto emit = [&](int which, double sgn) {
            Tensor g(n.parents[0]->value.shape());
            double* pg = g.data();
            for (int64_t b = 0; b < N; ++b)
                for (int64_t c = 0; c < C; ++c) {
                    const int64_t off = (b * C + c) * plane;
                    const double* rm = pm + b * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        double d = pa[off + i] - pb[off + i];
                        pg[off + i] =
                            sgn * scale * rm[i] * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
                    }
                }
            n.parents[static_cast<size_t>(which)]->accumulate_grad(g);
        };
        if (n.parents[0]->requires_grad) emit(0, 1.0);
        if (n.parents[1]->requires_grad) emit(1, -1.0);
    });
}

// ---- conv2d ----

namespace {

struct ConvDims {
    int64_t N, Ci, H, W, Co, K, Ho, Wo;
    int stride, pad;
};

// cols: [N*Ho*Wo, Ci*K*K] row-major
void im2col(const Tensor& x, const ConvDims& d, MatRM& cols) {
    cols.resize(d.N * d.Ho * d.Wo, d.Ci * d.K * d.K);
    const double* px = x.data();
    for (int64_t n = 0; n < d.N; ++n) {
        for (int64_t ho = 0; ho < d.Ho; ++ho) {
            for (int64_t wo = 0; wo < d.Wo; ++wo) {
                double* row = cols.data() + (((n * d.Ho + ho) * d.Wo + wo)) * cols.cols();
                for (int64_t c = 0; c < d.Ci; ++c) {
                    const double* plane = px + (n * d.Ci + c) * d.H * d.W;
                    for (int64_t ky = 0; ky < d.K; ++ky) {
                        int64_t hy = ho * d.stride - d.pad + ky;
                        for (int64_t kx = 0; kx < d.K; ++kx) {
                            int64_t wx = wo * d.stride - d.pad + kx;
                            double v = 0.0;
                            if (hy >= 0 && hy < d.H && wx >= 0 && wx < d.W)
                                v = plane[hy * d.W + wx];
                            row[(c * d.K + ky) * d.K + kx] = v;
                        }
                    }
                }
            }
        }
    }
}

void col2im(const MatRM& cols, const ConvDims& d, Tensor& gx) {
    double* px = gx.data();
    for (int64_t n = 0; n < d.N; ++n) {
        for (int64_t ho = 0; ho < d.Ho; ++ho) {
            for (int64_t wo = 0; wo < d.Wo; ++wo) {
                const double* row = cols.data() + (((n * d.Ho + ho) * d.Wo + wo)) * cols.cols();
                for (int64_t c = 0; c < d.Ci; ++c) {
                    double* plane = px + (n * d.Ci + c) * d.H * d.W;
                    for (int64_t ky = 0; ky < d.K; ++ky) {
                        int64_t hy = ho * d.stride - d.pad + ky;
                        if (hy < 0 || hy >= d.H) continue;
                        for (int64_t kx = 0; kx < d.K; ++kx) {
                            int64_t wx = wo * d.stride - d.pad + kx;
                            if (wx < 0 || wx >= d.W) continue;
                            plane[hy * d.W + wx] += row[(c * d.K + ky) * d.K + kx];
                        }
                    }
                }
            }
        }
    }
}

} // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    assert(xs.size() == 4 && ws.size() == 4);
    if (xs[1] != ws[1])
        throw ShapeMismatch("conv2d: input channels " + x->value.shape_str() + " vs weight " +
                            w->value.shape_str());
    ConvDims d;
    d.N = xs[0]; d.Ci = xs[1]; d.H = xs[2]; d.W = xs[3];
    d.Co = ws[0]; d.K = ws[2];
    d.stride = stride; d.pad = pad;
    d.Ho = (d.H + 2 * pad - d.K) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.K) / stride + 1;

    MatRM cols;
    im2col(x->value, d, cols);
    CMapRM Wm(w->value.data(), d.Co, d.Ci * d.K * d.K);
    MatRM outm = cols * Wm.transpose(); // [N*Ho*Wo, Co]

    Tensor out({d.N, d.Co, d.Ho, d.Wo});
    const double* pb = b->value.data();
    for (int64_t n = 0; n < d.N; ++n)
        for (int64_t co = 0; co < d.Co; ++co) {
            double* dst = out.data() + (n * d.Co + co) * d.Ho * d.Wo;
            const double* src = outm.data() + (n * d.Ho * d.Wo) * d.Co + co;
            const double bias = pb[co];
            for (int64_t i = 0; i < d.Ho * d.Wo; ++i) dst[i] = src[i * d.Co] + bias;
        }

    const bool keep_cols = grad_enabled() && (w->requires_grad || b->requires_grad || x->requires_grad);
    auto cols_keep = keep_cols ? std::make_shared<MatRM>(std::move(cols)) : nullptr;

    return detail::make_op(std::move(out), {x, w, b}, [d, cols_keep](Node& n) {
        // gather grad as [N*Ho*Wo, Co]
        MatRM gm(d.N * d.Ho * d.Wo, d.Co);
        for (int64_t b2 = 0; b2 < d.N; ++b2)
            for (int64_t co = 0; co < d.Co; ++co) {
                const double* src = n.grad.data() + (b2 * d.Co + co) * d.Ho * d.Wo;
                double* dst = gm.data() + (b2 * d.Ho * d.Wo) * d.Co + co;
                for (int64_t i = 0; i < d.Ho * d.Wo; ++i) dst[i * d.Co] = src[i];
            }
        if (n.parents[2]->requires_grad) {
            Tensor gb({d.Co});
            Eigen::Map<Eigen::VectorXd>(gb.data(), d.Co) = gm.colwise().sum();
            n.parents[2]->accumulate_grad(gb);
        }
        if (n.parents[1]->requires_grad) {
            Tensor gw(n.parents[1]->value.shape());
            MapRM gWm(gw.data(), d.Co, d.Ci * d.K * d.K);
            gWm = gm.transpose() * (*cols_keep);
            n.parents[1]->accumulate_grad(gw);
        }
        if (n.parents[0]->requires_grad) {
            CMapRM Wm2(n.parents[1]->value.data(), d.Co, d.Ci * d.K * d.K);
            MatRM gcols = gm * Wm2; // [N*Ho*Wo, Ci*K*K]
            Tensor gx(n.parents[0]->value.shape());
            col2im(gcols, d, gx);
            n.parents[0]->accumulate_grad(gx);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    const auto& xs = x->value.shape();
    const auto& ws = w->value.shape();
    assert(xs.size() == 2 && ws.size() == 2);
    if (xs[1] != ws[1]) throw ShapeMismatch("linear: " + x->value.shape_str() + " vs " + w->value.shape_str());
    const int64_t N = xs[0], F = xs[1], O = ws[0];
    Tensor out({N, O});
    CMapRM Xm(x->value.data(), N, F);
    CMapRM Wm(w->value.data(), O, F);
    MapRM Om(out.data(), N, O);
    Om = Xm * Wm.transpose();
    Om.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b->value.data(), O);
    return detail::make_op(std::move(out), {x, w, b}, [N, F, O](Node& n) {
        CMapRM Gm(n.grad.data(), N, O);
        if (n.parents[2]->requires_grad) {
            Tensor gb({O});
            Eigen::Map<Eigen::VectorXd>(gb.data(), O) = Gm.colwise().sum();
            n.parents[2]->accumulate_grad(gb);
        }
        if (n.parents[1]->requires_grad) {
            Tensor gw({O, F});
            CMapRM Xm2(n.parents[0]->value.data(), N, F);
            MapRM(gw.data(), O, F) = Gm.transpose() * Xm2;
            n.parents[1]->accumulate_grad(gw);
        }
        if (n.parents[0]->requires_grad) {
            Tensor gx({N, F});
            CMapRM Wm2(n.parents[1]->value.data(), O, F);
            MapRM(gx.data(), N, F) = Gm * Wm2;
            n.parents[0]->accumulate_grad(gx);
        }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const auto& s = x->value.shape();
    assert(s.size() == 4);
    const int64_t N = s[0], C = s[1], plane = s[2] * s[3];
    assert(C % groups == 0);
    const int64_t cpg = C / groups, gsize = cpg * plane;

    Tensor out(s);
    Tensor mean({N, groups}), inv_std({N, groups});
    const double* px = x->value.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t g = 0; g < groups; ++g) {
            const double* base = px + (n * C + g * cpg) * plane;
            double m = 0.0;
            for (int64_t i = 0; i < gsize; ++i) m += base[i];
            m /= static_cast<double>(gsize);
            double v = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                double d = base[i] - m;
                v += d * d;
            }
            v /= static_cast<double>(gsize);
            mean[n * groups + g] = m;
            inv_std[n * groups + g] = 1.0 / std::sqrt(v + eps);
        }
    const double* pg = gamma->value.data();
    const double* pbta = beta->value.data();
    double* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const int64_t g = c / cpg;
            const double m = mean[n * groups + g], is = inv_std[n * groups + g];
            const double ga = pg[c], be = pbta[c];
            const double* src = px + (n * C + c) * plane;
            double* dst = po + (n * C + c) * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = ga * (src[i] - m) * is + be;
        }

    return detail::make_op(std::move(out), {x, gamma, beta},
                           [N, C, plane, groups, cpg, gsize, mean, inv_std](Node& n) {
        const double* px2 = n.parents[0]->value.data();
        const double* pg2 = n.parents[1]->value.data();
        const double* pgr = n.grad.data();
        if (n.parents[1]->requires_grad || n.parents[2]->requires_grad) {
            Tensor ggam({C}), gbet({C});
            for (int64_t c = 0; c < C; ++c) {
                double sg = 0.0, sb = 0.0;
                const int64_t g = c / cpg;
                for (int64_t b = 0; b < N; ++b) {
                    const double m = mean[b * groups + g], is = inv_std[b * groups + g];
                    const double* xr = px2 + (b * C + c) * plane;
                    const double* gr = pgr + (b * C + c) * plane;
                    for (int64_t i = 0; i < plane; ++i) {
                        sg += gr[i] * (xr[i] - m) * is;
                        sb += gr[i];
                    }
                }
                ggam[c] = sg;
                gbet[c] = sb;
            }
            if (n.parents[1]->requires_grad) n.parents[1]->accumulate_grad(ggam);
            if (n.parents[2]->requires_grad) n.parents[2]->accumulate_grad(gbet);
        }
        if (n.parents[0]->requires_grad) {
            Tensor gx(n.parents[0]->value.shape());
            double* pgx = gx.data();
            for (int64_t b = 0; b < N; ++b)
                for (int64_t g = 0; g < groups; ++g) {
                    const double m = mean[b * groups + g], is = inv_std[b * groups + g];
                    // accumulate group-level sums of dy*gamma and dy*gamma*xhat
                    double s1 = 0.0, s2 = 0.0;
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = g * cpg + cc;
                        const double ga = pg2[c];
                        const double* xr = px2 + (b * C + c) * plane;
                        const double* gr = pgr + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xh = (xr[i] - m) * is;
                            s1 += gr[i] * ga;
                            s2 += gr[i] * ga * xh;
                        }
                    }
                    const double invg = 1.0 / static_cast<double>(gsize);
                    for (int64_t cc = 0; cc < cpg; ++cc) {
                        const int64_t c = g * cpg + cc;
                        const double ga = pg2[c];
                        const double* xr = px2 + (b * C + c) * plane;
                        const double* gr = pgr + (b * C + c) * plane;
                        double* gxd = pgx + (b * C + c) * plane;
                        for (int64_t i = 0; i < plane; ++i) {
                            const double xh = (xr[i] - m) * is;
                            gxd[i] = is * (gr[i] * ga - invg * (s1 + xh * s2));
                        }
                    }
                }
            n.parents[0]->accumulate_grad(gx);
        }
    });
}

Var upsample_nearest2x(const Var& x) {
    const auto& s = x->value.shape();
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    Tensor out({N, C, H * 2, W * 2});
    const double* px = x->value.data();
    double* po = out.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* src = px + nc * H * W;
        double* dst = po + nc * 4 * H * W;
        for (int64_t h = 0; h < H; ++h)
            for (int64_t w = 0; w < W; ++w) {
                const double v = src[h * W + w];
                dst[(2 * h) * 2 * W + 2 * w] = v;
                dst[(2 * h) * 2 * W + 2 * w + 1] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w] = v;
                dst[(2 * h + 1) * 2 * W + 2 * w + 1] = v;
            }
    }
    return detail::make_op(std::move(out), {x}, [N, C, H, W](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g({N, C, H, W});
        const double* pgr = n.grad.data();
        double* pg = g.data();
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const double* src = pgr + nc * 4 * H * W;
            double* dst = pg + nc * H * W;
            for (int64_t h = 0; h < H; ++h)
                for (int64_t w = 0; w < W; ++w)
                    dst[h * W + w] = src[(2 * h) * 2 * W + 2 * w] +
                                     src[(2 * h) * 2 * W + 2 * w + 1] +
                                     src[(2 * h + 1) * 2 * W + 2 * w] +
                                     src[(2 * h + 1) * 2 * W + 2 * w + 1];
        }
        n.parents[0]->accumulate_grad(g);
    });
}

Var global_mean_pool(const Var& x) {
    const auto& s = x->value.shape();
    const int64_t N = s[0], C = s[1], plane = s[2] * s[3];
    Tensor out({N, C});
    const double* px = x->value.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        double m = 0.0;
        const double* src = px + nc * plane;
        for (int64_t i = 0; i < plane; ++i) m += src[i];
        out[nc] = m / static_cast<double>(plane);
    }
    return detail::make_op(std::move(out), {x}, [N, C, plane](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g(n.parents[0]->value.shape());
        double* pg = g.data();
        const double inv = 1.0 / static_cast<double>(plane);
        for (int64_t nc = 0; nc < N * C; ++nc) {
            const double v = n.grad[nc] * inv;
            double* dst = pg + nc * plane;
            for (int64_t i = 0; i < plane; ++i) dst[i] = v;
        }
        n.parents[0]->accumulate_grad(g);
    });
}

Var add_channel_bias(const Var& x, const Var& b) {
    const auto& s = x->value.shape();
    const int64_t N = s[0], C = s[1], plane = s[2] * s[3];
    assert(b->value.ndim() == 2 && b->value.dim(0) == N && b->value.dim(1) == C);
    Tensor out = x->value;
    double* po = out.data();
    const double* pb = b->value.data();
    for (int64_t nc = 0; nc < N * C; ++nc) {
        const double v = pb[nc];
        double* dst = po + nc * plane;
        for (int64_t i = 0; i < plane; ++i) dst[i] += v;
    }
    return detail::make_op(std::move(out), {x, b}, [N, C, plane](Node& n) {
        if (n.parents[0]->requires_grad) n.parents[0]->accumulate_grad(n.grad);
        if (n.parents[1]->requires_grad) {
            Tensor g({N, C});
            const double* pgr = n.grad.data();
            for (int64_t nc = 0; nc < N * C; ++nc) {
                double sum = 0.0;
                const double* src = pgr + nc * plane;
                for (int64_t i = 0; i < plane; ++i) sum += src[i];
                g[nc] = sum;
            }
            n.parents[1]->accumulate_grad(g);
        }
    });
}

Var scale_per_sample(const Var& x, const std::vector<double>& s) {
    const int64_t N = x->value.dim(0);
    assert(static_cast<int64_t>(s.size()) == N);
    const int64_t per = x->value.numel() / N;
    Tensor out = x->value;
    double* p = out.data();
    for (int64_t n = 0; n < N; ++n) {
        const double f = s[static_cast<size_t>(n)];
        for (int64_t i = 0; i < per; ++i) p[n * per + i] *= f;
    }
    return detail::make_op(std::move(out), {x}, [s, N, per](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g = n.grad;
        double* p = g.data();
        for (int64_t b = 0; b < N; ++b) {
            const double f = s[static_cast<size_t>(b)];
            for (int64_t i = 0; i < per; ++i) p[b * per + i] *= f;
        }
        n.parents[0]->accumulate_grad(g);
    });
}

Var grid_sample(const Var& x, const Tensor& coords) {
    const auto& s = x->value.shape();
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    assert(coords.ndim() == 4 && coords.dim(0) == N && coords.dim(1) == 2);
    const int64_t Ho = coords.dim(2), Wo = coords.dim(3);
    Tensor out({N, C, Ho, Wo});
    const double* px = x->value.data();
    const double* pc = coords.data();
    double* po = out.data();
    for (int64_t n = 0; n < N; ++n) {
        const double* cx = pc + (n * 2 + 0) * Ho * Wo;
        const double* cy = pc + (n * 2 + 1) * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) {
            const double fx = cx[i], fy = cy[i];
            const int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const int64_t y0 = static_cast<int64_t>(std::floor(fy));
            const double ax = fx - static_cast<double>(x0);
            const double ay = fy - static_cast<double>(y0);
            const double w00 = (1 - ax) * (1 - ay), w01 = ax * (1 - ay);
            const double w10 = (1 - ax) * ay, w11 = ax * ay;
            const bool i00 = x0 >= 0 && x0 < W && y0 >= 0 && y0 < H;
            const bool i01 = x0 + 1 >= 0 && x0 + 1 < W && y0 >= 0 && y0 < H;
            const bool i10 = x0 >= 0 && x0 < W && y0 + 1 >= 0 && y0 + 1 < H;
            const bool i11 = x0 + 1 >= 0 && x0 + 1 < W && y0 + 1 >= 0 && y0 + 1 < H;
            for (int64_t c = 0; c < C; ++c) {
                const double* plane = px + (n * C + c) * H * W;
                double v = 0.0;
                if (i00) v += w00 * plane[y0 * W + x0];
                if (i01) v += w01 * plane[y0 * W + x0 + 1];
                if (i10) v += w10 * plane[(y0 + 1) * W + x0];
                if (i11) v += w11 * plane[(y0 + 1) * W + x0 + 1];
                po[(n * C + c) * Ho * Wo + i] = v;
            }
        }
    }
    Tensor coords_keep = coords;
    return detail::make_op(std::move(out), {x}, [coords_keep, N, C, H, W, Ho, Wo](Node& n) {
        if (!n.parents[0]->requires_grad) return;
        Tensor g(n.parents[0]->value.shape());
        double* pg = g.data();
        const double* pc2 = coords_keep.data();
        const double* pgr = n.grad.data();
        for (int64_t b = 0; b < N; ++b) {
            const double* cx = pc2 + (b * 2 + 0) * Ho * Wo;
            const double* cy = pc2 + (b * 2 + 1) * Ho * Wo;
            for (int64_t i = 0; i < Ho * Wo; ++i) {
                const double fx = cx[i], fy = cy[i];
                const int64_t x0 = static_cast<int64_t>(std::floor(fx));
                const int64_t y0 = static_cast<int64_t>(std::floor(fy));
                const double ax = fx - static_cast<double>(x0);
                const double ay = fy - static_cast<double>(y0);
                const double w00 = (1 - ax) * (1 - ay), w01 = ax * (1 - ay);
                const double w10 = (1 - ax) * ay, w11 = ax * ay;
                const bool i00 = x0 >= 0 && x0 < W && y0 >= 0 && y0 < H;
                const bool i01 = x0 + 1 >= 0 && x0 + 1 < W && y0 >= 0 && y0 < H;
                const bool i10 = x0 >= 0 && x0 < W && y0 + 1 >= 0 && y0 + 1 < H;
                const bool i11 = x0 + 1 >= 0 && x0 + 1 < W && y0 + 1 >= 0 && y0 + 1 < H;
                for (int64_t c = 0; c < C; ++c) {
                    const double gv = pgr[(b * C + c) * Ho * Wo + i];
                    if (gv == 0.0) continue;
                    double* plane = pg + (b * C + c) * H * W;
                    if (i00) plane[y0 * W + x0] += w00 * gv;
                    if (i01) plane[y0 * W + x0 + 1] += w01 * gv;
                    if (i10) plane[(y0 + 1) * W + x0] += w10 * gv;
                    if (i11) plane[(y0 + 1) * W + x0 + 1] += w11 * gv;
                }
            }
        }
        n.parents[0]->accumulate_grad(g);
    });
}

Var correlation(const Var& f1, const Var& f2, int radius) {
    check_same_shape(f1, f2, "correlation");
    const auto& s = f1->value.shape();
    const int64_t N = s[0], C = s[1], H = s[2], W = s[3];
    const int64_t D = 2 * radius + 1;
    Tensor out({N, D * D, H, W});
    const double inv = 1.0 / std::sqrt(static_cast<double>(C));
    const double* p1 = f1->value.data();
    const double* p2 = f2->value.data();
    double* po = out.data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t dy = -radius; dy <= radius; ++dy)
            for (int64_t dx = -radius; dx <= radius; ++dx) {
                const int64_t k = (dy + radius) * D + (dx + radius);
                double* dst = po + (n * D * D + k) * H * W;
                for (int64_t h = 0; h < H; ++h) {
                    const int64_t h2 = h + dy;
                    if (h2 < 0 || h2 >= H) continue;
                    for (int64_t w = 0; w < W; ++w) {
                        const int64_t w2 = w + dx;
                        if (w2 < 0 || w2 >= W) continue;
                        double acc = 0.0;
                        for (int64_t c = 0; c < C; ++c)
                            acc += p1[((n * C + c) * H + h) * W + w] *
                                   p2[((n * C + c) * H + h2) * W + w2];
                        dst[h * W + w] = acc * inv;
                    }
                }
            }
    return detail::make_op(std::move(out), {f1, f2}, [N, C, H, W, radius, D, inv](Node& n) {
        const double* p1 = n.parents[0]->value.data();
        const double* p2 = n.parents[1]->value.data();
        const double* pgr = n.grad.data();
        const bool need1 = n.parents[0]->requires_grad;
        const bool need2 = n.parents[1]->requires_grad;
        Tensor g1, g2;
        if (need1) g1 = Tensor(n.parents[0]->value.shape());
        if (need2) g2 = Tensor(n.parents[1]->value.shape());
        for (int64_t b = 0; b < N; ++b)
            for (int64_t dy = -radius; dy <= radius; ++dy)
                for (int64_t dx = -radius; dx <= radius; ++dx) {
                    const int64_t k = (dy + radius) * D + (dx + radius);
                    const double* gsl = pgr + (b * D * D + k) * H * W;
                    for (int64_t h = 0; h < H; ++h) {
                        const int64_t h2 = h + dy;
                        if (h2 < 0 || h2 >= H) continue;
                        for (int64_t w = 0; w < W; ++w) {
                            const int64_t w2 = w + dx;
                            if (w2 < 0 || w2 >= W) continue;
                            const double gv = gsl[h * W + w] * inv;
                            if (gv == 0.0) continue;
                            for (int64_t c = 0; c < C; ++c) {
                                const int64_t i1 = ((b * C + c) * H + h) * W + w;
                                const int64_t i2 = ((b * C + c) * H + h2) * W + w2;
                                if (need1) g1[i1] += gv * p2[i2];
                                if (need2) g2[i2] += gv * p1[i1];
                            }
                        }
                    }
                }
        if (need1) n.parents[0]->accumulate_grad(g1);
        if (need2) n.parents[1]->accumulate_grad(g2);
    });
}

Tensor timestep_embedding(const std::vector<int>& t, int dim, int max_period) {
    const int64_t N = static_cast<int64_t>(t.size());
    const int half = dim / 2;
    Tensor out({N, dim});
    for (int64_t n = 0; n < N; ++n)
        for (int i = 0; i < half; ++i) {
            const double freq =
                std::exp(-std::log(static_cast<double>(max_period)) * i / half);
            out[n * dim + i] = std::cos(t[static_cast<size_t>(n)] * freq);
            out[n * dim + half + i] = std::sin(t[static_cast<size_t>(n)] * freq);
        }
    return out;
}

} // namespace xmreg::ops
