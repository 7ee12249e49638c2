#include "xmreg/mim.hpp"

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <memory>
#include <mutex>

#include "xmreg/errors.hpp"
#include "xmreg/ops.hpp"

namespace xmreg::mim {

namespace {

constexpr double kPi = 3.14159265358979323846;

// fftw plans are not thread-safe to create; executions on distinct buffers are
struct FftPlans {
    fftw_plan fwd, bwd;
    fftw_complex* buf;
    int64_t h, w;

    FftPlans(int64_t h_, int64_t w_) : h(h_), w(w_) {
        buf = fftw_alloc_complex(static_cast<size_t>(h * w));
        fwd = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf, buf,
                               FFTW_FORWARD, FFTW_ESTIMATE);
        bwd = fftw_plan_dft_2d(static_cast<int>(h), static_cast<int>(w), buf, buf,
                               FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~FftPlans() {
        fftw_destroy_plan(fwd);
        fftw_destroy_plan(bwd);
        fftw_free(buf);
    }
};

std::mutex g_fft_mutex;

// serialized FFT helper: fine on the intended single-writer training loop
void fft2(std::vector<std::complex<double>>& data, int64_t h, int64_t w, bool forward) {
    std::lock_guard<std::mutex> lock(g_fft_mutex);
    static std::unique_ptr<FftPlans> plans;
    if (!plans || plans->h != h || plans->w != w) plans = std::make_unique<FftPlans>(h, w);
    auto* b = reinterpret_cast<std::complex<double>*>(plans->buf);
    std::copy(data.begin(), data.end(), b);
    fftw_execute(forward ? plans->fwd : plans->bwd);
    std::copy(b, b + h * w, data.begin());
    if (!forward) {
        const double inv = 1.0 / static_cast<double>(h * w);
        for (auto& v : data) v *= inv;
    }
}

Tensor to_luminance(const Tensor& img) {
    if (img.dim(0) == 1) return img;
    const int64_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
    Tensor out({1, h, w});
    for (int64_t i = 0; i < h * w; ++i) {
        double s = 0.0;
        for (int64_t ch = 0; ch < c; ++ch) s += img.data()[ch * h * w + i];
        out.data()[i] = s / static_cast<double>(c);
    }
    return out;
}

} // namespace

LogGaborBank::LogGaborBank(int64_t h, int64_t w, const LogGaborParams& p)
    : h_(h), w_(w), params_(p) {
    transfers_.reserve(static_cast<size_t>(p.num_scales * p.num_orients));

    // centered frequency grids in cycles/pixel
    std::vector<double> fx(static_cast<size_t>(w)), fy(static_cast<size_t>(h));
    for (int64_t i = 0; i < w; ++i)
        fx[static_cast<size_t>(i)] = (i <= w / 2 ? i : i - w) / static_cast<double>(w);
    for (int64_t i = 0; i < h; ++i)
        fy[static_cast<size_t>(i)] = (i <= h / 2 ? i : i - h) / static_cast<double>(h);

    const double log_sigma = std::log(p.sigma_on_f);
    const double theta_sigma = (kPi / p.num_orients) / p.d_theta_ratio;

    for (int o = 0; o < p.num_orients; ++o) {
        const double theta0 = o * kPi / p.num_orients;
        const double c0 = std::cos(theta0), s0 = std::sin(theta0);
        for (int s = 0; s < p.num_scales; ++s) {
            const double wavelength = p.min_wavelength * std::pow(p.mult, s);
            const double f0 = 1.0 / wavelength;
            Tensor t({h, w});
            for (int64_t y = 0; y < h; ++y)
                for (int64_t x = 0; x < w; ++x) {
                    const double u = fx[static_cast<size_t>(x)];
                    const double v = fy[static_cast<size_t>(y)];
                    const double r = std::hypot(u, v);
                    double g = 0.0;
                    if (r > 1e-12) {
                        const double lr = std::log(r / f0);
                        g = std::exp(-(lr * lr) / (2.0 * log_sigma * log_sigma));
                        // one-sided angular lobe makes the kernel a quadrature pair
                        const double theta = std::atan2(-v, u);
                        const double ds = std::sin(theta) * c0 - std::cos(theta) * s0;
                        const double dc = std::cos(theta) * c0 + std::sin(theta) * s0;
                        const double dt = std::abs(std::atan2(ds, dc));
                        g *= std::exp(-(dt * dt) / (2.0 * theta_sigma * theta_sigma));
                    }
                    t.data()[y * w + x] = g;
                }
            t.data()[0] = 0.0; // exactly zero DC
            transfers_.push_back(std::move(t));
        }
    }
}

std::pair<Tensor, Tensor> LogGaborBank::spatial_kernel(int scale, int orient) const {
    const Tensor& tf = transfer(scale, orient);
    std::vector<std::complex<double>> k(static_cast<size_t>(h_ * w_));
    for (int64_t i = 0; i < h_ * w_; ++i) k[static_cast<size_t>(i)] = tf.data()[i];
    fft2(k, h_, w_, false);
    Tensor even({h_, w_}), odd({h_, w_});
    for (int64_t i = 0; i < h_ * w_; ++i) {
        even.data()[i] = k[static_cast<size_t>(i)].real();
        odd.data()[i] = k[static_cast<size_t>(i)].imag();
    }
    return {even, odd};
}

namespace {

// per-orientation amplitude sums, shared by the value-max and argmax variants
std::vector<Tensor> orientation_amplitudes(const Tensor& img, const LogGaborParams& params) {
    const Tensor lum = to_luminance(img);
    const int64_t h = lum.dim(1), w = lum.dim(2);
    LogGaborBank bank(h, w, params);

    std::vector<std::complex<double>> imgf(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) imgf[static_cast<size_t>(i)] = lum.data()[i];
    fft2(imgf, h, w, true);

    std::vector<Tensor> amp;
    std::vector<std::complex<double>> work(static_cast<size_t>(h * w));
    for (int o = 0; o < params.num_orients; ++o) {
        Tensor a({h, w});
        for (int s = 0; s < params.num_scales; ++s) {
            const Tensor& tf = bank.transfer(s, o);
            for (int64_t i = 0; i < h * w; ++i)
                work[static_cast<size_t>(i)] = imgf[static_cast<size_t>(i)] * tf.data()[i];
            fft2(work, h, w, false);
            for (int64_t i = 0; i < h * w; ++i)
                a.data()[i] += std::abs(work[static_cast<size_t>(i)]);
        }
        amp.push_back(std::move(a));
    }
    return amp;
}

} // namespace

MimFeature compute_mim(const Tensor& img, const LogGaborParams& params) {
    const auto amp = orientation_amplitudes(img, params);
    const int64_t h = amp[0].dim(0), w = amp[0].dim(1);
    MimFeature f;
    f.map = Tensor({1, h, w});
    for (int64_t i = 0; i < h * w; ++i) {
        double m = amp[0].data()[i];
        for (size_t o = 1; o < amp.size(); ++o) m = std::max(m, amp[o].data()[i]);
        f.map.data()[i] = m;
    }
    f.provenance = Provenance::Handcrafted;
    return f;
}

Tensor compute_mim_argmax(const Tensor& img, const LogGaborParams& params) {
    const auto amp = orientation_amplitudes(img, params);
    const int64_t h = amp[0].dim(0), w = amp[0].dim(1);
    Tensor idx({1, h, w});
    for (int64_t i = 0; i < h * w; ++i) {
        double m = amp[0].data()[i];
        int best = 0;
        for (size_t o = 1; o < amp.size(); ++o)
            if (amp[o].data()[i] > m) {
                m = amp[o].data()[i];
                best = static_cast<int>(o);
            }
        idx.data()[i] = static_cast<double>(best);
    }
    return idx;
}

Tensor normalize_per_channel(const Tensor& t) {
    const int64_t c = t.dim(0), plane = t.dim(1) * t.dim(2);
    Tensor out = t;
    for (int64_t ch = 0; ch < c; ++ch) {
        double lo = t.data()[ch * plane], hi = lo;
        for (int64_t i = 0; i < plane; ++i) {
            const double v = t.data()[ch * plane + i];
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        const double denom = std::max(hi - lo, 1e-8);
        for (int64_t i = 0; i < plane; ++i)
            out.data()[ch * plane + i] = (2.0 * t.data()[ch * plane + i] - lo - hi) / denom;
    }
    return out;
}

Tensor normalize_per_channel_batch(const Tensor& t) {
    const int64_t n = t.dim(0), c = t.dim(1), h = t.dim(2), w = t.dim(3);
    Tensor out = t;
    for (int64_t b = 0; b < n; ++b)
        for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t off = (b * c + ch) * h * w;
            double lo = t.data()[off], hi = lo;
            for (int64_t i = 0; i < h * w; ++i) {
                lo = std::min(lo, t.data()[off + i]);
                hi = std::max(hi, t.data()[off + i]);
            }
            const double denom = std::max(hi - lo, 1e-8);
            for (int64_t i = 0; i < h * w; ++i)
                out.data()[off + i] = (2.0 * t.data()[off + i] - lo - hi) / denom;
        }
    return out;
}

MimFeature normalize_mim(const MimFeature& f) {
    MimFeature out;
    out.map = normalize_per_channel(f.map);
    out.provenance = f.provenance;
    out.normalized = true;
    return out;
}

MimEncoder::MimEncoder(const MimEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    const int64_t h = cfg.hidden;
    for (int i = 0; i < cfg.layers; ++i) {
        const int64_t ci = i == 0 ? 1 : h;
        const int64_t co = i == cfg.layers - 1 ? cfg.out_channels : h;
        convs_.emplace_back(ci, co, 3, 1, 1, rng);
        if (i + 1 < cfg.layers) norms_.emplace_back(co, nn::groups_for(co));
    }
}

Var MimEncoder::operator()(const Var& img) const {
    Var x = img;
    for (size_t i = 0; i < convs_.size(); ++i) {
        x = convs_[i](x);
        if (i + 1 < convs_.size()) {
            x = norms_[i](x);
            x = ops::silu(x);
        }
    }
    return ops::tanh(x);
}

void MimEncoder::collect_params(const std::string& prefix,
                                std::vector<nn::NamedParam>& out) const {
    for (size_t i = 0; i < convs_.size(); ++i)
        convs_[i].collect_params(prefix + ".conv" + std::to_string(i), out);
    for (size_t i = 0; i < norms_.size(); ++i)
        norms_[i].collect_params(prefix + ".norm" + std::to_string(i), out);
}

Var loss_mim_target(const Var& xs_warped, const Var& xt, const Tensor& mask) {
    return ops::masked_l1_mean(xs_warped, xt, mask);
}

Var loss_mim_source(const Var& x_trans, const Tensor& x_tw, const Tensor& mask,
                    const Var& xs_mim, const Tensor& xs_mim_frozen, double lambda_mds) {
    Var mds = ops::masked_l1_mean(x_trans, constant(x_tw), mask);
    Var mms = ops::l1_mean(xs_mim, constant(xs_mim_frozen));
    return ops::add(ops::mul_scalar(mds, lambda_mds), mms);
}

} // namespace xmreg::mim
