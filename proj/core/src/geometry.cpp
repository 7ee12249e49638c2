#include "xmreg/geometry.hpp"

#include <cmath>

#include "xmreg/errors.hpp"

namespace xmreg::geometry {

double CornerDisplacement::abs_max() const {
    double m = 0.0;
    for (const auto& c : dp)
        for (double v : c) m = std::max(m, std::abs(v));
    return m;
}

std::array<std::array<double, 2>, 4> frame_corners(const Frame& f) {
    const double w = static_cast<double>(f.width - 1);
    const double h = static_cast<double>(f.height - 1);
    return {{{0.0, 0.0}, {w, 0.0}, {w, h}, {0.0, h}}};
}

Homography Homography::from_matrix(const Eigen::Matrix3d& m) {
    if (std::abs(m.determinant()) <= 1e-10)
        throw SingularMatrix("homography determinant below threshold");
    if (std::abs(m(2, 2)) <= 1e-12)
        throw SingularMatrix("homography h22 is zero, cannot normalize");
    Homography h;
    h.m_ = m / m(2, 2);
    return h;
}

Homography Homography::translation(double tx, double ty) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return from_matrix(m);
}

Homography Homography::inverse() const {
    return from_matrix(m_.inverse().eval());
}

std::array<double, 2> Homography::apply(double x, double y) const {
    const Eigen::Vector3d p = m_ * Eigen::Vector3d(x, y, 1.0);
    if (std::abs(p(2)) < 1e-12) throw SingularMatrix("point mapped to infinity");
    return {p(0) / p(2), p(1) / p(2)};
}

bool Homography::near_identity(double tol) const {
    return (m_ - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <= tol;
}

Homography compose(const Homography& h1, const Homography& h2) {
    return Homography::from_matrix(h1.matrix() * h2.matrix());
}

Homography invert(const Homography& h) { return h.inverse(); }

namespace {

// similarity that moves the centroid to the origin and the mean distance
// to sqrt(2); standard conditioning for the DLT solve
Eigen::Matrix3d normalizing_similarity(const std::array<std::array<double, 2>, 4>& pts) {
    double cx = 0, cy = 0;
    for (const auto& p : pts) {
        cx += p[0];
        cy += p[1];
    }
    cx /= 4.0;
    cy /= 4.0;
    double md = 0;
    for (const auto& p : pts)
        md += std::hypot(p[0] - cx, p[1] - cy);
    md /= 4.0;
    const double s = md > 1e-12 ? std::sqrt(2.0) / md : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
    return t;
}

} // namespace

Homography dlt(const std::array<std::array<double, 2>, 4>& src,
               const std::array<std::array<double, 2>, 4>& dst) {
    const Eigen::Matrix3d t1 = normalizing_similarity(src);
    const Eigen::Matrix3d t2 = normalizing_similarity(dst);

    Eigen::Matrix<double, 8, 8> a;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const Eigen::Vector3d s = t1 * Eigen::Vector3d(src[i][0], src[i][1], 1.0);
        const Eigen::Vector3d d = t2 * Eigen::Vector3d(dst[i][0], dst[i][1], 1.0);
        const double x = s(0), y = s(1), u = d(0), v = d(1);
        a.row(2 * i) << x, y, 1, 0, 0, 0, -u * x, -u * y;
        a.row(2 * i + 1) << 0, 0, 0, x, y, 1, -v * x, -v * y;
        b(2 * i) = u;
        b(2 * i + 1) = v;
    }

    Eigen::FullPivLU<Eigen::Matrix<double, 8, 8>> lu(a);
    lu.setThreshold(1e-10);
    if (!lu.isInvertible())
        throw DegenerateCorners("four-point system is singular (collinear corners?)");
    const Eigen::Matrix<double, 8, 1> h = lu.solve(b);

    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), 1.0;
    const Eigen::Matrix3d m = t2.inverse() * hn * t1;
    if (std::abs(m.determinant()) <= 1e-10)
        throw DegenerateCorners("recovered homography is singular");
    return Homography::from_matrix(m);
}

Homography corners_to_homography(const CornerDisplacement& dp, const Frame& f) {
    const auto src = frame_corners(f);
    std::array<std::array<double, 2>, 4> dst = src;
    for (int i = 0; i < 4; ++i) {
        dst[i][0] += dp.dp[i][0];
        dst[i][1] += dp.dp[i][1];
    }
    return dlt(src, dst);
}

CornerDisplacement homography_to_corners(const Homography& h, const Frame& f) {
    CornerDisplacement out;
    const auto src = frame_corners(f);
    for (int i = 0; i < 4; ++i) {
        const auto p = h.apply(src[i][0], src[i][1]);
        out.dp[i][0] = p[0] - src[i][0];
        out.dp[i][1] = p[1] - src[i][1];
    }
    return out;
}

Tensor warp_coords(const Homography& h, int64_t out_h, int64_t out_w, double scale) {
    const Eigen::Matrix3d hinv = h.inverse().matrix();
    Tensor coords({2, out_h, out_w});
    double* cx = coords.data();
    double* cy = coords.data() + out_h * out_w;
    for (int64_t y = 0; y < out_h; ++y)
        for (int64_t x = 0; x < out_w; ++x) {
            const Eigen::Vector3d p =
                hinv * Eigen::Vector3d(static_cast<double>(x) * scale,
                                       static_cast<double>(y) * scale, 1.0);
            const double w = p(2);
            const int64_t i = y * out_w + x;
            if (std::abs(w) < 1e-12) {
                cx[i] = -1e9; // lands far outside, masked out
                cy[i] = -1e9;
            } else {
                cx[i] = p(0) / w / scale;
                cy[i] = p(1) / w / scale;
            }
        }
    return coords;
}

Tensor coords_mask(const Tensor& coords, int64_t src_h, int64_t src_w) {
    const int64_t oh = coords.dim(1), ow = coords.dim(2);
    Tensor mask({1, oh, ow});
    const double* cx = coords.data();
    const double* cy = coords.data() + oh * ow;
    double* m = mask.data();
    const double xmax = static_cast<double>(src_w - 1);
    const double ymax = static_cast<double>(src_h - 1);
    for (int64_t i = 0; i < oh * ow; ++i)
        m[i] = (cx[i] >= 0.0 && cx[i] <= xmax && cy[i] >= 0.0 && cy[i] <= ymax) ? 1.0 : 0.0;
    return mask;
}

WarpResult warp(const Tensor& img, const Homography& h) {
    const int64_t c = img.dim(0), ih = img.dim(1), iw = img.dim(2);
    const Tensor coords = warp_coords(h, ih, iw);
    WarpResult out;
    out.image = Tensor({c, ih, iw});
    out.mask = coords_mask(coords, ih, iw);
    const double* cx = coords.data();
    const double* cy = coords.data() + ih * iw;
    for (int64_t ch = 0; ch < c; ++ch) {
        const double* src = img.data() + ch * ih * iw;
        double* dst = out.image.data() + ch * ih * iw;
        for (int64_t i = 0; i < ih * iw; ++i) {
            const double fx = cx[i], fy = cy[i];
            const int64_t x0 = static_cast<int64_t>(std::floor(fx));
            const int64_t y0 = static_cast<int64_t>(std::floor(fy));
            const double ax = fx - static_cast<double>(x0);
            const double ay = fy - static_cast<double>(y0);
            double v = 0.0;
            auto tap = [&](int64_t yy, int64_t xx, double w) {
                if (w != 0.0 && xx >= 0 && xx < iw && yy >= 0 && yy < ih)
                    v += w * src[yy * iw + xx];
            };
            tap(y0, x0, (1 - ax) * (1 - ay));
            tap(y0, x0 + 1, ax * (1 - ay));
            tap(y0 + 1, x0, (1 - ax) * ay);
            tap(y0 + 1, x0 + 1, ax * ay);
            dst[i] = v;
        }
    }
    return out;
}

std::pair<Homography, CornerDisplacement> random_homography(Rng& rng, double rho,
                                                            const Frame& f) {
    if (rho < 0) throw Error("random_homography: rho must be >= 0");
    for (int attempt = 0; attempt < 16; ++attempt) {
        CornerDisplacement dp;
        for (int i = 0; i < 4; ++i) {
            dp.dp[i][0] = rng.uniform(-rho, rho);
            dp.dp[i][1] = rng.uniform(-rho, rho);
        }
        if (rho == 0.0) dp = CornerDisplacement::zero();
        try {
            Homography h = corners_to_homography(dp, f);
            return {h, dp};
        } catch (const DegenerateCorners&) {
            continue; // redraw
        }
    }
    throw DegenerateCorners("random_homography: no valid draw after 16 attempts");
}

} // namespace xmreg::geometry
