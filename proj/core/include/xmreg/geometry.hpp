#pragma once

#include <Eigen/Dense>

#include <array>
#include <utility>

#include "xmreg/rng.hpp"
#include "xmreg/tensor.hpp"

namespace xmreg::geometry {

struct Frame {
    int64_t width = 0;
    int64_t height = 0;
};

/// Offsets of the four frame corners in pixels, ordered TL, TR, BR, BL.
struct CornerDisplacement {
    // dp[i] = {dx, dy}
    std::array<std::array<double, 2>, 4> dp{};

    static CornerDisplacement zero() { return {}; }
    double abs_max() const;
    bool operator==(const CornerDisplacement& o) const { return dp == o.dp; }
};

/// Corner positions (pixel centers) of a frame, ordered TL, TR, BR, BL.
std::array<std::array<double, 2>, 4> frame_corners(const Frame& f);

/// 3x3 projective transform, normalized so h(2,2) == 1.
class Homography {
public:
    Homography() { m_.setIdentity(); }

    /// Normalizes and checks invertibility (|det| > 1e-10).
    static Homography from_matrix(const Eigen::Matrix3d& m);
    static Homography identity() { return Homography(); }
    static Homography translation(double tx, double ty);

    const Eigen::Matrix3d& matrix() const { return m_; }
    double at(int r, int c) const { return m_(r, c); }

    Homography inverse() const;

    /// Maps a point; throws SingularMatrix if the point is at infinity.
    std::array<double, 2> apply(double x, double y) const;

    bool near_identity(double tol = 1e-9) const;

private:
    Eigen::Matrix3d m_;
};

/// compose(h1, h2): applies h2 first, then h1 (matrix product h1*h2).
Homography compose(const Homography& h1, const Homography& h2);
Homography invert(const Homography& h);

/// Exact homography through four point correspondences (normalized DLT).
/// Throws DegenerateCorners when the system is singular.
Homography dlt(const std::array<std::array<double, 2>, 4>& src,
               const std::array<std::array<double, 2>, 4>& dst);

/// Homography mapping each frame corner c to c + dp.
Homography corners_to_homography(const CornerDisplacement& dp, const Frame& f);

/// Inverse of corners_to_homography: displacement of each frame corner under h.
CornerDisplacement homography_to_corners(const Homography& h, const Frame& f);

struct WarpResult {
    Tensor image; // same shape as the input
    Tensor mask;  // [1,H,W], 1 exactly where the source coordinate is in bounds
};

/// Backward warp with bilinear sampling and zero padding:
/// out(p) = img(h^{-1} p). Input is CHW.
WarpResult warp(const Tensor& img, const Homography& h);

/// Source-coordinate grid for warp-by-h of an out_w x out_h output:
/// channel 0 holds x coords, channel 1 y coords ([2,H,W]). `scale` maps the
/// output grid into the frame where h acts (coords are multiplied by `scale`
/// before h^{-1} and divided after), for warping pyramid levels with a
/// full-resolution homography.
Tensor warp_coords(const Homography& h, int64_t out_h, int64_t out_w, double scale = 1.0);

/// In-bounds mask [1,H,W] for the given sampling coords into a h x w source.
Tensor coords_mask(const Tensor& coords, int64_t src_h, int64_t src_w);

/// Random perturbation: dp entries i.i.d. uniform in [-rho, rho]
/// (order TLx,TLy,TRx,...); retries degenerate draws a bounded number of
/// times. Deterministic under a fixed rng state.
std::pair<Homography, CornerDisplacement> random_homography(Rng& rng, double rho,
                                                            const Frame& f);

} // namespace xmreg::geometry
