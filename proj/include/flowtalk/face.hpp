#pragma once

// Blendshape fitting: recover per-frame expression/eye coefficients and head
// pose from tracked 2D keypoints under a scaled orthographic camera. The
// camera scale is treated as a fitting nuisance and is not part of the codes;
// pose is stored as three rotation angles plus a translation triple whose z
// component is zero (unobservable under orthographic projection).

#include <cstdint>
#include <string>
#include <vector>

#include "flowtalk/mat.hpp"

namespace flowtalk::features {

inline constexpr int kExprDims = 51;
inline constexpr int kEyeDims = 4;
inline constexpr int kPoseDims = 6;
inline constexpr int kVisualDims = kExprDims + kEyeDims + kPoseDims;  // 61

struct FaceBasis {
    VecF mean_shape;  // 3K, points stacked (x0,y0,z0, x1,...)
    MatF expr_basis;  // 3K x 51
    MatF eye_basis;   // 3K x 4

    int keypoints() const { return int(mean_shape.size()) / 3; }
    void validate() const;
};

struct VisualCodes {
    MatF expr;          // N x 51
    MatF eye;           // N x 4
    MatF pose;          // N x 6: (rx, ry, rz) radians, then (tx, ty, tz)
    double frame_rate;  // fps

    Eigen::Index frames() const { return expr.rows(); }
    // N x 61 view in the order [expr | eye | pose]
    MatF packed() const;
    static VisualCodes from_packed(const MatF& packed, double frame_rate);
};

struct FitOptions {
    int max_iters = 10;
    double tol = 1e-8;        // stop when the residual improves by less than this
    double tikhonov = 1e-4;   // ridge weight on the coefficient solve
};

struct FitReport {
    std::vector<double> residual;   // final per-frame sum of squared distances
    std::vector<uint8_t> warn;      // 1 when the iteration budget ran out
};

// Pose of a scaled orthographic camera; used to synthesize landmark tracks.
struct CameraPose {
    double angles[3] = {0.0, 0.0, 0.0};  // rx (pitch), ry (yaw), rz (roll)
    double tx = 0.0, ty = 0.0;
    double scale = 1.0;
};

// R = Rz(rz) * Ry(ry) * Rx(rx)
MatD rotation_matrix(double rx, double ry, double rz);

// Project basis-displaced keypoints to the image plane: K x 2.
MatD project_points(const FaceBasis& basis, const VecD& expr, const VecD& eye, const CameraPose& pose);

// landmarks: N x 2K, one frame per row as (x0, y0, x1, y1, ...).
VisualCodes fit_visual_codes(const MatD& landmarks, const FaceBasis& basis, const FitOptions& opts,
                             FitReport* report = nullptr);

// Linear time-interpolation to exactly target_frames rows, endpoints mapped
// to endpoints; frame_rate rescales with the frame count.
VisualCodes resample_codes(const VisualCodes& codes, Eigen::Index target_frames);

// Deterministic synthetic rig: K=68 keypoints on an ellipsoid patch, jointly
// orthonormalized expression and eye columns.
FaceBasis make_synthetic_basis(uint64_t seed);

void write_fbas(const std::string& path, const FaceBasis& basis);
FaceBasis read_fbas(const std::string& path);

}  // namespace flowtalk::features
