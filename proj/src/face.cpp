#include "flowtalk/face.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "flowtalk/common.hpp"
#include "flowtalk/io.hpp"

namespace flowtalk::features {

void FaceBasis::validate() const {
    const int k = keypoints();
    if (k < 4) throw ValidationError(strf("face basis: need at least 4 keypoints, got %d", k));
    if (mean_shape.size() != Eigen::Index(3 * k) || int(mean_shape.size()) % 3 != 0)
        throw ValidationError("face basis: mean shape length must be a multiple of 3");
    if (expr_basis.rows() != 3 * k || expr_basis.cols() != kExprDims)
        throw ValidationError(strf("face basis: expression basis must be %dx%d", 3 * k, kExprDims));
    if (eye_basis.rows() != 3 * k || eye_basis.cols() != kEyeDims)
        throw ValidationError(strf("face basis: eye basis must be %dx%d", 3 * k, kEyeDims));
    if (!mean_shape.allFinite() || !expr_basis.allFinite() || !eye_basis.allFinite())
        throw ValidationError("face basis: non-finite entries");
    for (Eigen::Index c = 0; c < expr_basis.cols(); ++c)
        if (expr_basis.col(c).cwiseAbs().maxCoeff() == 0.0f)
            throw ValidationError(strf("face basis: expression column %ld is all zero", long(c)));
    for (Eigen::Index c = 0; c < eye_basis.cols(); ++c)
        if (eye_basis.col(c).cwiseAbs().maxCoeff() == 0.0f)
            throw ValidationError(strf("face basis: eye column %ld is all zero", long(c)));
}

MatF VisualCodes::packed() const {
    MatF out(expr.rows(), kVisualDims);
    out.leftCols(kExprDims) = expr;
    out.middleCols(kExprDims, kEyeDims) = eye;
    out.rightCols(kPoseDims) = pose;
    return out;
}

VisualCodes VisualCodes::from_packed(const MatF& packed, double frame_rate) {
    if (packed.cols() != kVisualDims)
        throw ValidationError(strf("visual codes: expected %d columns, got %ld", kVisualDims,
                                   long(packed.cols())));
    VisualCodes c;
    c.expr = packed.leftCols(kExprDims);
    c.eye = packed.middleCols(kExprDims, kEyeDims);
    c.pose = packed.rightCols(kPoseDims);
    c.frame_rate = frame_rate;
    return c;
}

MatD rotation_matrix(double rx, double ry, double rz) {
    const double ca = std::cos(rx), sa = std::sin(rx);
    const double cb = std::cos(ry), sb = std::sin(ry);
    const double cg = std::cos(rz), sg = std::sin(rz);
    MatD Rx(3, 3), Ry(3, 3), Rz(3, 3);
    Rx << 1, 0, 0, 0, ca, -sa, 0, sa, ca;
    Ry << cb, 0, sb, 0, 1, 0, -sb, 0, cb;
    Rz << cg, -sg, 0, sg, cg, 0, 0, 0, 1;
    return Rz * Ry * Rx;
}

namespace {

// angles (rx, ry, rz) such that rotation_matrix(rx, ry, rz) == R
void extract_angles(const MatD& R, double out[3]) {
    const double sy = -R(2, 0);
    if (std::abs(sy) < 1.0 - 1e-12) {
        out[1] = std::asin(sy);
        out[0] = std::atan2(R(2, 1), R(2, 2));
        out[2] = std::atan2(R(1, 0), R(0, 0));
    } else {
        // pitch axis aligned with view axis; split is no longer unique
        out[1] = (sy > 0) ? M_PI / 2 : -M_PI / 2;
        out[0] = std::atan2(-R(0, 1), R(1, 1));
        out[2] = 0.0;
    }
}

struct PoseFit {
    MatD Q;  // 2x3, orthonormal rows (top of a proper rotation)
    double scale = 1.0;
    Eigen::Vector2d t = Eigen::Vector2d::Zero();
};

// model points as K x 3 rows
MatD to_points(const Eigen::VectorXd& stacked) {
    const Eigen::Index k = stacked.size() / 3;
    MatD pts(k, 3);
    for (Eigen::Index i = 0; i < k; ++i) {
        pts(i, 0) = stacked(3 * i);
        pts(i, 1) = stacked(3 * i + 1);
        pts(i, 2) = stacked(3 * i + 2);
    }
    return pts;
}

double pose_residual(const MatD& pts, const MatD& lm, const PoseFit& pf) {
    MatD proj = pf.scale * (pts * pf.Q.transpose());
    proj.rowwise() += pf.t.transpose();
    return (proj - lm).squaredNorm();
}

// Closed-form scaled orthographic alignment: affine camera by least squares,
// then the nearest scaled row-orthonormal matrix via SVD.
PoseFit fit_pose(const MatD& pts, const MatD& lm, Eigen::Index frame) {
    const Eigen::Index k = pts.rows();
    Eigen::RowVector3d pc = pts.colwise().mean();
    Eigen::RowVector2d lc = lm.colwise().mean();
    MatD xc = pts.rowwise() - pc;
    MatD yc = lm.rowwise() - lc;

    Eigen::JacobiSVD<MatD> lm_svd(yc);
    const auto& lsv = lm_svd.singularValues();
    if (lsv(1) <= 1e-9 * std::max(1.0, lsv(0)))
        throw ValidationError(strf("landmark fit: keypoints in frame %ld are collinear", long(frame)));

    Eigen::Matrix3d cov = xc.transpose() * xc;
    Eigen::FullPivLU<Eigen::Matrix3d> lu(cov);
    if (!lu.isInvertible())
        throw ValidationError(
            strf("landmark fit: model points are degenerate while fitting frame %ld", long(frame)));
    MatD g = (lu.solve(xc.transpose() * yc)).transpose();  // 2x3 affine camera

    Eigen::JacobiSVD<MatD> svd(g, Eigen::ComputeThinU | Eigen::ComputeThinV);
    PoseFit pf;
    pf.Q = svd.matrixU() * svd.matrixV().transpose();
    pf.scale = 0.5 * (svd.singularValues()(0) + svd.singularValues()(1));
    pf.t = (lc - pf.scale * (pc * pf.Q.transpose())).transpose();
    (void)k;
    return pf;
}

}  // namespace

MatD project_points(const FaceBasis& basis, const VecD& expr, const VecD& eye, const CameraPose& pose) {
    if (expr.size() != kExprDims || eye.size() != kEyeDims)
        throw ValidationError("project_points: coefficient sizes must be 51 and 4");
    Eigen::VectorXd shape = basis.mean_shape.cast<double>() +
                            basis.expr_basis.cast<double>() * expr +
                            basis.eye_basis.cast<double>() * eye;
    MatD pts = to_points(shape);
    MatD R = rotation_matrix(pose.angles[0], pose.angles[1], pose.angles[2]);
    MatD proj = pose.scale * (pts * R.topRows(2).transpose());
    proj.col(0).array() += pose.tx;
    proj.col(1).array() += pose.ty;
    return proj;
}

VisualCodes fit_visual_codes(const MatD& landmarks, const FaceBasis& basis, const FitOptions& opts,
                             FitReport* report) {
    basis.validate();
    const int k = basis.keypoints();
    if (landmarks.cols() != Eigen::Index(2 * k))
        throw ValidationError(strf("landmark fit: expected %d values per frame, got %ld", 2 * k,
                                   long(landmarks.cols())));
    if (landmarks.rows() < 1) throw ValidationError("landmark fit: no frames");
    if (!landmarks.allFinite()) throw ValidationError("landmark fit: non-finite landmark entries");
    if (opts.max_iters < 1) throw ValidationError("landmark fit: max_iters must be >= 1");

    const Eigen::Index n = landmarks.rows();
    const int n_coef = kExprDims + kEyeDims;
    const Eigen::VectorXd mean = basis.mean_shape.cast<double>();
    MatD bases(3 * k, n_coef);
    bases.leftCols(kExprDims) = basis.expr_basis.cast<double>();
    bases.rightCols(kEyeDims) = basis.eye_basis.cast<double>();

    VisualCodes codes;
    codes.expr.resize(n, kExprDims);
    codes.eye.resize(n, kEyeDims);
    codes.pose.resize(n, kPoseDims);
    codes.frame_rate = 0.0;  // caller assigns the capture rate
    if (report) {
        report->residual.assign(size_t(n), 0.0);
        report->warn.assign(size_t(n), 0);
    }

    for (Eigen::Index f = 0; f < n; ++f) {
        MatD lm(k, 2);
        for (int i = 0; i < k; ++i) {
            lm(i, 0) = landmarks(f, 2 * i);
            lm(i, 1) = landmarks(f, 2 * i + 1);
        }

        Eigen::VectorXd alpha = Eigen::VectorXd::Zero(n_coef);
        MatD pts = to_points(mean);
        PoseFit pose = fit_pose(pts, lm, f);
        double best_res = pose_residual(pts, lm, pose);
        Eigen::VectorXd best_alpha = alpha;
        PoseFit best_pose = pose;
        bool settled = false;

        for (int it = 0; it < opts.max_iters; ++it) {
            // coefficients by ridge least squares under the current camera
            MatD design(2 * k, n_coef);
            for (int j = 0; j < n_coef; ++j) {
                MatD pj = to_points(bases.col(j));
                MatD proj = best_pose.scale * (pj * best_pose.Q.transpose());
                for (int i = 0; i < k; ++i) {
                    design(2 * i, j) = proj(i, 0);
                    design(2 * i + 1, j) = proj(i, 1);
                }
            }
            MatD mean_proj = best_pose.scale * (to_points(mean) * best_pose.Q.transpose());
            Eigen::VectorXd rhs(2 * k);
            for (int i = 0; i < k; ++i) {
                rhs(2 * i) = lm(i, 0) - mean_proj(i, 0) - best_pose.t(0);
                rhs(2 * i + 1) = lm(i, 1) - mean_proj(i, 1) - best_pose.t(1);
            }
            Eigen::MatrixXd normal = design.transpose() * design;
            normal.diagonal().array() += opts.tikhonov;
            alpha = normal.ldlt().solve(design.transpose() * rhs);

            MatD pts_a = to_points(mean + bases * alpha);
            PoseFit pose_a = fit_pose(pts_a, lm, f);
            double res = pose_residual(pts_a, lm, pose_a);
            if (res < best_res) {
                const double gain = best_res - res;
                best_res = res;
                best_alpha = alpha;
                best_pose = pose_a;
                if (gain < opts.tol) {
                    settled = true;
                    break;
                }
            } else {
                settled = true;  // no further descent; keep the best iterate
                break;
            }
        }

        MatD R(3, 3);
        R.topRows(2) = best_pose.Q;
        Eigen::Vector3d r1 = best_pose.Q.row(0).transpose();
        Eigen::Vector3d r2 = best_pose.Q.row(1).transpose();
        R.row(2) = r1.cross(r2).transpose();
        double angles[3];
        extract_angles(R, angles);

        codes.expr.row(f) = best_alpha.head(kExprDims).cast<float>().transpose();
        codes.eye.row(f) = best_alpha.tail(kEyeDims).cast<float>().transpose();
        codes.pose(f, 0) = float(angles[0]);
        codes.pose(f, 1) = float(angles[1]);
        codes.pose(f, 2) = float(angles[2]);
        codes.pose(f, 3) = float(best_pose.t(0));
        codes.pose(f, 4) = float(best_pose.t(1));
        codes.pose(f, 5) = 0.0f;
        if (report) {
            report->residual[size_t(f)] = best_res;
            report->warn[size_t(f)] = settled ? 0 : 1;
        }
    }
    return codes;
}

VisualCodes resample_codes(const VisualCodes& codes, Eigen::Index target_frames) {
    const Eigen::Index n = codes.frames();
    if (n < 1) throw ValidationError("resample: input has no frames");
    if (target_frames < 1) throw ValidationError("resample: target frame count must be >= 1");

    MatD src = codes.packed().cast<double>();
    MatD dst(target_frames, kVisualDims);
    for (Eigen::Index j = 0; j < target_frames; ++j) {
        if (n == 1 || target_frames == 1) {
            dst.row(j) = src.row(std::min<Eigen::Index>(j, n - 1));
            continue;
        }
        const double u = double(j) * double(n - 1) / double(target_frames - 1);
        const Eigen::Index i0 = std::min<Eigen::Index>(Eigen::Index(u), n - 2);
        const double w = u - double(i0);
        dst.row(j) = (1.0 - w) * src.row(i0) + w * src.row(i0 + 1);
    }
    double rate = codes.frame_rate * double(target_frames) / double(n);
    return VisualCodes::from_packed(dst.cast<float>(), rate);
}

FaceBasis make_synthetic_basis(uint64_t seed) {
    const int k = 68;
    Rng rng(mix_seed(seed, 0x0face));
    FaceBasis basis;
    basis.mean_shape.resize(3 * k);
    for (int i = 0; i < k; ++i) {
        const int u = i % 17, v = i / 17;
        const double theta = -0.6 + 1.2 * double(u) / 16.0;
        const double phi = -0.5 + 1.0 * double(v) / 3.0;
        basis.mean_shape(3 * i + 0) = float(1.0 * std::sin(theta) * std::cos(phi) + rng.uniform(-0.02, 0.02));
        basis.mean_shape(3 * i + 1) = float(1.3 * std::sin(phi) + rng.uniform(-0.02, 0.02));
        basis.mean_shape(3 * i + 2) = float(0.8 * std::cos(theta) * std::cos(phi) + rng.uniform(-0.02, 0.02));
    }
    MatD raw(3 * k, kExprDims + kEyeDims);
    for (Eigen::Index r = 0; r < raw.rows(); ++r)
        for (Eigen::Index c = 0; c < raw.cols(); ++c) raw(r, c) = rng.normal();
    Eigen::HouseholderQR<MatD> qr(raw);
    MatD q = qr.householderQ() * MatD::Identity(3 * k, kExprDims + kEyeDims);
    basis.expr_basis = q.leftCols(kExprDims).cast<float>();
    basis.eye_basis = q.rightCols(kEyeDims).cast<float>();
    basis.validate();
    return basis;
}

void write_fbas(const std::string& path, const FaceBasis& basis) {
    basis.validate();
    io::ByteWriter w;
    w.bytes("FBAS", 4);
    w.u32(uint32_t(basis.keypoints()));
    for (Eigen::Index i = 0; i < basis.mean_shape.size(); ++i) w.f32(basis.mean_shape(i));
    w.f32mat(basis.expr_basis);
    w.f32mat(basis.eye_basis);
    io::spew(path, w.data());
}

FaceBasis read_fbas(const std::string& path) {
    std::vector<uint8_t> blob = io::slurp(path);
    io::ByteReader r(blob, path);
    char magic[4];
    r.raw(magic, 4);
    if (std::string(magic, 4) != "FBAS")
        throw IoError(strf("%s: not a face basis file (bad magic)", path.c_str()));
    const uint32_t k = r.u32();
    if (k < 4 || k > 100000) throw IoError(strf("%s: implausible keypoint count %u", path.c_str(), k));
    FaceBasis basis;
    basis.mean_shape.resize(3 * Eigen::Index(k));
    for (Eigen::Index i = 0; i < basis.mean_shape.size(); ++i) basis.mean_shape(i) = r.f32();
    basis.expr_basis = r.f32mat(int(3 * k), kExprDims);
    basis.eye_basis = r.f32mat(int(3 * k), kEyeDims);
    if (r.remaining() != 0) throw IoError(strf("%s: trailing bytes after basis data", path.c_str()));
    basis.validate();
    return basis;
}

}  // namespace flowtalk::features
