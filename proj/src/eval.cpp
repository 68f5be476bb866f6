#include "flowtalk/eval.hpp"

#include <cmath>
#include <cstdio>

#include <Eigen/Eigenvalues>

#include "flowtalk/text.hpp"

namespace flowtalk::eval {

namespace {

// symmetric PSD square root with negative-eigenvalue clamping
MatD psd_sqrt(const MatD& m) {
    Eigen::SelfAdjointEigenSolver<MatD> es(0.5 * (m + m.transpose()));
    VecD lam = es.eigenvalues();
    for (Eigen::Index i = 0; i < lam.size(); ++i) lam[i] = std::sqrt(std::max(lam[i], 0.0));
    return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

MatD pool_code_slice(const std::vector<features::VisualCodes>& clips, int col0, int ncols,
                     const char* what) {
    Eigen::Index total = 0;
    for (const auto& c : clips) total += c.frames();
    if (total == 0) throw ValidationError(strf("%s: no frames to pool", what));
    MatD out(total, ncols);
    Eigen::Index row = 0;
    for (const auto& c : clips) {
        const MatF packed = c.packed();
        out.middleRows(row, packed.rows()) =
            packed.middleCols(col0, ncols).cast<double>();
        row += packed.rows();
    }
    return out;
}

}  // namespace

GaussianMoments fit_moments(const MatD& samples, double ridge) {
    if (samples.rows() < 1 || samples.cols() < 1) {
        throw ValidationError(strf("moment fit needs a non-empty sample matrix, got %td x %td",
                                   samples.rows(), samples.cols()));
    }
    if (!samples.allFinite()) throw ValidationError("moment fit: non-finite samples");
    GaussianMoments g;
    g.mean = samples.colwise().mean();
    const MatD centered = samples.rowwise() - g.mean.transpose();
    const double denom = std::max<double>(1.0, double(samples.rows() - 1));
    g.cov = (centered.transpose() * centered) / denom;
    g.cov.diagonal().array() += ridge;
    return g;
}

double frechet_gaussian(const GaussianMoments& a, const GaussianMoments& b) {
    if (a.mean.size() != b.mean.size()) {
        throw ValidationError(strf("Fréchet distance between %td-d and %td-d distributions",
                                   a.mean.size(), b.mean.size()));
    }
    const MatD root_a = psd_sqrt(a.cov);
    const MatD cross = psd_sqrt(root_a * b.cov * root_a);
    const double d2 = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() -
                      2.0 * cross.trace();
    return std::max(d2, 0.0);
}

double frechet_gaussian(const MatD& samples_a, const MatD& samples_b, double ridge) {
    if (samples_a.cols() != samples_b.cols()) {
        throw ValidationError(strf("Fréchet sample sets have %td and %td columns",
                                   samples_a.cols(), samples_b.cols()));
    }
    return frechet_gaussian(fit_moments(samples_a, ridge), fit_moments(samples_b, ridge));
}

double e_fid(const std::vector<features::VisualCodes>& ref,
             const std::vector<features::VisualCodes>& gen) {
    const int n = features::kExprDims + features::kEyeDims;
    return frechet_gaussian(pool_code_slice(ref, 0, n, "e_fid reference"),
                            pool_code_slice(gen, 0, n, "e_fid generated"));
}

double p_fid(const std::vector<features::VisualCodes>& ref,
             const std::vector<features::VisualCodes>& gen) {
    const int n0 = features::kExprDims + features::kEyeDims;
    return frechet_gaussian(pool_code_slice(ref, n0, features::kPoseDims, "p_fid reference"),
                            pool_code_slice(gen, n0, features::kPoseDims, "p_fid generated"));
}

double sync_corr(const features::MelSpectrogram& mel, const features::VisualCodes& codes,
                 const std::vector<int>& expr_dims) {
    const Eigen::Index n = mel.data.cols();
    if (codes.frames() != n) {
        throw ValidationError(strf("sync_corr: %td mel frames vs %td code frames", n,
                                   codes.frames()));
    }
    if (n < 2) throw ValidationError("sync_corr needs at least 2 frames");
    for (int d : expr_dims) {
        if (d < 0 || d >= features::kExprDims) {
            throw ValidationError(strf("sync_corr: expression dim %d out of range", d));
        }
    }

    VecD energy(n), mouth(n);
    for (Eigen::Index f = 0; f < n; ++f) {
        energy[f] = mel.data.col(f).cast<double>().mean();
        double m = 0.0;
        if (expr_dims.empty()) {
            m = codes.expr.row(f).cwiseAbs().cast<double>().mean();
        } else {
            for (int d : expr_dims) m += std::abs(double(codes.expr(f, d)));
            m /= double(expr_dims.size());
        }
        mouth[f] = m;
    }
    const VecD de = energy.array() - energy.mean();
    const VecD dm = mouth.array() - mouth.mean();
    const double var_e = de.squaredNorm();
    const double var_m = dm.squaredNorm();
    if (var_e == 0.0 || var_m == 0.0) {
        std::fprintf(stderr, "sync_corr: zero-variance input, reporting 0\n");
        return 0.0;
    }
    return de.dot(dm) / std::sqrt(var_e * var_m);
}

double decode_acc(const features::MelSpectrogram& mel, const std::string& text,
                  const data::StyleProfile& style, const std::string& alphabet) {
    if (text.empty()) throw ValidationError("decode_acc: empty text");
    if (alphabet.empty()) throw ValidationError("decode_acc: empty alphabet");
    const int F = static_cast<int>(mel.data.rows());
    style.validate(F);
    if (!(mel.frame_rate > 0.0)) throw ValidationError("decode_acc: invalid mel frame rate");

    const double slot_s = 1.0 / data::kCharsPerSecond;
    const Eigen::Index N = mel.data.cols();
    const Eigen::Index need =
        static_cast<Eigen::Index>(std::ceil(double(text.size() - 1) * slot_s * mel.frame_rate)) + 1;
    if (N < need) {
        throw ValidationError(strf("decode_acc: %td mel frames, %zu characters need at least %td",
                                   N, text.size(), need));
    }

    std::vector<VecF> templates;
    templates.reserve(alphabet.size());
    for (char c : alphabet) templates.push_back(data::char_band_profile(c, F));

    int correct = 0;
    for (size_t ci = 0; ci < text.size(); ++ci) {
        const double t0 = double(ci) * slot_s;
        const Eigen::Index f0 = static_cast<Eigen::Index>(std::ceil(t0 * mel.frame_rate));
        const Eigen::Index f1 = std::min<Eigen::Index>(
            N, static_cast<Eigen::Index>(std::ceil((t0 + slot_s) * mel.frame_rate)));
        if (f1 <= f0) continue;  // slot fell past the clip end

        // style coloration and silence floor removed, averaged over the slot
        VecF v = mel.data.middleCols(f0, f1 - f0).rowwise().mean() - style.mel_offset;
        v.array() -= v.minCoeff();

        // spaces have no band bump: recognize them by low residual energy
        size_t best = 0;
        double best_score = -2.0;
        for (size_t k = 0; k < templates.size(); ++k) {
            const VecF& g = templates[k];
            double score;
            if (g.isZero()) {
                score = (v.maxCoeff() < 0.25f * data::kCharBandGain) ? 1.5 : -1.5;
            } else {
                const double denom = double(v.norm()) * double(g.norm());
                score = denom > 0.0 ? double(v.dot(g)) / denom : 0.0;
            }
            if (score > best_score) {
                best_score = score;
                best = k;
            }
        }
        if (alphabet[best] == text[ci]) ++correct;
    }
    return double(correct) / double(text.size());
}

void MetricReport::validate() const {
    if (!(e_fd >= 0.0) || !(p_fd >= 0.0)) {
        throw ValidationError(strf("Fréchet distances must be non-negative (e=%g, p=%g)", e_fd,
                                   p_fd));
    }
    if (!(decode_acc >= 0.0 && decode_acc <= 1.0)) {
        throw ValidationError(strf("decode_acc %g outside [0, 1]", decode_acc));
    }
    if (!(sync_corr >= -1.0 - 1e-9 && sync_corr <= 1.0 + 1e-9)) {
        throw ValidationError(strf("sync_corr %g outside [-1, 1]", sync_corr));
    }
    if (!std::isfinite(recon_l1)) throw ValidationError("recon_l1 is not finite");
}

std::string metric_csv_header() {
    return "recon_l1,e_fd,p_fd,sync_corr,decode_acc,seed,checkpoint,config_hash";
}

std::string metric_csv_row(const MetricReport& r) {
    return strf("%.10g,%.10g,%.10g,%.10g,%.10g,%llu,%s,%016llx", r.recon_l1, r.e_fd, r.p_fd,
                r.sync_corr, r.decode_acc, static_cast<unsigned long long>(r.seed),
                r.checkpoint.c_str(), static_cast<unsigned long long>(r.config_hash));
}

std::string metric_log_line(const MetricReport& r) {
    return strf("recon_l1=%.6g e_fd=%.6g p_fd=%.6g sync_corr=%.6g decode_acc=%.6g seed=%llu "
                "checkpoint=%s config_hash=%016llx",
                r.recon_l1, r.e_fd, r.p_fd, r.sync_corr, r.decode_acc,
                static_cast<unsigned long long>(r.seed), r.checkpoint.c_str(),
                static_cast<unsigned long long>(r.config_hash));
}

}  // namespace flowtalk::eval
