#pragma once

// Metrics that run without pretrained networks: Fréchet distances over the
// visual-code slices, a cross-modal synchrony correlation, and character
// decoding accuracy against the synthetic corpus's band templates.

#include <string>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/data.hpp"
#include "flowtalk/face.hpp"
#include "flowtalk/mel.hpp"

namespace flowtalk::eval {

inline constexpr double kCovarianceRidge = 1e-6;

struct GaussianMoments {
    VecD mean;
    MatD cov;
};

// Sample mean and ridged covariance of row-wise samples (M x d). Covariance
// is the unbiased estimate for M >= 2 and the zero-centered outer product at
// M == 1; the ridge keeps square roots defined either way.
GaussianMoments fit_moments(const MatD& samples, double ridge = kCovarianceRidge);

// |mu_A - mu_B|^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2}), the Gaussian Fréchet
// distance. The matrix square root goes through the eigendecomposition of
// S_A^{1/2} S_B S_A^{1/2}, clamping tiny negative eigenvalues; the result is
// clamped at zero so round-off never produces a negative distance.
double frechet_gaussian(const GaussianMoments& a, const GaussianMoments& b);
double frechet_gaussian(const MatD& samples_a, const MatD& samples_b,
                        double ridge = kCovarianceRidge);

// Fréchet distance over frames pooled across clips: expression + eye
// channels (55 dims) and pose channels (6 dims) respectively.
double e_fid(const std::vector<features::VisualCodes>& ref,
             const std::vector<features::VisualCodes>& gen);
double p_fid(const std::vector<features::VisualCodes>& ref,
             const std::vector<features::VisualCodes>& gen);

// Pearson correlation between per-frame mel energy (mean over bands) and
// per-frame expression magnitude (mean |value| over expr_dims; all dims when
// the list is empty). Zero variance on either side is reported as 0.
double sync_corr(const features::MelSpectrogram& mel, const features::VisualCodes& codes,
                 const std::vector<int>& expr_dims = {});

inline const char* kDecodeAlphabet = "abcdefghijklmnopqrstuvwxyz ";

// Per character slot, classify the mel band pattern (style coloration
// removed) against the corpus band templates; returns the fraction of slots
// decoded to the expected character. Spaces are recognized by low band
// energy.
double decode_acc(const features::MelSpectrogram& mel, const std::string& text,
                  const data::StyleProfile& style, const std::string& alphabet = kDecodeAlphabet);

struct MetricReport {
    double recon_l1 = 0.0;
    double e_fd = 0.0;
    double p_fd = 0.0;
    double sync_corr = 0.0;
    double decode_acc = 0.0;
    uint64_t seed = 0;
    std::string checkpoint;
    uint64_t config_hash = 0;

    void validate() const;
};

// CSV columns: recon_l1,e_fd,p_fd,sync_corr,decode_acc,seed,checkpoint,config_hash
std::string metric_csv_header();
std::string metric_csv_row(const MetricReport& r);
// single key=value line for the run log
std::string metric_log_line(const MetricReport& r);

}  // namespace flowtalk::eval
