#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "doctest.h"
#include "flowtalk/data.hpp"
#include "flowtalk/eval.hpp"

using namespace flowtalk;

namespace {

MatD random_spd(int d, Rng& rng) {
    MatD r(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) r(i, j) = rng.normal();
    return r * r.transpose() + 0.1 * MatD::Identity(d, d);
}

VecD random_vec(int d, Rng& rng) {
    VecD v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = rng.normal();
    return v;
}

// independent route to Tr((A B)^{1/2}): eigenvalues of the (non-symmetric)
// product are real and non-negative for SPD factors
double trace_sqrt_product(const MatD& a, const MatD& b) {
    Eigen::EigenSolver<MatD> es(a * b);
    double acc = 0.0;
    for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
        acc += std::sqrt(std::max(es.eigenvalues()[i].real(), 0.0));
    }
    return acc;
}

data::StyleProfile plain_style(int id, float amp, float freq_scale) {
    data::StyleProfile s;
    s.style_id = id;
    s.mel_offset = VecF::Zero(100);
    s.pose_amp = VecF::Constant(features::kPoseDims, amp);
    s.pose_freq = VecF(features::kPoseDims);
    for (int c = 0; c < features::kPoseDims; ++c) {
        s.pose_freq[c] = freq_scale * (0.6f + 0.4f * float(c));
    }
    return s;
}

std::vector<features::VisualCodes> style_clips(const data::StyleProfile& s, int n,
                                               uint64_t seed0) {
    std::vector<features::VisualCodes> out;
    for (int i = 0; i < n; ++i) {
        out.push_back(data::synth_sample(s, "sample text", 2.0, seed0 + uint64_t(i)).codes);
    }
    return out;
}

}  // namespace

TEST_CASE("moment fitting matches hand values") {
    MatD x(2, 2);
    x << 1.0, 2.0, 3.0, 6.0;
    const eval::GaussianMoments g = eval::fit_moments(x, 0.0);
    CHECK(g.mean[0] == doctest::Approx(2.0));
    CHECK(g.mean[1] == doctest::Approx(4.0));
    // unbiased: var0 = 2, var1 = 8, cov01 = 4
    CHECK(g.cov(0, 0) == doctest::Approx(2.0));
    CHECK(g.cov(1, 1) == doctest::Approx(8.0));
    CHECK(g.cov(0, 1) == doctest::Approx(4.0));

    const eval::GaussianMoments r = eval::fit_moments(x, 1e-3);
    CHECK(r.cov(0, 0) == doctest::Approx(2.001));
    CHECK(r.cov(0, 1) == doctest::Approx(4.0));

    CHECK_THROWS_AS(eval::fit_moments(MatD(0, 3)), ValidationError);
    MatD bad = x;
    bad(1, 1) = std::nan("");
    CHECK_THROWS_AS(eval::fit_moments(bad), ValidationError);
}

TEST_CASE("Fréchet distance vanishes on identical sets and is symmetric") {
    Rng rng(31);
    MatD x(40, 5);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    CHECK(eval::frechet_gaussian(x, x) <= 1e-8);

    MatD y(55, 5);
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = 0.5 * rng.normal() + 0.2;
    const double ab = eval::frechet_gaussian(x, y);
    const double ba = eval::frechet_gaussian(y, x);
    CHECK(ab > 0.0);
    CHECK(std::abs(ab - ba) < 1e-8);

    CHECK_THROWS_AS(eval::frechet_gaussian(x, MatD::Zero(10, 4)), ValidationError);
}

TEST_CASE("equal-variance Gaussians are separated by the squared mean gap") {
    for (double mu : {0.5, -1.25, 3.0}) {
        eval::GaussianMoments a, b;
        a.mean = VecD::Zero(1);
        a.cov = MatD::Identity(1, 1);
        b.mean = VecD::Constant(1, mu);
        b.cov = MatD::Identity(1, 1);
        CHECK(eval::frechet_gaussian(a, b) == doctest::Approx(mu * mu).epsilon(1e-10));
    }
}

TEST_CASE("matrix square root agrees with a general eigendecomposition oracle") {
    Rng rng(77);
    for (int rep = 0; rep < 5; ++rep) {
        eval::GaussianMoments a, b;
        a.mean = random_vec(3, rng);
        b.mean = random_vec(3, rng);
        a.cov = random_spd(3, rng);
        b.cov = random_spd(3, rng);
        const double got = eval::frechet_gaussian(a, b);
        const double want = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() -
                            2.0 * trace_sqrt_product(a.cov, b.cov);
        CHECK(std::abs(got - want) < 1e-6);
    }
}

TEST_CASE("pose shift moves p_fid by the squared offset and leaves e_fid alone") {
    const data::StyleProfile s = data::StyleProfile::make(2, 5);
    std::vector<features::VisualCodes> ref = style_clips(s, 6, 40);
    std::vector<features::VisualCodes> gen = ref;

    CHECK(eval::e_fid(ref, gen) <= 1e-8);
    CHECK(eval::p_fid(ref, gen) <= 1e-8);

    VecF c(features::kPoseDims);
    c << 0.1f, -0.2f, 0.3f, 0.05f, -0.15f, 0.2f;
    for (auto& clip : gen) clip.pose.rowwise() += c.transpose();
    CHECK(eval::e_fid(ref, gen) <= 1e-8);
    CHECK(eval::p_fid(ref, gen) ==
          doctest::Approx(double(c.squaredNorm())).epsilon(1e-6));

    CHECK_THROWS_AS(eval::p_fid({}, gen), ValidationError);
    CHECK_THROWS_AS(eval::e_fid(ref, {}), ValidationError);
}

TEST_CASE("pose distance tells the generating style apart from a stranger") {
    const data::StyleProfile a = plain_style(0, 0.10f, 1.0f);
    const data::StyleProfile b = plain_style(1, 0.25f, 1.7f);
    for (uint64_t seed = 0; seed < 5; ++seed) {
        const auto ref = style_clips(a, 8, 1000 * seed + 1);
        const auto same = style_clips(a, 8, 1000 * seed + 500);
        const auto other = style_clips(b, 8, 1000 * seed + 500);
        CHECK(eval::p_fid(ref, same) < eval::p_fid(ref, other));
    }
}

TEST_CASE("Fréchet metrics ignore frame order") {
    const data::StyleProfile s = data::StyleProfile::make(1, 8);
    const auto ref = style_clips(s, 3, 60);
    auto shuffled = ref;
    Rng rng(3);
    for (auto& clip : shuffled) {
        std::vector<Eigen::Index> perm(size_t(clip.frames()));
        std::iota(perm.begin(), perm.end(), 0);
        for (size_t i = perm.size(); i > 1; --i) {
            std::swap(perm[i - 1], perm[size_t(rng.uniform_int(int(i)))]);
        }
        features::VisualCodes moved = clip;
        for (Eigen::Index r = 0; r < clip.frames(); ++r) {
            moved.expr.row(perm[size_t(r)]) = clip.expr.row(r);
            moved.eye.row(perm[size_t(r)]) = clip.eye.row(r);
            moved.pose.row(perm[size_t(r)]) = clip.pose.row(r);
        }
        clip = moved;
    }
    const auto gen = style_clips(s, 3, 90);
    CHECK(eval::e_fid(ref, gen) == doctest::Approx(eval::e_fid(shuffled, gen)).epsilon(1e-9));
    CHECK(eval::p_fid(ref, gen) == doctest::Approx(eval::p_fid(shuffled, gen)).epsilon(1e-9));
}

TEST_CASE("synchrony correlation hits the closed-form extremes") {
    const Eigen::Index n = 200;
    features::MelSpectrogram mel;
    mel.frame_rate = data::kDefaultFrameRate;
    mel.data = MatF(4, n);
    features::VisualCodes codes;
    codes.frame_rate = mel.frame_rate;
    codes.expr = MatF::Zero(n, features::kExprDims);
    codes.eye = MatF::Zero(n, features::kEyeDims);
    codes.pose = MatF::Zero(n, features::kPoseDims);

    Rng rng(10);
    for (Eigen::Index f = 0; f < n; ++f) {
        const float e = float(2.0 + 1.5 * std::sin(0.1 * double(f)) + 0.3 * std::abs(rng.normal()));
        mel.data.col(f).setConstant(e);          // energy trace is e itself
        codes.expr(f, 3) = e;                    // perfectly synchronous
        codes.expr(f, 7) = 6.0f - e;             // anti-synchronous, stays positive
    }
    CHECK(eval::sync_corr(mel, codes, {3}) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(eval::sync_corr(mel, codes, {7}) == doctest::Approx(-1.0).epsilon(1e-9));

    // independent streams hover near zero
    for (uint64_t seed = 0; seed < 5; ++seed) {
        Rng r2(seed + 100);
        features::MelSpectrogram m2;
        m2.frame_rate = mel.frame_rate;
        m2.data = MatF(4, 1000);
        features::VisualCodes c2;
        c2.frame_rate = mel.frame_rate;
        c2.expr = MatF(1000, features::kExprDims);
        c2.eye = MatF::Zero(1000, features::kEyeDims);
        c2.pose = MatF::Zero(1000, features::kPoseDims);
        for (Eigen::Index i = 0; i < m2.data.size(); ++i) m2.data.data()[i] = float(r2.normal());
        for (Eigen::Index i = 0; i < c2.expr.size(); ++i) c2.expr.data()[i] = float(r2.normal());
        CHECK(std::abs(eval::sync_corr(m2, c2)) < 0.1);
    }

    // zero variance is defined as zero
    features::MelSpectrogram flat = mel;
    flat.data.setConstant(1.0f);
    CHECK(eval::sync_corr(flat, codes, {3}) == 0.0);

    features::VisualCodes short_codes = codes;
    short_codes.expr = codes.expr.topRows(n - 1);
    CHECK_THROWS_AS(eval::sync_corr(mel, short_codes, {3}), ValidationError);
    CHECK_THROWS_AS(eval::sync_corr(mel, codes, {99}), ValidationError);
}

TEST_CASE("template decoding recovers synthetic text") {
    const data::StyleProfile s = data::StyleProfile::make(0, 123);
    const std::string text = "hello world";
    const data::TrainingSample clip = data::synth_sample(s, text, 1.2, 9);
    CHECK(eval::decode_acc(clip.mel, text, s) == 1.0);

    // silencing one slot costs exactly one character
    features::MelSpectrogram damaged = clip.mel;
    const Eigen::Index f0 = Eigen::Index(std::ceil(0.2 * clip.mel.frame_rate));
    const Eigen::Index f1 = Eigen::Index(std::ceil(0.3 * clip.mel.frame_rate));
    for (Eigen::Index b = 0; b < damaged.data.rows(); ++b) {
        damaged.data.row(b).segment(f0, f1 - f0).setConstant(std::log(1e-10f) + s.mel_offset[b]);
    }
    CHECK(eval::decode_acc(damaged, text, s) == doctest::Approx(10.0 / 11.0));

    // pure noise decodes at chance level
    Rng rng(55);
    features::MelSpectrogram noise = clip.mel;
    for (Eigen::Index i = 0; i < noise.data.size(); ++i) {
        noise.data.data()[i] = float(-20.0 + 2.0 * rng.normal());
    }
    CHECK(eval::decode_acc(noise, "abcdefghij", s) < 0.1);

    CHECK_THROWS_AS(eval::decode_acc(clip.mel, std::string(40, 'a'), s), ValidationError);
    CHECK_THROWS_AS(eval::decode_acc(clip.mel, "", s), ValidationError);
}

TEST_CASE("metric reports serialize to CSV and log lines") {
    eval::MetricReport r;
    r.recon_l1 = 0.125;
    r.e_fd = 1.5;
    r.p_fd = 0.25;
    r.sync_corr = -0.5;
    r.decode_acc = 0.9;
    r.seed = 42;
    r.checkpoint = "step_001000";
    r.config_hash = 0xabcdef12u;
    r.validate();

    const std::string header = eval::metric_csv_header();
    const std::string row = eval::metric_csv_row(r);
    CHECK(size_t(std::count(header.begin(), header.end(), ',')) == 7);
    CHECK(size_t(std::count(row.begin(), row.end(), ',')) == 7);
    CHECK(row.find("0.125") == 0);
    CHECK(row.find("step_001000") != std::string::npos);
    CHECK(row.find("00000000abcdef12") != std::string::npos);

    const std::string line = eval::metric_log_line(r);
    CHECK(line.find("decode_acc=0.9") != std::string::npos);
    CHECK(line.find("seed=42") != std::string::npos);

    eval::MetricReport bad = r;
    bad.decode_acc = 1.5;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
    bad = r;
    bad.p_fd = -0.1;
    CHECK_THROWS_AS(bad.validate(), ValidationError);
}
