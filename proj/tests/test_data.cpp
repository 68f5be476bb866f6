#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "doctest.h"
#include "flowtalk/data.hpp"
#include "flowtalk/io.hpp"
#include "flowtalk/net.hpp"

using namespace flowtalk;

namespace {

bool same_floats(const MatF& a, const MatF& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

bool same_sample(const data::TrainingSample& a, const data::TrainingSample& b) {
    return a.style_id == b.style_id && a.tokens.ids == b.tokens.ids &&
           a.mel.frame_rate == b.mel.frame_rate && a.codes.frame_rate == b.codes.frame_rate &&
           same_floats(a.mel.data, b.mel.data) && same_floats(a.codes.expr, b.codes.expr) &&
           same_floats(a.codes.eye, b.codes.eye) && same_floats(a.codes.pose, b.codes.pose);
}

// a hand-rolled style with flat coloration; pose channels get distinct frequencies
data::StyleProfile flat_style(int id, float amp, const std::vector<float>& freqs) {
    data::StyleProfile s;
    s.style_id = id;
    s.mel_offset = VecF::Zero(100);
    s.pose_amp = VecF::Constant(features::kPoseDims, amp);
    s.pose_freq = VecF(features::kPoseDims);
    for (int c = 0; c < features::kPoseDims; ++c) s.pose_freq[c] = freqs[size_t(c)];
    return s;
}

// magnitude spectrum peak over bins [1, n/2]; a plain DFT is plenty at this scale
Eigen::Index dominant_bin(const VecF& x) {
    const Eigen::Index n = x.size();
    Eigen::Index best = 1;
    double best_mag = -1.0;
    for (Eigen::Index k = 1; k <= n / 2; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (Eigen::Index f = 0; f < n; ++f) {
            const double ang = -2.0 * M_PI * double(k) * double(f) / double(n);
            acc += double(x[f]) * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        if (std::abs(acc) > best_mag) {
            best_mag = std::abs(acc);
            best = k;
        }
    }
    return best;
}

}  // namespace

TEST_CASE("style profiles are deterministic and bounded") {
    const data::StyleProfile a = data::StyleProfile::make(3, 99);
    const data::StyleProfile b = data::StyleProfile::make(3, 99);
    CHECK(a.mel_offset == b.mel_offset);
    CHECK(a.pose_amp == b.pose_amp);
    CHECK(a.pose_freq == b.pose_freq);
    CHECK(a.expr_gain == b.expr_gain);
    CHECK(a.eye_blink_rate == b.eye_blink_rate);

    const data::StyleProfile c = data::StyleProfile::make(4, 99);
    CHECK(a.mel_offset != c.mel_offset);
    const data::StyleProfile d = data::StyleProfile::make(3, 100);
    CHECK(a.mel_offset != d.mel_offset);

    for (int id = 0; id < 20; ++id) {
        const data::StyleProfile s = data::StyleProfile::make(id, 1234, 64);
        CHECK(s.mel_offset.size() == 64);
        CHECK(s.mel_offset.minCoeff() >= -1.5f);
        CHECK(s.mel_offset.maxCoeff() <= 1.5f);
        CHECK(s.pose_amp.minCoeff() >= 0.05f);
        CHECK(s.pose_amp.maxCoeff() <= 0.30f);
        CHECK(s.pose_freq.minCoeff() >= 0.5f);
        CHECK(s.pose_freq.maxCoeff() <= 4.0f);
        CHECK(s.expr_gain >= 0.6f);
        CHECK(s.expr_gain <= 1.4f);
        CHECK(s.eye_blink_rate >= 0.15f);
        CHECK(s.eye_blink_rate <= 0.5f);
    }

    data::StyleProfile bad = data::StyleProfile::make(0, 5);
    bad.pose_freq[2] = -1.0f;
    CHECK_THROWS_AS(bad.validate(100), ValidationError);
}

TEST_CASE("clip synthesis is a pure function of its arguments") {
    const data::StyleProfile s = data::StyleProfile::make(1, 42);
    const data::TrainingSample a = data::synth_sample(s, "hello there", 2.0, 7);
    const data::TrainingSample b = data::synth_sample(s, "hello there", 2.0, 7);
    CHECK(same_sample(a, b));
    CHECK(a.frames() == 1 + Eigen::Index(std::floor(2.0 * data::kDefaultFrameRate)));
    CHECK(size_t(a.frames()) == a.tokens.ids.size());
    CHECK(a.codes.frames() == a.frames());
    CHECK(a.mel.data.allFinite());
    CHECK(a.style_id == 1);

    // token prefix is the text, remainder is filler
    const features::Vocab vocab;
    for (size_t i = 0; i < 11; ++i) CHECK(a.tokens.ids[i] == vocab.char_to_id("hello there"[i]));
    CHECK(a.tokens.ids.back() == vocab.filler_id());

    const data::TrainingSample c = data::synth_sample(s, "hello there", 2.0, 8);
    CHECK_FALSE(same_floats(a.codes.pose, c.codes.pose));  // per-clip phase moved
    const data::TrainingSample d =
        data::synth_sample(data::StyleProfile::make(2, 42), "hello there", 2.0, 7);
    CHECK_FALSE(same_floats(a.mel.data, d.mel.data));
}

TEST_CASE("doubling a pose frequency doubles the dominant spectral peak") {
    const std::vector<float> base = {0.7f, 1.0f, 1.7f, 0.9f, 1.3f, 0.8f};
    std::vector<float> doubled = base;
    doubled[1] *= 2.0f;  // yaw
    const data::StyleProfile sa = flat_style(0, 0.2f, base);
    const data::StyleProfile sb = flat_style(1, 0.2f, doubled);

    const data::TrainingSample a = data::synth_sample(sa, "test clip", 4.0, 11);
    const data::TrainingSample b = data::synth_sample(sb, "test clip", 4.0, 11);
    const Eigen::Index pa = dominant_bin(a.codes.pose.col(1));
    const Eigen::Index pb = dominant_bin(b.codes.pose.col(1));
    CHECK(pa > 0);
    CHECK(pb == 2 * pa);
    // sanity: the peak sits where the frequency says it should
    const double hz = double(pa) * data::kDefaultFrameRate / double(a.frames());
    CHECK(hz == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("empty text gives the style's base coloration and a neutral face") {
    data::StyleProfile s = data::StyleProfile::make(6, 21);
    // long enough to contain a blink even at the slowest rate the maker draws
    const data::TrainingSample a = data::synth_sample(s, "", 8.0, 3);

    // every frame carries exactly floor + per-band offset
    for (Eigen::Index b = 0; b < a.mel.data.rows(); ++b) {
        const float expected = std::log(1e-10f) + s.mel_offset[b];
        for (Eigen::Index f = 0; f < a.frames(); ++f) CHECK(a.mel.data(b, f) == expected);
    }
    CHECK((a.codes.expr.array() == 0.0f).all());
    CHECK(a.codes.pose.cwiseAbs().maxCoeff() > 0.0f);
    CHECK(a.codes.eye.maxCoeff() > 0.5f);  // blinking continues in silence
    for (int i = 0; i < int(a.tokens.ids.size()); ++i) {
        CHECK(a.tokens.ids[size_t(i)] == features::Vocab::kFillerId);
    }
}

TEST_CASE("each character activates its own mel band and expression dim") {
    data::StyleProfile s = flat_style(0, 0.1f, {1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f});
    const data::TrainingSample a = data::synth_sample(s, "a", 1.0, 5);

    // 'a' -> id 65 -> band 2 + (65 % 32) * 3 = 5, expression dim 65 % 51 = 14
    Eigen::Index band = 0;
    a.mel.data.rowwise().mean().maxCoeff(&band);
    CHECK(band == 5);
    Eigen::Index dim = 0, frame = 0;
    a.codes.expr.maxCoeff(&frame, &dim);
    CHECK(dim == 14);
    CHECK(a.codes.expr.maxCoeff() == doctest::Approx(double(s.expr_gain)).epsilon(0.02));
    // the bump lives inside the first 0.1 s slot
    CHECK(frame <= Eigen::Index(std::ceil(0.1 * data::kDefaultFrameRate)));
    // rows other than the active dim stay zero
    for (Eigen::Index c = 0; c < a.codes.expr.cols(); ++c) {
        if (c != 14) CHECK(a.codes.expr.col(c).cwiseAbs().maxCoeff() == 0.0f);
    }
}

TEST_CASE("blinks recur at the style's rate") {
    data::StyleProfile s = flat_style(0, 0.1f, {1.0f, 1.0f, 1.0f, 1.0f, 1.0f, 1.0f});
    s.eye_blink_rate = 0.5f;
    const data::TrainingSample a = data::synth_sample(s, "", 6.0, 17);
    CHECK(a.codes.eye.col(0).maxCoeff() > 0.98f);
    CHECK(same_floats(a.codes.eye.col(0), a.codes.eye.col(1)));
    CHECK(same_floats(a.codes.eye.col(2), MatF(0.3f * a.codes.eye.col(0))));

    // cluster the near-closed frames and measure the spacing between blinks
    std::vector<double> centers;
    Eigen::Index run_start = -1;
    for (Eigen::Index f = 0; f <= a.frames(); ++f) {
        const bool hot = f < a.frames() && a.codes.eye(f, 0) > 0.9f;
        if (hot && run_start < 0) run_start = f;
        if (!hot && run_start >= 0) {
            centers.push_back(0.5 * double(run_start + f - 1));
            run_start = -1;
        }
    }
    REQUIRE(centers.size() >= 2);
    const double period_frames = data::kDefaultFrameRate / double(s.eye_blink_rate);
    for (size_t i = 1; i < centers.size(); ++i) {
        CHECK(std::abs(centers[i] - centers[i - 1] - period_frames) < 3.0);
    }
}

TEST_CASE("durations shorter than the text rejects with the minimum") {
    const data::StyleProfile s = data::StyleProfile::make(0, 1);
    const std::string text(30, 'x');
    CHECK(data::min_duration_s(text) == doctest::Approx(3.0));
    CHECK(data::min_duration_s("") == doctest::Approx(0.1));
    CHECK_THROWS_WITH_AS(data::synth_sample(s, text, 2.0, 0),
                         doctest::Contains("minimum 3.000"), ValidationError);
    CHECK_THROWS_AS(data::synth_sample(s, "", 0.0, 0), ValidationError);
    CHECK_THROWS_AS(data::synth_sample(s, "", -1.0, 0), ValidationError);
    // the minimum itself is accepted
    CHECK_NOTHROW(data::synth_sample(s, text, 3.0, 0));
}

TEST_CASE("dataset files round-trip bitwise and support random access") {
    Rng rng(404);
    data::Dataset ds;
    const char* texts[] = {"alpha", "beta gamma", "delta", "", "epsilon zeta", "eta",
                           "theta iota", "kappa", "lambda mu", "nu xi"};
    for (int i = 0; i < 10; ++i) {
        const data::StyleProfile s = data::StyleProfile::make(i % 3, 55, 48);
        const double dur = 1.2 + rng.uniform() * 1.5;
        ds.samples.push_back(data::synth_sample(s, texts[i], dur, uint64_t(100 + i)));
    }
    const std::string path = "ftds_roundtrip.bin";
    data::write_dataset(ds, path);

    const data::Dataset back = data::read_dataset(path);
    CHECK(back.frame_rate == ds.frame_rate);
    REQUIRE(back.samples.size() == 10);
    for (size_t i = 0; i < 10; ++i) CHECK(same_sample(ds.samples[i], back.samples[i]));

    // writing what was read reproduces the file byte for byte
    const std::string path2 = "ftds_roundtrip2.bin";
    data::write_dataset(back, path2);
    CHECK(io::slurp(path) == io::slurp(path2));

    // the offset table lands each record exactly where a sequential read does
    CHECK(data::dataset_size(path) == 10);
    for (size_t i = 0; i < 10; ++i) {
        CHECK(same_sample(data::read_sample(path, i), ds.samples[i]));
    }
    CHECK_THROWS_AS(data::read_sample(path, 10), ValidationError);
}

TEST_CASE("corrupted dataset files fail with a diagnosis") {
    data::Dataset ds;
    const data::StyleProfile s = data::StyleProfile::make(0, 9, 32);
    ds.samples.push_back(data::synth_sample(s, "ab", 1.0, 1));
    ds.samples.push_back(data::synth_sample(s, "cd", 1.1, 2));
    const std::string path = "ftds_corrupt.bin";
    data::write_dataset(ds, path);
    const std::vector<uint8_t> good = io::slurp(path);

    auto with_bytes = [&](std::vector<uint8_t> v) {
        io::spew(path, v);
        return data::read_dataset(path);
    };

    std::vector<uint8_t> bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(with_bytes(bad_magic), doctest::Contains("magic"), IoError);

    std::vector<uint8_t> bad_version = good;
    bad_version[4] = 3;
    CHECK_THROWS_WITH_AS(with_bytes(bad_version), doctest::Contains("version 3"), IoError);

    for (size_t cut : {size_t(2), size_t(10), size_t(40), good.size() - 5}) {
        std::vector<uint8_t> trunc(good.begin(), good.begin() + long(cut));
        CHECK_THROWS_AS(with_bytes(trunc), IoError);
    }

    std::vector<uint8_t> trailing = good;
    trailing.push_back(0);
    CHECK_THROWS_WITH_AS(with_bytes(trailing), doctest::Contains("trailing"), IoError);

    io::spew(path, good);
    CHECK_NOTHROW(data::read_dataset(path));
}

TEST_CASE("collate packs greedily under a frame budget") {
    const data::StyleProfile s = data::StyleProfile::make(0, 33, 24);
    auto clip = [&](double dur) { return data::synth_sample(s, "", dur, 77); };

    std::vector<data::TrainingSample> one = {clip(1.0)};
    const auto single = data::collate(one, 500);
    REQUIRE(single.size() == 1);
    CHECK(single[0].indices == std::vector<size_t>{0});
    CHECK(single[0].lengths == std::vector<Eigen::Index>{one[0].frames()});
    CHECK(single[0].total_frames == one[0].frames());

    // 60 + 40 frames fit a 100-frame budget together
    std::vector<data::TrainingSample> pair;
    pair.push_back(clip(59.0 / data::kDefaultFrameRate));  // 60 frames
    pair.push_back(clip(39.0 / data::kDefaultFrameRate));  // 40 frames
    REQUIRE(pair[0].frames() == 60);
    REQUIRE(pair[1].frames() == 40);
    const auto packed = data::collate(pair, 100);
    REQUIRE(packed.size() == 1);
    CHECK(packed[0].indices == std::vector<size_t>{0, 1});
    CHECK(packed[0].total_frames == 100);

    // 60 + 50 overflows: the second clip starts a new batch
    pair[1] = clip(49.0 / data::kDefaultFrameRate);
    const auto split = data::collate(pair, 100);
    REQUIRE(split.size() == 2);
    CHECK(split[0].indices == std::vector<size_t>{0});
    CHECK(split[1].indices == std::vector<size_t>{1});

    CHECK_THROWS_WITH_AS(data::collate(pair, 30), doctest::Contains("exceeds"), ValidationError);
    CHECK_THROWS_AS(data::collate(pair, 0), ValidationError);
    CHECK(data::collate({}, 10).empty());
}

TEST_CASE("batched loss equals the sum of per-sample losses") {
    const data::StyleProfile sp = data::StyleProfile::make(0, 11, 16);
    std::vector<data::TrainingSample> clips;
    clips.push_back(data::synth_sample(sp, "one", 1.0, 1));
    clips.push_back(data::synth_sample(sp, "two", 1.3, 2));
    clips.push_back(data::synth_sample(sp, "three", 1.6, 3));

    net::NetConfig cfg;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.ffn_dim = 32;
    cfg.n_fusion_blocks = 1;
    cfg.n_branch_blocks = 1;
    cfg.n_text_blocks = 1;
    cfg.mel_dim = 16;
    cfg.fusion_strategy = net::FusionStrategy::Add;
    net::ModelParams params = net::init_params(cfg, 5);

    const flow::LossWeights w;
    auto clip_loss = [&](const data::TrainingSample& c, uint64_t seed) {
        Rng rng(seed);
        const flow::TrainingSample ts = c.tensors();
        const flow::MaskSpec mask = flow::sample_mask(ts.frames(), rng);
        const double t = flow::sample_timestep(rng);
        return flow::cfm_loss(params, ts, mask, t, flow::DropFlags{}, w, rng).total;
    };

    // group with collate, then accumulate exactly the way the trainer does
    double individually = 0.0;
    for (size_t i = 0; i < clips.size(); ++i) individually += clip_loss(clips[i], 900 + i);
    for (Eigen::Index budget : {400, 160}) {
        double batched = 0.0;
        for (const data::Batch& b : data::collate(clips, budget)) {
            for (size_t j = 0; j < b.indices.size(); ++j) {
                CHECK(b.lengths[j] == clips[b.indices[j]].frames());
                batched += clip_loss(clips[b.indices[j]], 900 + b.indices[j]);
            }
        }
        CHECK(std::abs(batched - individually) < 1e-6);
    }
}

TEST_CASE("a linear probe on averaged pose separates two styles") {
    // two styles well apart in movement energy
    const data::StyleProfile a = flat_style(0, 0.10f, {0.8f, 1.1f, 1.9f, 0.6f, 1.4f, 2.3f});
    const data::StyleProfile b = flat_style(1, 0.25f, {1.3f, 2.2f, 0.9f, 1.8f, 0.7f, 1.5f});

    const int per_style = 20;
    std::vector<VecD> feats;
    std::vector<double> labels;
    for (int i = 0; i < per_style; ++i) {
        for (int which = 0; which < 2; ++which) {
            const data::StyleProfile& s = which ? b : a;
            const data::TrainingSample clip =
                data::synth_sample(s, "probe", 2.0 + 0.1 * i, uint64_t(300 + 2 * i + which));
            VecD f(features::kPoseDims + 1);
            for (int c = 0; c < features::kPoseDims; ++c) {
                f[c] = clip.codes.pose.col(c).cwiseAbs().mean();
            }
            f[features::kPoseDims] = 1.0;  // bias
            feats.push_back(f);
            labels.push_back(which ? 1.0 : -1.0);
        }
    }

    // least squares on the first 30 clips, accuracy on the held-out 10
    const int train_n = 30;
    MatD X(train_n, features::kPoseDims + 1);
    VecD y(train_n);
    for (int i = 0; i < train_n; ++i) {
        X.row(i) = feats[size_t(i)].transpose();
        y[i] = labels[size_t(i)];
    }
    const VecD coef = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    int correct = 0;
    for (size_t i = train_n; i < feats.size(); ++i) {
        const double pred = feats[i].dot(coef);
        if ((pred > 0.0) == (labels[i] > 0.0)) ++correct;
    }
    CHECK(correct == int(feats.size()) - train_n);
}
