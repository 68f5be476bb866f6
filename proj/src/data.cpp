#include "flowtalk/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "flowtalk/io.hpp"

namespace flowtalk::data {

namespace {

constexpr float kLogFloor = -23.025851f;  // log(1e-10), the mel silence level
constexpr uint32_t kDatasetVersion = 1;
constexpr char kDatasetMagic[4] = {'F', 'T', 'D', 'S'};

}  // namespace

void StyleProfile::validate(int mel_dim) const {
    if (mel_dim < 8) throw ValidationError(strf("mel_dim must be at least 8, got %d", mel_dim));
    if (mel_offset.size() != mel_dim) {
        throw ValidationError(strf("style %d: mel_offset has %td bands, expected %d", style_id,
                                   mel_offset.size(), mel_dim));
    }
    if (pose_amp.size() != features::kPoseDims || pose_freq.size() != features::kPoseDims) {
        throw ValidationError(strf("style %d: pose_amp/pose_freq must have %d channels", style_id,
                                   features::kPoseDims));
    }
    if (!mel_offset.allFinite() || !pose_amp.allFinite() || !pose_freq.allFinite() ||
        !std::isfinite(expr_gain) || !std::isfinite(eye_blink_rate)) {
        throw ValidationError(strf("style %d has non-finite parameters", style_id));
    }
    if (pose_amp.minCoeff() < 0.0f || pose_amp.maxCoeff() > 1.0f) {
        throw ValidationError(strf("style %d: pose_amp outside [0, 1]", style_id));
    }
    if (pose_freq.minCoeff() <= 0.0f || pose_freq.maxCoeff() > 20.0f) {
        throw ValidationError(strf("style %d: pose_freq outside (0, 20] Hz", style_id));
    }
    if (expr_gain < 0.0f || expr_gain > 4.0f) {
        throw ValidationError(strf("style %d: expr_gain outside [0, 4]", style_id));
    }
    if (eye_blink_rate <= 0.0f || eye_blink_rate > 5.0f) {
        throw ValidationError(strf("style %d: eye_blink_rate outside (0, 5] Hz", style_id));
    }
}

StyleProfile StyleProfile::make(int style_id, uint64_t seed, int mel_dim) {
    if (mel_dim < 8) throw ValidationError(strf("mel_dim must be at least 8, got %d", mel_dim));
    StyleProfile s;
    s.style_id = style_id;
    Rng rng(mix_seed(mix_seed(seed, fnv1a64("style.profile")),
                     static_cast<uint64_t>(static_cast<uint32_t>(style_id))));
    s.mel_offset = VecF(mel_dim);
    for (Eigen::Index b = 0; b < mel_dim; ++b) {
        s.mel_offset[b] = static_cast<float>(rng.uniform(-1.5, 1.5));
    }
    s.pose_amp = VecF(features::kPoseDims);
    s.pose_freq = VecF(features::kPoseDims);
    for (int c = 0; c < features::kPoseDims; ++c) {
        s.pose_amp[c] = static_cast<float>(rng.uniform(0.05, 0.30));
        s.pose_freq[c] = static_cast<float>(rng.uniform(0.5, 4.0));
    }
    s.expr_gain = static_cast<float>(rng.uniform(0.6, 1.4));
    s.eye_blink_rate = static_cast<float>(rng.uniform(0.15, 0.5));
    s.validate(mel_dim);
    return s;
}

StyleProfile corpus_style(int style_id, int n_styles, uint64_t seed, int mel_dim) {
    if (n_styles < 1 || style_id < 0 || style_id >= n_styles) {
        throw ValidationError(strf("style id %d outside the %d-style family", style_id, n_styles));
    }
    StyleProfile s = StyleProfile::make(style_id, seed, mel_dim);
    // replace the free-drawn motion stats with a ramp across the family:
    // amplitude and frequency both grow with the id, with mild per-channel
    // jitter that never lets neighbors cross
    const double u = n_styles == 1 ? 0.0 : double(style_id) / double(n_styles - 1);
    Rng rng(mix_seed(mix_seed(seed, fnv1a64("style.corpus")),
                     static_cast<uint64_t>(static_cast<uint32_t>(style_id))));
    const double amp_base = 0.07 + 0.18 * u;
    const double freq_base = 0.8 * std::pow(2.0, u);
    for (int c = 0; c < features::kPoseDims; ++c) {
        s.pose_amp[c] = static_cast<float>(amp_base * (0.85 + 0.3 * rng.uniform()));
        s.pose_freq[c] = static_cast<float>(freq_base * (0.8 + 0.4 * rng.uniform()));
    }
    s.validate(mel_dim);
    return s;
}

MatD styles_to_matrix(const std::vector<StyleProfile>& styles) {
    if (styles.empty()) throw ValidationError("no styles to serialize");
    const Eigen::Index F = styles[0].mel_offset.size();
    MatD m(Eigen::Index(styles.size()), 3 + F + 2 * features::kPoseDims);
    for (size_t i = 0; i < styles.size(); ++i) {
        const StyleProfile& s = styles[i];
        s.validate(static_cast<int>(F));
        Eigen::Index c = 0;
        m(Eigen::Index(i), c++) = s.style_id;
        m(Eigen::Index(i), c++) = s.expr_gain;
        m(Eigen::Index(i), c++) = s.eye_blink_rate;
        m.row(Eigen::Index(i)).segment(c, F) = s.mel_offset.cast<double>().transpose();
        c += F;
        m.row(Eigen::Index(i)).segment(c, features::kPoseDims) =
            s.pose_amp.cast<double>().transpose();
        c += features::kPoseDims;
        m.row(Eigen::Index(i)).segment(c, features::kPoseDims) =
            s.pose_freq.cast<double>().transpose();
    }
    return m;
}

std::vector<StyleProfile> styles_from_matrix(const MatD& m) {
    const Eigen::Index F = m.cols() - 3 - 2 * features::kPoseDims;
    if (m.rows() < 1 || F < 8) {
        throw ValidationError(strf("style table with %td rows and %td columns is malformed",
                                   m.rows(), m.cols()));
    }
    std::vector<StyleProfile> out(size_t(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        StyleProfile& s = out[size_t(i)];
        Eigen::Index c = 0;
        s.style_id = static_cast<int>(m(i, c++));
        s.expr_gain = static_cast<float>(m(i, c++));
        s.eye_blink_rate = static_cast<float>(m(i, c++));
        s.mel_offset = m.row(i).segment(c, F).cast<float>().transpose();
        c += F;
        s.pose_amp = m.row(i).segment(c, features::kPoseDims).cast<float>().transpose();
        c += features::kPoseDims;
        s.pose_freq = m.row(i).segment(c, features::kPoseDims).cast<float>().transpose();
        s.validate(static_cast<int>(F));
    }
    return out;
}

VecF char_band_profile(char c, int mel_bands) {
    VecF g = VecF::Zero(mel_bands);
    if (c == ' ') return g;
    const features::Vocab vocab;
    const int center = char_band_center(vocab.char_to_id(c), mel_bands);
    for (int b = 0; b < mel_bands; ++b) {
        const float d = static_cast<float>(b - center) / kCharBandSigma;
        g[b] = std::exp(-0.5f * d * d);
    }
    return g;
}

flow::TrainingSample TrainingSample::tensors() const {
    flow::TrainingSample t;
    t.mel = mel.data.transpose();
    t.codes = codes.packed();
    t.tokens = tokens;
    return t;
}

double min_duration_s(const std::string& text) {
    return static_cast<double>(std::max<size_t>(text.size(), 1)) / kCharsPerSecond;
}

TrainingSample synth_sample(const StyleProfile& style, const std::string& text,
                            double duration_s, uint64_t seed, double frame_rate) {
    const int F = static_cast<int>(style.mel_offset.size());
    style.validate(F);
    if (!(frame_rate > 0.0) || !std::isfinite(frame_rate)) {
        throw ValidationError(strf("frame_rate must be positive, got %g", frame_rate));
    }
    const double min_s = min_duration_s(text);
    if (!std::isfinite(duration_s) || duration_s < min_s) {
        throw ValidationError(strf(
            "duration %.3f s too short for %zu characters at %.0f chars/s (minimum %.3f s)",
            duration_s, text.size(), kCharsPerSecond, min_s));
    }

    const Eigen::Index N = 1 + static_cast<Eigen::Index>(std::floor(duration_s * frame_rate));
    Rng rng(mix_seed(seed, fnv1a64("synth.sample")));
    // per-clip phases; drawn up front so the layout below never touches the stream
    double pose_phase[features::kPoseDims];
    for (int c = 0; c < features::kPoseDims; ++c) pose_phase[c] = 2.0 * M_PI * rng.uniform();
    const double blink_phase = rng.uniform();

    TrainingSample out;
    out.style_id = style.style_id;
    const features::Vocab vocab;
    out.tokens = features::tokenize(text, "", static_cast<size_t>(N), vocab);

    // mel: silence floor plus the style's coloration, then one band bump per
    // character over its slot (half-sine envelope, Gaussian across bands)
    out.mel.frame_rate = frame_rate;
    out.mel.data = MatF(F, N);
    for (Eigen::Index b = 0; b < F; ++b) {
        out.mel.data.row(b).setConstant(kLogFloor + style.mel_offset[b]);
    }
    out.codes.frame_rate = frame_rate;
    out.codes.expr = MatF::Zero(N, features::kExprDims);
    out.codes.eye = MatF::Zero(N, features::kEyeDims);
    out.codes.pose = MatF::Zero(N, features::kPoseDims);

    const double slot_s = 1.0 / kCharsPerSecond;
    for (size_t ci = 0; ci < text.size(); ++ci) {
        const char ch = text[ci];
        if (ch == ' ') continue;  // silence and a neutral face
        const int id = vocab.char_to_id(ch);
        const VecF profile = char_band_profile(ch, F);
        const int expr_dim = id % features::kExprDims;
        const double t0 = static_cast<double>(ci) * slot_s;
        const Eigen::Index f0 = static_cast<Eigen::Index>(std::ceil(t0 * frame_rate));
        const Eigen::Index f1 =
            std::min<Eigen::Index>(N, static_cast<Eigen::Index>(std::ceil((t0 + slot_s) * frame_rate)));
        for (Eigen::Index f = f0; f < f1; ++f) {
            const double u = (static_cast<double>(f) / frame_rate - t0) / slot_s;  // in [0, 1)
            const float env = static_cast<float>(std::sin(M_PI * std::clamp(u, 0.0, 1.0)));
            out.mel.data.col(f) += kCharBandGain * env * profile;
            out.codes.expr(f, expr_dim) += style.expr_gain * env;
        }
    }

    for (Eigen::Index f = 0; f < N; ++f) {
        const double t = static_cast<double>(f) / frame_rate;
        for (int c = 0; c < features::kPoseDims; ++c) {
            out.codes.pose(f, c) = style.pose_amp[c] *
                static_cast<float>(std::sin(2.0 * M_PI * style.pose_freq[c] * t + pose_phase[c]));
        }
        // one blink per period: a narrow Gaussian closure on the lid channels,
        // with a weaker echo on the squint channels
        const double period = 1.0 / style.eye_blink_rate;
        const double nearest = std::round(t / period - blink_phase) + blink_phase;
        const double dt = (t - nearest * period) / 0.04;
        const float pulse = static_cast<float>(std::exp(-0.5 * dt * dt));
        out.codes.eye(f, 0) = pulse;
        out.codes.eye(f, 1) = pulse;
        out.codes.eye(f, 2) = 0.3f * pulse;
        out.codes.eye(f, 3) = 0.3f * pulse;
    }
    return out;
}

namespace {

void check_sample_for_write(const TrainingSample& s, size_t index, int mel_dim,
                            double frame_rate) {
    const Eigen::Index N = s.mel.data.cols();
    if (s.mel.data.rows() != mel_dim) {
        throw ValidationError(strf("sample %zu: mel has %td bands, dataset has %d", index,
                                   s.mel.data.rows(), mel_dim));
    }
    if (s.codes.frames() != N || static_cast<Eigen::Index>(s.tokens.ids.size()) != N) {
        throw ValidationError(
            strf("sample %zu: mel (%td), codes (%td) and tokens (%zu) frame counts disagree",
                 index, N, s.codes.frames(), s.tokens.ids.size()));
    }
    if (s.mel.frame_rate != frame_rate || s.codes.frame_rate != frame_rate) {
        throw ValidationError(strf("sample %zu: frame rate %g / %g differs from dataset rate %g",
                                   index, s.mel.frame_rate, s.codes.frame_rate, frame_rate));
    }
    for (int id : s.tokens.ids) {
        if (id < 0 || id >= s.tokens.vocab_size) {
            throw ValidationError(strf("sample %zu: token id %d outside vocab", index, id));
        }
    }
}

void write_record(io::ByteWriter& w, const TrainingSample& s) {
    w.u32(static_cast<uint32_t>(s.style_id));
    w.u32(static_cast<uint32_t>(s.mel.data.cols()));
    for (int id : s.tokens.ids) w.u16(static_cast<uint16_t>(id));
    w.f32mat(s.mel.data);
    w.f32mat(s.codes.packed());
}

TrainingSample read_record(io::ByteReader& r, int mel_dim, double frame_rate) {
    TrainingSample s;
    s.style_id = static_cast<int>(r.u32());
    const Eigen::Index N = static_cast<Eigen::Index>(r.u32());
    const features::Vocab vocab;
    s.tokens.vocab_size = vocab.size();
    s.tokens.filler_id = vocab.filler_id();
    s.tokens.ids.resize(static_cast<size_t>(N));
    for (auto& id : s.tokens.ids) id = static_cast<int>(r.u16());
    s.mel.frame_rate = frame_rate;
    s.mel.data = r.f32mat(mel_dim, static_cast<int>(N));
    s.codes = features::VisualCodes::from_packed(
        r.f32mat(static_cast<int>(N), features::kVisualDims), frame_rate);
    return s;
}

// header + offset table; returns the per-record offsets
std::vector<uint64_t> read_header(io::ByteReader& r, const std::string& path, uint32_t* count,
                                  int* mel_dim, double* frame_rate) {
    char magic[4];
    r.raw(magic, 4);
    if (std::memcmp(magic, kDatasetMagic, 4) != 0) {
        throw IoError(strf("%s is not a dataset file (bad magic)", path.c_str()));
    }
    const uint32_t version = r.u32();
    if (version != kDatasetVersion) {
        throw IoError(strf("%s: dataset version %u, this build reads version %u", path.c_str(),
                           version, kDatasetVersion));
    }
    *count = r.u32();
    *mel_dim = static_cast<int>(r.u32());
    const uint32_t vdim = r.u32();
    if (vdim != features::kVisualDims) {
        throw IoError(strf("%s: visual dim %u, expected %d", path.c_str(), vdim,
                           features::kVisualDims));
    }
    uint64_t rate_bits = r.u64();
    std::memcpy(frame_rate, &rate_bits, sizeof(double));
    if (!(*frame_rate > 0.0) || !std::isfinite(*frame_rate)) {
        throw IoError(strf("%s: invalid frame rate in header", path.c_str()));
    }
    if (*mel_dim < 1 || *mel_dim > (1 << 20)) {
        throw IoError(strf("%s: implausible mel dim %d", path.c_str(), *mel_dim));
    }
    std::vector<uint64_t> offsets(*count);
    for (auto& off : offsets) off = r.u64();
    return offsets;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
    if (!(ds.frame_rate > 0.0) || !std::isfinite(ds.frame_rate)) {
        throw ValidationError(strf("dataset frame rate must be positive, got %g", ds.frame_rate));
    }
    const int mel_dim = ds.samples.empty() ? 0 : static_cast<int>(ds.samples[0].mel.data.rows());
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        check_sample_for_write(ds.samples[i], i, mel_dim, ds.frame_rate);
    }

    io::ByteWriter w;
    w.bytes(kDatasetMagic, 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<uint32_t>(ds.samples.size()));
    w.u32(static_cast<uint32_t>(mel_dim));
    w.u32(features::kVisualDims);
    uint64_t rate_bits = 0;
    std::memcpy(&rate_bits, &ds.frame_rate, sizeof(double));
    w.u64(rate_bits);
    std::vector<size_t> table_pos(ds.samples.size());
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        table_pos[i] = w.size();
        w.u64(0);  // patched once the record offsets are known
    }
    for (size_t i = 0; i < ds.samples.size(); ++i) {
        w.patch_u64(table_pos[i], w.size());
        write_record(w, ds.samples[i]);
    }
    io::spew(path, w.data());
}

Dataset read_dataset(const std::string& path) {
    const std::vector<uint8_t> bytes = io::slurp(path);
    io::ByteReader r(bytes, path);
    uint32_t count = 0;
    int mel_dim = 0;
    Dataset ds;
    const std::vector<uint64_t> offsets = read_header(r, path, &count, &mel_dim, &ds.frame_rate);
    ds.samples.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        if (r.tell() != offsets[i]) {
            throw IoError(strf("%s: offset table entry %u points at byte %llu, record starts at %zu",
                               path.c_str(), i, static_cast<unsigned long long>(offsets[i]),
                               r.tell()));
        }
        ds.samples.push_back(read_record(r, mel_dim, ds.frame_rate));
    }
    if (r.remaining() != 0) {
        throw IoError(strf("%s: %zu trailing bytes after the last record", path.c_str(),
                           r.remaining()));
    }
    return ds;
}

TrainingSample read_sample(const std::string& path, size_t index) {
    const std::vector<uint8_t> bytes = io::slurp(path);
    io::ByteReader r(bytes, path);
    uint32_t count = 0;
    int mel_dim = 0;
    double frame_rate = 0.0;
    const std::vector<uint64_t> offsets = read_header(r, path, &count, &mel_dim, &frame_rate);
    if (index >= count) {
        throw ValidationError(strf("sample index %zu out of range (dataset has %u)", index, count));
    }
    r.seek(static_cast<size_t>(offsets[index]));
    return read_record(r, mel_dim, frame_rate);
}

size_t dataset_size(const std::string& path) {
    const std::vector<uint8_t> bytes = io::slurp(path);
    io::ByteReader r(bytes, path);
    uint32_t count = 0;
    int mel_dim = 0;
    double frame_rate = 0.0;
    read_header(r, path, &count, &mel_dim, &frame_rate);
    return count;
}

std::vector<Batch> collate(const std::vector<TrainingSample>& samples, Eigen::Index max_frames) {
    if (max_frames < 1) {
        throw ValidationError(strf("batch frame budget must be positive, got %td", max_frames));
    }
    std::vector<Batch> batches;
    for (size_t i = 0; i < samples.size(); ++i) {
        const Eigen::Index len = samples[i].frames();
        if (len > max_frames) {
            throw ValidationError(strf("sample %zu has %td frames, exceeds the batch budget %td",
                                       i, len, max_frames));
        }
        if (batches.empty() || batches.back().total_frames + len > max_frames) {
            batches.emplace_back();
        }
        Batch& b = batches.back();
        b.indices.push_back(i);
        b.lengths.push_back(len);
        b.total_frames += len;
    }
    return batches;
}

}  // namespace flowtalk::data
