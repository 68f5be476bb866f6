#pragma once

// Synthetic audio-visual corpus and dataset plumbing. Every clip is a pure
// function of (style, text, duration, seed), which is what makes the training
// and style-transfer claims checkable on a desk machine: the corpus carries
// known, recoverable structure instead of recorded footage.

#include <algorithm>
#include <string>
#include <vector>

#include "flowtalk/common.hpp"
#include "flowtalk/face.hpp"
#include "flowtalk/flow.hpp"
#include "flowtalk/mel.hpp"
#include "flowtalk/text.hpp"

namespace flowtalk::data {

inline constexpr double kCharsPerSecond = 10.0;
inline constexpr double kDefaultFrameRate = 24000.0 / 256.0;  // mel frames per second

// Character acoustics: each non-space character excites a Gaussian band bump
// (in log-mel units) whose center encodes the character. Space stays silent.
// a..z and space land on distinct centers, which is what makes generated
// speech decodable by template matching.
inline constexpr float kCharBandGain = 20.0f;
inline constexpr float kCharBandSigma = 1.5f;
inline int char_band_center(int char_id, int mel_bands) {
    const int step = std::max(1, (mel_bands - 4) / 32);
    return 2 + (char_id % 32) * step;
}
// unit-amplitude band profile for a character; spaces give the zero vector
VecF char_band_profile(char c, int mel_bands);

// Speaking/movement style: a stable mel coloration, head motion as per-channel
// sinusoids, an expression intensity, and a blink rate.
struct StyleProfile {
    int style_id = 0;
    VecF mel_offset;  // per-band additive shift, log-mel units
    VecF pose_amp;    // 6 channels, radians / normalized translation
    VecF pose_freq;   // 6 channels, cycles per second
    float expr_gain = 1.0f;
    float eye_blink_rate = 0.3f;  // blinks per second

    void validate(int mel_dim) const;

    // deterministic profile for (style_id, seed); bounds keep codes plausible
    static StyleProfile make(int style_id, uint64_t seed, int mel_dim = 100);
};

// Profile family with motion statistics spread across ids, so any two members
// stay separable by the pose metrics. Plain make() can draw two styles that
// happen to move alike; corpora built for style-transfer checks use this.
StyleProfile corpus_style(int style_id, int n_styles, uint64_t seed, int mel_dim = 100);

// One row per style: [style_id, expr_gain, eye_blink_rate, mel_offset...,
// pose_amp..., pose_freq...]. Used for the style table written next to a
// dataset, which evaluation needs to undo mel coloration when decoding.
MatD styles_to_matrix(const std::vector<StyleProfile>& styles);
std::vector<StyleProfile> styles_from_matrix(const MatD& m);

struct TrainingSample {
    features::TokenSequence tokens;  // length == frame count
    features::MelSpectrogram mel;    // F x N
    features::VisualCodes codes;     // N frames
    int style_id = 0;

    Eigen::Index frames() const { return mel.data.cols(); }
    // the row-major tensor view consumed by the training math
    flow::TrainingSample tensors() const;
};

// Deterministic clip synthesis: each character lights a characteristic mel
// band over its time slot (shifted by the style's coloration), pose channels
// are style sinusoids, expressions follow a smoothed per-character pattern,
// and the eye channels blink periodically.
TrainingSample synth_sample(const StyleProfile& style, const std::string& text,
                            double duration_s, uint64_t seed,
                            double frame_rate = kDefaultFrameRate);

// minimum duration for a text at the fixed character rate
double min_duration_s(const std::string& text);

struct Dataset {
    double frame_rate = kDefaultFrameRate;
    std::vector<TrainingSample> samples;
};

void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);
// random access through the offset table without reading other records
TrainingSample read_sample(const std::string& path, size_t index);
size_t dataset_size(const std::string& path);

// Frame-budget batching. The network consumes one sequence at a time, so a
// batch is an index group whose members keep their true lengths; the budget
// bounds the total work per optimizer step.
struct Batch {
    std::vector<size_t> indices;
    std::vector<Eigen::Index> lengths;
    Eigen::Index total_frames = 0;
};
std::vector<Batch> collate(const std::vector<TrainingSample>& samples, Eigen::Index max_frames);

}  // namespace flowtalk::data
