#pragma once

// Log-mel analysis of 24 kHz mono audio. Frames are centered: the signal is
// zero-padded by n_fft/2 on both sides and frame t covers the window around
// sample t*hop, so a clip of L samples yields exactly 1 + floor(L/hop)
// frames. That frame-count function is a frozen contract; visual codes are
// resampled to match it.

#include <complex>
#include <cstdint>
#include <vector>

#include "flowtalk/mat.hpp"

namespace flowtalk::features {

struct MelConfig {
    int sample_rate = 24000;  // Hz
    int n_fft = 1024;         // analysis window, power of two
    int hop = 256;            // samples between frame centers
    int n_mels = 100;         // filterbank size F
    double f_min = 0.0;       // Hz
    double f_max = 12000.0;   // Hz
    double log_floor = 1e-10; // energies are clamped here before the log

    void validate() const;
};

struct MelSpectrogram {
    MatF data;          // F x N_a log-energies
    double frame_rate;  // sample_rate / hop
};

// Number of analysis frames for a waveform of `samples` samples.
int64_t mel_frame_count(int64_t samples, const MelConfig& cfg);

MelSpectrogram compute_mel(const std::vector<float>& waveform, const MelConfig& cfg);

// Triangular filterbank on the mel scale, n_mels x (n_fft/2 + 1).
MatD mel_filterbank(const MelConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

namespace detail {
// In-place radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& a);
}  // namespace detail

}  // namespace flowtalk::features
