#include "flowtalk/mel.hpp"

#include <cmath>

#include "flowtalk/common.hpp"

namespace flowtalk::features {

void MelConfig::validate() const {
    if (sample_rate <= 0) throw ValidationError("mel config: sample_rate must be positive");
    if (hop <= 0) throw ValidationError("mel config: hop must be positive");
    if (n_fft < 2 || (n_fft & (n_fft - 1)) != 0)
        throw ValidationError(strf("mel config: n_fft must be a power of two >= 2, got %d", n_fft));
    if (n_mels < 1) throw ValidationError("mel config: n_mels must be >= 1");
    if (f_min < 0.0 || f_max <= f_min || f_max > sample_rate / 2.0)
        throw ValidationError(
            strf("mel config: need 0 <= f_min < f_max <= %g, got [%g, %g]", sample_rate / 2.0, f_min, f_max));
    if (!(log_floor > 0.0)) throw ValidationError("mel config: log_floor must be positive");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

int64_t mel_frame_count(int64_t samples, const MelConfig& cfg) {
    return 1 + samples / cfg.hop;
}

namespace detail {

void fft_radix2(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    if (n < 2 || (n & (n - 1)) != 0) throw ValidationError("fft: size must be a power of two >= 2");
    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / double(len);
        const std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t j = 0; j < len / 2; ++j) {
                std::complex<double> u = a[i + j];
                std::complex<double> v = a[i + j + len / 2] * w;
                a[i + j] = u + v;
                a[i + j + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

}  // namespace detail

MatD mel_filterbank(const MelConfig& cfg) {
    const int n_bins = cfg.n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(cfg.f_min);
    const double mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> edges(size_t(cfg.n_mels) + 2);
    for (size_t i = 0; i < edges.size(); ++i)
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * double(i) / double(cfg.n_mels + 1));

    MatD fb = MatD::Zero(cfg.n_mels, n_bins);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double f_lo = edges[size_t(m)], f_c = edges[size_t(m) + 1], f_hi = edges[size_t(m) + 2];
        for (int k = 0; k < n_bins; ++k) {
            const double f = double(k) * cfg.sample_rate / cfg.n_fft;
            double up = (f_c > f_lo) ? (f - f_lo) / (f_c - f_lo) : 0.0;
            double down = (f_hi > f_c) ? (f_hi - f) / (f_hi - f_c) : 0.0;
            fb(m, k) = std::max(0.0, std::min(up, down));
        }
    }
    return fb;
}

MelSpectrogram compute_mel(const std::vector<float>& waveform, const MelConfig& cfg) {
    cfg.validate();
    const int64_t len = int64_t(waveform.size());
    if (len < cfg.n_fft)
        throw ValidationError(
            strf("compute_mel: waveform of %lld samples is shorter than the %d-sample analysis window",
                 (long long)len, cfg.n_fft));
    for (int64_t i = 0; i < len; ++i)
        if (!std::isfinite(waveform[size_t(i)]))
            throw ValidationError(strf("compute_mel: non-finite sample at index %lld", (long long)i));

    // periodic Hann taper
    std::vector<double> window(size_t(cfg.n_fft));
    for (int i = 0; i < cfg.n_fft; ++i)
        window[size_t(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * double(i) / double(cfg.n_fft));

    const MatD fb = mel_filterbank(cfg);
    const int n_bins = cfg.n_fft / 2 + 1;
    const int64_t n_frames = mel_frame_count(len, cfg);
    const int half = cfg.n_fft / 2;

    MelSpectrogram out;
    out.frame_rate = double(cfg.sample_rate) / double(cfg.hop);
    out.data.resize(cfg.n_mels, Eigen::Index(n_frames));

    std::vector<std::complex<double>> buf(size_t(cfg.n_fft));
    Eigen::VectorXd power(n_bins);
    for (int64_t t = 0; t < n_frames; ++t) {
        const int64_t start = t * cfg.hop - half;  // window is centered on t*hop
        for (int i = 0; i < cfg.n_fft; ++i) {
            const int64_t s = start + i;
            const double x = (s >= 0 && s < len) ? double(waveform[size_t(s)]) : 0.0;
            buf[size_t(i)] = std::complex<double>(x * window[size_t(i)], 0.0);
        }
        detail::fft_radix2(buf);
        for (int k = 0; k < n_bins; ++k) power(k) = std::norm(buf[size_t(k)]);
        Eigen::VectorXd mel_e = fb * power;
        for (int m = 0; m < cfg.n_mels; ++m)
            out.data(m, Eigen::Index(t)) = float(std::log(std::max(mel_e(m), cfg.log_floor)));
    }
    return out;
}

}  // namespace flowtalk::features
