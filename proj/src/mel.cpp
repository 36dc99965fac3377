#include "avattr/mel.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <iostream>
#include <stdexcept>

namespace avattr::mel {

namespace {

// iterative radix-2 FFT, n must be a power of two
void fft(std::vector<std::complex<double>>& a) {
    const size_t n = a.size();
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * M_PI / static_cast<double>(len);
        std::complex<double> wl(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wl;
            }
        }
    }
}

std::vector<double> hann_window(int n) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
    return w;
}

}  // namespace

int raw_frame_count(int n_samples, int hop) { return 1 + n_samples / hop; }

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> center_frequencies(int bands, double fmin, double fmax) {
    double mlo = hz_to_mel(fmin), mhi = hz_to_mel(fmax);
    std::vector<double> centers(static_cast<size_t>(bands));
    for (int k = 0; k < bands; ++k) {
        double m = mlo + (mhi - mlo) * static_cast<double>(k + 1) / static_cast<double>(bands + 1);
        centers[static_cast<size_t>(k)] = mel_to_hz(m);
    }
    return centers;
}

std::vector<std::vector<double>> filterbank(int bands, int n_fft, double sample_rate) {
    int n_bins = n_fft / 2 + 1;
    double mlo = hz_to_mel(0.0), mhi = hz_to_mel(sample_rate / 2.0);
    std::vector<double> pts(static_cast<size_t>(bands + 2));
    for (int k = 0; k < bands + 2; ++k)
        pts[static_cast<size_t>(k)] = mel_to_hz(mlo + (mhi - mlo) * static_cast<double>(k) / (bands + 1));

    std::vector<std::vector<double>> fb(static_cast<size_t>(bands),
                                        std::vector<double>(static_cast<size_t>(n_bins), 0.0));
    for (int k = 0; k < bands; ++k) {
        double lo = pts[static_cast<size_t>(k)], mid = pts[static_cast<size_t>(k + 1)],
               hi = pts[static_cast<size_t>(k + 2)];
        for (int b = 0; b < n_bins; ++b) {
            double f = sample_rate * static_cast<double>(b) / n_fft;
            double w = 0.0;
            if (f > lo && f < hi) w = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
            fb[static_cast<size_t>(k)][static_cast<size_t>(b)] = w;
        }
    }
    return fb;
}

std::vector<std::vector<double>> mel_power_raw(const std::vector<double>& clip, double sample_rate) {
    const int n = static_cast<int>(clip.size());
    const int frames = raw_frame_count(n, kHop);
    const int half = kFftSize / 2;
    const std::vector<double> window = hann_window(kFftSize);
    const auto fb = filterbank(kBands, kFftSize, sample_rate);

    std::vector<std::vector<double>> mels(static_cast<size_t>(kBands),
                                          std::vector<double>(static_cast<size_t>(frames), 0.0));
    std::vector<std::complex<double>> buf(static_cast<size_t>(kFftSize));
    std::vector<double> power(static_cast<size_t>(half + 1));
    for (int t = 0; t < frames; ++t) {
        // frame centered at t*hop; outside samples are zero
        int start = t * kHop - half;
        for (int i = 0; i < kFftSize; ++i) {
            int idx = start + i;
            double s = (idx >= 0 && idx < n) ? clip[static_cast<size_t>(idx)] : 0.0;
            buf[static_cast<size_t>(i)] = s * window[static_cast<size_t>(i)];
        }
        fft(buf);
        for (int b = 0; b <= half; ++b) power[static_cast<size_t>(b)] = std::norm(buf[static_cast<size_t>(b)]);
        for (int k = 0; k < kBands; ++k) {
            const auto& w = fb[static_cast<size_t>(k)];
            double acc = 0.0;
            for (int b = 0; b <= half; ++b) acc += w[static_cast<size_t>(b)] * power[static_cast<size_t>(b)];
            mels[static_cast<size_t>(k)][static_cast<size_t>(t)] = acc;
        }
    }
    return mels;
}

Tensor<float> compute_mel(const std::vector<double>& waveform, double sample_rate, bool* silent) {
    if (silent) *silent = false;
    for (double v : waveform)
        if (!std::isfinite(v)) throw std::invalid_argument("compute_mel: waveform contains non-finite samples");

    Tensor<float> out({1, kBands, kFrames});
    if (waveform.empty()) {
        std::cerr << "[mel] warning: empty waveform, emitting silence spectrogram\n";
        out.fill(-1.0f);
        if (silent) *silent = true;
        return out;
    }

    // pad (right) or center-crop to exactly 4 s
    const int want = static_cast<int>(kClipSeconds * sample_rate);
    std::vector<double> clip(static_cast<size_t>(want), 0.0);
    if (static_cast<int>(waveform.size()) >= want) {
        int off = (static_cast<int>(waveform.size()) - want) / 2;
        std::copy_n(waveform.begin() + off, want, clip.begin());
    } else {
        std::copy(waveform.begin(), waveform.end(), clip.begin());
    }

    auto mels = mel_power_raw(clip, sample_rate);
    const int frames = static_cast<int>(mels[0].size());

    double peak = 0.0;
    for (const auto& row : mels)
        for (double v : row) peak = std::max(peak, v);
    if (peak <= 0.0) {
        out.fill(-1.0f);
        if (silent) *silent = true;
        return out;
    }

    // dB re max, floored, then mapped to [-1,1]
    constexpr double amin = 1e-30;
    for (auto& row : mels)
        for (double& v : row) {
            double db = 10.0 * std::log10(std::max(v, amin) / peak);
            db = std::max(db, kDbFloor);
            v = db / 40.0 + 1.0;
        }

    // linear interpolation along time to exactly kFrames columns
    for (int k = 0; k < kBands; ++k) {
        const auto& row = mels[static_cast<size_t>(k)];
        for (int t = 0; t < kFrames; ++t) {
            double u = frames == 1 ? 0.0
                                   : static_cast<double>(t) * static_cast<double>(frames - 1) /
                                         static_cast<double>(kFrames - 1);
            int lo = static_cast<int>(u);
            int hi = std::min(lo + 1, frames - 1);
            double frac = u - lo;
            double v = row[static_cast<size_t>(lo)] * (1.0 - frac) + row[static_cast<size_t>(hi)] * frac;
            out[k * kFrames + t] = static_cast<float>(v);
        }
    }
    return out;
}

}  // namespace avattr::mel

