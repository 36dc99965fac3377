#pragma once

#include <vector>

#include "avattr/tensor.hpp"

namespace avattr::mel {

inline constexpr int kSampleRate = 16000;
inline constexpr double kClipSeconds = 4.0;
inline constexpr int kFftSize = 1024;
inline constexpr int kHop = 512;
inline constexpr int kBands = 128;
inline constexpr int kFrames = 128;
inline constexpr double kDbFloor = -80.0;

// STFT frame count with zero-padded centering: one frame per hop start
// that lands inside the clip, inclusive of both ends.
int raw_frame_count(int n_samples, int hop);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// triangular filterbank peak centers, in Hz
std::vector<double> center_frequencies(int bands, double fmin, double fmax);

// [bands, n_fft/2+1] triangular weights over FFT bin frequencies
std::vector<std::vector<double>> filterbank(int bands, int n_fft, double sample_rate);

// Full front-end: pad/crop to 4 s, Hann STFT (1024/512, centered), power,
// 128 mel bands, dB re array max floored at -80, linear map to [-1,1],
// time axis linearly resampled to 128 frames. Returns [1,128,128].
// Throws on non-finite input; an empty waveform yields constant -1 and
// sets *silent.
Tensor<float> compute_mel(const std::vector<double>& waveform, double sample_rate = kSampleRate,
                          bool* silent = nullptr);

// power spectrogram on the raw (unresampled) time grid: [bands, raw_frames]
std::vector<std::vector<double>> mel_power_raw(const std::vector<double>& clip, double sample_rate);

}  // namespace avattr::mel
