#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "avattr/mel.hpp"
#include "avattr/rng.hpp"

using namespace avattr;

namespace {

// independent re-derivation of the mel band peak frequencies
double oracle_hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double oracle_mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

std::vector<double> oracle_centers(int bands, double fmax) {
    double hi = oracle_hz_to_mel(fmax);
    std::vector<double> c(static_cast<size_t>(bands));
    for (int k = 0; k < bands; ++k)
        c[static_cast<size_t>(k)] = oracle_mel_to_hz(hi * (k + 1) / static_cast<double>(bands + 1));
    return c;
}

std::vector<double> sine(double hz, double amplitude, int n, double sr) {
    std::vector<double> w(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) w[static_cast<size_t>(i)] = amplitude * std::sin(2.0 * M_PI * hz * i / sr);
    return w;
}

int band_argmax(const Tensor<float>& m, int t) {
    int argmax = 0;
    for (int k = 1; k < mel::kBands; ++k)
        if (m[k * mel::kFrames + t] > m[argmax * mel::kFrames + t]) argmax = k;
    return argmax;
}

}  // namespace

TEST_CASE("64000 samples at hop 512 give 126 raw frames") {
    // brute-force framing enumeration: one centered frame per hop start
    // that stays inside the clip
    int count = 0;
    for (int t = 0;; ++t) {
        if (t * mel::kHop > 64000) break;
        ++count;
    }
    CHECK(count == 126);
    CHECK(mel::raw_frame_count(64000, mel::kHop) == 126);
}

TEST_CASE("silence maps to constant -1") {
    std::vector<double> zeros(64000, 0.0);
    bool silent = false;
    auto m = mel::compute_mel(zeros, mel::kSampleRate, &silent);
    CHECK(silent);
    CHECK(m.shape == Shape{1, 128, 128});
    for (float v : m.data) CHECK(v == -1.0f);
}

TEST_CASE("empty waveform falls back to silence with a warning") {
    bool silent = false;
    auto m = mel::compute_mel({}, mel::kSampleRate, &silent);
    CHECK(silent);
    for (float v : m.data) CHECK(v == -1.0f);
}

TEST_CASE("non-finite samples are rejected") {
    std::vector<double> w(1000, 0.1);
    w[500] = std::nan("");
    CHECK_THROWS_AS(mel::compute_mel(w), std::invalid_argument);
    w[500] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(mel::compute_mel(w), std::invalid_argument);
}

TEST_CASE("pure tone at a band center localizes to that band") {
    auto centers = oracle_centers(mel::kBands, mel::kSampleRate / 2.0);
    const int target = 60;  // mid-band
    auto w = sine(centers[static_cast<size_t>(target)], 0.5, 64000, mel::kSampleRate);
    auto m = mel::compute_mel(w);
    for (int t = 0; t < mel::kFrames; ++t) CHECK(band_argmax(m, t) == target);

    // and the implementation's own center table must agree with the oracle
    auto impl_centers = mel::center_frequencies(mel::kBands, 0.0, mel::kSampleRate / 2.0);
    for (int k = 0; k < mel::kBands; ++k)
        CHECK(impl_centers[static_cast<size_t>(k)] ==
              doctest::Approx(centers[static_cast<size_t>(k)]).epsilon(1e-9));
}

TEST_CASE("shape and range hold for arbitrary finite input") {
    Rng rng(99);
    for (int trial = 0; trial < 8; ++trial) {
        int64_t n = trial == 0 ? 0 : rng.randint(100000) + 1;
        std::vector<double> w(static_cast<size_t>(n));
        for (auto& v : w) v = rng.uniform(-1.0, 1.0);
        auto m = mel::compute_mel(w);
        CHECK(m.shape == Shape{1, 128, 128});
        for (float v : m.data) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(m.all_finite());
    }
}

TEST_CASE("extraction is deterministic, bitwise") {
    Rng rng(5);
    std::vector<double> w(64000);
    for (auto& v : w) v = rng.uniform(-0.5, 0.5);
    auto a = mel::compute_mel(w);
    auto b = mel::compute_mel(w);
    CHECK(a.data == b.data);
}

TEST_CASE("short input is padded, long input center-cropped") {
    auto centers = oracle_centers(mel::kBands, mel::kSampleRate / 2.0);
    auto w_short = sine(centers[40], 0.5, 16000, mel::kSampleRate);
    auto m_short = mel::compute_mel(w_short);
    CHECK(m_short.shape == Shape{1, 128, 128});
    // the tone occupies the first quarter of the padded clip
    CHECK(band_argmax(m_short, 10) == 40);

    // long clip: silence borders get cropped away, tone stays dominant
    auto w_long = sine(centers[40], 0.5, 80000, mel::kSampleRate);
    auto m_long = mel::compute_mel(w_long);
    for (int t = 20; t < 108; ++t) CHECK(band_argmax(m_long, t) == 40);
}
