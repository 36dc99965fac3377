#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>

#include "avattr/rng.hpp"
#include "avattr/tensor.hpp"

namespace avattr {

struct ManifestEntry {
    std::string video_path;
    std::string audio_path;  // empty -> silent-audio fallback
    int y = 0;
    int g = 0;
    std::string split;
    std::string source_id;
};

// Manifest file: one flat JSON object per line with fields
// {video_path, audio_path?, y, g, split, source_id}; display names for the
// generator classes live in a generators.json next to it when available.
struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::map<int, std::string> generator_names;
    std::filesystem::path root;  // media paths resolve relative to this

    static DatasetManifest load(const std::filesystem::path& manifest_path);
    void save(const std::filesystem::path& manifest_path) const;

    std::vector<size_t> split_indices(const std::string& split) const;
    int num_generators() const;  // G: highest fake generator id
    void validate() const;
};

struct AugmentConfig {
    double flip_p = 0.5;
    double jitter_p = 0.8;
    double jitter_strength = 0.2;
    double gray_p = 0.1;
};

struct DataConfig {
    int64_t T = 16;
    int64_t image_size = 224;
    AugmentConfig augment;
    std::array<double, 3> norm_mean{0.485, 0.456, 0.406};
    std::array<double, 3> norm_std{0.229, 0.224, 0.225};
};

struct Sample {
    Tensor<float> frames;  // [T,3,S,S], normalized
    Tensor<float> mel;     // [1,128,128] in [-1,1]
    int y = 0;
    int g = 0;
    std::string source_id;
};

class SampleLoader {
public:
    SampleLoader(DataConfig cfg, std::filesystem::path root) : cfg_(std::move(cfg)), root_(std::move(root)) {}

    // Pure given (entry, augment flag, rng). In strict mode missing or
    // corrupt media raise; otherwise they are skipped with a log line.
    std::optional<Sample> load(const ManifestEntry& entry, bool augment, Rng rng, bool strict) const;

    const DataConfig& config() const { return cfg_; }

private:
    Sample load_or_throw(const ManifestEntry& entry, bool augment, Rng& rng) const;
    Tensor<float> load_mel(const ManifestEntry& entry) const;

    DataConfig cfg_;
    std::filesystem::path root_;
};

// applied identically across the T frames of one clip, labels untouched
void augment_clip(Tensor<float>& frames, const AugmentConfig& cfg, Rng& rng);
void normalize_frames(Tensor<float>& frames, const std::array<double, 3>& mean, const std::array<double, 3>& std);

struct SynthConfig {
    int64_t G_synth = 3;      // fake generator classes (>= 2)
    int64_t n_per_class = 50; // per class per split
    double fingerprint_amplitude = 0.15;
    double noise_level = 0.02;
    uint64_t seed = 1234;
    int64_t T = 8;
    int64_t image_size = 64;

    void validate() const;
};

// Emits a fully cached dataset: frames and mel arrays plus manifest.
// Every sample shares the same label-independent base process (textures,
// a per-sample audio tone mirrored by a visual grating, loudness
// coupling). Fakes additionally carry a generator-specific fingerprint —
// a fixed-orientation spatial grating and matching audio band tones —
// and their per-sample cross-modal coupling is weakened. All
// label-dependent terms scale with fingerprint_amplitude, so amplitude 0
// makes real and fake identically distributed.
DatasetManifest generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir);

// per-entry weights (aligned with split_indices) proportional to the
// inverse class frequency
std::vector<double> sampler_weights(const DatasetManifest& manifest, const std::string& split);

// cache root for generated/converted media: $AVATTR_CACHE_DIR or ./avattr_cache
std::filesystem::path default_cache_dir();

}  // namespace avattr
