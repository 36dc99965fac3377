#include "avattr/datapipe.hpp"

#include <nlohmann/json.hpp>
#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <iostream>
#include <set>

#include "avattr/io.hpp"
#include "avattr/mel.hpp"

namespace avattr {

using io::json;

// ----------------------------------------------------------- manifest

DatasetManifest DatasetManifest::load(const std::filesystem::path& manifest_path) {
    DatasetManifest m;
    m.root = manifest_path.parent_path();
    for (const auto& rec : io::read_jsonl(manifest_path)) {
        ManifestEntry e;
        e.video_path = rec.at("video_path").get<std::string>();
        e.audio_path = rec.value("audio_path", "");
        e.y = rec.at("y").get<int>();
        e.g = rec.at("g").get<int>();
        e.split = rec.at("split").get<std::string>();
        e.source_id = rec.at("source_id").get<std::string>();
        m.entries.push_back(std::move(e));
    }
    auto names_path = m.root / "generators.json";
    if (std::filesystem::exists(names_path)) {
        const json names = io::read_json(names_path);
        for (const auto& [k, v] : names.items()) m.generator_names[std::stoi(k)] = v.get<std::string>();
    }
    for (const auto& e : m.entries)
        if (!m.generator_names.count(e.g))
            m.generator_names[e.g] = e.g == 0 ? "real" : "gen" + std::to_string(e.g);
    m.validate();
    return m;
}

void DatasetManifest::save(const std::filesystem::path& manifest_path) const {
    std::vector<json> recs;
    recs.reserve(entries.size());
    for (const auto& e : entries) {
        json r{{"video_path", e.video_path}, {"y", e.y},         {"g", e.g},
               {"split", e.split},           {"source_id", e.source_id}};
        if (!e.audio_path.empty()) r["audio_path"] = e.audio_path;
        recs.push_back(std::move(r));
    }
    io::write_jsonl(manifest_path, recs);
    json names = json::object();
    for (const auto& [g, name] : generator_names) names[std::to_string(g)] = name;
    io::write_json(manifest_path.parent_path() / "generators.json", names);
}

std::vector<size_t> DatasetManifest::split_indices(const std::string& split) const {
    std::vector<size_t> idx;
    for (size_t i = 0; i < entries.size(); ++i)
        if (entries[i].split == split) idx.push_back(i);
    return idx;
}

int DatasetManifest::num_generators() const {
    int g = 0;
    for (const auto& e : entries) g = std::max(g, e.g);
    return g;
}

void DatasetManifest::validate() const {
    static const std::set<std::string> kSplits{"train", "val", "test"};
    std::map<std::string, std::string> split_of;
    for (const auto& e : entries) {
        if (e.y != (e.g >= 1 ? 1 : 0))
            throw std::runtime_error("manifest: label mismatch for " + e.source_id + " (y must be 1 iff g >= 1)");
        if (!kSplits.count(e.split)) throw std::runtime_error("manifest: unknown split tag " + e.split);
        auto [it, inserted] = split_of.emplace(e.source_id, e.split);
        if (!inserted && it->second != e.split)
            throw std::runtime_error("manifest: source_id " + e.source_id + " appears in two splits");
        if (!generator_names.count(e.g))
            throw std::runtime_error("manifest: generator " + std::to_string(e.g) + " has no name");
    }
}

// ------------------------------------------------------------- loading

namespace {

std::vector<int64_t> frame_indices(int64_t available, int64_t want) {
    std::vector<int64_t> idx(static_cast<size_t>(want));
    if (want == 1) {
        idx[0] = 0;
        return idx;
    }
    for (int64_t t = 0; t < want; ++t)
        idx[static_cast<size_t>(t)] =
            static_cast<int64_t>(std::llround(static_cast<double>(t) * static_cast<double>(available - 1) /
                                              static_cast<double>(want - 1)));
    return idx;
}

constexpr double kLumR = 0.299, kLumG = 0.587, kLumB = 0.114;

}  // namespace

void augment_clip(Tensor<float>& frames, const AugmentConfig& cfg, Rng& rng) {
    const int64_t T = frames.dim(0), S = frames.dim(2);
    const int64_t plane = S * S, frame = 3 * plane;

    // all decisions drawn up front so the stream layout is stable
    const bool do_flip = rng.bernoulli(cfg.flip_p);
    const bool do_jitter = rng.bernoulli(cfg.jitter_p);
    const double b = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    const double c = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    const double s = rng.uniform(1.0 - cfg.jitter_strength, 1.0 + cfg.jitter_strength);
    const bool do_gray = rng.bernoulli(cfg.gray_p);

    if (do_flip) {
        for (int64_t t = 0; t < T; ++t)
            for (int64_t ch = 0; ch < 3; ++ch)
                for (int64_t i = 0; i < S; ++i) {
                    float* row = frames.ptr() + t * frame + ch * plane + i * S;
                    std::reverse(row, row + S);
                }
    }

    if (do_jitter) {
        for (auto& v : frames.data) v = static_cast<float>(v * b);
        // contrast pivots on the clip's mean luminance
        double mean_lum = 0.0;
        for (int64_t t = 0; t < T; ++t) {
            const float* f = frames.ptr() + t * frame;
            for (int64_t p = 0; p < plane; ++p)
                mean_lum += kLumR * f[p] + kLumG * f[plane + p] + kLumB * f[2 * plane + p];
        }
        mean_lum /= static_cast<double>(T * plane);
        for (auto& v : frames.data) v = static_cast<float>((v - mean_lum) * c + mean_lum);
        for (int64_t t = 0; t < T; ++t) {
            float* f = frames.ptr() + t * frame;
            for (int64_t p = 0; p < plane; ++p) {
                double gray = kLumR * f[p] + kLumG * f[plane + p] + kLumB * f[2 * plane + p];
                for (int64_t ch = 0; ch < 3; ++ch)
                    f[ch * plane + p] = static_cast<float>(gray + (f[ch * plane + p] - gray) * s);
            }
        }
    }

    if (do_gray) {
        for (int64_t t = 0; t < T; ++t) {
            float* f = frames.ptr() + t * frame;
            for (int64_t p = 0; p < plane; ++p) {
                double gray = kLumR * f[p] + kLumG * f[plane + p] + kLumB * f[2 * plane + p];
                for (int64_t ch = 0; ch < 3; ++ch) f[ch * plane + p] = static_cast<float>(gray);
            }
        }
    }

    for (auto& v : frames.data) v = std::clamp(v, 0.0f, 1.0f);
}

void normalize_frames(Tensor<float>& frames, const std::array<double, 3>& mean, const std::array<double, 3>& std) {
    const int64_t T = frames.dim(0), plane = frames.dim(2) * frames.dim(3);
    for (int64_t t = 0; t < T; ++t)
        for (int64_t ch = 0; ch < 3; ++ch) {
            float* f = frames.ptr() + (t * 3 + ch) * plane;
            const float m = static_cast<float>(mean[static_cast<size_t>(ch)]);
            const float sd = static_cast<float>(std[static_cast<size_t>(ch)]);
            for (int64_t p = 0; p < plane; ++p) f[p] = (f[p] - m) / sd;
        }
}

Tensor<float> SampleLoader::load_mel(const ManifestEntry& entry) const {
    if (entry.audio_path.empty())
        return Tensor<float>::full({1, mel::kBands, mel::kFrames}, -1.0f);  // silent-audio fallback
    Tensor<float> arr = io::read_array(root_ / entry.audio_path);
    if (arr.rank() == 3 && arr.dim(0) == 1 && arr.dim(1) == mel::kBands && arr.dim(2) == mel::kFrames) return arr;
    if (arr.rank() == 1) {
        std::vector<double> wave(arr.data.begin(), arr.data.end());
        return mel::compute_mel(wave);
    }
    throw std::runtime_error("unsupported audio array shape " + shape_str(arr.shape) + " in " + entry.audio_path);
}

Sample SampleLoader::load_or_throw(const ManifestEntry& entry, bool augment, Rng& rng) const {
    Tensor<float> clip = io::read_array(root_ / entry.video_path);
    if (clip.rank() != 4 || clip.dim(1) != 3 || clip.dim(2) != cfg_.image_size || clip.dim(3) != cfg_.image_size)
        throw std::runtime_error("frames array " + entry.video_path + " has shape " + shape_str(clip.shape) +
                                 ", expected [N,3," + std::to_string(cfg_.image_size) + "," +
                                 std::to_string(cfg_.image_size) + "]");
    if (clip.dim(0) < cfg_.T)
        throw std::runtime_error("clip " + entry.source_id + " has fewer than T frames");

    Sample s;
    s.y = entry.y;
    s.g = entry.g;
    s.source_id = entry.source_id;

    const int64_t plane = 3 * cfg_.image_size * cfg_.image_size;
    s.frames = Tensor<float>({cfg_.T, 3, cfg_.image_size, cfg_.image_size});
    auto idx = frame_indices(clip.dim(0), cfg_.T);
    for (int64_t t = 0; t < cfg_.T; ++t)
        std::copy_n(clip.ptr() + idx[static_cast<size_t>(t)] * plane, plane, s.frames.ptr() + t * plane);

    if (augment) augment_clip(s.frames, cfg_.augment, rng);
    normalize_frames(s.frames, cfg_.norm_mean, cfg_.norm_std);

    s.mel = load_mel(entry);
    for (auto& v : s.mel.data) {
        if (!std::isfinite(v)) throw std::runtime_error("non-finite mel value in " + entry.source_id);
        v = std::clamp(v, -1.0f, 1.0f);
    }
    return s;
}

std::optional<Sample> SampleLoader::load(const ManifestEntry& entry, bool augment, Rng rng, bool strict) const {
    try {
        return load_or_throw(entry, augment, rng);
    } catch (const std::exception& e) {
        if (strict) throw;
        std::cerr << "[datapipe] skipping " << entry.source_id << ": " << e.what() << "\n";
        return std::nullopt;
    }
}

// ------------------------------------------------------------ synthetic

void SynthConfig::validate() const {
    if (G_synth < 2) throw std::invalid_argument("SynthConfig: G_synth must be >= 2");
    if (n_per_class < 2) throw std::invalid_argument("SynthConfig: n_per_class must be >= 2 (group losses)");
    if (fingerprint_amplitude < 0.0 || noise_level < 0.0)
        throw std::invalid_argument("SynthConfig: amplitudes must be nonnegative");
    if (T < 1 || image_size < 8) throw std::invalid_argument("SynthConfig: bad clip geometry");
}

namespace {

struct SynthSample {
    Tensor<float> frames;
    std::vector<double> wave;
};

// Label-independent baseline plus amplitude-gated fake structure. The
// per-sample tone frequency appears in the audio and as a matched visual
// grating; fakes attenuate that coupling and add the generator pattern.
SynthSample synth_sample(const SynthConfig& cfg, int g, Rng& rng) {
    const int64_t T = cfg.T, S = cfg.image_size;
    const bool fake = g >= 1;
    const double amp_ref = 0.15;
    const double a_rel = std::min(cfg.fingerprint_amplitude / amp_ref, 1.0);
    const double couple = fake ? 1.0 - 0.7 * a_rel : 1.0;

    // shared latents
    const double nu = std::clamp(rng.normal(), -2.0, 2.0);
    const double tone_hz = rng.uniform(800.0, 3200.0);
    const double base_ax = rng.uniform(1.0, 3.0), base_ay = rng.uniform(1.0, 3.0);
    const double base_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double couple_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double wobble_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double gen_phase = rng.uniform(0.0, 2.0 * M_PI);
    const double brightness = 1.0 + 0.1 * nu;
    const double loudness = 1.0 + 0.2 * nu;

    // the visual grating frequency and tilt encode the audio tone
    const double k_couple = 2.0 + 6.0 * (tone_hz - 800.0) / 2400.0;
    const double tilt = (75.0 + 30.0 * (tone_hz - 800.0) / 2400.0) * M_PI / 180.0;

    // generator fingerprint: fixed orientation + spatial frequency per class
    const double gen_theta = fake ? M_PI * static_cast<double>(g - 1) / static_cast<double>(cfg.G_synth) : 0.0;
    const double gen_freq = fake ? 4.0 + 2.0 * static_cast<double>(g) : 0.0;

    SynthSample out;
    out.frames = Tensor<float>({T, 3, S, S});
    const int64_t plane = S * S;
    for (int64_t t = 0; t < T; ++t) {
        const double wobble = 1.0 + 0.03 * std::sin(2.0 * M_PI * t / static_cast<double>(T) + wobble_phase);
        for (int64_t i = 0; i < S; ++i)
            for (int64_t j = 0; j < S; ++j) {
                const double x = static_cast<double>(j) / S, y = static_cast<double>(i) / S;
                double v = 0.5 + 0.08 * std::sin(2.0 * M_PI * (base_ax * x + base_ay * y) + base_phase);
                v += 0.06 * couple *
                     std::sin(2.0 * M_PI * k_couple * (std::cos(tilt) * x + std::sin(tilt) * y) + couple_phase);
                if (fake)
                    v += cfg.fingerprint_amplitude *
                         std::sin(2.0 * M_PI * gen_freq * (std::cos(gen_theta) * x + std::sin(gen_theta) * y) +
                                  gen_phase);
                v = v * brightness * wobble;
                for (int64_t ch = 0; ch < 3; ++ch) {
                    const double chan_scale = 1.0 - 0.04 * static_cast<double>(ch);
                    double px = v * chan_scale + cfg.noise_level * rng.normal();
                    out.frames[((t * 3 + ch) * S + i) * S + j] =
                        static_cast<float>(std::clamp(px, 0.0, 1.0));
                }
            }
    }

    const int n = static_cast<int>(mel::kClipSeconds * mel::kSampleRate);
    out.wave.resize(static_cast<size_t>(n));
    const double f1 = fake ? 400.0 + 900.0 * static_cast<double>(g) : 0.0;  // generator band pair
    const double f2 = 2.0 * f1;
    for (int i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / mel::kSampleRate;
        double v = 0.02 * loudness * rng.normal();
        v += 0.05 * couple * loudness * std::sin(2.0 * M_PI * tone_hz * t + couple_phase);
        if (fake) {
            const double k = 0.5 * cfg.fingerprint_amplitude / amp_ref;
            v += 0.15 * k * loudness * (std::sin(2.0 * M_PI * f1 * t) + std::sin(2.0 * M_PI * f2 * t + gen_phase));
        }
        out.wave[static_cast<size_t>(i)] = v;
    }
    return out;
}

}  // namespace

DatasetManifest generate_synthetic(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    std::filesystem::create_directories(out_dir / "media");

    DatasetManifest m;
    m.root = out_dir;
    m.generator_names[0] = "real";
    for (int g = 1; g <= cfg.G_synth; ++g) m.generator_names[g] = "synthgen" + std::to_string(g);

    const char* splits[] = {"train", "val", "test"};
    for (const char* split : splits) {
        for (int g = 0; g <= cfg.G_synth; ++g) {
            for (int64_t i = 0; i < cfg.n_per_class; ++i) {
                Rng rng = Rng::stream(cfg.seed, std::string("synth:") + split,
                                      static_cast<uint64_t>(g), static_cast<uint64_t>(i));
                SynthSample s = synth_sample(cfg, g, rng);

                std::string stem = std::string(split) + "_g" + std::to_string(g) + "_" + std::to_string(i);
                std::string video_rel = "media/" + stem + "_frames.bin";
                std::string audio_rel = "media/" + stem + "_mel.bin";

                io::write_array(out_dir / video_rel, s.frames,
                                json{{"kind", "frames"}, {"value_range", {0.0, 1.0}}});
                Tensor<float> melspec = mel::compute_mel(s.wave);
                io::write_array(out_dir / audio_rel, melspec, json{{"kind", "mel"}, {"value_range", {-1.0, 1.0}}});

                ManifestEntry e;
                e.video_path = video_rel;
                e.audio_path = audio_rel;
                e.g = g;
                e.y = g >= 1 ? 1 : 0;
                e.split = split;
                e.source_id = stem;
                m.entries.push_back(std::move(e));
            }
        }
    }
    m.validate();
    m.save(out_dir / "manifest.jsonl");
    return m;
}

std::vector<double> sampler_weights(const DatasetManifest& manifest, const std::string& split) {
    auto idx = manifest.split_indices(split);
    if (idx.empty()) throw std::runtime_error("sampler_weights: split " + split + " is empty");
    std::map<int, int64_t> counts;
    for (size_t i : idx) ++counts[manifest.entries[i].g];
    std::vector<double> w(idx.size());
    for (size_t k = 0; k < idx.size(); ++k)
        w[k] = 1.0 / static_cast<double>(counts.at(manifest.entries[idx[k]].g));
    return w;
}

std::filesystem::path default_cache_dir() {
    if (const char* env = std::getenv("AVATTR_CACHE_DIR")) return env;
    return "avattr_cache";
}

}  // namespace avattr

