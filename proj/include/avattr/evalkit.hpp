#pragma once

#include <nlohmann/json_fwd.hpp>
#include <optional>

#include "avattr/config.hpp"

namespace avattr {

struct MetricsReport {
    double balanced_accuracy = 0, f1 = 0, real_accuracy = 0, fake_accuracy = 0, attribution_accuracy = 0;
    std::optional<double> auc;
    std::string auc_note;  // diagnostic when auc is absent
    std::array<std::array<int64_t, 2>, 2> detect_confusion{};  // [true][pred]
    std::vector<std::vector<int64_t>> attr_confusion;          // [true][pred], (G+1)^2
    std::map<int, double> per_generator_detection;
    double threshold = 0.5;
    int64_t n = 0;

    json to_json() const;
    static MetricsReport from_json(const json& j);
    void save(const std::filesystem::path& path) const;
    static MetricsReport load(const std::filesystem::path& path);
};

// detection decision is prob >= threshold; attribution decision is the
// argmax class supplied by the caller
MetricsReport metrics_from_predictions(const std::vector<int>& y, const std::vector<int>& g,
                                       const std::vector<double>& probs, const std::vector<int>& attr_pred,
                                       double threshold, int num_classes);

// Mann-Whitney AUC with ties counted one half; exact (integer rank sums).
// Empty side -> no value.
std::optional<double> auc_score(const std::vector<double>& scores_real, const std::vector<double>& scores_fake);

struct SampleEval {
    std::string id;
    int y = 0, g = 0;
    double prob = 0;
    int attr_pred = 0;
    double cos_va = 0;  // cosine of the unit projections
    std::vector<float> z_v, z_a, z_f, p_v, p_a;
};

struct EvalRun {
    std::vector<SampleEval> samples;
    MetricsReport report;
    std::map<int, std::pair<double, double>> similarity;  // g -> (mean, stddev)
};

EvalRun run_inference(const Model<float>& model, const SampleLoader& loader, const DatasetManifest& manifest,
                      const std::string& split, int64_t batch_size, double threshold, bool keep_embeddings,
                      bool bypass_cross_attention);

EvalRun evaluate_checkpoint(const std::filesystem::path& checkpoint_dir, const DatasetManifest& manifest,
                            const std::string& split, double threshold, bool keep_embeddings = false);

// header line then tab-separated rows, vectors at 6 significant digits
void export_embeddings(const std::filesystem::path& checkpoint_dir, const DatasetManifest& manifest,
                       const std::string& which, const std::string& split, const std::filesystem::path& out_path);

void write_scores_tsv(const EvalRun& run, const std::filesystem::path& path);
void write_similarity_tsv(const EvalRun& run, const std::map<int, std::string>& names,
                          const std::filesystem::path& path);

// aligned text table over >= 2 variants; absent metrics render as --
std::string compare_ablations(const std::vector<std::pair<std::string, MetricsReport>>& reports);

}  // namespace avattr
