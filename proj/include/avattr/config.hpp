#pragma once

#include <nlohmann/json_fwd.hpp>

#include "avattr/datapipe.hpp"
#include "avattr/losses.hpp"
#include "avattr/model.hpp"

namespace avattr {

using nlohmann::json;

struct TrainSettings {
    double learning_rate = 1e-4;
    double weight_decay = 1e-4;
    int64_t epochs = 50;
    int64_t batch_size = 4;
    double clip_norm = 1.0;
    uint64_t seed = 42;
    int64_t eval_every = 1;

    void validate() const;
};

struct EvalSettings {
    double threshold = 0.5;
};

// losses disabled for an ablation run; cma_module bypasses the
// cross-modal attention block instead of zeroing a weight
struct AblateSet {
    bool attr = false, cont = false, fp = false, cen = false, cma_module = false;

    static AblateSet parse(const std::vector<std::string>& flags);
    LossWeights<float> apply(LossWeights<float> w) const;
    std::vector<std::string> to_list() const;
    bool any() const { return attr || cont || fp || cen || cma_module; }
};

// Complete run configuration. Hyperparameter defaults are the published
// training setup; the preset only selects the scale (clip geometry,
// backbone family, embedding width). Unknown keys are rejected.
struct RunConfig {
    std::string preset = "desk";
    DataConfig data;
    SynthConfig synth;
    NetConfig<float> model;
    LossWeights<float> loss;
    TrainSettings train;
    EvalSettings eval;
    std::vector<std::string> ablate;

    static RunConfig defaults(const std::string& preset = "desk");
    static RunConfig from_json(const json& j);
    static RunConfig from_file(const std::filesystem::path& path);
    json to_json() const;  // fully materialized echo; feeding it back reproduces the run

    void validate() const;
};

// raised for malformed configs / unknown keys; maps to CLI exit code 1
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace avattr
