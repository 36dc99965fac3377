#pragma once

#include <memory>

#include "avattr/config.hpp"
#include "avattr/optim.hpp"

namespace avattr {

struct TrainResult {
    std::filesystem::path checkpoint_last, checkpoint_best;
    std::filesystem::path train_log, val_log;
    bool aborted = false;
    int64_t epochs_run = 0;
    double best_val_balanced_accuracy = -1.0;
    int64_t fp_empty_batches = 0;  // batches where no generator group was eligible
};

// Checkpoint directory contents: weights.bin/.json (flat little-endian
// float32 plus a name/shape/offset manifest), optim.bin/.json,
// centroids.bin/.json, config.json (echo) and state.json.
void save_checkpoint(const std::filesystem::path& dir, const RunConfig& config, Model<float>& model,
                     AdamW<float>& opt, const CentroidTable<float>& centroids, int64_t epoch_next,
                     int64_t global_step, double best_val, int64_t best_epoch, const json& metrics_snapshot);

struct LoadedCheckpoint {
    RunConfig config;
    std::shared_ptr<Model<float>> model;
    CentroidTable<float> centroids;
    int64_t epoch_next = 0;
    int64_t global_step = 0;
    double best_val = -1.0;
    int64_t best_epoch = -1;
};

// opt_out, when given, must be sized for the model's parameter list
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir, AdamW<float>* opt_out = nullptr);

// The full seeded procedure: weighted-sampler batches, forward through
// both encoders, cross-modal attention, fusion and heads, the five
// losses, clipped AdamW step, EMA centroid update after the step, cosine
// learning-rate decay per epoch, per-epoch validation and checkpoints.
// stop_after_epochs > 0 interrupts the run after that many epochs (the
// schedule still spans config.train.epochs); resuming from the written
// checkpoint continues the identical trajectory.
TrainResult train(const DatasetManifest& manifest, const RunConfig& config,
                  const std::filesystem::path& out_dir, const std::filesystem::path& resume_from = {},
                  int64_t stop_after_epochs = -1);

}  // namespace avattr
