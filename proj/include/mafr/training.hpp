#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mafr/losses.hpp"
#include "mafr/manifest.hpp"
#include "mafr/network.hpp"

namespace mafr {

struct TrainConfig {
    uint32_t epochs = 100;
    double learning_rate = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    uint32_t batch_size = 1; // one full feature map per update
    LossWeights weights;
    uint64_t seed = 0;
    std::optional<uint32_t> shot_count; // few-shot subset of the train split
};

void validate(const TrainConfig& cfg);

struct OptimizerState {
    ModelParams m, v; // first/second moment accumulators, parameter-shaped
    uint64_t t = 0;
};

OptimizerState make_optimizer_state(const ModelParams& params);

// Standard bias-corrected Adam, in place. Throws NumericError on non-finite
// gradients.
void adam_step(ModelParams& params, const GradientBundle& grads, OptimizerState& state,
               const TrainConfig& cfg);

// Uniform sample of n ids without replacement; the surviving entries keep
// their original manifest order. Deterministic in seed.
DatasetManifest few_shot_subsample(const DatasetManifest& manifest, uint32_t n, uint64_t seed);

struct EpochStats {
    LossBreakdown mean_loss;
    double wall_seconds = 0.0;
};

struct TrainLog {
    std::vector<EpochStats> epochs;
    uint64_t seed = 0;
    std::vector<std::string> trained_sample_ids;
    std::string config_snapshot; // JSON text of the run configuration
};

// Serialized log; this is the only artifact that carries wall-clock timing.
void save_train_log(const TrainLog& log, const std::filesystem::path& path);

// One sample already loaded into engine form: the 3D modality densified, with
// its pre-densification validity kept for loss masking.
struct TrainSample {
    std::string id;
    Grid e2d, e3d;
    Mask valid3d;
};

TrainSample load_train_sample(const SampleEntry& entry, const std::filesystem::path& root);

struct FitResult {
    ModelParams params;
    TrainLog log;
};

// Seeded per-epoch shuffle, per-sample forward/backward/Adam updates.
// checkpoint_cb (when set) runs after each epoch for flag-controlled
// intermediate checkpointing. Aborts with NumericError when the loss leaves
// the finite range, reporting epoch and sample.
FitResult fit(const std::vector<TrainSample>& samples, const ModelArch& arch,
              const TrainConfig& cfg,
              const std::function<void(uint32_t, const ModelParams&)>& checkpoint_cb = {});

// Convenience wrapper: loads every sample of a Train manifest (applying the
// few-shot subsample when configured) then runs fit.
FitResult fit_manifest(const DatasetManifest& manifest, const std::filesystem::path& data_root,
                       const ModelArch& arch, const TrainConfig& cfg,
                       const std::function<void(uint32_t, const ModelParams&)>& checkpoint_cb = {});

} // namespace mafr
