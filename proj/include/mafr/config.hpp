#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mafr/network.hpp"
#include "mafr/synthetic.hpp"
#include "mafr/training.hpp"

namespace mafr {

// Serializable description of a run: one JSON document, every field
// defaulted, unknown keys rejected at every level so typos fail fast.
struct RunConfig {
    uint64_t seed = 0;
    int threads = 1;

    struct Synth {
        uint32_t height = 16, width = 16;
        uint32_t d_2d = 24, d_3d = 36;
        uint32_t structure_rank = 4;
        double noise_sigma = 0.05;
        std::string anomaly_shape = "blob"; // blob | rect
        double anomaly_area_fraction = 0.05;
        double anomaly_magnitude = 1.0;
        uint32_t train_count = 20;
        uint32_t test_normal_count = 20;
        uint32_t test_anomalous_count = 20;
    } synth;

    struct Model {
        uint32_t fused_dim = 0; // 0 derives the width from the modality dims
        double dropout = 0.1;
        uint32_t cbam_reduction = 16;
        uint32_t cbam_spatial_kernel = 7;
        bool skip_connections = true;
    } model;

    struct Train {
        uint32_t epochs = 100;
        double learning_rate = 1e-3;
        double beta1 = 0.9, beta2 = 0.999;
        double adam_epsilon = 1e-8;
        uint32_t batch_size = 1;
        double lambda_sim = 1.0, lambda_smooth = 1.0, lambda_census = 1.0;
        double loss_epsilon = 1e-8;
        int census_kernel = 3;
        uint32_t shots = 0;            // 0 trains on the full split
        uint32_t checkpoint_every = 0; // 0 keeps only the final checkpoint
    } train;

    struct Infer {
        std::string strategy = "multiply"; // multiply | add | max | 2d | 3d
        double sigma = 4.0;
        bool save_heatmaps = false;
    } infer;

    struct Eval {
        std::vector<double> fpr_limits{0.30, 0.01};
    } eval;

    struct GradCheck {
        uint32_t trials = 100;
    } gradcheck;

    struct Paths {
        std::string data_dir = "data";
        std::string model_dir = "model";
        std::string output_dir = "out";
    } paths;
};

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);
std::string run_config_json(const RunConfig& cfg); // canonical snapshot text

// Validates field ranges (counts, fractions, strategy names). ConfigError.
void validate(const RunConfig& cfg);

// Stock 768/1152 modality dims keep their fixed fused width of 968; anything
// else falls back to the rounded mean of the two.
uint32_t derive_fused_dim(uint32_t d2, uint32_t d3);

// Mapping into the engine's own structs.
SyntheticSpec synthetic_spec(const RunConfig& cfg);
ModelArch model_arch(const RunConfig& cfg, uint32_t d2, uint32_t d3);
TrainConfig train_config(const RunConfig& cfg);

} // namespace mafr
