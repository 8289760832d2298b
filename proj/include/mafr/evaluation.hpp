#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mafr/anomaly.hpp"
#include "mafr/manifest.hpp"
#include "mafr/network.hpp"
#include "mafr/training.hpp"

namespace mafr {

// Probability that a random anomalous score exceeds a random normal score,
// ties counted half (rank formulation). Labels: 0 normal, 1 anomalous.
double auroc(const std::vector<double>& scores, const std::vector<int>& labels);

// Area under the per-region-overlap vs false-positive-rate curve, integrated
// up to fpr_limit and normalized by it. Regions are 4-connected components of
// the ground-truth masks; the FPR population pools anomaly-free pixels of all
// samples. Equal scores collapse into one threshold step.
double aupro(const std::vector<AnomalyMap>& score_maps, const std::vector<Mask>& gt_masks,
             double fpr_limit);

// "AUPRO@30%" for limit 0.30.
std::string aupro_column_name(double limit);

struct SampleScore {
    std::string id;
    Label label = Label::Normal;
    double score = 0.0;
};

struct EvalReport {
    std::string name; // row label, e.g. "eval" or "fusion:multiply"
    double i_auroc = 0.0;
    std::optional<double> p_auroc;
    std::vector<std::pair<double, double>> aupro_values; // (limit, value)
    bool pixel_metrics_skipped = false;
    std::vector<SampleScore> sample_scores;
    std::string config_snapshot; // JSON text
    std::string train_hash;      // identifies the trained model a row used
};

void save_report_json(const std::vector<EvalReport>& rows, const std::filesystem::path& path);
std::vector<EvalReport> load_report_json(const std::filesystem::path& path);
std::string report_table(const std::vector<EvalReport>& rows);
void save_report_table(const std::vector<EvalReport>& rows, const std::filesystem::path& path);
void save_scores_csv(const EvalReport& report, const std::filesystem::path& path);

// Ground-truth mask stored in the feature-map container: D == 1, values
// exactly 0 or 1, all pixels valid.
Mask load_gt_mask(const std::filesystem::path& path);
void save_gt_mask(const Mask& m, const std::filesystem::path& path);

// Per-sample inference over a labeled manifest. Pixel metrics (P-AUROC,
// AUPRO) need ground-truth masks on every anomalous sample; when any are
// missing they are skipped and flagged rather than failing the run.
EvalReport evaluate_run(const ModelParams& params, const DatasetManifest& test,
                        const std::filesystem::path& data_root, FusionStrategy strategy,
                        double sigma, const std::vector<double>& fpr_limits, int threads = 1);

struct AblationSetup {
    ModelArch arch;
    TrainConfig train;          // weights here are the "all terms" row
    FusionStrategy strategy = FusionStrategy::Multiply; // used by the loss rows
    double sigma = 4.0;
    std::vector<double> fpr_limits{0.30, 0.01};
    std::filesystem::path cache_dir; // per-cell results keyed by config hash
    int threads = 1;
};

// Four single/combined loss rows (each its own training) followed by five
// fusion rows reusing the all-terms model. Finished cells are cached in
// cache_dir so an interrupted grid resumes instead of retraining.
std::vector<EvalReport> ablation_grid(const DatasetManifest& train, const DatasetManifest& test,
                                      const std::filesystem::path& data_root,
                                      const AblationSetup& setup);

} // namespace mafr
