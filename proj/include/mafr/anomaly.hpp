#pragma once

#include <optional>

#include "mafr/feature_map.hpp"
#include "mafr/grid.hpp"
#include "mafr/network.hpp"

namespace mafr {

enum class MapKind { Psi2D, Psi3D, Combined, Smoothed };

struct AnomalyMap {
    size_t h = 0, w = 0;
    std::vector<double> v;
    MapKind kind = MapKind::Combined;
    std::optional<double> sample_score; // only on Smoothed maps, equals max(v)

    AnomalyMap() = default;
    AnomalyMap(size_t h_, size_t w_, MapKind k) : h(h_), w(w_), v(h_ * w_, 0.0), kind(k) {}
    double at(size_t i, size_t j) const { return v[i * w + j]; }
    double& at(size_t i, size_t j) { return v[i * w + j]; }
};

enum class FusionStrategy { Multiply, Add, Max, Only2D, Only3D };

const char* to_string(FusionStrategy s);
FusionStrategy fusion_from_string(const std::string& s);

// Per-pixel Euclidean norm over channels of (e - ehat).
AnomalyMap modality_map(const Grid& e, const Grid& ehat, MapKind kind);

// Element-wise multiply / add / max, or a single-modality pass-through.
AnomalyMap fuse(const AnomalyMap& psi2d, const AnomalyMap& psi3d, FusionStrategy strategy);

// Zeroes scores where the pre-densification 3D validity is false.
AnomalyMap mask_invalid(const AnomalyMap& m, const Mask& source_validity);

// Separable Gaussian, truncation radius ceil(3*sigma), kernel normalized to
// sum 1, replicate padding. Sets sample_score to the smoothed maximum.
AnomalyMap gaussian_smooth(const AnomalyMap& m, double sigma);

double score_sample(const AnomalyMap& smoothed);

struct InferenceResult {
    AnomalyMap psi2d, psi3d, combined, final_map;
    double score = 0.0;
};

// Full pipeline: eval-mode reconstruction, per-modality error maps, fusion,
// invalid masking, Gaussian smoothing, max score. The raw 3D map may carry
// invalid pixels; it is densified internally.
InferenceResult infer(const ModelParams& params, const FeatureMap& e2d, const FeatureMap& e3d,
                      FusionStrategy strategy, double sigma);

// Same tail of the pipeline for already-computed reconstructions.
InferenceResult infer_from_reconstructions(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                                           const Grid& e3d_hat, const Mask& source_validity,
                                           FusionStrategy strategy, double sigma);

} // namespace mafr
