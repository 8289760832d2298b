#pragma once

#include "mafr/grid.hpp"

namespace mafr {

struct LossWeights {
    double lambda_sim = 1.0;
    double lambda_smooth = 1.0;
    double lambda_census = 1.0;
    double epsilon = 1e-8; // similarity normalization guard
    int census_kernel = 3; // odd pooling window
};

struct LossBreakdown {
    double sim = 0, smooth = 0, census = 0, total = 0;
    double sim_2d = 0, sim_3d = 0;
    double smooth_2d = 0, smooth_3d = 0;
    double census_2d = 0, census_3d = 0;
};

// Zero-normalized SSD: per channel, both maps are mean-centered and scaled by
// their population std over valid pixels before the squared difference;
// result is normalized by (#valid pixels * channels). Invariant to positive
// per-channel affine transforms of either argument up to O(eps/sigma).
double znssd(const Grid& e, const Grid& ehat, double eps, const Mask& valid);

// Edge-aware first-order penalty on the reconstruction error map: forward
// differences of (ehat - e), weighted by exp(-|forward difference of e|).
// Terms whose difference partner is invalid (or out of range) contribute 0;
// normalized by H*W*C.
double smoothness(const Grid& e, const Grid& ehat, const Mask& valid);

// Mean absolute difference of kernel x kernel average-pooled maps (stride 1,
// replicate padding), over valid pixels and channels.
double census(const Grid& e, const Grid& ehat, int kernel, const Mask& valid);

// Weighted sum over both modalities; the 2D modality is always fully valid,
// the 3D modality is restricted to its pre-densification validity.
LossBreakdown total_loss(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                         const Grid& e3d_hat, const LossWeights& w, const Mask& valid3d);

struct LossGrads {
    Grid d_e2d_hat, d_e3d_hat;
};

// Analytic d(total)/d(reconstruction) for both modalities; entries at invalid
// pixels are exactly zero.
LossGrads loss_gradients(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                         const Grid& e3d_hat, const LossWeights& w, const Mask& valid3d);

} // namespace mafr
