#pragma once

#include <cstdint>
#include <utility>

#include "mafr/feature_map.hpp"
#include "mafr/grid.hpp"

namespace mafr {

enum class AnomalyShape { Blob, Rect };

// Desk-scale stand-in for extracted backbone features: both modalities render
// the same low-rank smooth spatial structure through fixed random channel
// mixes, so they are correlated in exactly the way the fusion model assumes.
struct SyntheticSpec {
    uint32_t h = 16, w = 16;
    uint32_t d_2d = 24, d_3d = 36;
    uint32_t structure_rank = 4;
    double noise_sigma = 0.05;
    struct {
        AnomalyShape shape = AnomalyShape::Blob;
        double area_fraction = 0.05;
        double magnitude = 1.0;
    } anomaly;
    uint64_t seed = 0;
};

// Throws ConfigError on out-of-range fields (zero dims, area_fraction
// outside (0, 0.5), negative noise).
void validate(const SyntheticSpec& spec);

struct SamplePair {
    FeatureMap e2d;
    FeatureMap e3d;
};

struct AnomalousSample {
    FeatureMap e2d;
    FeatureMap e3d;
    Mask gt; // exactly the perturbed pixels
};

// Deterministic in (spec.seed, sample_seed); the channel mixes depend on
// spec.seed alone so every sample of a dataset lives in the same subspace.
SamplePair synth_normal_sample(const SyntheticSpec& spec, uint64_t sample_seed);

// Same underlying normal sample (bit-identical when magnitude is zero), plus
// a contiguous perturbed region of ~area_fraction * H * W pixels. The
// perturbation adds magnitude times a unit-norm random channel direction,
// drawn independently per modality, to every pixel inside the mask.
AnomalousSample synth_anomalous_sample(const SyntheticSpec& spec, uint64_t sample_seed);

} // namespace mafr
