#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mafr/grid.hpp"

namespace mafr {

enum class Modality : uint8_t { TwoD = 0, ThreeD = 1 };

// Dense H x W x D feature map, channels-last, row-major, 32-bit values.
// For 2D-modality maps the validity mask is all-true by invariant; 3D maps
// may carry invalid pixels (occlusion, sparse projection).
struct FeatureMap {
    uint32_t h = 0, w = 0, d = 0;
    Modality modality = Modality::TwoD;
    std::vector<float> data;       // h*w*d values
    std::vector<uint8_t> validity; // h*w bytes, 0/1

    float& at(size_t i, size_t j, size_t k) { return data[(i * w + j) * d + k]; }
    float at(size_t i, size_t j, size_t k) const { return data[(i * w + j) * d + k]; }
    bool valid_at(size_t i, size_t j) const { return validity[i * w + j] != 0; }

    size_t pixels() const { return size_t(h) * w; }
};

FeatureMap make_feature_map(uint32_t h, uint32_t w, uint32_t d, Modality m);

// Throws FormatError when an invariant is broken (non-finite data, size
// mismatch, invalid pixels on a 2D map).
void validate(const FeatureMap& m);

// Per-point features with their projected image-plane coordinates (u, v);
// u is the column axis, v the row axis.
struct PointFeatureSet {
    size_t d = 0;
    std::vector<float> features;                  // count() x d
    std::vector<std::pair<float, float>> pixel_coords;

    size_t count() const { return pixel_coords.size(); }
};

// --- Binary container -------------------------------------------------------
//
//   magic "MAFR" | version u32 = 1 | modality u8 | H u32 | W u32 | D u32 |
//   H*W*D float32 payload | H*W validity bytes (0/1)
//
// All integers and floats little-endian. Round-trips are bit-exact.

void save_feature_map(const FeatureMap& m, const std::filesystem::path& path);
FeatureMap load_feature_map(const std::filesystem::path& path);

// --- Spatial alignment ------------------------------------------------------

// Align-corners bilinear upsampling: corner samples of the output coincide
// with corner samples of the input. Requires target >= source and an
// all-valid source.
FeatureMap upsample_bilinear(const FeatureMap& m, uint32_t target_h, uint32_t target_w);

struct ScatterResult {
    FeatureMap map;      // modality ThreeD, validity marks touched pixels
    size_t dropped = 0;  // points whose rounded pixel fell outside the grid
};

// Projects point features onto an H x W grid. Each point lands on pixel
// (round(v), round(u)); collisions are averaged, untouched pixels stay
// invalid.
ScatterResult scatter_project(const PointFeatureSet& points, uint32_t h, uint32_t w);

struct Densified {
    FeatureMap map;                 // every pixel valid
    Mask source_validity;           // the pre-fill mask, consumed later by anomaly masking
};

// Fills invalid pixels from their nearest valid neighbour (Euclidean pixel
// distance, ties broken by row-major scan order). Valid pixels are copied
// unchanged.
Densified densify(const FeatureMap& m);

// --- Conversions ------------------------------------------------------------

Grid to_grid(const FeatureMap& m);
FeatureMap from_grid(const Grid& g, Modality modality, const Mask* validity = nullptr);
Mask validity_mask(const FeatureMap& m);

} // namespace mafr
