#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "mafr/anomaly.hpp"

namespace mafr {

// Minimal 8-bit grayscale PNG writer (uncompressed deflate blocks), enough
// for heatmap exports without pulling in an image library.
void write_gray_png(const std::vector<uint8_t>& pixels, size_t h, size_t w,
                    const std::filesystem::path& path);

// Min-max normalizes the map to [0, 255] (constant maps render black) and
// writes it as a grayscale heatmap.
void write_heatmap_png(const AnomalyMap& map, const std::filesystem::path& path);

} // namespace mafr
