#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace mafr {

// Dense H x W x C map of doubles, channels-last, row-major. This is the
// in-engine numeric representation; file-facing maps store 32-bit floats
// (see feature_map.hpp).
struct Grid {
    size_t h = 0, w = 0, c = 0;
    std::vector<double> v;

    Grid() = default;
    Grid(size_t h_, size_t w_, size_t c_, double fill = 0.0)
        : h(h_), w(w_), c(c_), v(h_ * w_ * c_, fill) {}

    size_t pixels() const { return h * w; }
    size_t size() const { return v.size(); }

    double& at(size_t i, size_t j, size_t k) { return v[(i * w + j) * c + k]; }
    double at(size_t i, size_t j, size_t k) const { return v[(i * w + j) * c + k]; }

    // Channel vector at flat pixel index n = i*w + j.
    double* pix(size_t n) { return v.data() + n * c; }
    const double* pix(size_t n) const { return v.data() + n * c; }
};

// Per-pixel boolean mask (1 = pixel carries real data).
struct Mask {
    size_t h = 0, w = 0;
    std::vector<uint8_t> v;

    Mask() = default;
    Mask(size_t h_, size_t w_, uint8_t fill = 1) : h(h_), w(w_), v(h_ * w_, fill) {}

    static Mask full(size_t h, size_t w) { return Mask(h, w, 1); }

    size_t size() const { return v.size(); }
    bool at(size_t i, size_t j) const { return v[i * w + j] != 0; }
    void set(size_t i, size_t j, bool on) { v[i * w + j] = on ? 1 : 0; }

    size_t count() const {
        size_t n = 0;
        for (uint8_t b : v) n += b != 0;
        return n;
    }
    bool all() const { return count() == size(); }
};

} // namespace mafr
