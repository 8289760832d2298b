#include "mafr/feature_map.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

constexpr char kMagic[4] = {'M', 'A', 'F', 'R'};
constexpr uint32_t kFormatVersion = 1;
// Caps H*W*D so corrupt headers cannot drive multi-gigabyte allocations.
constexpr uint64_t kMaxElements = uint64_t(1) << 31;

void put_u32(std::string& out, uint32_t x) {
    out.push_back(char(x & 0xff));
    out.push_back(char((x >> 8) & 0xff));
    out.push_back(char((x >> 16) & 0xff));
    out.push_back(char((x >> 24) & 0xff));
}

uint32_t get_u32(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

} // namespace

FeatureMap make_feature_map(uint32_t h, uint32_t w, uint32_t d, Modality m) {
    FeatureMap out;
    out.h = h;
    out.w = w;
    out.d = d;
    out.modality = m;
    out.data.assign(size_t(h) * w * d, 0.0f);
    out.validity.assign(size_t(h) * w, 1);
    return out;
}

void validate(const FeatureMap& m) {
    if (m.h == 0 || m.w == 0 || m.d == 0)
        throw FormatError("feature map has zero dimension");
    if (uint64_t(m.h) * m.w * m.d > kMaxElements)
        throw FormatError("feature map dimensions overflow");
    if (m.data.size() != size_t(m.h) * m.w * m.d)
        throw FormatError("feature map payload size mismatch");
    if (m.validity.size() != size_t(m.h) * m.w)
        throw FormatError("feature map validity size mismatch");
    for (float x : m.data)
        if (!std::isfinite(x)) throw FormatError("feature map contains non-finite values");
    for (uint8_t b : m.validity)
        if (b > 1) throw FormatError("validity bytes must be 0 or 1");
    if (m.modality == Modality::TwoD) {
        for (uint8_t b : m.validity)
            if (b == 0) throw FormatError("2D feature maps must be fully valid");
    }
}

void save_feature_map(const FeatureMap& m, const std::filesystem::path& path) {
    validate(m);
    std::string buf;
    buf.reserve(17 + m.data.size() * 4 + m.validity.size());
    buf.append(kMagic, 4);
    put_u32(buf, kFormatVersion);
    buf.push_back(char(static_cast<uint8_t>(m.modality)));
    put_u32(buf, m.h);
    put_u32(buf, m.w);
    put_u32(buf, m.d);
    for (float x : m.data) put_u32(buf, std::bit_cast<uint32_t>(x));
    buf.append(m.validity.begin(), m.validity.end());

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path.string());
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw FormatError("write failed: " + path.string());
}

FeatureMap load_feature_map(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open for reading: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 17) throw FormatError("truncated feature map file: " + path.string());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());

    if (std::memcmp(p, kMagic, 4) != 0)
        throw FormatError("bad magic bytes in " + path.string());
    const uint32_t version = get_u32(p + 4);
    if (version != kFormatVersion)
        throw FormatError("unsupported format version " + std::to_string(version));
    const uint8_t mod = p[8];
    if (mod > 1) throw FormatError("bad modality byte in " + path.string());

    FeatureMap m;
    m.modality = static_cast<Modality>(mod);
    m.h = get_u32(p + 9);
    m.w = get_u32(p + 13);
    if (buf.size() < 21) throw FormatError("truncated feature map file: " + path.string());
    m.d = get_u32(p + 17);
    if (m.h == 0 || m.w == 0 || m.d == 0)
        throw FormatError("zero dimension in " + path.string());
    const uint64_t elems = uint64_t(m.h) * m.w * m.d;
    if (elems > kMaxElements)
        throw FormatError("dimension overflow in " + path.string());
    const uint64_t expected = 21 + elems * 4 + uint64_t(m.h) * m.w;
    if (buf.size() != expected)
        throw FormatError("file size mismatch in " + path.string());

    m.data.resize(elems);
    const unsigned char* q = p + 21;
    for (uint64_t i = 0; i < elems; ++i, q += 4)
        m.data[i] = std::bit_cast<float>(get_u32(q));
    m.validity.assign(q, q + size_t(m.h) * m.w);
    validate(m);
    return m;
}

FeatureMap upsample_bilinear(const FeatureMap& m, uint32_t target_h, uint32_t target_w) {
    validate(m);
    if (target_h < m.h || target_w < m.w)
        throw std::invalid_argument("upsample target smaller than source");
    for (uint8_t b : m.validity)
        if (!b) throw std::invalid_argument("upsample requires an all-valid source");

    FeatureMap out = make_feature_map(target_h, target_w, m.d, m.modality);
    const double sy = target_h > 1 ? double(m.h - 1) / double(target_h - 1) : 0.0;
    const double sx = target_w > 1 ? double(m.w - 1) / double(target_w - 1) : 0.0;
    for (uint32_t i = 0; i < target_h; ++i) {
        const double fy = i * sy;
        const uint32_t y0 = uint32_t(fy);
        const uint32_t y1 = std::min(y0 + 1, m.h - 1);
        const double wy = fy - y0;
        for (uint32_t j = 0; j < target_w; ++j) {
            const double fx = j * sx;
            const uint32_t x0 = uint32_t(fx);
            const uint32_t x1 = std::min(x0 + 1, m.w - 1);
            const double wx = fx - x0;
            for (uint32_t k = 0; k < m.d; ++k) {
                const double top = (1.0 - wx) * m.at(y0, x0, k) + wx * m.at(y0, x1, k);
                const double bot = (1.0 - wx) * m.at(y1, x0, k) + wx * m.at(y1, x1, k);
                out.at(i, j, k) = float((1.0 - wy) * top + wy * bot);
            }
        }
    }
    return out;
}

ScatterResult scatter_project(const PointFeatureSet& points, uint32_t h, uint32_t w) {
    if (h == 0 || w == 0) throw std::invalid_argument("scatter target must be non-empty");
    if (points.d == 0) throw std::invalid_argument("scatter needs at least one channel");
    if (points.features.size() != points.count() * points.d)
        throw std::invalid_argument("point feature size mismatch");

    ScatterResult res;
    res.map = make_feature_map(h, w, points.d, Modality::ThreeD);
    std::fill(res.map.validity.begin(), res.map.validity.end(), uint8_t(0));
    std::vector<double> acc(size_t(h) * w * points.d, 0.0);
    std::vector<uint32_t> hits(size_t(h) * w, 0);

    for (size_t n = 0; n < points.count(); ++n) {
        const float u = points.pixel_coords[n].first;
        const float v = points.pixel_coords[n].second;
        if (!std::isfinite(u) || !std::isfinite(v)) {
            ++res.dropped;
            continue;
        }
        const long col = std::lround(double(u));
        const long row = std::lround(double(v));
        if (row < 0 || col < 0 || row >= long(h) || col >= long(w)) {
            ++res.dropped;
            continue;
        }
        const size_t pix = size_t(row) * w + size_t(col);
        ++hits[pix];
        for (size_t k = 0; k < points.d; ++k)
            acc[pix * points.d + k] += points.features[n * points.d + k];
    }

    for (size_t pix = 0; pix < hits.size(); ++pix) {
        if (hits[pix] == 0) continue;
        res.map.validity[pix] = 1;
        for (size_t k = 0; k < points.d; ++k)
            res.map.data[pix * points.d + k] = float(acc[pix * points.d + k] / hits[pix]);
    }
    return res;
}

Densified densify(const FeatureMap& m) {
    validate(m);
    Densified out;
    out.map = m;
    out.source_validity.h = m.h;
    out.source_validity.w = m.w;
    out.source_validity.v = m.validity;

    std::vector<size_t> valid_pixels;
    for (size_t pix = 0; pix < m.pixels(); ++pix)
        if (m.validity[pix]) valid_pixels.push_back(pix);
    if (valid_pixels.empty())
        throw std::invalid_argument("densify requires at least one valid pixel");

    if (valid_pixels.size() < m.pixels()) {
        for (size_t pix = 0; pix < m.pixels(); ++pix) {
            if (m.validity[pix]) continue;
            const long r = long(pix / m.w), c = long(pix % m.w);
            // Nearest valid source; valid_pixels is in row-major order, so on
            // equal distance the earlier (scan-order) pixel wins.
            size_t best = 0;
            long best_d2 = std::numeric_limits<long>::max();
            for (size_t vp : valid_pixels) {
                const long vr = long(vp / m.w), vc = long(vp % m.w);
                const long d2 = (vr - r) * (vr - r) + (vc - c) * (vc - c);
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = vp;
                }
            }
            std::copy_n(m.data.begin() + best * m.d, m.d, out.map.data.begin() + pix * m.d);
        }
        std::fill(out.map.validity.begin(), out.map.validity.end(), uint8_t(1));
    }
    return out;
}

Grid to_grid(const FeatureMap& m) {
    Grid g(m.h, m.w, m.d);
    for (size_t i = 0; i < g.size(); ++i) g.v[i] = double(m.data[i]);
    return g;
}

FeatureMap from_grid(const Grid& g, Modality modality, const Mask* validity) {
    FeatureMap m = make_feature_map(uint32_t(g.h), uint32_t(g.w), uint32_t(g.c), modality);
    for (size_t i = 0; i < g.size(); ++i) m.data[i] = float(g.v[i]);
    if (validity) {
        if (validity->h != g.h || validity->w != g.w)
            throw std::invalid_argument("validity mask shape mismatch");
        m.validity = validity->v;
    }
    return m;
}

Mask validity_mask(const FeatureMap& m) {
    Mask out;
    out.h = m.h;
    out.w = m.w;
    out.v = m.validity;
    return out;
}

} // namespace mafr
