#include "mafr/png.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <string>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

uint32_t crc32_of(const uint8_t* data, size_t n, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < n; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

void put_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

void put_chunk(std::vector<uint8_t>& out, const char type[4], const std::vector<uint8_t>& body) {
    put_be32(out, uint32_t(body.size()));
    const size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), body.begin(), body.end());
    put_be32(out, crc32_of(out.data() + crc_start, out.size() - crc_start));
}

// zlib stream holding only stored (uncompressed) deflate blocks.
std::vector<uint8_t> stored_zlib(const std::vector<uint8_t>& raw) {
    std::vector<uint8_t> z{0x78, 0x01};
    size_t off = 0;
    do {
        const size_t n = std::min<size_t>(raw.size() - off, 65535);
        const bool last = off + n == raw.size();
        z.push_back(last ? 1 : 0);
        z.push_back(uint8_t(n & 0xff));
        z.push_back(uint8_t(n >> 8));
        z.push_back(uint8_t(~n & 0xff));
        z.push_back(uint8_t((~n >> 8) & 0xff));
        z.insert(z.end(), raw.begin() + long(off), raw.begin() + long(off + n));
        off += n;
    } while (off < raw.size());
    uint32_t a = 1, b = 0;
    for (uint8_t c : raw) {
        a = (a + c) % 65521;
        b = (b + a) % 65521;
    }
    put_be32(z, (b << 16) | a);
    return z;
}

} // namespace

void write_gray_png(const std::vector<uint8_t>& pixels, size_t h, size_t w,
                    const std::filesystem::path& path) {
    if (h == 0 || w == 0 || pixels.size() != h * w)
        throw std::invalid_argument("png dimensions do not match pixel count");

    std::vector<uint8_t> raw;
    raw.reserve(h * (w + 1));
    for (size_t i = 0; i < h; ++i) {
        raw.push_back(0); // filter type: none
        raw.insert(raw.end(), pixels.begin() + long(i * w), pixels.begin() + long((i + 1) * w));
    }

    std::vector<uint8_t> png{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<uint8_t> ihdr;
    put_be32(ihdr, uint32_t(w));
    put_be32(ihdr, uint32_t(h));
    ihdr.push_back(8); // bit depth
    ihdr.push_back(0); // grayscale
    ihdr.push_back(0); // deflate
    ihdr.push_back(0); // filter method
    ihdr.push_back(0); // no interlace
    put_chunk(png, "IHDR", ihdr);
    put_chunk(png, "IDAT", stored_zlib(raw));
    put_chunk(png, "IEND", {});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(png.data()), std::streamsize(png.size()));
    if (!f) throw FormatError("write failed: " + path.string());
}

void write_heatmap_png(const AnomalyMap& map, const std::filesystem::path& path) {
    double lo = map.v.empty() ? 0.0 : map.v[0], hi = lo;
    for (double v : map.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double span = hi - lo;
    std::vector<uint8_t> px(map.v.size());
    for (size_t n = 0; n < map.v.size(); ++n) {
        const double t = span > 0.0 ? (map.v[n] - lo) / span : 0.0;
        px[n] = uint8_t(std::lround(std::clamp(t, 0.0, 1.0) * 255.0));
    }
    write_gray_png(px, map.h, map.w, path);
}

} // namespace mafr
