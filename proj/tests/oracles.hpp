#pragma once

// Reference implementations the tests compare the engine against. Everything
// here is written the slow, obvious way on purpose and shares no code with
// src/.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "mafr/anomaly.hpp"
#include "mafr/grid.hpp"

namespace oracle {

// Mann-Whitney by brute-force pair counting, ties worth half.
inline double auroc_pairs(const std::vector<double>& scores, const std::vector<int>& labels) {
    double wins = 0.0;
    size_t pairs = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != 1) continue;
        for (size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] != 0) continue;
            ++pairs;
            if (scores[i] > scores[j])
                wins += 1.0;
            else if (scores[i] == scores[j])
                wins += 0.5;
        }
    }
    if (pairs == 0) throw std::invalid_argument("need both classes");
    return wins / double(pairs);
}

inline double lerp(double a, double b, double t) { return a + (b - a) * t; }

// One output pixel of a replicate-padded k x k mean filter.
inline double avg_pool_at(const mafr::Grid& g, long i, long j, size_t c, int kernel) {
    const int r = kernel / 2;
    double s = 0.0;
    for (int di = -r; di <= r; ++di)
        for (int dj = -r; dj <= r; ++dj) {
            const long ii = std::clamp(i + di, 0l, long(g.h) - 1);
            const long jj = std::clamp(j + dj, 0l, long(g.w) - 1);
            s += g.at(size_t(ii), size_t(jj), c);
        }
    return s / double(kernel * kernel);
}

inline double znssd(const mafr::Grid& e, const mafr::Grid& ehat, double eps,
                    const mafr::Mask& valid) {
    const size_t nv = valid.count();
    double acc = 0.0;
    for (size_t c = 0; c < e.c; ++c) {
        double me = 0, mh = 0;
        for (size_t n = 0; n < e.pixels(); ++n)
            if (valid.v[n]) {
                me += e.pix(n)[c];
                mh += ehat.pix(n)[c];
            }
        me /= double(nv);
        mh /= double(nv);
        double ve = 0, vh = 0;
        for (size_t n = 0; n < e.pixels(); ++n)
            if (valid.v[n]) {
                ve += (e.pix(n)[c] - me) * (e.pix(n)[c] - me);
                vh += (ehat.pix(n)[c] - mh) * (ehat.pix(n)[c] - mh);
            }
        const double se = std::sqrt(ve / double(nv)), sh = std::sqrt(vh / double(nv));
        for (size_t n = 0; n < e.pixels(); ++n)
            if (valid.v[n]) {
                const double d =
                    (e.pix(n)[c] - me) / (se + eps) - (ehat.pix(n)[c] - mh) / (sh + eps);
                acc += d * d;
            }
    }
    return acc / (double(nv) * double(e.c));
}

inline double smoothness(const mafr::Grid& e, const mafr::Grid& ehat, const mafr::Mask& valid) {
    double acc = 0.0;
    for (size_t i = 0; i < e.h; ++i)
        for (size_t j = 0; j < e.w; ++j) {
            if (!valid.at(i, j)) continue;
            for (size_t c = 0; c < e.c; ++c) {
                const double de = ehat.at(i, j, c) - e.at(i, j, c);
                if (j + 1 < e.w && valid.at(i, j + 1)) {
                    const double dex = ehat.at(i, j + 1, c) - e.at(i, j + 1, c);
                    acc += std::abs(dex - de) * std::exp(-std::abs(e.at(i, j + 1, c) - e.at(i, j, c)));
                }
                if (i + 1 < e.h && valid.at(i + 1, j)) {
                    const double dey = ehat.at(i + 1, j, c) - e.at(i + 1, j, c);
                    acc += std::abs(dey - de) * std::exp(-std::abs(e.at(i + 1, j, c) - e.at(i, j, c)));
                }
            }
        }
    return acc / double(e.h * e.w * e.c);
}

inline double census(const mafr::Grid& e, const mafr::Grid& ehat, int kernel,
                     const mafr::Mask& valid) {
    const size_t nv = valid.count();
    double acc = 0.0;
    for (size_t c = 0; c < e.c; ++c)
        for (size_t i = 0; i < e.h; ++i)
            for (size_t j = 0; j < e.w; ++j)
                if (valid.at(i, j))
                    acc += std::abs(avg_pool_at(e, long(i), long(j), c, kernel) -
                                    avg_pool_at(ehat, long(i), long(j), c, kernel));
    return acc / (double(nv) * double(e.c));
}

// Full (non-separable) Gaussian convolution with the product kernel,
// replicate padding, radius ceil(3 sigma).
inline mafr::AnomalyMap gauss2d(const mafr::AnomalyMap& m, double sigma) {
    const int r = int(std::ceil(3.0 * sigma));
    std::vector<double> k1(size_t(2 * r + 1));
    double sum = 0.0;
    for (int x = -r; x <= r; ++x) {
        k1[size_t(x + r)] = std::exp(-0.5 * double(x) * double(x) / (sigma * sigma));
        sum += k1[size_t(x + r)];
    }
    for (double& v : k1) v /= sum;

    mafr::AnomalyMap out(m.h, m.w, mafr::MapKind::Smoothed);
    for (size_t i = 0; i < m.h; ++i)
        for (size_t j = 0; j < m.w; ++j) {
            double acc = 0.0;
            for (int di = -r; di <= r; ++di)
                for (int dj = -r; dj <= r; ++dj) {
                    const long ii = std::clamp(long(i) + di, 0l, long(m.h) - 1);
                    const long jj = std::clamp(long(j) + dj, 0l, long(m.w) - 1);
                    acc += k1[size_t(di + r)] * k1[size_t(dj + r)] *
                           m.at(size_t(ii), size_t(jj));
                }
            out.at(i, j) = acc;
        }
    double mx = 0.0;
    for (double v : out.v) mx = std::max(mx, v);
    out.sample_score = mx;
    return out;
}

// Closed-form first Adam update with bias correction.
inline double adam_first_step(double p, double g, double lr, double b1, double b2, double eps) {
    const double mhat = ((1.0 - b1) * g) / (1.0 - b1);
    const double vhat = ((1.0 - b2) * g * g) / (1.0 - b2);
    return p - lr * mhat / (std::sqrt(vhat) + eps);
}

// 4-connected flood fill; returns per-pixel region index (-1 outside) and
// the region count.
inline std::vector<int> regions4(const mafr::Mask& m, int& count) {
    std::vector<int> id(m.size(), -1);
    count = 0;
    std::vector<size_t> stack;
    for (size_t start = 0; start < m.size(); ++start) {
        if (!m.v[start] || id[start] >= 0) continue;
        stack.push_back(start);
        id[start] = count;
        while (!stack.empty()) {
            const size_t n = stack.back();
            stack.pop_back();
            const size_t i = n / m.w, j = n % m.w;
            const size_t nb[4][2] = {{i > 0 ? i - 1 : i, j},
                                     {i + 1 < m.h ? i + 1 : i, j},
                                     {i, j > 0 ? j - 1 : j},
                                     {i, j + 1 < m.w ? j + 1 : j}};
            for (const auto& p : nb) {
                const size_t q = p[0] * m.w + p[1];
                if (q != n && m.v[q] && id[q] < 0) {
                    id[q] = count;
                    stack.push_back(q);
                }
            }
        }
        ++count;
    }
    return id;
}

// Exhaustive threshold sweep for the per-region-overlap curve: every unique
// score becomes one threshold, everything is recomputed from scratch at each
// one. Flat extension left of the first sweep point and right of the last,
// trapezoids in between, cut at the limit, normalized by it.
inline double aupro_sweep(const std::vector<mafr::AnomalyMap>& maps,
                          const std::vector<mafr::Mask>& masks, double limit) {
    struct Px {
        double score;
        int region;   // -1 = anomaly-free
        size_t sample;
    };
    std::vector<Px> px;
    std::vector<size_t> region_size;
    std::vector<std::vector<int>> ids(maps.size());
    for (size_t s = 0; s < maps.size(); ++s) {
        int cnt = 0;
        ids[s] = regions4(masks[s], cnt);
        const int base = int(region_size.size());
        region_size.resize(region_size.size() + size_t(cnt), 0);
        for (size_t n = 0; n < maps[s].v.size(); ++n) {
            const int r = ids[s][n] >= 0 ? base + ids[s][n] : -1;
            if (r >= 0) region_size[size_t(r)]++;
            px.push_back({maps[s].v[n], r, s});
        }
    }
    size_t free_total = 0;
    for (const Px& p : px) free_total += p.region < 0;
    if (region_size.empty() || free_total == 0)
        throw std::invalid_argument("degenerate aupro instance");

    std::vector<double> thresholds;
    for (const Px& p : px) thresholds.push_back(p.score);
    std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

    double area = 0.0, prev_x = 0.0, prev_y = 0.0;
    bool first = true;
    for (const double t : thresholds) {
        std::vector<size_t> hit(region_size.size(), 0);
        size_t fp = 0;
        for (const Px& p : px) {
            if (p.score < t) continue;
            if (p.region >= 0)
                hit[size_t(p.region)]++;
            else
                ++fp;
        }
        double pro = 0.0;
        for (size_t r = 0; r < region_size.size(); ++r)
            pro += double(hit[r]) / double(region_size[r]);
        pro /= double(region_size.size());
        const double fpr = double(fp) / double(free_total);

        if (first) {
            prev_y = pro; // flat to the left of the first sweep point
            first = false;
        }
        if (fpr >= limit) {
            const double y_cut =
                fpr == prev_x ? pro : prev_y + (pro - prev_y) * (limit - prev_x) / (fpr - prev_x);
            area += (limit - prev_x) * 0.5 * (prev_y + y_cut);
            return area / limit;
        }
        area += (fpr - prev_x) * 0.5 * (prev_y + pro);
        prev_x = fpr;
        prev_y = pro;
    }
    area += (limit - prev_x) * prev_y;
    return area / limit;
}

} // namespace oracle
