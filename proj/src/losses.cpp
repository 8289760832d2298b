#include "mafr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

void check_pair(const Grid& e, const Grid& ehat, const Mask& valid) {
    if (e.h != ehat.h || e.w != ehat.w || e.c != ehat.c)
        throw std::invalid_argument("loss arguments have mismatched shapes");
    if (valid.h != e.h || valid.w != e.w)
        throw std::invalid_argument("validity mask shape mismatch");
}

struct ChannelStats {
    double mean = 0.0, std = 0.0;
};

ChannelStats channel_stats(const Grid& g, size_t c, const Mask& valid, size_t nvalid) {
    double sum = 0.0;
    for (size_t n = 0; n < g.pixels(); ++n)
        if (valid.v[n]) sum += g.pix(n)[c];
    const double mean = sum / double(nvalid);
    double var = 0.0;
    for (size_t n = 0; n < g.pixels(); ++n)
        if (valid.v[n]) {
            const double d = g.pix(n)[c] - mean;
            var += d * d;
        }
    return {mean, std::sqrt(var / double(nvalid))};
}

inline double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

// Average pool with stride 1 and replicate padding, one channel at a time.
std::vector<double> avg_pool(const Grid& g, size_t c, int kernel) {
    const long h = long(g.h), w = long(g.w), half = kernel / 2;
    const double inv = 1.0 / double(kernel * kernel);
    std::vector<double> out(g.pixels());
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            double acc = 0.0;
            for (long u = -half; u <= half; ++u) {
                const long ci = std::clamp(i + u, 0l, h - 1);
                for (long v = -half; v <= half; ++v) {
                    const long cj = std::clamp(j + v, 0l, w - 1);
                    acc += g.pix(size_t(ci) * w + cj)[c];
                }
            }
            out[size_t(i) * w + j] = acc * inv;
        }
    return out;
}

} // namespace

double znssd(const Grid& e, const Grid& ehat, double eps, const Mask& valid) {
    check_pair(e, ehat, valid);
    const size_t nvalid = valid.count();
    if (nvalid < 2) throw std::invalid_argument("znssd needs at least 2 valid pixels");

    double acc = 0.0;
    for (size_t c = 0; c < e.c; ++c) {
        const ChannelStats se = channel_stats(e, c, valid, nvalid);
        const ChannelStats sh = channel_stats(ehat, c, valid, nvalid);
        const double inv_e = 1.0 / (se.std + eps);
        const double inv_h = 1.0 / (sh.std + eps);
        for (size_t n = 0; n < e.pixels(); ++n) {
            if (!valid.v[n]) continue;
            const double d = (e.pix(n)[c] - se.mean) * inv_e - (ehat.pix(n)[c] - sh.mean) * inv_h;
            acc += d * d;
        }
    }
    return acc / (double(nvalid) * double(e.c));
}

double smoothness(const Grid& e, const Grid& ehat, const Mask& valid) {
    check_pair(e, ehat, valid);
    if (e.pixels() == 1) throw std::invalid_argument("smoothness is undefined on a 1x1 map");

    double acc = 0.0;
    for (size_t i = 0; i < e.h; ++i)
        for (size_t j = 0; j < e.w; ++j) {
            if (!valid.at(i, j)) continue;
            const size_t n = i * e.w + j;
            const bool right = j + 1 < e.w && valid.at(i, j + 1);
            const bool down = i + 1 < e.h && valid.at(i + 1, j);
            for (size_t c = 0; c < e.c; ++c) {
                if (right) {
                    const double ge = e.pix(n + 1)[c] - e.pix(n)[c];
                    const double gd = (ehat.pix(n + 1)[c] - e.pix(n + 1)[c]) -
                                      (ehat.pix(n)[c] - e.pix(n)[c]);
                    acc += std::abs(gd) * std::exp(-std::abs(ge));
                }
                if (down) {
                    const double ge = e.pix(n + e.w)[c] - e.pix(n)[c];
                    const double gd = (ehat.pix(n + e.w)[c] - e.pix(n + e.w)[c]) -
                                      (ehat.pix(n)[c] - e.pix(n)[c]);
                    acc += std::abs(gd) * std::exp(-std::abs(ge));
                }
            }
        }
    return acc / double(e.size());
}

double census(const Grid& e, const Grid& ehat, int kernel, const Mask& valid) {
    check_pair(e, ehat, valid);
    if (kernel <= 0 || kernel % 2 == 0) throw std::invalid_argument("census kernel must be odd");
    const size_t nvalid = valid.count();
    if (nvalid == 0) throw std::invalid_argument("census needs at least one valid pixel");

    double acc = 0.0;
    for (size_t c = 0; c < e.c; ++c) {
        const std::vector<double> pe = avg_pool(e, c, kernel);
        const std::vector<double> ph = avg_pool(ehat, c, kernel);
        for (size_t n = 0; n < e.pixels(); ++n)
            if (valid.v[n]) acc += std::abs(pe[n] - ph[n]);
    }
    return acc / (double(nvalid) * double(e.c));
}

namespace {

void add_znssd_grad(Grid& out, const Grid& e, const Grid& ehat, double eps, const Mask& valid,
                    double weight) {
    const size_t nvalid = valid.count();
    if (nvalid < 2) throw std::invalid_argument("znssd needs at least 2 valid pixels");
    const double norm = 1.0 / (double(nvalid) * double(e.c));

    std::vector<double> r(e.pixels()), n_hat(e.pixels());
    for (size_t c = 0; c < e.c; ++c) {
        const ChannelStats se = channel_stats(e, c, valid, nvalid);
        const ChannelStats sh = channel_stats(ehat, c, valid, nvalid);
        const double inv_e = 1.0 / (se.std + eps);
        const double s = sh.std + eps;

        double r_sum = 0.0, rn_sum = 0.0;
        for (size_t n = 0; n < e.pixels(); ++n) {
            if (!valid.v[n]) continue;
            const double m = (e.pix(n)[c] - se.mean) * inv_e;
            const double nh = (ehat.pix(n)[c] - sh.mean) / s;
            n_hat[n] = nh;
            r[n] = 2.0 * (nh - m) * norm;
            r_sum += r[n];
            rn_sum += r[n] * nh;
        }
        const double r_mean = r_sum / double(nvalid);
        // d(std)/dx vanishes by convention when the std itself is zero.
        const double rn_term = sh.std > 0.0 ? (rn_sum / double(nvalid)) / sh.std : 0.0;
        for (size_t n = 0; n < e.pixels(); ++n) {
            if (!valid.v[n]) continue;
            out.pix(n)[c] += weight * ((r[n] - r_mean) / s - n_hat[n] * rn_term);
        }
    }
}

void add_smoothness_grad(Grid& out, const Grid& e, const Grid& ehat, const Mask& valid,
                         double weight) {
    if (e.pixels() == 1) throw std::invalid_argument("smoothness is undefined on a 1x1 map");
    const double scale = weight / double(e.size());
    for (size_t i = 0; i < e.h; ++i)
        for (size_t j = 0; j < e.w; ++j) {
            if (!valid.at(i, j)) continue;
            const size_t n = i * e.w + j;
            const bool right = j + 1 < e.w && valid.at(i, j + 1);
            const bool down = i + 1 < e.h && valid.at(i + 1, j);
            for (size_t c = 0; c < e.c; ++c) {
                if (right) {
                    const double ge = e.pix(n + 1)[c] - e.pix(n)[c];
                    const double gd = (ehat.pix(n + 1)[c] - e.pix(n + 1)[c]) -
                                      (ehat.pix(n)[c] - e.pix(n)[c]);
                    const double g = sign_of(gd) * std::exp(-std::abs(ge)) * scale;
                    out.pix(n + 1)[c] += g;
                    out.pix(n)[c] -= g;
                }
                if (down) {
                    const double ge = e.pix(n + e.w)[c] - e.pix(n)[c];
                    const double gd = (ehat.pix(n + e.w)[c] - e.pix(n + e.w)[c]) -
                                      (ehat.pix(n)[c] - e.pix(n)[c]);
                    const double g = sign_of(gd) * std::exp(-std::abs(ge)) * scale;
                    out.pix(n + e.w)[c] += g;
                    out.pix(n)[c] -= g;
                }
            }
        }
}

void add_census_grad(Grid& out, const Grid& e, const Grid& ehat, int kernel, const Mask& valid,
                     double weight) {
    if (kernel <= 0 || kernel % 2 == 0) throw std::invalid_argument("census kernel must be odd");
    const size_t nvalid = valid.count();
    if (nvalid == 0) throw std::invalid_argument("census needs at least one valid pixel");
    const long h = long(e.h), w = long(e.w), half = kernel / 2;
    const double scale = weight / (double(nvalid) * double(e.c) * double(kernel * kernel));

    for (size_t c = 0; c < e.c; ++c) {
        const std::vector<double> pe = avg_pool(e, c, kernel);
        const std::vector<double> ph = avg_pool(ehat, c, kernel);
        for (long i = 0; i < h; ++i)
            for (long j = 0; j < w; ++j) {
                const size_t n = size_t(i) * w + j;
                if (!valid.v[n]) continue;
                const double g = sign_of(ph[n] - pe[n]) * scale;
                if (g == 0.0) continue;
                for (long u = -half; u <= half; ++u) {
                    const long ci = std::clamp(i + u, 0l, h - 1);
                    for (long v = -half; v <= half; ++v) {
                        const long cj = std::clamp(j + v, 0l, w - 1);
                        out.pix(size_t(ci) * w + cj)[c] += g;
                    }
                }
            }
    }
}

void check_weights(const LossWeights& w) {
    if (w.lambda_sim < 0.0 || w.lambda_smooth < 0.0 || w.lambda_census < 0.0)
        throw ConfigError("loss weights must be nonnegative");
    if (w.lambda_sim == 0.0 && w.lambda_smooth == 0.0 && w.lambda_census == 0.0)
        throw ConfigError("at least one loss weight must be positive");
    if (w.epsilon <= 0.0) throw ConfigError("loss epsilon must be positive");
}

} // namespace

LossBreakdown total_loss(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                         const Grid& e3d_hat, const LossWeights& w, const Mask& valid3d) {
    check_weights(w);
    const Mask full2d = Mask::full(e2d.h, e2d.w);

    LossBreakdown b;
    b.sim_2d = znssd(e2d, e2d_hat, w.epsilon, full2d);
    b.sim_3d = znssd(e3d, e3d_hat, w.epsilon, valid3d);
    b.smooth_2d = smoothness(e2d, e2d_hat, full2d);
    b.smooth_3d = smoothness(e3d, e3d_hat, valid3d);
    b.census_2d = census(e2d, e2d_hat, w.census_kernel, full2d);
    b.census_3d = census(e3d, e3d_hat, w.census_kernel, valid3d);
    b.sim = b.sim_2d + b.sim_3d;
    b.smooth = b.smooth_2d + b.smooth_3d;
    b.census = b.census_2d + b.census_3d;
    b.total = w.lambda_sim * b.sim + w.lambda_smooth * b.smooth + w.lambda_census * b.census;
    return b;
}

LossGrads loss_gradients(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                         const Grid& e3d_hat, const LossWeights& w, const Mask& valid3d) {
    check_weights(w);
    const Mask full2d = Mask::full(e2d.h, e2d.w);

    LossGrads g;
    g.d_e2d_hat = Grid(e2d.h, e2d.w, e2d.c);
    g.d_e3d_hat = Grid(e3d.h, e3d.w, e3d.c);

    auto accumulate = [&](Grid& out, const Grid& e, const Grid& ehat, const Mask& valid) {
        check_pair(e, ehat, valid);
        if (w.lambda_sim > 0.0) add_znssd_grad(out, e, ehat, w.epsilon, valid, w.lambda_sim);
        if (w.lambda_smooth > 0.0) add_smoothness_grad(out, e, ehat, valid, w.lambda_smooth);
        if (w.lambda_census > 0.0)
            add_census_grad(out, e, ehat, w.census_kernel, valid, w.lambda_census);
        // Invalid pixels carry no training signal even where pooling windows
        // straddle the validity boundary.
        for (size_t n = 0; n < out.pixels(); ++n)
            if (!valid.v[n])
                for (size_t c = 0; c < out.c; ++c) out.pix(n)[c] = 0.0;
    };
    accumulate(g.d_e2d_hat, e2d, e2d_hat, full2d);
    accumulate(g.d_e3d_hat, e3d, e3d_hat, valid3d);
    return g;
}

} // namespace mafr
