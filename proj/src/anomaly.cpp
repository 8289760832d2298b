#include "mafr/anomaly.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

void check_same_shape(const AnomalyMap& a, const AnomalyMap& b) {
    if (a.h != b.h || a.w != b.w)
        throw std::invalid_argument("anomaly maps have mismatched shapes");
}

} // namespace

const char* to_string(FusionStrategy s) {
    switch (s) {
        case FusionStrategy::Multiply: return "multiply";
        case FusionStrategy::Add: return "add";
        case FusionStrategy::Max: return "max";
        case FusionStrategy::Only2D: return "2d";
        default: return "3d";
    }
}

FusionStrategy fusion_from_string(const std::string& s) {
    if (s == "multiply") return FusionStrategy::Multiply;
    if (s == "add") return FusionStrategy::Add;
    if (s == "max") return FusionStrategy::Max;
    if (s == "2d") return FusionStrategy::Only2D;
    if (s == "3d") return FusionStrategy::Only3D;
    throw ConfigError("unknown fusion strategy '" + s + "'");
}

AnomalyMap modality_map(const Grid& e, const Grid& ehat, MapKind kind) {
    if (e.h != ehat.h || e.w != ehat.w || e.c != ehat.c)
        throw std::invalid_argument("modality map arguments have mismatched shapes");
    AnomalyMap out(e.h, e.w, kind);
    for (size_t n = 0; n < e.pixels(); ++n) {
        const double* a = e.pix(n);
        const double* b = ehat.pix(n);
        double acc = 0.0;
        for (size_t c = 0; c < e.c; ++c) {
            const double d = a[c] - b[c];
            acc += d * d;
        }
        out.v[n] = std::sqrt(acc);
    }
    return out;
}

AnomalyMap fuse(const AnomalyMap& psi2d, const AnomalyMap& psi3d, FusionStrategy strategy) {
    check_same_shape(psi2d, psi3d);
    AnomalyMap out(psi2d.h, psi2d.w, MapKind::Combined);
    switch (strategy) {
        case FusionStrategy::Multiply:
            for (size_t n = 0; n < out.v.size(); ++n) out.v[n] = psi2d.v[n] * psi3d.v[n];
            break;
        case FusionStrategy::Add:
            for (size_t n = 0; n < out.v.size(); ++n) out.v[n] = psi2d.v[n] + psi3d.v[n];
            break;
        case FusionStrategy::Max:
            for (size_t n = 0; n < out.v.size(); ++n)
                out.v[n] = std::max(psi2d.v[n], psi3d.v[n]);
            break;
        case FusionStrategy::Only2D: out.v = psi2d.v; break;
        case FusionStrategy::Only3D: out.v = psi3d.v; break;
    }
    return out;
}

AnomalyMap mask_invalid(const AnomalyMap& m, const Mask& source_validity) {
    if (m.h != source_validity.h || m.w != source_validity.w)
        throw std::invalid_argument("validity mask shape mismatch");
    AnomalyMap out = m;
    for (size_t n = 0; n < out.v.size(); ++n)
        if (!source_validity.v[n]) out.v[n] = 0.0;
    return out;
}

AnomalyMap gaussian_smooth(const AnomalyMap& m, double sigma) {
    if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
    const long radius = long(std::ceil(3.0 * sigma));
    std::vector<double> kernel(size_t(radius) * 2 + 1);
    double sum = 0.0;
    for (long t = -radius; t <= radius; ++t) {
        kernel[size_t(t + radius)] = std::exp(-0.5 * double(t) * double(t) / (sigma * sigma));
        sum += kernel[size_t(t + radius)];
    }
    for (double& k : kernel) k /= sum;

    const long h = long(m.h), w = long(m.w);
    std::vector<double> tmp(m.v.size());
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            double acc = 0.0;
            for (long t = -radius; t <= radius; ++t) {
                const long cj = std::clamp(j + t, 0l, w - 1);
                acc += kernel[size_t(t + radius)] * m.v[size_t(i) * w + cj];
            }
            tmp[size_t(i) * w + j] = acc;
        }
    AnomalyMap out(m.h, m.w, MapKind::Smoothed);
    double best = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            double acc = 0.0;
            for (long t = -radius; t <= radius; ++t) {
                const long ci = std::clamp(i + t, 0l, h - 1);
                acc += kernel[size_t(t + radius)] * tmp[size_t(ci) * w + j];
            }
            out.v[size_t(i) * w + j] = acc;
            best = std::max(best, acc);
        }
    out.sample_score = best;
    return out;
}

double score_sample(const AnomalyMap& smoothed) {
    if (smoothed.kind != MapKind::Smoothed)
        throw std::invalid_argument("score_sample expects a smoothed map");
    return *std::max_element(smoothed.v.begin(), smoothed.v.end());
}

InferenceResult infer_from_reconstructions(const Grid& e2d, const Grid& e2d_hat, const Grid& e3d,
                                           const Grid& e3d_hat, const Mask& source_validity,
                                           FusionStrategy strategy, double sigma) {
    InferenceResult r;
    r.psi2d = modality_map(e2d, e2d_hat, MapKind::Psi2D);
    r.psi3d = modality_map(e3d, e3d_hat, MapKind::Psi3D);
    r.combined = fuse(r.psi2d, r.psi3d, strategy);
    // Masking precedes smoothing so that invalid regions cannot leak anomaly
    // mass into their neighborhood.
    const AnomalyMap masked = mask_invalid(r.combined, source_validity);
    r.final_map = gaussian_smooth(masked, sigma);
    r.score = score_sample(r.final_map);
    return r;
}

InferenceResult infer(const ModelParams& params, const FeatureMap& e2d, const FeatureMap& e3d,
                      FusionStrategy strategy, double sigma) {
    validate(e2d);
    validate(e3d);
    if (e2d.h != e3d.h || e2d.w != e3d.w)
        throw FormatError("modalities are spatially misaligned");
    const Densified dense = densify(e3d);
    const Grid g2d = to_grid(e2d);
    const Grid g3d = to_grid(dense.map);

    const ForwardOptions opts{RunMode::Eval, false};
    const ForwardResult out = forward(params, g2d, g3d, opts, nullptr, nullptr);
    return infer_from_reconstructions(g2d, out.e2d_hat, g3d, out.e3d_hat, dense.source_validity,
                                      strategy, sigma);
}

} // namespace mafr
