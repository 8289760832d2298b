#include "mafr/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "mafr/errors.hpp"
#include "mafr/rng.hpp"

namespace mafr {

namespace {

// Sub-stream tags under the synthesis role; keeps the anomaly draws out of
// the normal-sample stream so the base maps do not depend on anomaly params.
constexpr uint64_t kMixTag = 0x4d4958ull;     // dataset-wide channel mixes
constexpr uint64_t kAnomalyTag = 0x414e4f4dull;

struct Wave {
    double fy, fx, phase;
};

// One smooth spatial field: a single low-frequency cosine plane wave with
// unit amplitude. Field values stay in [-1, 1] with mass piling up near the
// extremes, so a small training set already covers the full value range and
// held-out normals interpolate instead of extrapolating.
Wave draw_field(Rng& rng) {
    Wave wv;
    wv.fy = rng.uniform(0.5, 1.5);
    wv.fx = rng.uniform(0.5, 1.5);
    wv.phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return wv;
}

double eval_field(const Wave& wv, double iy, double ix) {
    return std::cos(2.0 * std::numbers::pi * (wv.fy * iy + wv.fx * ix) + wv.phase);
}

// rank x d mixing matrix, N(0,1)/sqrt(rank) entries so per-channel variance
// is independent of the rank.
std::vector<double> draw_mix(Rng& rng, uint32_t rank, uint32_t d) {
    std::vector<double> m(size_t(rank) * d);
    const double scale = 1.0 / std::sqrt(double(rank));
    for (double& x : m) x = rng.normal() * scale;
    return m;
}

void render_modality(FeatureMap& out, const std::vector<Wave>& fields,
                     const std::vector<double>& mix, uint32_t rank, Rng& noise_rng,
                     double noise_sigma) {
    const uint32_t h = out.h, w = out.w, d = out.d;
    for (uint32_t i = 0; i < h; ++i) {
        const double iy = double(i) / double(h);
        for (uint32_t j = 0; j < w; ++j) {
            const double ix = double(j) / double(w);
            for (uint32_t r = 0; r < rank; ++r) {
                const double f = eval_field(fields[r], iy, ix);
                const double* mrow = mix.data() + size_t(r) * d;
                for (uint32_t k = 0; k < d; ++k)
                    out.at(i, j, k) += float(f * mrow[k]);
            }
            if (noise_sigma > 0.0)
                for (uint32_t k = 0; k < d; ++k)
                    out.at(i, j, k) += float(noise_rng.normal() * noise_sigma);
        }
    }
}

// The exact target count of pixels nearest to a random continuous center.
// Any prefix of the (distance, row, col) ordering is 4-connected: from any
// chosen pixel, stepping its row or column toward the center strictly
// decreases the distance, so the whole path to the closest pixel is chosen
// too.
Mask blob_mask(uint32_t h, uint32_t w, size_t target, Rng& rng) {
    const double cy = rng.uniform(0.0, double(h - 1));
    const double cx = rng.uniform(0.0, double(w - 1));
    struct Cand {
        double d2;
        uint32_t i, j;
    };
    std::vector<Cand> cands;
    cands.reserve(size_t(h) * w);
    for (uint32_t i = 0; i < h; ++i)
        for (uint32_t j = 0; j < w; ++j) {
            const double dy = i - cy, dx = j - cx;
            cands.push_back({dy * dy + dx * dx, i, j});
        }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.d2 != b.d2) return a.d2 < b.d2;
        if (a.i != b.i) return a.i < b.i;
        return a.j < b.j;
    });
    Mask m(h, w, 0);
    for (size_t n = 0; n < target && n < cands.size(); ++n)
        m.set(cands[n].i, cands[n].j, true);
    return m;
}

Mask rect_mask(uint32_t h, uint32_t w, size_t target, Rng& rng) {
    const double aspect = rng.uniform(0.5, 2.0);
    uint32_t rh = uint32_t(std::clamp<long>(std::lround(std::sqrt(double(target) * aspect)), 1, h));
    uint32_t rw = uint32_t(std::clamp<long>(std::lround(double(target) / rh), 1, w));
    const uint32_t i0 = uint32_t(rng.below(h - rh + 1));
    const uint32_t j0 = uint32_t(rng.below(w - rw + 1));
    Mask m(h, w, 0);
    for (uint32_t i = i0; i < i0 + rh; ++i)
        for (uint32_t j = j0; j < j0 + rw; ++j) m.set(i, j, true);
    return m;
}

std::vector<double> unit_direction(Rng& rng, uint32_t d) {
    std::vector<double> v(d);
    double norm2 = 0.0;
    do {
        norm2 = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm2 += x * x;
        }
    } while (norm2 == 0.0);
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    return v;
}

void perturb(FeatureMap& m, const Mask& gt, const std::vector<double>& dir, double magnitude) {
    for (uint32_t i = 0; i < m.h; ++i)
        for (uint32_t j = 0; j < m.w; ++j) {
            if (!gt.at(i, j)) continue;
            for (uint32_t k = 0; k < m.d; ++k)
                m.at(i, j, k) = float(double(m.at(i, j, k)) + magnitude * dir[k]);
        }
}

} // namespace

void validate(const SyntheticSpec& spec) {
    if (spec.h == 0 || spec.w == 0 || spec.d_2d == 0 || spec.d_3d == 0)
        throw ConfigError("synthetic spec has zero dimension");
    if (spec.structure_rank == 0)
        throw ConfigError("structure_rank must be positive");
    if (spec.noise_sigma < 0.0)
        throw ConfigError("noise_sigma must be nonnegative");
    if (!(spec.anomaly.area_fraction > 0.0) || spec.anomaly.area_fraction >= 0.5)
        throw ConfigError("anomaly.area_fraction must lie in (0, 0.5)");
    if (spec.anomaly.magnitude < 0.0)
        throw ConfigError("anomaly.magnitude must be nonnegative");
}

SamplePair synth_normal_sample(const SyntheticSpec& spec, uint64_t sample_seed) {
    validate(spec);
    const uint64_t root = derive_seed(spec.seed, seed_role::kSynthesis);

    Rng mix_rng(mix_seed(root ^ kMixTag, 0));
    const std::vector<double> mix2 = draw_mix(mix_rng, spec.structure_rank, spec.d_2d);
    const std::vector<double> mix3 = draw_mix(mix_rng, spec.structure_rank, spec.d_3d);

    Rng rng(mix_seed(root, sample_seed));
    std::vector<Wave> fields(spec.structure_rank);
    for (auto& f : fields) f = draw_field(rng);

    SamplePair out;
    out.e2d = make_feature_map(spec.h, spec.w, spec.d_2d, Modality::TwoD);
    out.e3d = make_feature_map(spec.h, spec.w, spec.d_3d, Modality::ThreeD);
    render_modality(out.e2d, fields, mix2, spec.structure_rank, rng, spec.noise_sigma);
    render_modality(out.e3d, fields, mix3, spec.structure_rank, rng, spec.noise_sigma);
    return out;
}

AnomalousSample synth_anomalous_sample(const SyntheticSpec& spec, uint64_t sample_seed) {
    SamplePair base = synth_normal_sample(spec, sample_seed);

    const uint64_t root = derive_seed(spec.seed, seed_role::kSynthesis);
    Rng rng(mix_seed(root ^ kAnomalyTag, sample_seed));

    const size_t target =
        std::max<size_t>(1, size_t(std::llround(spec.anomaly.area_fraction * spec.h * spec.w)));
    Mask gt = spec.anomaly.shape == AnomalyShape::Blob ? blob_mask(spec.h, spec.w, target, rng)
                                                       : rect_mask(spec.h, spec.w, target, rng);

    const std::vector<double> dir2 = unit_direction(rng, spec.d_2d);
    const std::vector<double> dir3 = unit_direction(rng, spec.d_3d);
    // Skipping the add when magnitude is zero keeps the maps bit-identical to
    // the normal sample (adding 0.0 would flip the sign bit of -0.0 entries).
    if (spec.anomaly.magnitude > 0.0) {
        perturb(base.e2d, gt, dir2, spec.anomaly.magnitude);
        perturb(base.e3d, gt, dir3, spec.anomaly.magnitude);
    }
    return {std::move(base.e2d), std::move(base.e3d), std::move(gt)};
}

} // namespace mafr
