#include <doctest.h>

#include <cmath>

#include "mafr/errors.hpp"
#include "mafr/losses.hpp"
#include "mafr/rng.hpp"
#include "oracles.hpp"

using namespace mafr;

namespace {

Grid random_grid(Rng& rng, size_t h, size_t w, size_t c, double scale = 1.0) {
    Grid g(h, w, c);
    for (double& x : g.v) x = rng.normal() * scale;
    return g;
}

Mask random_mask(Rng& rng, size_t h, size_t w, size_t min_valid) {
    Mask m(h, w, 1);
    while (true) {
        for (uint8_t& b : m.v) b = rng.uniform() < 0.75 ? 1 : 0;
        if (m.count() >= min_valid) return m;
    }
}

} // namespace

TEST_CASE("znssd identities and hand value") {
    Rng rng(1);
    const Grid e = random_grid(rng, 4, 4, 3);
    const Mask all = Mask::full(4, 4);

    SUBCASE("self-similarity is exactly zero") {
        CHECK(znssd(e, e, 1e-8, all) == 0.0);
    }
    SUBCASE("affine transforms of either side are invisible") {
        Grid shifted = e;
        // sigma >= 1 so the epsilon guard stays negligible
        Grid big = e;
        for (double& v : big.v) v *= 3.0;
        Grid affine = big;
        for (double& v : affine.v) v = 1.7 * v + 4.2;
        CHECK(znssd(big, affine, 1e-8, all) <= 1e-6);
        CHECK(znssd(affine, big, 1e-8, all) <= 1e-6);
    }
    SUBCASE("1x2 swap evaluates to 4") {
        Grid a(1, 2, 1), b(1, 2, 1);
        a.v = {1.0, 3.0};
        b.v = {3.0, 1.0};
        CHECK(znssd(a, b, 1e-12, Mask::full(1, 2)) == doctest::Approx(4.0).epsilon(1e-6));
    }
    SUBCASE("fewer than two valid pixels is an error") {
        Mask one(4, 4, 0);
        one.set(0, 0, true);
        CHECK_THROWS_AS(znssd(e, e, 1e-8, one), std::invalid_argument);
    }
    SUBCASE("matches the direct-loop oracle on random masked inputs") {
        for (int t = 0; t < 50; ++t) {
            const Grid x = random_grid(rng, 5, 4, 2);
            const Grid y = random_grid(rng, 5, 4, 2);
            const Mask m = random_mask(rng, 5, 4, 3);
            CHECK(znssd(x, y, 1e-8, m) ==
                  doctest::Approx(oracle::znssd(x, y, 1e-8, m)).epsilon(1e-12));
        }
    }
}

TEST_CASE("smoothness identities and hand value") {
    Rng rng(2);
    const Grid e = random_grid(rng, 4, 4, 2);
    const Mask all = Mask::full(4, 4);

    SUBCASE("constant error maps cost nothing") {
        // dyadic grid values keep the +2.75 shift exact in floating point,
        // so the zero here is exact rather than approximate
        Grid base = e;
        for (double& v : base.v) v = std::round(v * 64.0) / 64.0;
        Grid ehat = base;
        for (double& v : ehat.v) v += 2.75;
        CHECK(smoothness(base, ehat, all) == 0.0);
    }
    SUBCASE("2x2 step column evaluates to 0.5") {
        Grid z(2, 2, 1), ehat(2, 2, 1);
        ehat.at(0, 1, 0) = 1.0;
        ehat.at(1, 1, 0) = 1.0;
        CHECK(smoothness(z, ehat, Mask::full(2, 2)) == doctest::Approx(0.5).epsilon(1e-6));
    }
    SUBCASE("error edges coinciding with feature edges are damped") {
        Grid flat(1, 2, 1), edge(1, 2, 1), ehat(1, 2, 1);
        edge.v = {0.0, 5.0};
        ehat.v = {0.0, 1.0};
        const Mask m = Mask::full(1, 2);
        // same recon error ramp, once on flat features, once across an edge
        CHECK(smoothness(edge, ehat, m) < smoothness(flat, ehat, m));
    }
    SUBCASE("1x1 maps are rejected") {
        Grid tiny(1, 1, 1);
        CHECK_THROWS_AS(smoothness(tiny, tiny, Mask::full(1, 1)), std::invalid_argument);
    }
    SUBCASE("matches the brute-force oracle under masks") {
        for (int t = 0; t < 50; ++t) {
            const Grid x = random_grid(rng, 4, 5, 2);
            const Grid y = random_grid(rng, 4, 5, 2);
            const Mask m = random_mask(rng, 4, 5, 2);
            CHECK(smoothness(x, y, m) ==
                  doctest::Approx(oracle::smoothness(x, y, m)).epsilon(1e-12));
        }
    }
}

TEST_CASE("census identities and hand value") {
    Rng rng(3);
    const Grid e = random_grid(rng, 4, 4, 2);
    const Mask all = Mask::full(4, 4);

    SUBCASE("self-comparison is exactly zero") {
        CHECK(census(e, e, 3, all) == 0.0);
    }
    SUBCASE("constants pool to their difference") {
        Grid a(3, 3, 1), b(3, 3, 1);
        for (double& v : a.v) v = 2.0;
        for (double& v : b.v) v = 5.0;
        CHECK(census(a, b, 3, Mask::full(3, 3)) == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("1x2 replicate-padded example evaluates to 1") {
        Grid a(1, 2, 1), b(1, 2, 1);
        a.v = {0.0, 3.0}; // pools to [1, 2]
        b.v = {3.0, 0.0}; // pools to [2, 1]
        CHECK(census(a, b, 3, Mask::full(1, 2)) == doctest::Approx(1.0).epsilon(1e-6));
    }
    SUBCASE("even kernels are rejected") {
        CHECK_THROWS_AS(census(e, e, 2, all), std::invalid_argument);
    }
    SUBCASE("flipping both arguments together changes nothing") {
        Grid x = random_grid(rng, 3, 4, 2);
        Grid y = random_grid(rng, 3, 4, 2);
        auto flip = [](const Grid& g) {
            Grid out(g.h, g.w, g.c);
            for (size_t i = 0; i < g.h; ++i)
                for (size_t j = 0; j < g.w; ++j)
                    for (size_t c = 0; c < g.c; ++c)
                        out.at(i, j, c) = g.at(g.h - 1 - i, g.w - 1 - j, c);
            return out;
        };
        CHECK(census(x, y, 3, Mask::full(3, 4)) ==
              doctest::Approx(census(flip(x), flip(y), 3, Mask::full(3, 4))).epsilon(1e-12));
    }
    SUBCASE("matches the padded-pooling oracle") {
        for (int t = 0; t < 30; ++t) {
            const Grid x = random_grid(rng, 4, 5, 2);
            const Grid y = random_grid(rng, 4, 5, 2);
            const Mask m = random_mask(rng, 4, 5, 1);
            for (int k : {1, 3, 5})
                CHECK(census(x, y, k, m) ==
                      doctest::Approx(oracle::census(x, y, k, m)).epsilon(1e-12));
        }
    }
}

TEST_CASE("total loss recombines its parts") {
    Rng rng(4);
    const Grid e2d = random_grid(rng, 4, 4, 3);
    const Grid e3d = random_grid(rng, 4, 4, 5);
    const Grid h2d = random_grid(rng, 4, 4, 3);
    const Grid h3d = random_grid(rng, 4, 4, 5);
    const Mask v3 = random_mask(rng, 4, 4, 4);
    LossWeights w;
    w.lambda_sim = 0.7;
    w.lambda_smooth = 1.3;
    w.lambda_census = 0.4;

    SUBCASE("perfect reconstruction costs nothing") {
        const LossBreakdown b = total_loss(e2d, e2d, e3d, e3d, w, v3);
        CHECK(b.sim == 0.0);
        CHECK(b.smooth == 0.0);
        CHECK(b.census == 0.0);
        CHECK(b.total == 0.0);
    }
    SUBCASE("sim-only weights reduce the total to the sim term") {
        LossWeights sim_only;
        sim_only.lambda_sim = 1.0;
        sim_only.lambda_smooth = 0.0;
        sim_only.lambda_census = 0.0;
        const LossBreakdown b = total_loss(e2d, h2d, e3d, h3d, sim_only, v3);
        CHECK(b.total == doctest::Approx(b.sim).epsilon(1e-12));
    }
    SUBCASE("breakdown identity holds within 1e-6 relative") {
        const LossBreakdown b = total_loss(e2d, h2d, e3d, h3d, w, v3);
        const double recomposed =
            w.lambda_sim * b.sim + w.lambda_smooth * b.smooth + w.lambda_census * b.census;
        CHECK(b.total == doctest::Approx(recomposed).epsilon(1e-6));
        CHECK(b.sim == doctest::Approx(b.sim_2d + b.sim_3d).epsilon(1e-9));
        CHECK(b.smooth == doctest::Approx(b.smooth_2d + b.smooth_3d).epsilon(1e-9));
        CHECK(b.census == doctest::Approx(b.census_2d + b.census_3d).epsilon(1e-9));
        CHECK(b.sim >= 0.0);
        CHECK(b.smooth >= 0.0);
        CHECK(b.census >= 0.0);
    }
}

TEST_CASE("loss gradients: stationarity, masking, finite differences") {
    Rng rng(5);
    const Mask all = Mask::full(4, 4);
    LossWeights w; // all three terms at 1

    SUBCASE("sim gradient vanishes at a perfect reconstruction") {
        const Grid e2d = random_grid(rng, 4, 4, 3);
        const Grid e3d = random_grid(rng, 4, 4, 5);
        LossWeights sim_only;
        sim_only.lambda_sim = 1.0;
        sim_only.lambda_smooth = 0.0;
        sim_only.lambda_census = 0.0;
        const LossGrads g = loss_gradients(e2d, e2d, e3d, e3d, sim_only, all);
        for (double v : g.d_e2d_hat.v) CHECK(std::abs(v) < 1e-12);
        for (double v : g.d_e3d_hat.v) CHECK(std::abs(v) < 1e-12);
    }
    SUBCASE("invalid pixels carry exactly zero gradient") {
        const Grid e2d = random_grid(rng, 4, 4, 3);
        const Grid e3d = random_grid(rng, 4, 4, 5);
        const Grid h2d = random_grid(rng, 4, 4, 3);
        const Grid h3d = random_grid(rng, 4, 4, 5);
        const Mask v3 = random_mask(rng, 4, 4, 4);
        const LossGrads g = loss_gradients(e2d, h2d, e3d, h3d, w, v3);
        for (size_t n = 0; n < v3.size(); ++n) {
            if (v3.v[n]) continue;
            for (size_t c = 0; c < 5; ++c) CHECK(g.d_e3d_hat.pix(n)[c] == 0.0);
        }
    }
    SUBCASE("analytic gradients track central differences") {
        // Smoothness and census are piecewise-linear in ehat, so probe a
        // configuration, skip entries whose |analytic| is tiny (kink
        // proximity), and demand 1e-4 relative agreement elsewhere.
        const double step = 1e-5, tol = 1e-4;
        int compared = 0;
        for (int trial = 0; trial < 10; ++trial) {
            const Grid e2d = random_grid(rng, 4, 4, 3);
            const Grid e3d = random_grid(rng, 4, 4, 3);
            Grid h2d = random_grid(rng, 4, 4, 3);
            Grid h3d = random_grid(rng, 4, 4, 3);
            const Mask v3 = random_mask(rng, 4, 4, 6);
            const LossGrads g = loss_gradients(e2d, h2d, e3d, h3d, w, v3);
            for (size_t k = 0; k < h2d.v.size(); k += 7) {
                const double saved = h2d.v[k];
                h2d.v[k] = saved + step;
                const double up = total_loss(e2d, h2d, e3d, h3d, w, v3).total;
                h2d.v[k] = saved - step;
                const double dn = total_loss(e2d, h2d, e3d, h3d, w, v3).total;
                h2d.v[k] = saved;
                const double fd = (up - dn) / (2.0 * step);
                const double an = g.d_e2d_hat.v[k];
                if (std::abs(an) < 1e-3 || std::abs(fd) < 1e-3) continue;
                CHECK(std::abs(an - fd) / std::max(std::abs(an), std::abs(fd)) < tol);
                ++compared;
            }
        }
        CHECK(compared > 50);
    }
}

TEST_CASE("loss weight validation") {
    LossWeights w;
    w.lambda_sim = w.lambda_smooth = w.lambda_census = 0.0;
    Rng rng(6);
    const Grid e = random_grid(rng, 2, 2, 1);
    CHECK_THROWS_AS(total_loss(e, e, e, e, w, Mask::full(2, 2)), ConfigError);
}
