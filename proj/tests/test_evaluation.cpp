#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mafr/errors.hpp"
#include "mafr/evaluation.hpp"
#include "mafr/rng.hpp"
#include "mafr/synthetic.hpp"
#include "oracles.hpp"

using namespace mafr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* leaf) {
    const fs::path p = fs::temp_directory_path() / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

AnomalyMap map_of(size_t h, size_t w, std::vector<double> v) {
    AnomalyMap m(h, w, MapKind::Combined);
    m.v = std::move(v);
    return m;
}

} // namespace

TEST_CASE("auroc: worked cases and rank-statistic properties") {
    SUBCASE("the four-point hand case is 0.75") {
        CHECK(auroc({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}) == doctest::Approx(0.75).epsilon(1e-12));
    }
    SUBCASE("perfect separation is 1") {
        CHECK(auroc({1, 2, 3, 10, 11}, {0, 0, 0, 1, 1}) == 1.0);
    }
    SUBCASE("label inversion complements the statistic") {
        const std::vector<double> s{0.3, 0.1, 0.5, 0.2, 0.5};
        const std::vector<int> lab{0, 1, 1, 0, 0};
        std::vector<int> inv;
        for (int l : lab) inv.push_back(1 - l);
        CHECK(auroc(s, lab) + auroc(s, inv) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("all ties give one half") {
        CHECK(auroc({2, 2, 2, 2}, {0, 1, 0, 1}) == doctest::Approx(0.5));
    }
    SUBCASE("monotone score transforms change nothing") {
        Rng rng(1);
        std::vector<double> s;
        std::vector<int> lab;
        for (int i = 0; i < 30; ++i) {
            s.push_back(rng.normal());
            lab.push_back(rng.uniform() < 0.4 ? 1 : 0);
        }
        lab[0] = 0;
        lab[1] = 1;
        std::vector<double> t = s;
        for (double& v : t) v = std::exp(0.5 * v) + 3.0;
        CHECK(auroc(s, lab) == doctest::Approx(auroc(t, lab)).epsilon(1e-12));
    }
    SUBCASE("single-class inputs are rejected") {
        CHECK_THROWS_AS(auroc({1, 2}, {0, 0}), std::invalid_argument);
        CHECK_THROWS_AS(auroc({1, 2}, {1, 1}), std::invalid_argument);
        CHECK_THROWS_AS(auroc({1, 2}, {0, 2}), std::invalid_argument);
    }
    SUBCASE("matches brute-force pair counting with heavy ties") {
        Rng rng(2);
        for (int t = 0; t < 200; ++t) {
            const size_t n = 2 + rng.below(63);
            std::vector<double> s;
            std::vector<int> lab;
            for (size_t i = 0; i < n; ++i) {
                // coarse quantization forces plenty of exact ties
                s.push_back(std::floor(rng.uniform() * 8.0) / 8.0);
                lab.push_back(rng.uniform() < 0.5 ? 1 : 0);
            }
            lab[0] = 0;
            lab[n - 1] = 1;
            CHECK(std::abs(auroc(s, lab) - oracle::auroc_pairs(s, lab)) < 1e-9);
        }
    }
}

TEST_CASE("aupro: worked cases and sweep-oracle agreement") {
    SUBCASE("region holding the top scores saturates at any limit") {
        const AnomalyMap m = map_of(2, 2, {0.9, 0.1, 0.2, 0.8});
        Mask gt(2, 2, 0);
        gt.set(0, 0, true);
        gt.set(1, 1, true);
        CHECK(aupro({m}, {gt}, 0.30) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(aupro({m}, {gt}, 0.01) == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(aupro({m}, {gt}, 1.00) == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("all-equal scores flatten the curve at the final overlap") {
        const AnomalyMap m = map_of(2, 2, {0.4, 0.4, 0.4, 0.4});
        Mask gt(2, 2, 0);
        gt.set(0, 0, true);
        // every pixel predicted at the single threshold: overlap 1, so the
        // flat curve integrates to 1 at any limit
        CHECK(aupro({m}, {gt}, 0.30) == doctest::Approx(1.0));
        CHECK(aupro({m}, {gt}, 0.30) ==
              doctest::Approx(oracle::aupro_sweep({m}, {gt}, 0.30)).epsilon(1e-12));
    }
    SUBCASE("worst ordering scores low") {
        // the one anomalous pixel carries the lowest score
        const AnomalyMap m = map_of(2, 2, {0.1, 0.9, 0.8, 0.7});
        Mask gt(2, 2, 0);
        gt.set(0, 0, true);
        const double v = aupro({m}, {gt}, 0.30);
        CHECK(v == doctest::Approx(oracle::aupro_sweep({m}, {gt}, 0.30)).epsilon(1e-12));
        CHECK(v < 0.1);
    }
    SUBCASE("multiple samples and regions match the exhaustive sweep") {
        Rng rng(3);
        for (int trial = 0; trial < 60; ++trial) {
            std::vector<AnomalyMap> maps;
            std::vector<Mask> masks;
            const size_t count = 1 + rng.below(3);
            bool any_region = false, any_free = false;
            for (size_t s = 0; s < count; ++s) {
                AnomalyMap m = map_of(8, 8, std::vector<double>(64, 0.0));
                for (double& v : m.v)
                    v = std::floor(std::abs(rng.normal()) * 8.0) / 8.0; // tie-heavy
                Mask gt(8, 8, 0);
                if (rng.uniform() < 0.75) {
                    const size_t ci = rng.below(7), cj = rng.below(7);
                    for (size_t i = ci; i < std::min<size_t>(ci + 2, 8); ++i)
                        for (size_t j = cj; j < std::min<size_t>(cj + 2, 8); ++j)
                            gt.set(i, j, true);
                }
                any_region |= gt.count() > 0;
                any_free |= gt.count() < 64;
                maps.push_back(std::move(m));
                masks.push_back(std::move(gt));
            }
            if (!any_region || !any_free) continue;
            for (const double limit : {0.30, 0.01, 1.0}) {
                const double got = aupro(maps, masks, limit);
                const double want = oracle::aupro_sweep(maps, masks, limit);
                CHECK(std::abs(got - want) < 1e-3);
            }
        }
    }
    SUBCASE("degenerate inputs are rejected") {
        const AnomalyMap m = map_of(2, 2, {1, 2, 3, 4});
        CHECK_THROWS_AS(aupro({m}, {Mask(2, 2, 0)}, 0.3), std::invalid_argument); // no regions
        CHECK_THROWS_AS(aupro({m}, {Mask(2, 2, 1)}, 0.3), std::invalid_argument); // no free pixels
        Mask gt(2, 2, 0);
        gt.set(0, 0, true);
        CHECK_THROWS_AS(aupro({m}, {gt}, 0.0), std::invalid_argument);
        CHECK_THROWS_AS(aupro({m}, {gt}, 1.5), std::invalid_argument);
    }
}

TEST_CASE("aupro column names") {
    CHECK(aupro_column_name(0.30) == "AUPRO@30%");
    CHECK(aupro_column_name(0.01) == "AUPRO@1%");
    CHECK(aupro_column_name(0.005) == "AUPRO@0.5%");
}

TEST_CASE("ground-truth masks round-trip and are validated") {
    const fs::path dir = temp_dir("mafr_gt_tests");
    Mask m(4, 5, 0);
    m.set(1, 2, true);
    m.set(3, 4, true);
    save_gt_mask(m, dir / "m.mafr");
    const Mask r = load_gt_mask(dir / "m.mafr");
    CHECK(r.v == m.v);

    SUBCASE("multi-channel files are not masks") {
        FeatureMap f = make_feature_map(2, 2, 2, Modality::TwoD);
        save_feature_map(f, dir / "wide.mafr");
        CHECK_THROWS_AS(load_gt_mask(dir / "wide.mafr"), FormatError);
    }
    SUBCASE("values other than 0/1 are rejected") {
        FeatureMap f = make_feature_map(2, 2, 1, Modality::TwoD);
        f.data[2] = 0.5f;
        save_feature_map(f, dir / "gray.mafr");
        CHECK_THROWS_AS(load_gt_mask(dir / "gray.mafr"), FormatError);
    }
}

TEST_CASE("report serialization: JSON and table agree") {
    EvalReport rep;
    rep.name = "eval";
    rep.i_auroc = 0.875;
    rep.p_auroc = 0.9375;
    rep.aupro_values = {{0.30, 0.5}, {0.01, 0.25}};
    rep.sample_scores = {{"a", Label::Normal, 0.125}, {"b", Label::Anomalous, 2.5}};
    rep.config_snapshot = "{}";
    rep.train_hash = "deadbeef00000000";

    const fs::path dir = temp_dir("mafr_report_tests");
    save_report_json({rep}, dir / "report.json");
    const std::vector<EvalReport> rows = load_report_json(dir / "report.json");
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].name == "eval");
    CHECK(rows[0].i_auroc == 0.875);
    CHECK(rows[0].p_auroc.value() == 0.9375);
    REQUIRE(rows[0].aupro_values.size() == 2);
    CHECK(rows[0].aupro_values[0].second == 0.5);
    CHECK(rows[0].train_hash == "deadbeef00000000");
    REQUIRE(rows[0].sample_scores.size() == 2);
    CHECK(rows[0].sample_scores[1].score == 2.5);
    CHECK(rows[0].sample_scores[1].label == Label::Anomalous);

    const std::string table = report_table(rows);
    CHECK(table.find("I-AUROC") != std::string::npos);
    CHECK(table.find("P-AUROC") != std::string::npos);
    CHECK(table.find("AUPRO@30%") != std::string::npos);
    CHECK(table.find("AUPRO@1%") != std::string::npos);
    CHECK(table.find("0.8750") != std::string::npos);
    CHECK(table.find("0.9375") != std::string::npos);
    CHECK(table.find("0.5000") != std::string::npos);
    CHECK(table.find("0.2500") != std::string::npos);

    SUBCASE("skipped pixel metrics render as dashes") {
        rep.p_auroc.reset();
        rep.aupro_values.clear();
        rep.pixel_metrics_skipped = true;
        const std::string t = report_table({rep});
        CHECK(t.find('-') != std::string::npos);
        save_report_json({rep}, dir / "skip.json");
        const auto back = load_report_json(dir / "skip.json");
        CHECK(back[0].pixel_metrics_skipped);
        CHECK_FALSE(back[0].p_auroc.has_value());
    }
}

TEST_CASE("scores CSV carries full precision") {
    EvalReport rep;
    rep.sample_scores = {{"x", Label::Normal, 0.1234567890123456789},
                         {"y", Label::Anomalous, 3.0}};
    const fs::path dir = temp_dir("mafr_csv_tests");
    save_scores_csv(rep, dir / "scores.csv");
    std::ifstream f(dir / "scores.csv");
    std::string header, line1, line2;
    std::getline(f, header);
    std::getline(f, line1);
    std::getline(f, line2);
    CHECK(header == "id,label,score");
    CHECK(line1.substr(0, 9) == "x,normal,");
    const double parsed = std::stod(line1.substr(9));
    CHECK(parsed == 0.1234567890123456789);
    CHECK(line2 == "y,anomalous,3");
}

namespace {

// Small on-disk dataset for evaluate_run / ablation tests.
struct TinyDataset {
    fs::path root;
    DatasetManifest train, test;
};

TinyDataset make_tiny_dataset(const char* leaf, bool drop_one_mask = false) {
    TinyDataset d;
    d.root = temp_dir(leaf);
    SyntheticSpec spec;
    spec.h = 8;
    spec.w = 8;
    spec.d_2d = 4;
    spec.d_3d = 6;
    spec.structure_rank = 2;
    spec.seed = 5;

    d.train.split = Split::Train;
    for (uint64_t i = 0; i < 3; ++i) {
        const SamplePair s = synth_normal_sample(spec, i);
        const std::string id = "tr" + std::to_string(i);
        save_feature_map(s.e2d, d.root / (id + "_2d.mafr"));
        save_feature_map(s.e3d, d.root / (id + "_3d.mafr"));
        d.train.samples.push_back({id, id + "_2d.mafr", id + "_3d.mafr", Label::Normal,
                                   std::nullopt});
    }
    d.test.split = Split::Test;
    for (uint64_t i = 0; i < 2; ++i) {
        const SamplePair s = synth_normal_sample(spec, 100 + i);
        const std::string id = "tn" + std::to_string(i);
        save_feature_map(s.e2d, d.root / (id + "_2d.mafr"));
        save_feature_map(s.e3d, d.root / (id + "_3d.mafr"));
        d.test.samples.push_back({id, id + "_2d.mafr", id + "_3d.mafr", Label::Normal,
                                  std::nullopt});
    }
    for (uint64_t i = 0; i < 2; ++i) {
        const AnomalousSample s = synth_anomalous_sample(spec, 200 + i);
        const std::string id = "ta" + std::to_string(i);
        save_feature_map(s.e2d, d.root / (id + "_2d.mafr"));
        save_feature_map(s.e3d, d.root / (id + "_3d.mafr"));
        std::optional<std::string> mask;
        if (!(drop_one_mask && i == 0)) {
            save_gt_mask(s.gt, d.root / (id + "_mask.mafr"));
            mask = id + "_mask.mafr";
        }
        d.test.samples.push_back({id, id + "_2d.mafr", id + "_3d.mafr", Label::Anomalous, mask});
    }
    return d;
}

} // namespace

TEST_CASE("evaluate_run produces a complete, in-range report") {
    const TinyDataset d = make_tiny_dataset("mafr_eval_run");
    const ModelParams p = init_params(4, 6, 5, 3);
    const EvalReport rep =
        evaluate_run(p, d.test, d.root, FusionStrategy::Multiply, 1.0, {0.30, 0.01});
    CHECK_FALSE(rep.pixel_metrics_skipped);
    CHECK(rep.i_auroc >= 0.0);
    CHECK(rep.i_auroc <= 1.0);
    REQUIRE(rep.p_auroc.has_value());
    CHECK(rep.p_auroc.value() >= 0.0);
    CHECK(rep.p_auroc.value() <= 1.0);
    REQUIRE(rep.aupro_values.size() == 2);
    for (const auto& [limit, value] : rep.aupro_values) {
        CHECK(value >= 0.0);
        CHECK(value <= 1.0);
    }
    CHECK(rep.sample_scores.size() == 4);
}

TEST_CASE("evaluate_run degrades gracefully when masks are missing") {
    const TinyDataset d = make_tiny_dataset("mafr_eval_skip", /*drop_one_mask=*/true);
    const ModelParams p = init_params(4, 6, 5, 3);
    const EvalReport rep =
        evaluate_run(p, d.test, d.root, FusionStrategy::Multiply, 1.0, {0.30, 0.01});
    CHECK(rep.pixel_metrics_skipped);
    CHECK_FALSE(rep.p_auroc.has_value());
    CHECK(rep.aupro_values.empty());
    CHECK(rep.sample_scores.size() == 4); // image-level scoring still runs
}

TEST_CASE("ablation grid: row structure, model reuse, cache stability") {
    const TinyDataset d = make_tiny_dataset("mafr_ablate_run");
    AblationSetup setup;
    setup.arch = make_arch(4, 6, 5);
    setup.train.epochs = 2;
    setup.train.seed = 11;
    setup.sigma = 1.0;
    setup.cache_dir = d.root / "cache";

    const std::vector<EvalReport> rows = ablation_grid(d.train, d.test, d.root, setup);
    REQUIRE(rows.size() == 9);
    const std::vector<std::string> names{"loss:sim",        "loss:census",  "loss:smooth",
                                         "loss:all",        "fusion:multiply", "fusion:add",
                                         "fusion:max",      "fusion:2d",    "fusion:3d"};
    for (size_t i = 0; i < rows.size(); ++i) CHECK(rows[i].name == names[i]);

    // one trained model behind the all-terms row and every fusion row
    const std::string all_hash = rows[3].train_hash;
    for (size_t i = 4; i < 9; ++i) CHECK(rows[i].train_hash == all_hash);
    CHECK(rows[0].train_hash != all_hash);

    // multiply row is the all-terms row evaluated under its default strategy
    CHECK(rows[4].i_auroc == rows[3].i_auroc);

    // a second pass resolves every cell from the cache and reproduces the
    // report exactly
    const std::vector<EvalReport> again = ablation_grid(d.train, d.test, d.root, setup);
    REQUIRE(again.size() == 9);
    for (size_t i = 0; i < 9; ++i) {
        CHECK(again[i].name == rows[i].name);
        CHECK(again[i].i_auroc == rows[i].i_auroc);
        CHECK(again[i].train_hash == rows[i].train_hash);
        REQUIRE(again[i].sample_scores.size() == rows[i].sample_scores.size());
        for (size_t k = 0; k < rows[i].sample_scores.size(); ++k)
            CHECK(again[i].sample_scores[k].score == rows[i].sample_scores[k].score);
    }
}
