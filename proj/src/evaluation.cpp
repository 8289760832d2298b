#include "mafr/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "mafr/errors.hpp"
#include "mafr/parallel.hpp"

namespace mafr {

namespace {

using json = nlohmann::ordered_json;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

} // namespace

double auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size() || scores.empty())
        throw std::invalid_argument("auroc needs equally sized, nonempty scores and labels");
    size_t n1 = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw std::invalid_argument("labels must be 0 or 1");
        n1 += size_t(l);
    }
    const size_t n = scores.size(), n0 = n - n1;
    if (n1 == 0 || n0 == 0) throw std::invalid_argument("auroc needs both classes present");

    std::vector<size_t> idx(n);
    std::iota(idx.begin(), idx.end(), size_t(0));
    std::sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });

    // Average ranks over tie groups; ranks are 1-based.
    double rank_sum_pos = 0.0;
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j < n && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * double(i + 1 + j);
        for (size_t k = i; k < j; ++k)
            if (labels[idx[k]] == 1) rank_sum_pos += avg_rank;
        i = j;
    }
    const double u = rank_sum_pos - 0.5 * double(n1) * double(n1 + 1);
    return u / (double(n1) * double(n0));
}

double aupro(const std::vector<AnomalyMap>& score_maps, const std::vector<Mask>& gt_masks,
             double fpr_limit) {
    if (score_maps.size() != gt_masks.size() || score_maps.empty())
        throw std::invalid_argument("aupro needs matching nonempty maps and masks");
    if (!(fpr_limit > 0.0 && fpr_limit <= 1.0))
        throw std::invalid_argument("fpr limit must lie in (0, 1]");

    constexpr uint32_t kFree = UINT32_MAX;
    struct Px {
        double score;
        uint32_t region;
    };
    std::vector<Px> pixels;
    std::vector<size_t> region_size;
    size_t free_total = 0;

    for (size_t s = 0; s < score_maps.size(); ++s) {
        const AnomalyMap& m = score_maps[s];
        const Mask& gt = gt_masks[s];
        if (m.h != gt.h || m.w != gt.w)
            throw std::invalid_argument("mask shape does not match its score map");

        // 4-connected components of this sample's ground truth.
        std::vector<uint32_t> comp(m.v.size(), kFree);
        for (size_t start = 0; start < m.v.size(); ++start) {
            if (!gt.v[start] || comp[start] != kFree) continue;
            const uint32_t id = uint32_t(region_size.size());
            region_size.push_back(0);
            std::deque<size_t> queue{start};
            comp[start] = id;
            while (!queue.empty()) {
                const size_t n = queue.front();
                queue.pop_front();
                ++region_size[id];
                const size_t i = n / m.w, j = n % m.w;
                const size_t nbrs[4] = {j > 0 ? n - 1 : n, j + 1 < m.w ? n + 1 : n,
                                        i > 0 ? n - m.w : n, i + 1 < m.h ? n + m.w : n};
                for (size_t nb : nbrs)
                    if (nb != n && gt.v[nb] && comp[nb] == kFree) {
                        comp[nb] = id;
                        queue.push_back(nb);
                    }
            }
        }
        for (size_t n = 0; n < m.v.size(); ++n) {
            pixels.push_back({m.v[n], comp[n]});
            if (comp[n] == kFree) ++free_total;
        }
    }
    if (region_size.empty()) throw std::invalid_argument("aupro needs at least one gt region");
    if (free_total == 0) throw std::invalid_argument("aupro needs anomaly-free pixels");

    std::sort(pixels.begin(), pixels.end(),
              [](const Px& a, const Px& b) { return a.score > b.score; });

    // Descending sweep; equal scores are absorbed into one threshold step.
    std::vector<size_t> hits(region_size.size(), 0);
    size_t fp = 0;
    std::vector<std::pair<double, double>> curve; // (fpr, pro)
    size_t i = 0;
    while (i < pixels.size()) {
        size_t j = i;
        while (j < pixels.size() && pixels[j].score == pixels[i].score) {
            if (pixels[j].region == kFree)
                ++fp;
            else
                ++hits[pixels[j].region];
            ++j;
        }
        double pro = 0.0;
        for (size_t r = 0; r < region_size.size(); ++r)
            pro += double(hits[r]) / double(region_size[r]);
        pro /= double(region_size.size());
        curve.emplace_back(double(fp) / double(free_total), pro);
        i = j;
    }

    // Trapezoid up to the limit; the curve is extended flat on the left so a
    // single-threshold (all scores equal) sweep integrates to its constant
    // overlap rather than zero.
    double area = 0.0, prev_x = 0.0, prev_y = curve.front().second;
    for (const auto& [x, y] : curve) {
        if (x >= fpr_limit) {
            const double yl =
                x > prev_x ? prev_y + (y - prev_y) * (fpr_limit - prev_x) / (x - prev_x) : y;
            area += (fpr_limit - prev_x) * 0.5 * (prev_y + yl);
            prev_x = fpr_limit;
            break;
        }
        area += (x - prev_x) * 0.5 * (prev_y + y);
        prev_x = x;
        prev_y = y;
    }
    if (prev_x < fpr_limit) area += (fpr_limit - prev_x) * prev_y;
    return area / fpr_limit;
}

std::string aupro_column_name(double limit) { return "AUPRO@" + fmt("%g", limit * 100.0) + "%"; }

// --- Report serialization ------------------------------------------------------

namespace {

json report_to_json(const EvalReport& r) {
    json j;
    j["name"] = r.name;
    json metrics;
    metrics["I-AUROC"] = r.i_auroc;
    metrics["P-AUROC"] = r.p_auroc ? json(*r.p_auroc) : json(nullptr);
    for (const auto& [limit, value] : r.aupro_values) metrics[aupro_column_name(limit)] = value;
    j["metrics"] = std::move(metrics);
    j["aupro"] = json::array();
    for (const auto& [limit, value] : r.aupro_values)
        j["aupro"].push_back({{"limit", limit}, {"value", value}});
    j["pixel_metrics_skipped"] = r.pixel_metrics_skipped;
    if (!r.train_hash.empty()) j["train_hash"] = r.train_hash;
    j["samples"] = json::array();
    for (const SampleScore& s : r.sample_scores)
        j["samples"].push_back({{"id", s.id}, {"label", to_string(s.label)}, {"score", s.score}});
    if (!r.config_snapshot.empty()) j["config"] = json::parse(r.config_snapshot);
    return j;
}

EvalReport report_from_json(const json& j) {
    EvalReport r;
    r.name = j.at("name").get<std::string>();
    r.i_auroc = j.at("metrics").at("I-AUROC").get<double>();
    const json& pa = j.at("metrics").at("P-AUROC");
    if (!pa.is_null()) r.p_auroc = pa.get<double>();
    for (const json& a : j.at("aupro"))
        r.aupro_values.emplace_back(a.at("limit").get<double>(), a.at("value").get<double>());
    r.pixel_metrics_skipped = j.at("pixel_metrics_skipped").get<bool>();
    if (j.contains("train_hash")) r.train_hash = j.at("train_hash").get<std::string>();
    for (const json& s : j.at("samples")) {
        SampleScore ss;
        ss.id = s.at("id").get<std::string>();
        ss.label = s.at("label").get<std::string>() == "normal" ? Label::Normal : Label::Anomalous;
        ss.score = s.at("score").get<double>();
        r.sample_scores.push_back(std::move(ss));
    }
    if (j.contains("config")) r.config_snapshot = j.at("config").dump();
    return r;
}

void write_text_file(const std::string& text, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path.string());
    f << text;
    if (!f) throw FormatError("write failed: " + path.string());
}

} // namespace

void save_report_json(const std::vector<EvalReport>& rows, const std::filesystem::path& path) {
    json j = json::array();
    for (const EvalReport& r : rows) j.push_back(report_to_json(r));
    write_text_file(j.dump(2) + "\n", path);
}

std::vector<EvalReport> load_report_json(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw FormatError("cannot open report: " + path.string());
    try {
        const json j = json::parse(f);
        std::vector<EvalReport> rows;
        for (const json& r : j) rows.push_back(report_from_json(r));
        return rows;
    } catch (const json::exception& e) {
        throw FormatError("malformed report " + path.string() + ": " + e.what());
    }
}

std::string report_table(const std::vector<EvalReport>& rows) {
    std::vector<std::string> columns{"I-AUROC", "P-AUROC"};
    for (const EvalReport& r : rows)
        for (const auto& [limit, value] : r.aupro_values) {
            const std::string name = aupro_column_name(limit);
            if (std::find(columns.begin(), columns.end(), name) == columns.end())
                columns.push_back(name);
        }

    size_t name_w = 4; // "name"
    for (const EvalReport& r : rows) name_w = std::max(name_w, r.name.size());

    std::string out;
    auto pad = [&](const std::string& s, size_t w) {
        out += s;
        out.append(w > s.size() ? w - s.size() : 0, ' ');
    };
    pad("name", name_w + 2);
    for (const std::string& c : columns) {
        out.append(11 > c.size() ? 11 - c.size() : 1, ' ');
        out += c;
    }
    out += "\n";
    for (const EvalReport& r : rows) {
        pad(r.name, name_w + 2);
        auto cell = [&](const std::string& v) {
            out.append(11 > v.size() ? 11 - v.size() : 1, ' ');
            out += v;
        };
        cell(fmt("%.4f", r.i_auroc));
        cell(r.p_auroc ? fmt("%.4f", *r.p_auroc) : std::string("-"));
        for (size_t ci = 2; ci < columns.size(); ++ci) {
            std::string v = "-";
            for (const auto& [limit, value] : r.aupro_values)
                if (aupro_column_name(limit) == columns[ci]) v = fmt("%.4f", value);
            cell(v);
        }
        out += "\n";
    }
    return out;
}

void save_report_table(const std::vector<EvalReport>& rows, const std::filesystem::path& path) {
    write_text_file(report_table(rows), path);
}

void save_scores_csv(const EvalReport& report, const std::filesystem::path& path) {
    std::string out = "id,label,score\n";
    for (const SampleScore& s : report.sample_scores)
        out += s.id + "," + to_string(s.label) + "," + fmt("%.17g", s.score) + "\n";
    write_text_file(out, path);
}

// --- Ground-truth masks --------------------------------------------------------

Mask load_gt_mask(const std::filesystem::path& path) {
    const FeatureMap m = load_feature_map(path);
    if (m.d != 1) throw FormatError("gt mask must have one channel: " + path.string());
    Mask out(m.h, m.w, 0);
    for (size_t n = 0; n < m.pixels(); ++n) {
        const float v = m.data[n];
        if (v != 0.0f && v != 1.0f)
            throw FormatError("gt mask values must be 0 or 1: " + path.string());
        out.v[n] = v == 1.0f ? 1 : 0;
    }
    return out;
}

void save_gt_mask(const Mask& m, const std::filesystem::path& path) {
    FeatureMap fm = make_feature_map(uint32_t(m.h), uint32_t(m.w), 1, Modality::TwoD);
    for (size_t n = 0; n < m.size(); ++n) fm.data[n] = m.v[n] ? 1.0f : 0.0f;
    save_feature_map(fm, path);
}

// --- Run evaluation ------------------------------------------------------------

EvalReport evaluate_run(const ModelParams& params, const DatasetManifest& test,
                        const std::filesystem::path& data_root, FusionStrategy strategy,
                        double sigma, const std::vector<double>& fpr_limits, int threads) {
    validate(test);
    if (test.samples.empty()) throw ConfigError("evaluation needs a nonempty manifest");

    struct PerSample {
        AnomalyMap final_map;
        Mask gt;
        bool has_mask = false;
        double score = 0.0;
    };
    std::vector<PerSample> per(test.samples.size());
    parallel_for(test.samples.size(), threads, [&](size_t i) {
        const SampleEntry& e = test.samples[i];
        const FeatureMap e2d = load_feature_map(data_root / e.path_2d);
        const FeatureMap e3d = load_feature_map(data_root / e.path_3d);
        InferenceResult inf = infer(params, e2d, e3d, strategy, sigma);
        PerSample& p = per[i];
        p.score = inf.score;
        p.final_map = std::move(inf.final_map);
        if (e.mask_path) {
            p.gt = load_gt_mask(data_root / *e.mask_path);
            if (p.gt.h != p.final_map.h || p.gt.w != p.final_map.w)
                throw FormatError("gt mask shape mismatch for sample '" + e.id + "'");
            p.has_mask = true;
        } else {
            p.gt = Mask(p.final_map.h, p.final_map.w, 0);
        }
    });

    EvalReport rep;
    rep.name = "eval";
    std::vector<double> scores;
    std::vector<int> labels;
    for (size_t i = 0; i < per.size(); ++i) {
        const Label l = test.samples[i].label;
        rep.sample_scores.push_back({test.samples[i].id, l, per[i].score});
        scores.push_back(per[i].score);
        labels.push_back(l == Label::Anomalous ? 1 : 0);
    }
    rep.i_auroc = auroc(scores, labels);

    bool masks_ok = true;
    for (size_t i = 0; i < per.size(); ++i)
        if (test.samples[i].label == Label::Anomalous && !per[i].has_mask) masks_ok = false;
    if (!masks_ok) {
        rep.pixel_metrics_skipped = true;
        return rep;
    }

    std::vector<double> px_scores;
    std::vector<int> px_labels;
    std::vector<AnomalyMap> maps;
    std::vector<Mask> gts;
    for (const PerSample& p : per) {
        for (size_t n = 0; n < p.final_map.v.size(); ++n) {
            px_scores.push_back(p.final_map.v[n]);
            px_labels.push_back(p.gt.v[n] ? 1 : 0);
        }
        maps.push_back(p.final_map);
        gts.push_back(p.gt);
    }
    rep.p_auroc = auroc(px_scores, px_labels);
    for (double limit : fpr_limits) rep.aupro_values.emplace_back(limit, aupro(maps, gts, limit));
    return rep;
}

// --- Ablation grid --------------------------------------------------------------

namespace {

uint64_t fnv1a(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string canonical_train_desc(const ModelArch& a, const TrainConfig& c,
                                 const DatasetManifest& train) {
    json j;
    j["d2"] = a.d2;
    j["d3"] = a.d3;
    j["fused"] = a.fused;
    j["enc"] = a.encoder_widths;
    j["dec2"] = a.decoder2d_widths;
    j["dec3"] = a.decoder3d_widths;
    j["dropout"] = a.dropout_p;
    j["cbam_r"] = a.cbam_reduction;
    j["cbam_k"] = a.cbam_spatial_kernel;
    j["skip"] = a.skip_connection;
    j["epochs"] = c.epochs;
    j["lr"] = c.learning_rate;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["batch"] = c.batch_size;
    j["lambda_sim"] = c.weights.lambda_sim;
    j["lambda_smooth"] = c.weights.lambda_smooth;
    j["lambda_census"] = c.weights.lambda_census;
    j["loss_eps"] = c.weights.epsilon;
    j["census_kernel"] = c.weights.census_kernel;
    j["seed"] = c.seed;
    j["shots"] = c.shot_count ? json(*c.shot_count) : json(nullptr);
    json ids = json::array();
    for (const SampleEntry& s : train.samples) ids.push_back(s.id);
    j["train_ids"] = std::move(ids);
    return j.dump();
}

std::string canonical_eval_desc(const std::string& train_hash, FusionStrategy strategy,
                                double sigma, const std::vector<double>& limits,
                                const DatasetManifest& test) {
    json j;
    j["train"] = train_hash;
    j["strategy"] = to_string(strategy);
    j["sigma"] = sigma;
    j["limits"] = limits;
    json ids = json::array();
    for (const SampleEntry& s : test.samples) ids.push_back(s.id);
    j["test_ids"] = std::move(ids);
    return j.dump();
}

json cell_config_json(const TrainConfig& c, FusionStrategy strategy, double sigma) {
    json j;
    j["lambda_sim"] = c.weights.lambda_sim;
    j["lambda_smooth"] = c.weights.lambda_smooth;
    j["lambda_census"] = c.weights.lambda_census;
    j["strategy"] = to_string(strategy);
    j["sigma"] = sigma;
    return j;
}

} // namespace

std::vector<EvalReport> ablation_grid(const DatasetManifest& train, const DatasetManifest& test,
                                      const std::filesystem::path& data_root,
                                      const AblationSetup& setup) {
    std::filesystem::create_directories(setup.cache_dir);

    // Checkpoints are always round-tripped through disk before evaluation so
    // cached and freshly trained cells score identically.
    auto trained = [&](const TrainConfig& cfg, std::string& hash_out) {
        hash_out = hash_hex(fnv1a(canonical_train_desc(setup.arch, cfg, train)));
        const std::filesystem::path dir = setup.cache_dir / ("train-" + hash_out);
        if (!std::filesystem::exists(dir / "index.json")) {
            FitResult fit_res = fit_manifest(train, data_root, setup.arch, cfg);
            save_checkpoint(fit_res.params, dir);
        }
        return load_checkpoint(dir);
    };

    auto evaluated = [&](const ModelParams& params, const std::string& train_hash,
                         FusionStrategy strategy, const std::string& row_name,
                         const TrainConfig& cfg) {
        const std::string key =
            hash_hex(fnv1a(canonical_eval_desc(train_hash, strategy, setup.sigma,
                                               setup.fpr_limits, test)));
        const std::filesystem::path file = setup.cache_dir / ("eval-" + key + ".json");
        EvalReport rep;
        if (std::filesystem::exists(file)) {
            rep = load_report_json(file).at(0);
        } else {
            rep = evaluate_run(params, test, data_root, strategy, setup.sigma, setup.fpr_limits,
                               setup.threads);
            save_report_json({rep}, file);
        }
        rep.name = row_name;
        rep.train_hash = train_hash;
        rep.config_snapshot = cell_config_json(cfg, strategy, setup.sigma).dump();
        return rep;
    };

    const LossWeights base = setup.train.weights;
    struct LossRow {
        const char* name;
        LossWeights w;
    };
    LossWeights sim_only = base, census_only = base, smooth_only = base;
    sim_only.lambda_smooth = sim_only.lambda_census = 0.0;
    census_only.lambda_sim = census_only.lambda_smooth = 0.0;
    smooth_only.lambda_sim = smooth_only.lambda_census = 0.0;
    const LossRow loss_rows[] = {{"loss:sim", sim_only},
                                 {"loss:census", census_only},
                                 {"loss:smooth", smooth_only},
                                 {"loss:all", base}};

    std::vector<EvalReport> rows;
    ModelParams all_terms_params;
    std::string all_terms_hash;
    for (const LossRow& row : loss_rows) {
        TrainConfig cfg = setup.train;
        cfg.weights = row.w;
        std::string hash;
        ModelParams params = trained(cfg, hash);
        rows.push_back(evaluated(params, hash, setup.strategy, row.name, cfg));
        if (std::string_view(row.name) == "loss:all") {
            all_terms_params = std::move(params);
            all_terms_hash = hash;
        }
    }

    const FusionStrategy strategies[] = {FusionStrategy::Multiply, FusionStrategy::Add,
                                         FusionStrategy::Max, FusionStrategy::Only2D,
                                         FusionStrategy::Only3D};
    for (FusionStrategy s : strategies) {
        TrainConfig cfg = setup.train;
        rows.push_back(evaluated(all_terms_params, all_terms_hash, s,
                                 std::string("fusion:") + to_string(s), cfg));
    }
    return rows;
}

} // namespace mafr
