#include "mafr/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "mafr/config.hpp"
#include "mafr/errors.hpp"
#include "mafr/evaluation.hpp"
#include "mafr/gradcheck.hpp"
#include "mafr/parallel.hpp"
#include "mafr/png.hpp"
#include "mafr/synthetic.hpp"
#include "mafr/training.hpp"

namespace fs = std::filesystem;

namespace mafr::cli {

namespace {

// Sample-seed namespaces keep train and test streams disjoint.
constexpr uint64_t kTestNormalBase = 1'000'000;
constexpr uint64_t kTestAnomalousBase = 2'000'000;

fs::path resolve(const fs::path& workdir, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : workdir / path;
}

int env_threads() {
    const char* env = std::getenv("MAFR_THREADS");
    if (!env || !*env) return 0;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1) throw ConfigError("MAFR_THREADS must be a positive integer");
    return int(v);
}

std::string id_of(const char* prefix, uint32_t i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%03u", prefix, i);
    return buf;
}

int cmd_synth(const RunConfig& cfg, const fs::path& workdir) {
    const SyntheticSpec spec = synthetic_spec(cfg);
    const fs::path data = resolve(workdir, cfg.paths.data_dir);
    fs::create_directories(data / "train");
    fs::create_directories(data / "test");

    DatasetManifest train;
    train.split = Split::Train;
    for (uint32_t i = 0; i < cfg.synth.train_count; ++i) {
        const std::string id = id_of("train", i);
        const SamplePair s = synth_normal_sample(spec, i);
        SampleEntry e;
        e.id = id;
        e.path_2d = "train/" + id + "_2d.mafr";
        e.path_3d = "train/" + id + "_3d.mafr";
        save_feature_map(s.e2d, data / e.path_2d);
        save_feature_map(s.e3d, data / e.path_3d);
        train.samples.push_back(std::move(e));
    }
    save_manifest(train, data / "train.json");

    DatasetManifest test;
    test.split = Split::Test;
    for (uint32_t i = 0; i < cfg.synth.test_normal_count; ++i) {
        const std::string id = id_of("test_norm", i);
        const SamplePair s = synth_normal_sample(spec, kTestNormalBase + i);
        SampleEntry e;
        e.id = id;
        e.path_2d = "test/" + id + "_2d.mafr";
        e.path_3d = "test/" + id + "_3d.mafr";
        save_feature_map(s.e2d, data / e.path_2d);
        save_feature_map(s.e3d, data / e.path_3d);
        test.samples.push_back(std::move(e));
    }
    for (uint32_t i = 0; i < cfg.synth.test_anomalous_count; ++i) {
        const std::string id = id_of("test_anom", i);
        const AnomalousSample s = synth_anomalous_sample(spec, kTestAnomalousBase + i);
        SampleEntry e;
        e.id = id;
        e.path_2d = "test/" + id + "_2d.mafr";
        e.path_3d = "test/" + id + "_3d.mafr";
        e.label = Label::Anomalous;
        e.mask_path = "test/" + id + "_mask.mafr";
        save_feature_map(s.e2d, data / e.path_2d);
        save_feature_map(s.e3d, data / e.path_3d);
        save_gt_mask(s.gt, data / *e.mask_path);
        test.samples.push_back(std::move(e));
    }
    save_manifest(test, data / "test.json");

    std::printf("wrote %u train and %zu test samples to %s\n", cfg.synth.train_count,
                test.samples.size(), data.string().c_str());
    return 0;
}

int cmd_train(const RunConfig& cfg, const fs::path& workdir, const std::string& manifest_name) {
    const fs::path data = resolve(workdir, cfg.paths.data_dir);
    const fs::path model_dir = resolve(workdir, cfg.paths.model_dir);
    const DatasetManifest manifest = load_manifest(data / manifest_name);
    if (manifest.samples.empty()) throw ConfigError("manifest has no samples");

    const FeatureMap m2 = load_feature_map(data / manifest.samples[0].path_2d);
    const FeatureMap m3 = load_feature_map(data / manifest.samples[0].path_3d);
    const ModelArch arch = model_arch(cfg, m2.d, m3.d);
    const TrainConfig tc = train_config(cfg);

    std::function<void(uint32_t, const ModelParams&)> cb;
    if (cfg.train.checkpoint_every > 0) {
        cb = [&](uint32_t epoch, const ModelParams& p) {
            if (epoch % cfg.train.checkpoint_every == 0) {
                char name[32];
                std::snprintf(name, sizeof name, "epoch_%04u", epoch);
                save_checkpoint(p, model_dir / name);
            }
        };
    }

    FitResult res = fit_manifest(manifest, data, arch, tc, cb);
    res.log.config_snapshot = run_config_json(cfg);
    save_checkpoint(res.params, model_dir);
    save_train_log(res.log, model_dir / "train_log.json");

    if (res.log.epochs.empty())
        std::printf("saved untrained initialization for %zu samples to %s\n",
                    res.log.trained_sample_ids.size(), model_dir.string().c_str());
    else
        std::printf("trained %zu samples for %zu epochs (final mean loss %.6f); checkpoint in %s\n",
                    res.log.trained_sample_ids.size(), res.log.epochs.size(),
                    res.log.epochs.back().mean_loss.total, model_dir.string().c_str());
    return 0;
}

int cmd_infer(const RunConfig& cfg, const fs::path& workdir, const std::string& manifest_name) {
    const fs::path data = resolve(workdir, cfg.paths.data_dir);
    const fs::path out = resolve(workdir, cfg.paths.output_dir);
    const ModelParams params = load_checkpoint(resolve(workdir, cfg.paths.model_dir));
    const DatasetManifest manifest = load_manifest(data / manifest_name);
    const FusionStrategy strategy = fusion_from_string(cfg.infer.strategy);

    fs::create_directories(out / "maps");
    if (cfg.infer.save_heatmaps) fs::create_directories(out / "heatmaps");

    std::vector<SampleScore> scores(manifest.samples.size());
    parallel_for(manifest.samples.size(), cfg.threads, [&](size_t i) {
        const SampleEntry& e = manifest.samples[i];
        const FeatureMap e2d = load_feature_map(data / e.path_2d);
        const FeatureMap e3d = load_feature_map(data / e.path_3d);
        const InferenceResult r = infer(params, e2d, e3d, strategy, cfg.infer.sigma);

        FeatureMap fm = make_feature_map(uint32_t(r.final_map.h), uint32_t(r.final_map.w), 1,
                                         Modality::TwoD);
        for (size_t n = 0; n < fm.pixels(); ++n) fm.data[n] = float(r.final_map.v[n]);
        save_feature_map(fm, out / "maps" / (e.id + ".mafr"));
        if (cfg.infer.save_heatmaps)
            write_heatmap_png(r.final_map, out / "heatmaps" / (e.id + ".png"));
        scores[i] = {e.id, e.label, r.score};
    });

    EvalReport csv;
    csv.sample_scores = std::move(scores);
    save_scores_csv(csv, out / "scores.csv");
    std::printf("wrote %zu anomaly maps to %s\n", manifest.samples.size(),
                (out / "maps").string().c_str());
    return 0;
}

int cmd_eval(const RunConfig& cfg, const fs::path& workdir, const std::string& manifest_name) {
    const fs::path data = resolve(workdir, cfg.paths.data_dir);
    const fs::path out = resolve(workdir, cfg.paths.output_dir);
    const ModelParams params = load_checkpoint(resolve(workdir, cfg.paths.model_dir));
    const DatasetManifest manifest = load_manifest(data / manifest_name);

    EvalReport report =
        evaluate_run(params, manifest, data, fusion_from_string(cfg.infer.strategy),
                     cfg.infer.sigma, cfg.eval.fpr_limits, cfg.threads);
    report.config_snapshot = run_config_json(cfg);

    fs::create_directories(out);
    save_report_json({report}, out / "report.json");
    save_report_table({report}, out / "report.txt");
    save_scores_csv(report, out / "scores.csv");

    std::fputs(report_table({report}).c_str(), stdout);
    if (report.pixel_metrics_skipped)
        std::puts("note: pixel metrics skipped (ground-truth masks missing)");
    return 0;
}

int cmd_ablate(const RunConfig& cfg, const fs::path& workdir) {
    const fs::path data = resolve(workdir, cfg.paths.data_dir);
    const fs::path out = resolve(workdir, cfg.paths.output_dir);
    const DatasetManifest train = load_manifest(data / "train.json");
    const DatasetManifest test = load_manifest(data / "test.json");
    if (train.samples.empty()) throw ConfigError("train manifest has no samples");

    const FeatureMap m2 = load_feature_map(data / train.samples[0].path_2d);
    const FeatureMap m3 = load_feature_map(data / train.samples[0].path_3d);

    AblationSetup setup;
    setup.arch = model_arch(cfg, m2.d, m3.d);
    setup.train = train_config(cfg);
    setup.strategy = fusion_from_string(cfg.infer.strategy);
    setup.sigma = cfg.infer.sigma;
    setup.fpr_limits = cfg.eval.fpr_limits;
    setup.cache_dir = out / "ablation_cache";
    setup.threads = cfg.threads;

    const std::vector<EvalReport> rows = ablation_grid(train, test, data, setup);
    fs::create_directories(out);
    save_report_json(rows, out / "ablation.json");
    save_report_table(rows, out / "ablation.txt");
    std::fputs(report_table(rows).c_str(), stdout);
    return 0;
}

int cmd_gradcheck(const RunConfig& cfg, const fs::path& workdir) {
    GradCheckOptions o;
    o.seed = cfg.seed;
    o.trials = cfg.gradcheck.trials;
    const std::vector<LayerCheck> checks = run_gradient_checks(o);
    const std::string report = gradcheck_report(checks);

    const fs::path out = resolve(workdir, cfg.paths.output_dir);
    fs::create_directories(out);
    std::ofstream f(out / "gradcheck.txt", std::ios::trunc);
    f << report;
    f.close();

    std::fputs(report.c_str(), stdout);
    if (!gradcheck_passed(checks)) throw NumericError("gradient check failed");
    return 0;
}

} // namespace

int run(int argc, const char* const* argv) {
    CLI::App app{"fusion-restoration anomaly detection on precomputed feature maps"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, workdir = ".";
    uint64_t seed_flag = 0;
    int threads_flag = 1;
    app.add_option("--config", config_path, "JSON run configuration file");
    app.add_option("--workdir", workdir, "base directory for all relative paths");
    auto* seed_opt = app.add_option("--seed", seed_flag, "root seed override");
    auto* threads_opt =
        app.add_option("--threads", threads_flag, "worker cap (MAFR_THREADS as fallback)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset with manifests");
    uint32_t train_count = 0, test_count = 0;
    auto* train_count_opt = synth->add_option("--train-count", train_count, "train samples");
    auto* test_count_opt =
        synth->add_option("--test-count", test_count, "test samples per class");

    auto* train = app.add_subcommand("train", "fit the restoration model on a train manifest");
    uint32_t epochs_flag = 0, shots_flag = 0;
    std::string train_manifest = "train.json";
    auto* epochs_opt = train->add_option("--epochs", epochs_flag, "training epochs");
    auto* shots_opt = train->add_option("--shots", shots_flag, "few-shot subset size");
    train->add_option("--manifest", train_manifest, "manifest file inside data_dir");

    auto* infer_cmd = app.add_subcommand("infer", "write anomaly maps and scores");
    std::string infer_manifest = "test.json", strategy_flag;
    double sigma_flag = 0.0;
    bool heatmaps_flag = false;
    auto* inf_strategy_opt =
        infer_cmd->add_option("--strategy", strategy_flag, "multiply|add|max|2d|3d");
    auto* inf_sigma_opt = infer_cmd->add_option("--sigma", sigma_flag, "gaussian smoothing sigma");
    infer_cmd->add_option("--manifest", infer_manifest, "manifest file inside data_dir");
    infer_cmd->add_flag("--heatmaps", heatmaps_flag, "also write grayscale PNG heatmaps");

    auto* eval_cmd = app.add_subcommand("eval", "compute detection metrics over a manifest");
    std::string eval_manifest = "test.json", eval_strategy;
    double eval_sigma = 0.0;
    auto* ev_strategy_opt =
        eval_cmd->add_option("--strategy", eval_strategy, "multiply|add|max|2d|3d");
    auto* ev_sigma_opt = eval_cmd->add_option("--sigma", eval_sigma, "gaussian smoothing sigma");
    eval_cmd->add_option("--manifest", eval_manifest, "manifest file inside data_dir");

    auto* ablate = app.add_subcommand("ablate", "loss and fusion ablation grid");
    uint32_t ablate_epochs = 0;
    double ablate_sigma = 0.0;
    auto* ab_epochs_opt = ablate->add_option("--epochs", ablate_epochs, "training epochs per cell");
    auto* ab_sigma_opt = ablate->add_option("--sigma", ablate_sigma, "gaussian smoothing sigma");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    uint32_t trials_flag = 0;
    auto* trials_opt = gradcheck->add_option("--trials", trials_flag, "instances per check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1; // normalize usage errors onto exit code 1
    }

    try {
        const fs::path wd = workdir;
        RunConfig cfg;
        if (!config_path.empty()) cfg = load_run_config(resolve(wd, config_path));
        if (seed_opt->count()) cfg.seed = seed_flag;
        if (threads_opt->count())
            cfg.threads = threads_flag;
        else if (const int env = env_threads(); env > 0)
            cfg.threads = env;

        if (train_count_opt->count()) cfg.synth.train_count = train_count;
        if (test_count_opt->count()) {
            cfg.synth.test_normal_count = test_count;
            cfg.synth.test_anomalous_count = test_count;
        }
        if (epochs_opt->count()) cfg.train.epochs = epochs_flag;
        if (shots_opt->count()) cfg.train.shots = shots_flag;
        if (ab_epochs_opt->count()) cfg.train.epochs = ablate_epochs;
        if (ab_sigma_opt->count()) cfg.infer.sigma = ablate_sigma;
        if (inf_strategy_opt->count()) cfg.infer.strategy = strategy_flag;
        if (inf_sigma_opt->count()) cfg.infer.sigma = sigma_flag;
        if (ev_strategy_opt->count()) cfg.infer.strategy = eval_strategy;
        if (ev_sigma_opt->count()) cfg.infer.sigma = eval_sigma;
        if (trials_opt->count()) cfg.gradcheck.trials = trials_flag;

        validate(cfg);

        if (synth->parsed()) return cmd_synth(cfg, wd);
        if (train->parsed()) return cmd_train(cfg, wd, train_manifest);
        if (infer_cmd->parsed()) {
            RunConfig c = cfg;
            c.infer.save_heatmaps = cfg.infer.save_heatmaps || heatmaps_flag;
            return cmd_infer(c, wd, infer_manifest);
        }
        if (eval_cmd->parsed()) return cmd_eval(cfg, wd, eval_manifest);
        if (ablate->parsed()) return cmd_ablate(cfg, wd);
        if (gradcheck->parsed()) return cmd_gradcheck(cfg, wd);
        return 1;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const std::invalid_argument& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

} // namespace mafr::cli
