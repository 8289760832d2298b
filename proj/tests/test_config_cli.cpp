#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "mafr/cli.hpp"
#include "mafr/config.hpp"
#include "mafr/errors.hpp"

using namespace mafr;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* leaf) {
    const fs::path p = fs::temp_directory_path() / leaf;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(std::vector<std::string> args) {
    std::vector<const char*> argv{"mafr"};
    for (const std::string& a : args) argv.push_back(a.c_str());
    return cli::run(int(argv.size()), argv.data());
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    f << text;
}

// Reduced-scale run configuration so CLI pipelines finish in milliseconds.
RunConfig tiny_config() {
    RunConfig cfg;
    cfg.synth.height = 8;
    cfg.synth.width = 8;
    cfg.synth.d_2d = 4;
    cfg.synth.d_3d = 6;
    cfg.synth.structure_rank = 2;
    cfg.synth.train_count = 3;
    cfg.synth.test_normal_count = 2;
    cfg.synth.test_anomalous_count = 2;
    cfg.train.epochs = 2;
    cfg.infer.sigma = 1.0;
    return cfg;
}

} // namespace

TEST_CASE("run configs round-trip with defaults intact") {
    const fs::path dir = temp_dir("mafr_cfg_tests");
    RunConfig cfg;
    cfg.seed = 42;
    cfg.train.lambda_smooth = 0.5;
    cfg.infer.strategy = "add";
    save_run_config(cfg, dir / "cfg.json");
    const RunConfig r = load_run_config(dir / "cfg.json");
    CHECK(run_config_json(r) == run_config_json(cfg));
    CHECK(r.seed == 42);
    CHECK(r.train.lambda_smooth == 0.5);
    CHECK(r.infer.strategy == "add");
    CHECK(r.synth.height == 16); // untouched default
}

TEST_CASE("unknown config keys fail fast at any depth") {
    const fs::path dir = temp_dir("mafr_cfg_bad");
    SUBCASE("top level") {
        write_text(dir / "a.json", R"({"seed": 1, "sneaky": 2})");
        CHECK_THROWS_AS(load_run_config(dir / "a.json"), FormatError);
    }
    SUBCASE("nested section") {
        write_text(dir / "b.json", R"({"train": {"epochs": 5, "warmup": 1}})");
        CHECK_THROWS_AS(load_run_config(dir / "b.json"), FormatError);
    }
    SUBCASE("malformed document") {
        write_text(dir / "c.json", "{");
        CHECK_THROWS_AS(load_run_config(dir / "c.json"), FormatError);
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_run_config(dir / "missing.json"), ConfigError);
    }
}

TEST_CASE("fused width derivation") {
    CHECK(derive_fused_dim(768, 1152) == 968); // stock pairing keeps its width
    CHECK(derive_fused_dim(24, 36) == 30);
    CHECK(derive_fused_dim(3, 4) == 4); // round half up
    RunConfig cfg;
    CHECK(model_arch(cfg, 24, 36).fused == 30);
    cfg.model.fused_dim = 20;
    CHECK(model_arch(cfg, 24, 36).fused == 20);
}

TEST_CASE("config validation catches bad values") {
    RunConfig cfg;
    SUBCASE("good defaults pass") { CHECK_NOTHROW(validate(cfg)); }
    SUBCASE("zero threads") {
        cfg.threads = 0;
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("empty dataset") {
        cfg.synth.train_count = 0;
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("unknown fusion strategy") {
        cfg.infer.strategy = "mean";
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("negative sigma") {
        cfg.infer.sigma = -1.0;
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("fpr limit out of range") {
        cfg.eval.fpr_limits = {0.3, 1.5};
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("bad anomaly shape") {
        cfg.synth.anomaly_shape = "star";
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
    SUBCASE("zero gradcheck trials") {
        cfg.gradcheck.trials = 0;
        CHECK_THROWS_AS(validate(cfg), ConfigError);
    }
}

TEST_CASE("synthetic spec mapping") {
    RunConfig cfg = tiny_config();
    cfg.seed = 9;
    const SyntheticSpec spec = synthetic_spec(cfg);
    CHECK(spec.h == 8);
    CHECK(spec.d_3d == 6);
    CHECK(spec.anomaly.shape == AnomalyShape::Blob);
    cfg.synth.anomaly_shape = "rect";
    CHECK(synthetic_spec(cfg).anomaly.shape == AnomalyShape::Rect);
}

TEST_CASE("cli usage errors exit with code 1") {
    CHECK(run_cli({}) == 1);                    // a subcommand is required
    CHECK(run_cli({"explode"}) == 1);           // unknown subcommand
    CHECK(run_cli({"synth", "--bogus"}) == 1);  // unknown flag
    CHECK(run_cli({"--help"}) == 0);
}

TEST_CASE("cli pipeline: synth, train, infer, eval succeed on a tiny config") {
    const fs::path wd = temp_dir("mafr_cli_pipe");
    save_run_config(tiny_config(), wd / "cfg.json");
    const std::string w = wd.string();

    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "--seed", "3", "synth"}) == 0);
    CHECK(fs::exists(wd / "data" / "train.json"));
    CHECK(fs::exists(wd / "data" / "test.json"));

    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "--seed", "3", "train"}) == 0);
    CHECK(fs::exists(wd / "model" / "index.json"));
    CHECK(fs::exists(wd / "model" / "train_log.json"));

    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "--seed", "3", "infer",
                   "--heatmaps"}) == 0);
    CHECK(fs::exists(wd / "out" / "scores.csv"));
    CHECK(fs::exists(wd / "out" / "maps"));
    CHECK(fs::exists(wd / "out" / "heatmaps"));

    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "--seed", "3", "eval"}) == 0);
    CHECK(fs::exists(wd / "out" / "report.json"));
    CHECK(fs::exists(wd / "out" / "report.txt"));

    SUBCASE("strategy flags are validated") {
        CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "infer", "--strategy",
                       "geometric"}) == 1);
    }
    SUBCASE("corrupt checkpoints exit with the format code") {
        write_text(wd / "model" / "index.json", "{ broken");
        CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "infer"}) == 2);
    }
}

TEST_CASE("cli rejects empty datasets with the config exit code") {
    const fs::path wd = temp_dir("mafr_cli_empty");
    CHECK(run_cli({"--workdir", wd.string(), "synth", "--train-count", "0"}) == 1);
}

TEST_CASE("cli maps training blow-ups onto the numeric exit code") {
    const fs::path wd = temp_dir("mafr_cli_numeric");
    RunConfig cfg = tiny_config();
    cfg.train.learning_rate = 1e300; // first step catapults the weights
    cfg.train.epochs = 3;
    save_run_config(cfg, wd / "cfg.json");
    const std::string w = wd.string();
    REQUIRE(run_cli({"--workdir", w, "--config", "cfg.json", "synth"}) == 0);
    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "train"}) == 3);
}

TEST_CASE("cli thread cap falls back to the environment") {
    const fs::path wd = temp_dir("mafr_cli_env");
    save_run_config(tiny_config(), wd / "cfg.json");
    const std::string w = wd.string();

    setenv("MAFR_THREADS", "2", 1);
    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "synth"}) == 0);

    setenv("MAFR_THREADS", "banana", 1);
    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "synth"}) == 1);

    // an explicit flag shadows the (broken) environment value
    CHECK(run_cli({"--workdir", w, "--config", "cfg.json", "--threads", "1", "synth"}) == 0);
    unsetenv("MAFR_THREADS");
}

TEST_CASE("cli gradcheck subcommand writes its report") {
    const fs::path wd = temp_dir("mafr_cli_gc");
    CHECK(run_cli({"--workdir", wd.string(), "gradcheck", "--trials", "2"}) == 0);
    std::ifstream f(wd / "out" / "gradcheck.txt");
    REQUIRE(f.good());
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    CHECK(text.find("linear") != std::string::npos);
    CHECK(text.find("end_to_end") != std::string::npos);
    CHECK(text.find("pass") != std::string::npos);
}

TEST_CASE("synth rerun with the same seed is byte-identical") {
    const fs::path wa = temp_dir("mafr_cli_det_a");
    const fs::path wb = temp_dir("mafr_cli_det_b");
    for (const fs::path& w : {wa, wb}) {
        save_run_config(tiny_config(), w / "cfg.json");
        REQUIRE(run_cli({"--workdir", w.string(), "--config", "cfg.json", "--seed", "5",
                         "synth"}) == 0);
    }
    size_t compared = 0;
    for (const auto& entry : fs::recursive_directory_iterator(wa / "data")) {
        if (!entry.is_regular_file()) continue;
        const fs::path rel = fs::relative(entry.path(), wa);
        std::ifstream fa(entry.path(), std::ios::binary);
        std::ifstream fb(wb / rel, std::ios::binary);
        REQUIRE(fb.good());
        const std::string ba((std::istreambuf_iterator<char>(fa)),
                             std::istreambuf_iterator<char>());
        const std::string bb((std::istreambuf_iterator<char>(fb)),
                             std::istreambuf_iterator<char>());
        CHECK(ba == bb);
        ++compared;
    }
    CHECK(compared > 10);
}
