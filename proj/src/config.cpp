#include "mafr/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include <json.hpp>

#include "mafr/anomaly.hpp"
#include "mafr/errors.hpp"
#include "mafr/rng.hpp"

namespace mafr {

namespace {

using json = nlohmann::ordered_json;

void reject_unknown(const json& j, const std::set<std::string>& allowed, const char* where) {
    if (!j.is_object()) throw FormatError(std::string(where) + " must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw FormatError("unknown key '" + key + "' in " + where);
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

json to_json(const RunConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["threads"] = c.threads;
    j["synth"] = {{"height", c.synth.height},
                  {"width", c.synth.width},
                  {"d_2d", c.synth.d_2d},
                  {"d_3d", c.synth.d_3d},
                  {"structure_rank", c.synth.structure_rank},
                  {"noise_sigma", c.synth.noise_sigma},
                  {"anomaly_shape", c.synth.anomaly_shape},
                  {"anomaly_area_fraction", c.synth.anomaly_area_fraction},
                  {"anomaly_magnitude", c.synth.anomaly_magnitude},
                  {"train_count", c.synth.train_count},
                  {"test_normal_count", c.synth.test_normal_count},
                  {"test_anomalous_count", c.synth.test_anomalous_count}};
    j["model"] = {{"fused_dim", c.model.fused_dim},
                  {"dropout", c.model.dropout},
                  {"cbam_reduction", c.model.cbam_reduction},
                  {"cbam_spatial_kernel", c.model.cbam_spatial_kernel},
                  {"skip_connections", c.model.skip_connections}};
    j["train"] = {{"epochs", c.train.epochs},
                  {"learning_rate", c.train.learning_rate},
                  {"beta1", c.train.beta1},
                  {"beta2", c.train.beta2},
                  {"adam_epsilon", c.train.adam_epsilon},
                  {"batch_size", c.train.batch_size},
                  {"lambda_sim", c.train.lambda_sim},
                  {"lambda_smooth", c.train.lambda_smooth},
                  {"lambda_census", c.train.lambda_census},
                  {"loss_epsilon", c.train.loss_epsilon},
                  {"census_kernel", c.train.census_kernel},
                  {"shots", c.train.shots},
                  {"checkpoint_every", c.train.checkpoint_every}};
    j["infer"] = {{"strategy", c.infer.strategy},
                  {"sigma", c.infer.sigma},
                  {"save_heatmaps", c.infer.save_heatmaps}};
    j["eval"] = {{"fpr_limits", c.eval.fpr_limits}};
    j["gradcheck"] = {{"trials", c.gradcheck.trials}};
    j["paths"] = {{"data_dir", c.paths.data_dir},
                  {"model_dir", c.paths.model_dir},
                  {"output_dir", c.paths.output_dir}};
    return j;
}

RunConfig from_json(const json& j) {
    RunConfig c;
    reject_unknown(j, {"seed", "threads", "synth", "model", "train", "infer", "eval", "gradcheck",
                       "paths"},
                   "config");
    get(j, "seed", c.seed);
    get(j, "threads", c.threads);
    if (j.contains("synth")) {
        const json& s = j.at("synth");
        reject_unknown(s,
                       {"height", "width", "d_2d", "d_3d", "structure_rank", "noise_sigma",
                        "anomaly_shape", "anomaly_area_fraction", "anomaly_magnitude",
                        "train_count", "test_normal_count", "test_anomalous_count"},
                       "config.synth");
        get(s, "height", c.synth.height);
        get(s, "width", c.synth.width);
        get(s, "d_2d", c.synth.d_2d);
        get(s, "d_3d", c.synth.d_3d);
        get(s, "structure_rank", c.synth.structure_rank);
        get(s, "noise_sigma", c.synth.noise_sigma);
        get(s, "anomaly_shape", c.synth.anomaly_shape);
        get(s, "anomaly_area_fraction", c.synth.anomaly_area_fraction);
        get(s, "anomaly_magnitude", c.synth.anomaly_magnitude);
        get(s, "train_count", c.synth.train_count);
        get(s, "test_normal_count", c.synth.test_normal_count);
        get(s, "test_anomalous_count", c.synth.test_anomalous_count);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m,
                       {"fused_dim", "dropout", "cbam_reduction", "cbam_spatial_kernel",
                        "skip_connections"},
                       "config.model");
        get(m, "fused_dim", c.model.fused_dim);
        get(m, "dropout", c.model.dropout);
        get(m, "cbam_reduction", c.model.cbam_reduction);
        get(m, "cbam_spatial_kernel", c.model.cbam_spatial_kernel);
        get(m, "skip_connections", c.model.skip_connections);
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"epochs", "learning_rate", "beta1", "beta2", "adam_epsilon", "batch_size",
                        "lambda_sim", "lambda_smooth", "lambda_census", "loss_epsilon",
                        "census_kernel", "shots", "checkpoint_every"},
                       "config.train");
        get(t, "epochs", c.train.epochs);
        get(t, "learning_rate", c.train.learning_rate);
        get(t, "beta1", c.train.beta1);
        get(t, "beta2", c.train.beta2);
        get(t, "adam_epsilon", c.train.adam_epsilon);
        get(t, "batch_size", c.train.batch_size);
        get(t, "lambda_sim", c.train.lambda_sim);
        get(t, "lambda_smooth", c.train.lambda_smooth);
        get(t, "lambda_census", c.train.lambda_census);
        get(t, "loss_epsilon", c.train.loss_epsilon);
        get(t, "census_kernel", c.train.census_kernel);
        get(t, "shots", c.train.shots);
        get(t, "checkpoint_every", c.train.checkpoint_every);
    }
    if (j.contains("infer")) {
        const json& i = j.at("infer");
        reject_unknown(i, {"strategy", "sigma", "save_heatmaps"}, "config.infer");
        get(i, "strategy", c.infer.strategy);
        get(i, "sigma", c.infer.sigma);
        get(i, "save_heatmaps", c.infer.save_heatmaps);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown(e, {"fpr_limits"}, "config.eval");
        get(e, "fpr_limits", c.eval.fpr_limits);
    }
    if (j.contains("gradcheck")) {
        const json& g = j.at("gradcheck");
        reject_unknown(g, {"trials"}, "config.gradcheck");
        get(g, "trials", c.gradcheck.trials);
    }
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        reject_unknown(p, {"data_dir", "model_dir", "output_dir"}, "config.paths");
        get(p, "data_dir", c.paths.data_dir);
        get(p, "model_dir", c.paths.model_dir);
        get(p, "output_dir", c.paths.output_dir);
    }
    return c;
}

} // namespace

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path.string());
    try {
        return from_json(json::parse(f));
    } catch (const json::exception& e) {
        throw FormatError("malformed config " + path.string() + ": " + e.what());
    }
}

void save_run_config(const RunConfig& cfg, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot write " + path.string());
    f << to_json(cfg).dump(2) << "\n";
    if (!f) throw FormatError("write failed: " + path.string());
}

std::string run_config_json(const RunConfig& cfg) { return to_json(cfg).dump(); }

void validate(const RunConfig& cfg) {
    if (cfg.threads < 1) throw ConfigError("threads must be at least 1");
    validate(synthetic_spec(cfg)); // range checks on the synth section
    if (cfg.synth.train_count == 0 ||
        cfg.synth.test_normal_count + cfg.synth.test_anomalous_count == 0)
        throw ConfigError("empty dataset");
    fusion_from_string(cfg.infer.strategy);
    if (!(cfg.infer.sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
    if (cfg.eval.fpr_limits.empty()) throw ConfigError("at least one fpr limit required");
    for (double l : cfg.eval.fpr_limits)
        if (!(l > 0.0 && l <= 1.0)) throw ConfigError("fpr limits must lie in (0, 1]");
    if (cfg.gradcheck.trials == 0) throw ConfigError("gradcheck trials must be positive");
    validate(train_config(cfg)); // range checks on the train section
}

uint32_t derive_fused_dim(uint32_t d2, uint32_t d3) {
    if (d2 == 768 && d3 == 1152) return 968;
    return uint32_t(std::llround((double(d2) + double(d3)) / 2.0));
}

SyntheticSpec synthetic_spec(const RunConfig& cfg) {
    SyntheticSpec s;
    s.h = cfg.synth.height;
    s.w = cfg.synth.width;
    s.d_2d = cfg.synth.d_2d;
    s.d_3d = cfg.synth.d_3d;
    s.structure_rank = cfg.synth.structure_rank;
    s.noise_sigma = cfg.synth.noise_sigma;
    if (cfg.synth.anomaly_shape == "blob")
        s.anomaly.shape = AnomalyShape::Blob;
    else if (cfg.synth.anomaly_shape == "rect")
        s.anomaly.shape = AnomalyShape::Rect;
    else
        throw ConfigError("unknown anomaly shape '" + cfg.synth.anomaly_shape + "'");
    s.anomaly.area_fraction = cfg.synth.anomaly_area_fraction;
    s.anomaly.magnitude = cfg.synth.anomaly_magnitude;
    s.seed = derive_seed(cfg.seed, seed_role::kSynthesis);
    return s;
}

ModelArch model_arch(const RunConfig& cfg, uint32_t d2, uint32_t d3) {
    const uint32_t fused =
        cfg.model.fused_dim != 0 ? cfg.model.fused_dim : derive_fused_dim(d2, d3);
    return make_arch(d2, d3, fused, cfg.model.dropout, cfg.model.cbam_reduction,
                     cfg.model.cbam_spatial_kernel, cfg.model.skip_connections);
}

TrainConfig train_config(const RunConfig& cfg) {
    TrainConfig t;
    t.epochs = cfg.train.epochs;
    t.learning_rate = cfg.train.learning_rate;
    t.beta1 = cfg.train.beta1;
    t.beta2 = cfg.train.beta2;
    t.adam_eps = cfg.train.adam_epsilon;
    t.batch_size = cfg.train.batch_size;
    t.weights.lambda_sim = cfg.train.lambda_sim;
    t.weights.lambda_smooth = cfg.train.lambda_smooth;
    t.weights.lambda_census = cfg.train.lambda_census;
    t.weights.epsilon = cfg.train.loss_epsilon;
    t.weights.census_kernel = cfg.train.census_kernel;
    t.seed = cfg.seed;
    if (cfg.train.shots > 0) t.shot_count = cfg.train.shots;
    validate(t);
    return t;
}

} // namespace mafr
