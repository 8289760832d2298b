#include "mafr/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mafr/errors.hpp"
#include "mafr/feature_map.hpp"
#include "mafr/rng.hpp"

namespace mafr {

void validate(const TrainConfig& cfg) {
    if (cfg.learning_rate <= 0.0) throw ConfigError("learning rate must be positive");
    if (cfg.beta1 <= 0.0 || cfg.beta1 >= 1.0 || cfg.beta2 <= 0.0 || cfg.beta2 >= 1.0)
        throw ConfigError("adam betas must lie in (0, 1)");
    if (cfg.adam_eps <= 0.0) throw ConfigError("adam epsilon must be positive");
    if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
    if (cfg.shot_count && *cfg.shot_count == 0) throw ConfigError("shot count must be positive");
}

OptimizerState make_optimizer_state(const ModelParams& params) {
    OptimizerState s;
    s.m = zero_like(params);
    s.v = zero_like(params);
    return s;
}

void adam_step(ModelParams& params, const GradientBundle& grads, OptimizerState& state,
               const TrainConfig& cfg) {
    auto p = tensor_list(params);
    auto g = tensor_list(grads);
    auto m = tensor_list(state.m);
    auto v = tensor_list(state.v);
    if (p.size() != g.size()) throw std::invalid_argument("gradient bundle shape mismatch");

    state.t += 1;
    bool any_nonzero = false;
    for (size_t i = 0; i < g.size(); ++i)
        for (const double gk : g[i].second->v) {
            if (!std::isfinite(gk))
                throw NumericError("non-finite gradient in tensor " + g[i].first);
            any_nonzero |= gk != 0.0;
        }

    const double bc1 = 1.0 - std::pow(cfg.beta1, double(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(state.t));
    for (size_t i = 0; i < p.size(); ++i) {
        Tensor& pt = *p[i].second;
        const Tensor& gt = *g[i].second;
        Tensor& mt = *m[i].second;
        Tensor& vt = *v[i].second;
        if (gt.v.size() != pt.v.size())
            throw std::invalid_argument("gradient tensor shape mismatch at " + p[i].first);
        for (size_t k = 0; k < pt.v.size(); ++k) {
            const double gk = gt.v[k];
            mt.v[k] = cfg.beta1 * mt.v[k] + (1.0 - cfg.beta1) * gk;
            vt.v[k] = cfg.beta2 * vt.v[k] + (1.0 - cfg.beta2) * gk * gk;
            // An all-zero step is a fixed point of the parameters: moments
            // decay as usual but stale momentum must not keep drifting
            // weights that received no signal.
            if (!any_nonzero) continue;
            const double mhat = mt.v[k] / bc1;
            const double vhat = vt.v[k] / bc2;
            pt.v[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
    }
}

DatasetManifest few_shot_subsample(const DatasetManifest& manifest, uint32_t n, uint64_t seed) {
    if (n > manifest.samples.size())
        throw ConfigError("shot count exceeds the available training samples");
    std::vector<size_t> idx(manifest.samples.size());
    std::iota(idx.begin(), idx.end(), size_t(0));
    Rng rng(derive_seed(seed, seed_role::kFewShot));
    // Partial Fisher-Yates: the first n slots hold the drawn subset.
    for (size_t i = 0; i < n; ++i) {
        const size_t j = i + size_t(rng.below(idx.size() - i));
        std::swap(idx[i], idx[j]);
    }
    idx.resize(n);
    std::sort(idx.begin(), idx.end()); // keep the original manifest order

    DatasetManifest out;
    out.split = manifest.split;
    for (size_t i : idx) out.samples.push_back(manifest.samples[i]);
    return out;
}

TrainSample load_train_sample(const SampleEntry& entry, const std::filesystem::path& root) {
    TrainSample s;
    s.id = entry.id;
    const FeatureMap e2d = load_feature_map(root / entry.path_2d);
    const FeatureMap e3d = load_feature_map(root / entry.path_3d);
    if (e2d.h != e3d.h || e2d.w != e3d.w)
        throw FormatError("sample '" + entry.id + "' has spatially misaligned modalities");
    const Densified dense = densify(e3d);
    s.e2d = to_grid(e2d);
    s.e3d = to_grid(dense.map);
    s.valid3d = dense.source_validity;
    return s;
}

void save_train_log(const TrainLog& log, const std::filesystem::path& path) {
    nlohmann::ordered_json j;
    j["seed"] = log.seed;
    j["trained_sample_ids"] = log.trained_sample_ids;
    if (!log.config_snapshot.empty())
        j["config"] = nlohmann::ordered_json::parse(log.config_snapshot);
    j["epochs"] = nlohmann::ordered_json::array();
    for (size_t e = 0; e < log.epochs.size(); ++e) {
        const LossBreakdown& b = log.epochs[e].mean_loss;
        nlohmann::ordered_json je;
        je["epoch"] = e + 1;
        je["total"] = b.total;
        je["sim"] = b.sim;
        je["smooth"] = b.smooth;
        je["census"] = b.census;
        je["sim_2d"] = b.sim_2d;
        je["sim_3d"] = b.sim_3d;
        je["smooth_2d"] = b.smooth_2d;
        je["smooth_3d"] = b.smooth_3d;
        je["census_2d"] = b.census_2d;
        je["census_3d"] = b.census_3d;
        je["wall_seconds"] = log.epochs[e].wall_seconds;
        j["epochs"].push_back(std::move(je));
    }
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw FormatError("cannot write train log: " + path.string());
    f << j.dump(2) << "\n";
    if (!f) throw FormatError("train log write failed: " + path.string());
}

FitResult fit(const std::vector<TrainSample>& samples, const ModelArch& arch,
              const TrainConfig& cfg,
              const std::function<void(uint32_t, const ModelParams&)>& checkpoint_cb) {
    validate(cfg);
    if (samples.empty()) throw ConfigError("training requires at least one sample");
    for (const TrainSample& s : samples) {
        if (s.e2d.c != arch.d2 || s.e3d.c != arch.d3)
            throw FormatError("sample '" + s.id + "' does not match the model dims");
    }

    FitResult res;
    res.params = init_params(arch, cfg.seed);
    res.log.seed = cfg.seed;
    for (const TrainSample& s : samples) res.log.trained_sample_ids.push_back(s.id);

    OptimizerState state = make_optimizer_state(res.params);
    Rng shuffle_rng(derive_seed(cfg.seed, seed_role::kShuffle));
    Rng dropout_rng(derive_seed(cfg.seed, seed_role::kDropout));

    std::vector<size_t> order(samples.size());
    std::iota(order.begin(), order.end(), size_t(0));

    for (uint32_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(shuffle_rng.below(i))]);

        LossBreakdown sum;
        for (size_t oi = 0; oi < order.size(); ++oi) {
            const TrainSample& s = samples[order[oi]];
            ForwardCache cache;
            ForwardOptions opts{RunMode::Train, false};
            const ForwardResult out =
                forward(res.params, s.e2d, s.e3d, opts, &dropout_rng, &cache);
            const LossBreakdown b =
                total_loss(s.e2d, out.e2d_hat, s.e3d, out.e3d_hat, cfg.weights, s.valid3d);
            if (!std::isfinite(b.total))
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   ", sample '" + s.id + "'");
            sum.total += b.total;
            sum.sim += b.sim;
            sum.smooth += b.smooth;
            sum.census += b.census;
            sum.sim_2d += b.sim_2d;
            sum.sim_3d += b.sim_3d;
            sum.smooth_2d += b.smooth_2d;
            sum.smooth_3d += b.smooth_3d;
            sum.census_2d += b.census_2d;
            sum.census_3d += b.census_3d;

            const LossGrads lg =
                loss_gradients(s.e2d, out.e2d_hat, s.e3d, out.e3d_hat, cfg.weights, s.valid3d);
            const GradientBundle grads =
                backward(res.params, cache, lg.d_e2d_hat, lg.d_e3d_hat);
            adam_step(res.params, grads, state, cfg);
        }
        const double inv = 1.0 / double(samples.size());
        EpochStats es;
        es.mean_loss = sum;
        es.mean_loss.total *= inv;
        es.mean_loss.sim *= inv;
        es.mean_loss.smooth *= inv;
        es.mean_loss.census *= inv;
        es.mean_loss.sim_2d *= inv;
        es.mean_loss.sim_3d *= inv;
        es.mean_loss.smooth_2d *= inv;
        es.mean_loss.smooth_3d *= inv;
        es.mean_loss.census_2d *= inv;
        es.mean_loss.census_3d *= inv;
        es.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        res.log.epochs.push_back(es);
        if (checkpoint_cb) checkpoint_cb(epoch, res.params);
    }
    return res;
}

FitResult fit_manifest(const DatasetManifest& manifest, const std::filesystem::path& data_root,
                       const ModelArch& arch, const TrainConfig& cfg,
                       const std::function<void(uint32_t, const ModelParams&)>& checkpoint_cb) {
    validate(manifest);
    if (manifest.split != Split::Train)
        throw ConfigError("fit expects the Train split");
    DatasetManifest selected = manifest;
    if (cfg.shot_count) selected = few_shot_subsample(manifest, *cfg.shot_count, cfg.seed);

    std::vector<TrainSample> samples;
    samples.reserve(selected.samples.size());
    for (const SampleEntry& e : selected.samples) samples.push_back(load_train_sample(e, data_root));
    return fit(samples, arch, cfg, checkpoint_cb);
}

} // namespace mafr
