#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mafr/feature_map.hpp"
#include "mafr/grid.hpp"
#include "mafr/rng.hpp"

namespace mafr {

// Row-major out x in weight matrix; vectors use cols == 1.
struct Tensor {
    size_t rows = 0, cols = 1;
    std::vector<double> v;

    Tensor() = default;
    Tensor(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), v(r * c, fill) {}

    size_t size() const { return v.size(); }
    double& at(size_t r, size_t c) { return v[r * cols + c]; }
    double at(size_t r, size_t c) const { return v[r * cols + c]; }
    double* row(size_t r) { return v.data() + r * cols; }
    const double* row(size_t r) const { return v.data() + r * cols; }
};

struct ModelArch {
    uint32_t d2 = 768, d3 = 1152, fused = 968;
    // Layer input/output sizes, first = stack input, last = stack output.
    std::vector<uint32_t> encoder_widths;
    std::vector<uint32_t> decoder2d_widths;
    std::vector<uint32_t> decoder3d_widths;
    double dropout_p = 0.1;
    uint32_t cbam_reduction = 16;
    uint32_t cbam_spatial_kernel = 7;
    bool skip_connection = true;
};

// Width schedules are pinned for the stock 768/1152/968 configuration; any
// other shape gets a rounded linear ramp between the endpoints. Three linear
// layers per stack either way.
ModelArch make_arch(uint32_t d2, uint32_t d3, uint32_t fused, double dropout_p = 0.1,
                    uint32_t cbam_reduction = 16, uint32_t cbam_kernel = 7, bool skip = true);

// Position-wise stack: linear -> GELU -> layer-norm -> dropout per
// intermediate layer, final layer linear only.
struct StackParams {
    std::vector<Tensor> w;     // per layer, out x in
    std::vector<Tensor> b;     // per layer, length out
    std::vector<Tensor> gamma; // per intermediate layer (layer-norm scale)
    std::vector<Tensor> beta;  // per intermediate layer (layer-norm shift)
};

struct CbamParams {
    Tensor mlp1; // Cr x C, shared by the avg- and max-pooled paths
    Tensor mlp2; // C x Cr
    Tensor conv; // (k*k) x 2 spatial kernel over [channel-mean, channel-max]
};

struct DecoderParams {
    StackParams stack;
    Tensor skip_w; // modality_dim x fused; empty when skip_connection off
    Tensor skip_b;
    CbamParams cbam;
};

struct ModelParams {
    ModelArch arch;
    uint64_t init_seed = 0;
    StackParams encoder;
    DecoderParams dec2d, dec3d;
};

// Gradients share the exact tensor layout of the parameters.
using GradientBundle = ModelParams;

ModelParams zero_like(const ModelParams& p);

// Weights uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)], biases zero,
// layer-norm scale 1 / shift 0. Deterministic in seed.
ModelParams init_params(const ModelArch& arch, uint64_t seed);
ModelParams init_params(uint32_t d2, uint32_t d3, uint32_t fused, uint64_t seed);

// Stable name -> tensor enumeration used by the optimizer, checkpoints, and
// gradient checks. Order is fixed; empty tensors (disabled skip) are skipped.
std::vector<std::pair<std::string, Tensor*>> tensor_list(ModelParams& p);
std::vector<std::pair<std::string, const Tensor*>> tensor_list(const ModelParams& p);

enum class RunMode { Train, Eval };

struct ForwardOptions {
    RunMode mode = RunMode::Eval;
    // Test hook: pins both CBAM gates to exactly 1 so the decoder output
    // equals the pre-attention map.
    bool force_open_gates = false;
};

struct StackCache {
    std::vector<Grid> x;                       // input to each linear layer
    std::vector<Grid> z;                       // intermediate pre-activations
    std::vector<Grid> xhat;                    // layer-norm normalized values
    std::vector<std::vector<double>> inv_std;  // per pixel, per intermediate layer
    std::vector<std::vector<uint8_t>> drop_mask;
    double dropout_p = 0.0; // effective (0 in eval mode)
};

struct CbamCache {
    Grid x;                        // input map (pre-attention)
    std::vector<double> avg, mx;   // global channel pools
    std::vector<size_t> mx_arg;    // first-argmax pixel per channel
    std::vector<double> za, zm;    // pre-ReLU hidden, avg / max path
    std::vector<double> s, gc;     // pre-sigmoid and channel gates
    Grid x1;                       // after channel gating
    std::vector<double> mu, chmax; // per-pixel channel mean / max
    std::vector<uint32_t> chmax_arg;
    std::vector<double> q, gs;     // pre-sigmoid and spatial gates
    bool gates_forced = false;
};

struct DecoderCache {
    StackCache stack;
    CbamCache cbam; // cbam.x is the post-skip sum
};

struct ForwardCache {
    StackCache enc;
    Grid fused;
    DecoderCache dec2d, dec3d;
};

Grid stack_forward(const StackParams& p, const Grid& in, double dropout_p, RunMode mode,
                   Rng* rng, StackCache* cache);
// Returns the gradient w.r.t. the stack input; accumulates into grads.
Grid stack_backward(const StackParams& p, const StackCache& cache, const Grid& dout,
                    StackParams& grads);

Grid cbam_forward(const CbamParams& p, const Grid& x, uint32_t kernel, bool force_open,
                  CbamCache* cache);
Grid cbam_backward(const CbamParams& p, const CbamCache& cache, uint32_t kernel,
                   const Grid& dy, CbamParams& grads);

// The two CBAM halves, exposed so each attention path can be gradient-checked
// in isolation. cbam_forward composes channel then spatial.
Grid cbam_channel_forward(const CbamParams& p, const Grid& x, CbamCache& cache);
Grid cbam_channel_backward(const CbamParams& p, const CbamCache& cache, const Grid& dx1,
                           CbamParams& grads);
Grid cbam_spatial_forward(const CbamParams& p, const Grid& x1, uint32_t kernel,
                          CbamCache& cache);
Grid cbam_spatial_backward(const CbamParams& p, const CbamCache& cache, uint32_t kernel,
                           const Grid& dy, CbamParams& grads);

// Per-feature-vector layer normalization, exposed for isolated checking; the
// stack uses these row primitives internally.
void layer_norm_row(const double* x, size_t d, const double* gamma, const double* beta,
                    double* y, double* xhat, double* inv_std);
void layer_norm_row_backward(const double* dy, size_t d, const double* gamma,
                             const double* xhat, double inv_std, double* dx,
                             double* dgamma_acc, double* dbeta_acc);

// Per-pixel concat of both modalities pushed through the encoder stack.
Grid encode(const ModelParams& p, const Grid& e2d, const Grid& e3d, const ForwardOptions& o,
            Rng* rng, StackCache* cache = nullptr);
// Decoder stack plus linear skip from the fused input, refined by CBAM.
Grid decode(const ModelParams& p, const Grid& fused, Modality mod, const ForwardOptions& o,
            Rng* rng, DecoderCache* cache = nullptr);

struct ForwardResult {
    Grid e2d_hat, e3d_hat;
};

ForwardResult forward(const ModelParams& p, const Grid& e2d, const Grid& e3d,
                      const ForwardOptions& o, Rng* rng, ForwardCache* cache = nullptr);

// Exact analytic parameter gradients given d(loss)/d(reconstructions);
// dropout masks are replayed from the cache.
GradientBundle backward(const ModelParams& p, const ForwardCache& cache, const Grid& d_e2d_hat,
                        const Grid& d_e3d_hat);

// Checkpoint directory: index.json describing the architecture plus one
// feature-map container per tensor under tensors/.
void save_checkpoint(const ModelParams& p, const std::filesystem::path& dir);
ModelParams load_checkpoint(const std::filesystem::path& dir);

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }
inline double gelu_grad(double x) {
    return 0.5 * (1.0 + std::erf(x * 0.7071067811865476)) +
           x * std::exp(-0.5 * x * x) * 0.3989422804014327;
}
inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

} // namespace mafr
