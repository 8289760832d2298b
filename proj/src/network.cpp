#include "mafr/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "mafr/errors.hpp"

namespace mafr {

namespace {

using json = nlohmann::ordered_json;

constexpr double kLnEps = 1e-5;

std::vector<uint32_t> ramp(uint32_t from, uint32_t to) {
    auto mid = [&](int step) {
        const double v = from + (double(to) - double(from)) * step / 3.0;
        return uint32_t(std::max<long>(1, std::llround(v)));
    };
    return {from, mid(1), mid(2), to};
}

StackParams make_stack(const std::vector<uint32_t>& widths) {
    StackParams s;
    const size_t layers = widths.size() - 1;
    for (size_t l = 0; l < layers; ++l) {
        s.w.emplace_back(widths[l + 1], widths[l]);
        s.b.emplace_back(widths[l + 1], 1);
    }
    for (size_t l = 0; l + 1 < layers; ++l) {
        s.gamma.emplace_back(widths[l + 1], 1, 1.0);
        s.beta.emplace_back(widths[l + 1], 1, 0.0);
    }
    return s;
}

CbamParams make_cbam(uint32_t channels, uint32_t reduction, uint32_t kernel) {
    const uint32_t cr = std::max<uint32_t>(1, channels / reduction);
    CbamParams c;
    c.mlp1 = Tensor(cr, channels);
    c.mlp2 = Tensor(channels, cr);
    c.conv = Tensor(size_t(kernel) * kernel, 2);
    return c;
}

template <typename SP, typename F>
void walk_stack(SP& s, const std::string& prefix, F&& f) {
    for (size_t l = 0; l < s.w.size(); ++l) {
        f(prefix + ".fc" + std::to_string(l) + ".w", s.w[l]);
        f(prefix + ".fc" + std::to_string(l) + ".b", s.b[l]);
    }
    for (size_t l = 0; l < s.gamma.size(); ++l) {
        f(prefix + ".ln" + std::to_string(l) + ".g", s.gamma[l]);
        f(prefix + ".ln" + std::to_string(l) + ".b", s.beta[l]);
    }
}

template <typename DP, typename F>
void walk_decoder(DP& d, const std::string& prefix, F&& f) {
    walk_stack(d.stack, prefix, f);
    if (d.skip_w.size()) {
        f(prefix + ".skip.w", d.skip_w);
        f(prefix + ".skip.b", d.skip_b);
    }
    f(prefix + ".cbam.mlp1.w", d.cbam.mlp1);
    f(prefix + ".cbam.mlp2.w", d.cbam.mlp2);
    f(prefix + ".cbam.conv.w", d.cbam.conv);
}

template <typename MP, typename F>
void walk_model(MP& p, F&& f) {
    walk_stack(p.encoder, "enc", f);
    walk_decoder(p.dec2d, "dec2d", f);
    walk_decoder(p.dec3d, "dec3d", f);
}

void check_widths(const std::vector<uint32_t>& w, const char* what) {
    if (w.size() < 2) throw ConfigError(std::string(what) + " needs at least two widths");
    for (uint32_t x : w)
        if (x == 0) throw ConfigError(std::string(what) + " contains a zero width");
}

} // namespace

ModelArch make_arch(uint32_t d2, uint32_t d3, uint32_t fused, double dropout_p,
                    uint32_t cbam_reduction, uint32_t cbam_kernel, bool skip) {
    if (d2 == 0 || d3 == 0 || fused == 0) throw ConfigError("model dims must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    if (cbam_reduction == 0) throw ConfigError("cbam reduction must be positive");
    if (cbam_kernel % 2 == 0) throw ConfigError("cbam spatial kernel must be odd");

    ModelArch a;
    a.d2 = d2;
    a.d3 = d3;
    a.fused = fused;
    a.dropout_p = dropout_p;
    a.cbam_reduction = cbam_reduction;
    a.cbam_spatial_kernel = cbam_kernel;
    a.skip_connection = skip;
    if (d2 == 768 && d3 == 1152 && fused == 968) {
        a.encoder_widths = {1920, 1536, 1152, 968};
        a.decoder2d_widths = {968, 904, 840, 768};
        a.decoder3d_widths = {968, 1032, 1096, 1152};
    } else {
        a.encoder_widths = ramp(d2 + d3, fused);
        a.decoder2d_widths = ramp(fused, d2);
        a.decoder3d_widths = ramp(fused, d3);
    }
    return a;
}

ModelParams zero_like(const ModelParams& p) {
    ModelParams z = p;
    for (auto& [name, t] : tensor_list(z)) std::fill(t->v.begin(), t->v.end(), 0.0);
    return z;
}

ModelParams init_params(const ModelArch& arch, uint64_t seed) {
    check_widths(arch.encoder_widths, "encoder widths");
    check_widths(arch.decoder2d_widths, "decoder2d widths");
    check_widths(arch.decoder3d_widths, "decoder3d widths");
    if (arch.encoder_widths.front() != arch.d2 + arch.d3)
        throw ConfigError("encoder input width must equal d2 + d3");
    if (arch.encoder_widths.back() != arch.fused)
        throw ConfigError("encoder output width must equal the fused dim");
    if (arch.decoder2d_widths.front() != arch.fused || arch.decoder3d_widths.front() != arch.fused)
        throw ConfigError("decoder input width must equal the fused dim");
    if (arch.decoder2d_widths.back() != arch.d2 || arch.decoder3d_widths.back() != arch.d3)
        throw ConfigError("decoder output width must equal its modality dim");

    ModelParams p;
    p.arch = arch;
    p.init_seed = seed;
    p.encoder = make_stack(arch.encoder_widths);

    auto make_decoder = [&](const std::vector<uint32_t>& widths) {
        DecoderParams d;
        d.stack = make_stack(widths);
        if (arch.skip_connection) {
            d.skip_w = Tensor(widths.back(), arch.fused);
            d.skip_b = Tensor(widths.back(), 1);
        }
        d.cbam = make_cbam(widths.back(), arch.cbam_reduction, arch.cbam_spatial_kernel);
        return d;
    };
    p.dec2d = make_decoder(arch.decoder2d_widths);
    p.dec3d = make_decoder(arch.decoder3d_widths);

    Rng rng(derive_seed(seed, seed_role::kInit));
    for (auto& [name, t] : tensor_list(p)) {
        if (!name.ends_with(".w")) continue; // biases and layer-norm affines keep their init
        // The spatial conv reads its full k*k*2 receptive field per output.
        const size_t fan_in = name.ends_with(".conv.w") ? t->rows * t->cols : t->cols;
        const double bound = std::sqrt(1.0 / double(fan_in));
        for (double& x : t->v) x = rng.uniform(-bound, bound);
    }
    return p;
}

ModelParams init_params(uint32_t d2, uint32_t d3, uint32_t fused, uint64_t seed) {
    return init_params(make_arch(d2, d3, fused), seed);
}

std::vector<std::pair<std::string, Tensor*>> tensor_list(ModelParams& p) {
    std::vector<std::pair<std::string, Tensor*>> out;
    walk_model(p, [&](const std::string& name, Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> tensor_list(const ModelParams& p) {
    std::vector<std::pair<std::string, const Tensor*>> out;
    walk_model(p, [&](const std::string& name, const Tensor& t) { out.emplace_back(name, &t); });
    return out;
}

// --- Position-wise stack -----------------------------------------------------

namespace {

Grid linear_forward(const Tensor& w, const Tensor& b, const Grid& in) {
    Grid out(in.h, in.w, w.rows);
    for (size_t n = 0; n < in.pixels(); ++n) {
        const double* x = in.pix(n);
        double* y = out.pix(n);
        for (size_t o = 0; o < w.rows; ++o) {
            const double* wr = w.row(o);
            double acc = b.v[o];
            for (size_t i = 0; i < w.cols; ++i) acc += wr[i] * x[i];
            y[o] = acc;
        }
    }
    return out;
}

// dx = W^T d; accumulates dw += d (x)  and db += d.
Grid linear_backward(const Tensor& w, const Grid& x, const Grid& d, Tensor& dw, Tensor& db) {
    Grid dx(x.h, x.w, w.cols);
    for (size_t n = 0; n < x.pixels(); ++n) {
        const double* xp = x.pix(n);
        const double* dp = d.pix(n);
        double* dxp = dx.pix(n);
        for (size_t o = 0; o < w.rows; ++o) {
            const double g = dp[o];
            if (g == 0.0) continue;
            const double* wr = w.row(o);
            double* dwr = dw.row(o);
            for (size_t i = 0; i < w.cols; ++i) {
                dwr[i] += g * xp[i];
                dxp[i] += g * wr[i];
            }
            db.v[o] += g;
        }
    }
    return dx;
}

} // namespace

void layer_norm_row(const double* x, size_t d, const double* gamma, const double* beta,
                    double* y, double* xhat, double* inv_std) {
    double mean = 0.0;
    for (size_t k = 0; k < d; ++k) mean += x[k];
    mean /= double(d);
    double var = 0.0;
    for (size_t k = 0; k < d; ++k) {
        const double c = x[k] - mean;
        var += c * c;
    }
    var /= double(d);
    const double is = 1.0 / std::sqrt(var + kLnEps);
    *inv_std = is;
    for (size_t k = 0; k < d; ++k) {
        xhat[k] = (x[k] - mean) * is;
        y[k] = gamma[k] * xhat[k] + beta[k];
    }
}

void layer_norm_row_backward(const double* dy, size_t d, const double* gamma,
                             const double* xhat, double inv_std, double* dx,
                             double* dgamma_acc, double* dbeta_acc) {
    double sum_dxhat = 0.0, sum_dxhat_x = 0.0;
    for (size_t k = 0; k < d; ++k) {
        dgamma_acc[k] += dy[k] * xhat[k];
        dbeta_acc[k] += dy[k];
        const double dxh = dy[k] * gamma[k];
        dx[k] = dxh; // safe when dx aliases dy
        sum_dxhat += dxh;
        sum_dxhat_x += dxh * xhat[k];
    }
    const double m1 = sum_dxhat / double(d);
    const double m2 = sum_dxhat_x / double(d);
    for (size_t k = 0; k < d; ++k) dx[k] = inv_std * (dx[k] - m1 - xhat[k] * m2);
}

Grid stack_forward(const StackParams& p, const Grid& in, double dropout_p, RunMode mode,
                   Rng* rng, StackCache* cache) {
    const size_t layers = p.w.size();
    if (in.c != p.w[0].cols) throw FormatError("stack input channel mismatch");
    const bool drop = mode == RunMode::Train && dropout_p > 0.0;
    if (drop && !rng) throw std::invalid_argument("training-mode dropout needs an rng");

    if (cache) {
        cache->x.clear();
        cache->z.clear();
        cache->xhat.clear();
        cache->inv_std.clear();
        cache->drop_mask.clear();
        cache->dropout_p = drop ? dropout_p : 0.0;
    }

    Grid cur = in;
    for (size_t l = 0; l < layers; ++l) {
        if (cache) cache->x.push_back(cur);
        Grid z = linear_forward(p.w[l], p.b[l], cur);
        if (l + 1 == layers) {
            cur = std::move(z);
            break;
        }
        const size_t c = z.c;
        Grid y(z.h, z.w, c);
        Grid xhat(z.h, z.w, c);
        std::vector<double> inv_std(z.pixels());
        const double* gamma = p.gamma[l].v.data();
        const double* beta = p.beta[l].v.data();
        for (size_t n = 0; n < z.pixels(); ++n) {
            const double* zp = z.pix(n);
            double* yp = y.pix(n);
            for (size_t k = 0; k < c; ++k) yp[k] = gelu(zp[k]);
            layer_norm_row(yp, c, gamma, beta, yp, xhat.pix(n), &inv_std[n]);
        }
        std::vector<uint8_t> mask;
        if (drop) {
            mask.resize(y.size());
            const double keep = 1.0 - dropout_p;
            for (size_t i = 0; i < y.size(); ++i) {
                mask[i] = rng->uniform() >= dropout_p ? 1 : 0;
                y.v[i] = mask[i] ? y.v[i] / keep : 0.0;
            }
        }
        if (cache) {
            cache->z.push_back(std::move(z));
            cache->xhat.push_back(std::move(xhat));
            cache->inv_std.push_back(std::move(inv_std));
            cache->drop_mask.push_back(std::move(mask));
        }
        cur = std::move(y);
    }
    return cur;
}

Grid stack_backward(const StackParams& p, const StackCache& cache, const Grid& dout,
                    StackParams& grads) {
    const size_t layers = p.w.size();
    Grid d = dout;
    for (size_t li = layers; li-- > 0;) {
        if (li + 1 < layers) {
            // Undo dropout, layer-norm, GELU in reverse order.
            if (cache.dropout_p > 0.0) {
                const double keep = 1.0 - cache.dropout_p;
                const std::vector<uint8_t>& mask = cache.drop_mask[li];
                for (size_t i = 0; i < d.size(); ++i)
                    d.v[i] = mask[i] ? d.v[i] / keep : 0.0;
            }
            const Grid& xhat = cache.xhat[li];
            const std::vector<double>& inv_std = cache.inv_std[li];
            const double* gamma = p.gamma[li].v.data();
            double* dgamma = grads.gamma[li].v.data();
            double* dbeta = grads.beta[li].v.data();
            for (size_t n = 0; n < d.pixels(); ++n)
                layer_norm_row_backward(d.pix(n), d.c, gamma, xhat.pix(n), inv_std[n], d.pix(n),
                                        dgamma, dbeta);
            const Grid& z = cache.z[li];
            for (size_t i = 0; i < d.size(); ++i) d.v[i] *= gelu_grad(z.v[i]);
        }
        d = linear_backward(p.w[li], cache.x[li], d, grads.w[li], grads.b[li]);
    }
    return d;
}

// --- CBAM --------------------------------------------------------------------

namespace {

std::vector<double> matvec(const Tensor& m, const std::vector<double>& x) {
    std::vector<double> y(m.rows, 0.0);
    for (size_t r = 0; r < m.rows; ++r) {
        const double* row = m.row(r);
        double acc = 0.0;
        for (size_t c = 0; c < m.cols; ++c) acc += row[c] * x[c];
        y[r] = acc;
    }
    return y;
}

std::vector<double> matvec_t(const Tensor& m, const std::vector<double>& x) {
    std::vector<double> y(m.cols, 0.0);
    for (size_t r = 0; r < m.rows; ++r) {
        const double* row = m.row(r);
        for (size_t c = 0; c < m.cols; ++c) y[c] += row[c] * x[r];
    }
    return y;
}

void outer_acc(Tensor& m, const std::vector<double>& a, const std::vector<double>& b) {
    for (size_t r = 0; r < m.rows; ++r) {
        double* row = m.row(r);
        for (size_t c = 0; c < m.cols; ++c) row[c] += a[r] * b[c];
    }
}

} // namespace

Grid cbam_channel_forward(const CbamParams& p, const Grid& x, CbamCache& cc) {
    const size_t c = x.c, npix = x.pixels();
    if (p.mlp1.cols != c) throw FormatError("cbam channel mismatch");
    cc.x = x;

    // Channel attention from global average- and max-pooled descriptors.
    cc.avg.assign(c, 0.0);
    cc.mx.assign(c, -std::numeric_limits<double>::infinity());
    cc.mx_arg.assign(c, 0);
    for (size_t n = 0; n < npix; ++n) {
        const double* xp = x.pix(n);
        for (size_t k = 0; k < c; ++k) {
            cc.avg[k] += xp[k];
            if (xp[k] > cc.mx[k]) {
                cc.mx[k] = xp[k];
                cc.mx_arg[k] = n;
            }
        }
    }
    for (size_t k = 0; k < c; ++k) cc.avg[k] /= double(npix);

    cc.za = matvec(p.mlp1, cc.avg);
    cc.zm = matvec(p.mlp1, cc.mx);
    std::vector<double> ha = cc.za, hm = cc.zm;
    for (double& v : ha) v = std::max(0.0, v);
    for (double& v : hm) v = std::max(0.0, v);
    const std::vector<double> sa = matvec(p.mlp2, ha);
    const std::vector<double> sm = matvec(p.mlp2, hm);
    cc.s.resize(c);
    cc.gc.resize(c);
    for (size_t k = 0; k < c; ++k) {
        cc.s[k] = sa[k] + sm[k];
        cc.gc[k] = sigmoid(cc.s[k]);
    }

    Grid x1(x.h, x.w, c);
    for (size_t n = 0; n < npix; ++n) {
        const double* xp = x.pix(n);
        double* x1p = x1.pix(n);
        for (size_t k = 0; k < c; ++k) x1p[k] = xp[k] * cc.gc[k];
    }
    return x1;
}

Grid cbam_spatial_forward(const CbamParams& p, const Grid& x1, uint32_t kernel, CbamCache& cc) {
    const size_t c = x1.c, npix = x1.pixels();
    const long h = long(x1.h), w = long(x1.w), half = long(kernel) / 2;
    cc.x1 = x1;

    // Spatial attention over [channel-mean, channel-max], replicate padding.
    cc.mu.assign(npix, 0.0);
    cc.chmax.assign(npix, 0.0);
    cc.chmax_arg.assign(npix, 0);
    for (size_t n = 0; n < npix; ++n) {
        const double* x1p = cc.x1.pix(n);
        double mean = 0.0, best = x1p[0];
        uint32_t arg = 0;
        for (size_t k = 0; k < c; ++k) {
            mean += x1p[k];
            if (x1p[k] > best) {
                best = x1p[k];
                arg = uint32_t(k);
            }
        }
        cc.mu[n] = mean / double(c);
        cc.chmax[n] = best;
        cc.chmax_arg[n] = arg;
    }

    cc.q.assign(npix, 0.0);
    cc.gs.resize(npix);
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            double acc = 0.0;
            for (long u = -half; u <= half; ++u) {
                const long ci = std::clamp(i + u, 0l, h - 1);
                for (long v = -half; v <= half; ++v) {
                    const long cj = std::clamp(j + v, 0l, w - 1);
                    const size_t tap = size_t(u + half) * kernel + size_t(v + half);
                    const size_t src = size_t(ci) * w + cj;
                    acc += p.conv.at(tap, 0) * cc.mu[src] + p.conv.at(tap, 1) * cc.chmax[src];
                }
            }
            const size_t n = size_t(i) * w + j;
            cc.q[n] = acc;
            cc.gs[n] = sigmoid(acc);
        }

    Grid y(x1.h, x1.w, c);
    for (size_t n = 0; n < npix; ++n) {
        const double* x1p = cc.x1.pix(n);
        double* yp = y.pix(n);
        for (size_t k = 0; k < c; ++k) yp[k] = x1p[k] * cc.gs[n];
    }
    return y;
}

Grid cbam_forward(const CbamParams& p, const Grid& x, uint32_t kernel, bool force_open,
                  CbamCache* cache) {
    CbamCache local;
    CbamCache& cc = cache ? *cache : local;
    cc.gates_forced = force_open;
    if (force_open) {
        if (p.mlp1.cols != x.c) throw FormatError("cbam channel mismatch");
        cc.x = x;
        cc.x1 = x;
        return x;
    }
    const Grid x1 = cbam_channel_forward(p, x, cc);
    return cbam_spatial_forward(p, x1, kernel, cc);
}

Grid cbam_spatial_backward(const CbamParams& p, const CbamCache& cc, uint32_t kernel,
                           const Grid& dy, CbamParams& grads) {
    const size_t c = cc.x1.c, npix = cc.x1.pixels();
    const long h = long(cc.x1.h), w = long(cc.x1.w), half = long(kernel) / 2;

    // y = x1 * gs  (gs broadcast over channels)
    std::vector<double> dgs(npix, 0.0);
    Grid dx1(cc.x1.h, cc.x1.w, c);
    for (size_t n = 0; n < npix; ++n) {
        const double* dyp = dy.pix(n);
        const double* x1p = cc.x1.pix(n);
        double* dx1p = dx1.pix(n);
        double acc = 0.0;
        for (size_t k = 0; k < c; ++k) {
            acc += dyp[k] * x1p[k];
            dx1p[k] = dyp[k] * cc.gs[n];
        }
        dgs[n] = acc;
    }

    // Spatial gate and conv; scatter to replicate-clamped source pixels.
    std::vector<double> dmu(npix, 0.0), dchmax(npix, 0.0);
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            const size_t n = size_t(i) * w + j;
            const double dq = dgs[n] * cc.gs[n] * (1.0 - cc.gs[n]);
            if (dq == 0.0) continue;
            for (long u = -half; u <= half; ++u) {
                const long ci = std::clamp(i + u, 0l, h - 1);
                for (long v = -half; v <= half; ++v) {
                    const long cj = std::clamp(j + v, 0l, w - 1);
                    const size_t tap = size_t(u + half) * kernel + size_t(v + half);
                    const size_t src = size_t(ci) * w + cj;
                    grads.conv.at(tap, 0) += dq * cc.mu[src];
                    grads.conv.at(tap, 1) += dq * cc.chmax[src];
                    dmu[src] += dq * p.conv.at(tap, 0);
                    dchmax[src] += dq * p.conv.at(tap, 1);
                }
            }
        }
    for (size_t n = 0; n < npix; ++n) {
        double* dx1p = dx1.pix(n);
        const double per = dmu[n] / double(c);
        for (size_t k = 0; k < c; ++k) dx1p[k] += per;
        dx1p[cc.chmax_arg[n]] += dchmax[n];
    }
    return dx1;
}

Grid cbam_channel_backward(const CbamParams& p, const CbamCache& cc, const Grid& dx1,
                           CbamParams& grads) {
    const size_t c = cc.x.c, npix = cc.x.pixels();

    // Channel gate: x1 = x * gc.
    std::vector<double> dgc(c, 0.0);
    Grid dx(cc.x.h, cc.x.w, c);
    for (size_t n = 0; n < npix; ++n) {
        const double* xp = cc.x.pix(n);
        const double* dx1p = dx1.pix(n);
        double* dxp = dx.pix(n);
        for (size_t k = 0; k < c; ++k) {
            dgc[k] += dx1p[k] * xp[k];
            dxp[k] = dx1p[k] * cc.gc[k];
        }
    }

    std::vector<double> ds(c);
    for (size_t k = 0; k < c; ++k) ds[k] = dgc[k] * cc.gc[k] * (1.0 - cc.gc[k]);

    std::vector<double> ha = cc.za, hm = cc.zm;
    for (double& v : ha) v = std::max(0.0, v);
    for (double& v : hm) v = std::max(0.0, v);
    outer_acc(grads.mlp2, ds, ha);
    outer_acc(grads.mlp2, ds, hm);

    std::vector<double> dha = matvec_t(p.mlp2, ds);
    std::vector<double> dhm = dha;
    for (size_t r = 0; r < dha.size(); ++r) {
        dha[r] = cc.za[r] > 0.0 ? dha[r] : 0.0;
        dhm[r] = cc.zm[r] > 0.0 ? dhm[r] : 0.0;
    }
    outer_acc(grads.mlp1, dha, cc.avg);
    outer_acc(grads.mlp1, dhm, cc.mx);
    const std::vector<double> davg = matvec_t(p.mlp1, dha);
    const std::vector<double> dmx = matvec_t(p.mlp1, dhm);

    for (size_t k = 0; k < c; ++k) {
        const double per = davg[k] / double(npix);
        for (size_t n = 0; n < npix; ++n) dx.pix(n)[k] += per;
        dx.pix(cc.mx_arg[k])[k] += dmx[k];
    }
    return dx;
}

Grid cbam_backward(const CbamParams& p, const CbamCache& cc, uint32_t kernel, const Grid& dy,
                   CbamParams& grads) {
    if (cc.gates_forced) return dy; // gates pinned at 1 are constants
    const Grid dx1 = cbam_spatial_backward(p, cc, kernel, dy, grads);
    return cbam_channel_backward(p, cc, dx1, grads);
}

// --- Model-level forward / backward ------------------------------------------

Grid encode(const ModelParams& p, const Grid& e2d, const Grid& e3d, const ForwardOptions& o,
            Rng* rng, StackCache* cache) {
    if (e2d.h != e3d.h || e2d.w != e3d.w)
        throw FormatError("modalities are spatially misaligned");
    if (e2d.c != p.arch.d2 || e3d.c != p.arch.d3)
        throw FormatError("modality channel count does not match the model");

    Grid concat(e2d.h, e2d.w, e2d.c + e3d.c);
    for (size_t n = 0; n < concat.pixels(); ++n) {
        double* dst = concat.pix(n);
        std::copy_n(e2d.pix(n), e2d.c, dst);
        std::copy_n(e3d.pix(n), e3d.c, dst + e2d.c);
    }
    return stack_forward(p.encoder, concat, p.arch.dropout_p, o.mode, rng, cache);
}

Grid decode(const ModelParams& p, const Grid& fused, Modality mod, const ForwardOptions& o,
            Rng* rng, DecoderCache* cache) {
    if (fused.c != p.arch.fused) throw FormatError("fused channel count does not match the model");
    const DecoderParams& d = mod == Modality::TwoD ? p.dec2d : p.dec3d;

    Grid pre = stack_forward(d.stack, fused, p.arch.dropout_p, o.mode, rng,
                             cache ? &cache->stack : nullptr);
    if (d.skip_w.size()) {
        for (size_t n = 0; n < fused.pixels(); ++n) {
            const double* f = fused.pix(n);
            double* y = pre.pix(n);
            for (size_t r = 0; r < d.skip_w.rows; ++r) {
                const double* wr = d.skip_w.row(r);
                double acc = d.skip_b.v[r];
                for (size_t i = 0; i < d.skip_w.cols; ++i) acc += wr[i] * f[i];
                y[r] += acc;
            }
        }
    }
    return cbam_forward(d.cbam, pre, p.arch.cbam_spatial_kernel, o.force_open_gates,
                        cache ? &cache->cbam : nullptr);
}

ForwardResult forward(const ModelParams& p, const Grid& e2d, const Grid& e3d,
                      const ForwardOptions& o, Rng* rng, ForwardCache* cache) {
    Grid fused = encode(p, e2d, e3d, o, rng, cache ? &cache->enc : nullptr);
    if (cache) cache->fused = fused;
    ForwardResult r;
    r.e2d_hat = decode(p, fused, Modality::TwoD, o, rng, cache ? &cache->dec2d : nullptr);
    r.e3d_hat = decode(p, fused, Modality::ThreeD, o, rng, cache ? &cache->dec3d : nullptr);
    return r;
}

namespace {

// Backward through one decoder; returns the gradient w.r.t. the fused input.
Grid decoder_backward(const DecoderParams& d, const DecoderCache& cache, uint32_t kernel,
                      const Grid& dy, const Grid& fused, DecoderParams& grads) {
    Grid dpre = cbam_backward(d.cbam, cache.cbam, kernel, dy, grads.cbam);
    Grid dfused = stack_backward(d.stack, cache.stack, dpre, grads.stack);
    if (d.skip_w.size()) {
        for (size_t n = 0; n < fused.pixels(); ++n) {
            const double* f = fused.pix(n);
            const double* dp = dpre.pix(n);
            double* df = dfused.pix(n);
            for (size_t r = 0; r < d.skip_w.rows; ++r) {
                const double g = dp[r];
                if (g == 0.0) continue;
                const double* wr = d.skip_w.row(r);
                double* dwr = grads.skip_w.row(r);
                for (size_t i = 0; i < d.skip_w.cols; ++i) {
                    dwr[i] += g * f[i];
                    df[i] += g * wr[i];
                }
                grads.skip_b.v[r] += g;
            }
        }
    }
    return dfused;
}

} // namespace

GradientBundle backward(const ModelParams& p, const ForwardCache& cache, const Grid& d_e2d_hat,
                        const Grid& d_e3d_hat) {
    GradientBundle g = zero_like(p);
    Grid dfused = decoder_backward(p.dec2d, cache.dec2d, p.arch.cbam_spatial_kernel, d_e2d_hat,
                                   cache.fused, g.dec2d);
    Grid dfused3 = decoder_backward(p.dec3d, cache.dec3d, p.arch.cbam_spatial_kernel, d_e3d_hat,
                                    cache.fused, g.dec3d);
    for (size_t i = 0; i < dfused.size(); ++i) dfused.v[i] += dfused3.v[i];
    stack_backward(p.encoder, cache.enc, dfused, g.encoder);
    return g;
}

// --- Checkpoints --------------------------------------------------------------

namespace {

std::string tensor_file(const std::string& name) { return name + ".mafr"; }

json arch_to_json(const ModelArch& a) {
    json j;
    j["d2"] = a.d2;
    j["d3"] = a.d3;
    j["fused"] = a.fused;
    j["encoder_widths"] = a.encoder_widths;
    j["decoder2d_widths"] = a.decoder2d_widths;
    j["decoder3d_widths"] = a.decoder3d_widths;
    j["dropout_p"] = a.dropout_p;
    j["cbam_reduction"] = a.cbam_reduction;
    j["cbam_spatial_kernel"] = a.cbam_spatial_kernel;
    j["skip_connection"] = a.skip_connection;
    return j;
}

ModelArch arch_from_json(const json& j) {
    ModelArch a;
    a.d2 = j.at("d2").get<uint32_t>();
    a.d3 = j.at("d3").get<uint32_t>();
    a.fused = j.at("fused").get<uint32_t>();
    a.encoder_widths = j.at("encoder_widths").get<std::vector<uint32_t>>();
    a.decoder2d_widths = j.at("decoder2d_widths").get<std::vector<uint32_t>>();
    a.decoder3d_widths = j.at("decoder3d_widths").get<std::vector<uint32_t>>();
    a.dropout_p = j.at("dropout_p").get<double>();
    a.cbam_reduction = j.at("cbam_reduction").get<uint32_t>();
    a.cbam_spatial_kernel = j.at("cbam_spatial_kernel").get<uint32_t>();
    a.skip_connection = j.at("skip_connection").get<bool>();
    return a;
}

} // namespace

void save_checkpoint(const ModelParams& p, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "tensors");
    json index;
    index["format"] = "mafr-checkpoint";
    index["version"] = 1;
    index["init_seed"] = p.init_seed;
    index["arch"] = arch_to_json(p.arch);
    index["tensors"] = json::array();
    for (const auto& [name, t] : tensor_list(p)) {
        FeatureMap m = make_feature_map(uint32_t(t->rows), uint32_t(t->cols), 1, Modality::TwoD);
        for (size_t i = 0; i < t->v.size(); ++i) m.data[i] = float(t->v[i]);
        save_feature_map(m, dir / "tensors" / tensor_file(name));
        json jt;
        jt["name"] = name;
        jt["rows"] = t->rows;
        jt["cols"] = t->cols;
        jt["file"] = "tensors/" + tensor_file(name);
        index["tensors"].push_back(std::move(jt));
    }
    std::ofstream f(dir / "index.json", std::ios::trunc);
    if (!f) throw FormatError("cannot write checkpoint index in " + dir.string());
    f << index.dump(2) << "\n";
    if (!f) throw FormatError("checkpoint index write failed in " + dir.string());
}

ModelParams load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream f(dir / "index.json");
    if (!f) throw FormatError("cannot open checkpoint index in " + dir.string());
    json index;
    try {
        index = json::parse(f);
    } catch (const json::exception& e) {
        throw FormatError("checkpoint index parse error: " + std::string(e.what()));
    }
    try {
        if (index.at("format").get<std::string>() != "mafr-checkpoint" ||
            index.at("version").get<int>() != 1)
            throw FormatError("unrecognized checkpoint format in " + dir.string());
        ModelParams p = init_params(arch_from_json(index.at("arch")),
                                    index.at("init_seed").get<uint64_t>());
        auto tensors = tensor_list(p);
        const json& jt = index.at("tensors");
        if (jt.size() != tensors.size())
            throw FormatError("checkpoint tensor count mismatch in " + dir.string());
        for (size_t i = 0; i < tensors.size(); ++i) {
            const json& e = jt.at(i);
            auto& [name, t] = tensors[i];
            if (e.at("name").get<std::string>() != name ||
                e.at("rows").get<size_t>() != t->rows || e.at("cols").get<size_t>() != t->cols)
                throw FormatError("checkpoint tensor '" + name + "' does not match the model");
            const FeatureMap m = load_feature_map(dir / e.at("file").get<std::string>());
            if (m.h != t->rows || m.w != t->cols || m.d != 1)
                throw FormatError("checkpoint tensor '" + name + "' has wrong shape on disk");
            for (size_t k = 0; k < t->v.size(); ++k) t->v[k] = double(m.data[k]);
        }
        return p;
    } catch (const json::exception& e) {
        throw FormatError("malformed checkpoint index: " + std::string(e.what()));
    }
}

} // namespace mafr
