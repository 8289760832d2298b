#include "mafr/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "mafr/errors.hpp"
#include "mafr/grid.hpp"
#include "mafr/losses.hpp"
#include "mafr/network.hpp"
#include "mafr/rng.hpp"

namespace mafr {

namespace {

constexpr double kDenomFloor = 1e-3;
constexpr double kKinkMargin = 1e-3; // redraw when this close to a nonsmooth point
constexpr int kMaxRedraws = 64;

double rel_err(double a, double f) {
    return std::abs(a - f) / std::max({kDenomFloor, std::abs(a), std::abs(f)});
}

template <typename F>
double central_fd(double& slot, double step, F&& f) {
    const double keep = slot;
    slot = keep + step;
    const double fp = f();
    slot = keep - step;
    const double fm = f();
    slot = keep;
    return (fp - fm) / (2.0 * step);
}

double dot(const Grid& a, const Grid& b) {
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) acc += a.v[i] * b.v[i];
    return acc;
}

Grid random_grid(Rng& rng, size_t h, size_t w, size_t c) {
    Grid g(h, w, c);
    for (double& v : g.v) v = rng.normal();
    return g;
}

Tensor random_tensor(Rng& rng, size_t rows, size_t cols, double scale) {
    Tensor t(rows, cols);
    for (double& v : t.v) v = scale * rng.normal();
    return t;
}

StackParams zero_stack(const StackParams& p) {
    StackParams z;
    for (const Tensor& t : p.w) z.w.emplace_back(t.rows, t.cols);
    for (const Tensor& t : p.b) z.b.emplace_back(t.rows, t.cols);
    for (const Tensor& t : p.gamma) z.gamma.emplace_back(t.rows, t.cols);
    for (const Tensor& t : p.beta) z.beta.emplace_back(t.rows, t.cols);
    return z;
}

CbamParams zero_cbam(const CbamParams& p) {
    CbamParams z;
    z.mlp1 = Tensor(p.mlp1.rows, p.mlp1.cols);
    z.mlp2 = Tensor(p.mlp2.rows, p.mlp2.cols);
    z.conv = Tensor(p.conv.rows, p.conv.cols);
    return z;
}

double min_abs(const std::vector<double>& v) {
    double m = std::numeric_limits<double>::infinity();
    for (double x : v) m = std::min(m, std::abs(x));
    return m;
}

// Smallest (top1 - top2) over the global per-channel max pools; an FD step
// near a pooling tie would flip the argmax.
double channel_top2_gap(const Grid& x) {
    double gap = std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < x.c; ++k) {
        double t1 = -std::numeric_limits<double>::infinity(), t2 = t1;
        for (size_t n = 0; n < x.pixels(); ++n) {
            const double v = x.pix(n)[k];
            if (v > t1) {
                t2 = t1;
                t1 = v;
            } else if (v > t2) {
                t2 = v;
            }
        }
        if (x.pixels() > 1) gap = std::min(gap, t1 - t2);
    }
    return gap;
}

double pixel_top2_gap(const Grid& x) {
    double gap = std::numeric_limits<double>::infinity();
    for (size_t n = 0; n < x.pixels(); ++n) {
        const double* p = x.pix(n);
        double t1 = -std::numeric_limits<double>::infinity(), t2 = t1;
        for (size_t k = 0; k < x.c; ++k) {
            if (p[k] > t1) {
                t2 = t1;
                t1 = p[k];
            } else if (p[k] > t2) {
                t2 = p[k];
            }
        }
        if (x.c > 1) gap = std::min(gap, t1 - t2);
    }
    return gap;
}

// Smallest |pooled difference| feeding the census L1; mirrors the loss's
// replicate-padded average pooling.
double census_margin(const Grid& e, const Grid& ehat, int kernel, const Mask& valid) {
    const long h = long(e.h), w = long(e.w), half = kernel / 2;
    double m = std::numeric_limits<double>::infinity();
    for (long i = 0; i < h; ++i)
        for (long j = 0; j < w; ++j) {
            if (!valid.at(size_t(i), size_t(j))) continue;
            for (size_t k = 0; k < e.c; ++k) {
                double pa = 0.0, pb = 0.0;
                for (long u = -half; u <= half; ++u)
                    for (long v = -half; v <= half; ++v) {
                        const size_t ci = size_t(std::clamp(i + u, 0l, h - 1));
                        const size_t cj = size_t(std::clamp(j + v, 0l, w - 1));
                        pa += e.at(ci, cj, k);
                        pb += ehat.at(ci, cj, k);
                    }
                m = std::min(m, std::abs(pa - pb) / double(kernel * kernel));
            }
        }
    return m;
}

// Smallest |forward difference| of the error map over valid pixel pairs.
double smooth_margin(const Grid& e, const Grid& ehat, const Mask& valid) {
    double m = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < e.h; ++i)
        for (size_t j = 0; j < e.w; ++j) {
            if (!valid.at(i, j)) continue;
            for (size_t k = 0; k < e.c; ++k) {
                const double d0 = ehat.at(i, j, k) - e.at(i, j, k);
                if (j + 1 < e.w && valid.at(i, j + 1))
                    m = std::min(m, std::abs(ehat.at(i, j + 1, k) - e.at(i, j + 1, k) - d0));
                if (i + 1 < e.h && valid.at(i + 1, j))
                    m = std::min(m, std::abs(ehat.at(i + 1, j, k) - e.at(i + 1, j, k) - d0));
            }
        }
    return m;
}

struct Checker {
    LayerCheck result;
    double sabotage = 0.0;

    Checker(std::string name, size_t trials, double tol, double sab) {
        result.name = std::move(name);
        result.trials = trials;
        result.tolerance = tol;
        sabotage = sab;
    }
    void feed(double analytic, double fd) {
        result.max_rel_err = std::max(result.max_rel_err, rel_err(analytic + sabotage, fd));
    }
};

LayerCheck check_linear(Rng& rng, const GradCheckOptions& o) {
    Checker ck("linear", o.trials, o.layer_tol, o.sabotage);
    const double step = 1e-6;
    for (size_t t = 0; t < o.trials; ++t) {
        const size_t n_in = 2 + size_t(rng.below(5)), n_out = 2 + size_t(rng.below(5));
        StackParams p;
        p.w.push_back(random_tensor(rng, n_out, n_in, 0.8));
        p.b.push_back(random_tensor(rng, n_out, 1, 0.5));
        Grid x = random_grid(rng, o.h, o.w, n_in);
        const Grid dout = random_grid(rng, o.h, o.w, n_out);

        StackCache cache;
        stack_forward(p, x, 0.0, RunMode::Eval, nullptr, &cache);
        StackParams g = zero_stack(p);
        const Grid dx = stack_backward(p, cache, dout, g);

        auto f = [&] { return dot(dout, stack_forward(p, x, 0.0, RunMode::Eval, nullptr, nullptr)); };
        for (size_t i = 0; i < p.w[0].size(); ++i)
            ck.feed(g.w[0].v[i], central_fd(p.w[0].v[i], step, f));
        for (size_t i = 0; i < p.b[0].size(); ++i)
            ck.feed(g.b[0].v[i], central_fd(p.b[0].v[i], step, f));
        for (size_t i = 0; i < x.size(); ++i) ck.feed(dx.v[i], central_fd(x.v[i], step, f));
    }
    return ck.result;
}

LayerCheck check_gelu(Rng& rng, const GradCheckOptions& o) {
    Checker ck("gelu", o.trials, o.layer_tol, o.sabotage);
    const double step = 1e-6;
    for (size_t t = 0; t < o.trials; ++t) {
        std::vector<double> x(16), cot(16);
        for (double& v : x) v = 3.0 * rng.normal();
        for (double& v : cot) v = rng.normal();
        auto f = [&] {
            double acc = 0.0;
            for (size_t i = 0; i < x.size(); ++i) acc += cot[i] * gelu(x[i]);
            return acc;
        };
        for (size_t i = 0; i < x.size(); ++i)
            ck.feed(cot[i] * gelu_grad(x[i]), central_fd(x[i], step, f));
    }
    return ck.result;
}

LayerCheck check_layer_norm(Rng& rng, const GradCheckOptions& o) {
    Checker ck("layer_norm", o.trials, o.layer_tol, o.sabotage);
    const double step = 1e-6;
    for (size_t t = 0; t < o.trials; ++t) {
        const size_t d = 3 + size_t(rng.below(6)), rows = 4;
        std::vector<double> x(rows * d), dy(rows * d), gamma(d), beta(d);
        for (double& v : x) v = rng.normal();
        for (double& v : dy) v = rng.normal();
        for (double& v : gamma) v = 1.0 + 0.3 * rng.normal();
        for (double& v : beta) v = 0.3 * rng.normal();

        auto f = [&] {
            double acc = 0.0;
            std::vector<double> y(d), xh(d);
            double is = 0.0;
            for (size_t r = 0; r < rows; ++r) {
                layer_norm_row(&x[r * d], d, gamma.data(), beta.data(), y.data(), xh.data(), &is);
                for (size_t k = 0; k < d; ++k) acc += dy[r * d + k] * y[k];
            }
            return acc;
        };

        std::vector<double> dx(rows * d), dgamma(d, 0.0), dbeta(d, 0.0);
        {
            std::vector<double> y(d), xh(d);
            double is = 0.0;
            for (size_t r = 0; r < rows; ++r) {
                layer_norm_row(&x[r * d], d, gamma.data(), beta.data(), y.data(), xh.data(), &is);
                layer_norm_row_backward(&dy[r * d], d, gamma.data(), xh.data(), is, &dx[r * d],
                                        dgamma.data(), dbeta.data());
            }
        }
        for (size_t i = 0; i < x.size(); ++i) ck.feed(dx[i], central_fd(x[i], step, f));
        for (size_t k = 0; k < d; ++k) ck.feed(dgamma[k], central_fd(gamma[k], step, f));
        for (size_t k = 0; k < d; ++k) ck.feed(dbeta[k], central_fd(beta[k], step, f));
    }
    return ck.result;
}

LayerCheck check_cbam_channel(Rng& rng, const GradCheckOptions& o) {
    Checker ck("cbam_channel", o.trials, o.layer_tol, o.sabotage);
    const double step = 1e-6;
    for (size_t t = 0; t < o.trials; ++t) {
        const size_t c = 4 + size_t(rng.below(4)), cr = 1 + size_t(rng.below(3));
        CbamParams p;
        Grid x(1, 1, 1);
        CbamCache cc;
        for (int redraw = 0;; ++redraw) {
            if (redraw > kMaxRedraws) throw NumericError("cbam_channel check: no smooth draw");
            p.mlp1 = random_tensor(rng, cr, c, 0.7);
            p.mlp2 = random_tensor(rng, c, cr, 0.7);
            p.conv = Tensor(9, 2);
            x = random_grid(rng, o.h, o.w, c);
            cc = CbamCache{};
            cbam_channel_forward(p, x, cc);
            if (min_abs(cc.za) > kKinkMargin && min_abs(cc.zm) > kKinkMargin &&
                channel_top2_gap(x) > kKinkMargin)
                break;
        }
        const Grid dout = random_grid(rng, o.h, o.w, c);
        CbamParams g = zero_cbam(p);
        const Grid dx = cbam_channel_backward(p, cc, dout, g);

        auto f = [&] {
            CbamCache tmp;
            return dot(dout, cbam_channel_forward(p, x, tmp));
        };
        for (size_t i = 0; i < x.size(); ++i) ck.feed(dx.v[i], central_fd(x.v[i], step, f));
        for (size_t i = 0; i < p.mlp1.size(); ++i)
            ck.feed(g.mlp1.v[i], central_fd(p.mlp1.v[i], step, f));
        for (size_t i = 0; i < p.mlp2.size(); ++i)
            ck.feed(g.mlp2.v[i], central_fd(p.mlp2.v[i], step, f));
    }
    return ck.result;
}

LayerCheck check_cbam_spatial(Rng& rng, const GradCheckOptions& o) {
    Checker ck("cbam_spatial", o.trials, o.layer_tol, o.sabotage);
    const double step = 1e-6;
    const uint32_t kernels[3] = {3, 5, 7};
    for (size_t t = 0; t < o.trials; ++t) {
        const size_t c = 3 + size_t(rng.below(4));
        const uint32_t kernel = kernels[rng.below(3)];
        CbamParams p;
        Grid x1(1, 1, 1);
        CbamCache cc;
        for (int redraw = 0;; ++redraw) {
            if (redraw > kMaxRedraws) throw NumericError("cbam_spatial check: no smooth draw");
            p.mlp1 = Tensor(1, c);
            p.mlp2 = Tensor(c, 1);
            p.conv = random_tensor(rng, size_t(kernel) * kernel, 2, 0.4);
            x1 = random_grid(rng, o.h, o.w, c);
            if (pixel_top2_gap(x1) > kKinkMargin) break;
        }
        cc = CbamCache{};
        cbam_spatial_forward(p, x1, kernel, cc);
        const Grid dout = random_grid(rng, o.h, o.w, c);
        CbamParams g = zero_cbam(p);
        const Grid dx1 = cbam_spatial_backward(p, cc, kernel, dout, g);

        auto f = [&] {
            CbamCache tmp;
            return dot(dout, cbam_spatial_forward(p, x1, kernel, tmp));
        };
        for (size_t i = 0; i < x1.size(); ++i) ck.feed(dx1.v[i], central_fd(x1.v[i], step, f));
        for (size_t i = 0; i < p.conv.size(); ++i)
            ck.feed(g.conv.v[i], central_fd(p.conv.v[i], step, f));
    }
    return ck.result;
}

enum class LossTerm { Sim, Smooth, Census };

LayerCheck check_loss_term(Rng& rng, const GradCheckOptions& o, LossTerm term) {
    const char* name = term == LossTerm::Sim      ? "loss:similarity"
                       : term == LossTerm::Smooth ? "loss:smoothness"
                                                  : "loss:census";
    Checker ck(name, o.trials, o.loss_tol, o.sabotage);
    const double step = 1e-5;
    LossWeights w;
    w.lambda_sim = term == LossTerm::Sim ? 1.0 : 0.0;
    w.lambda_smooth = term == LossTerm::Smooth ? 1.0 : 0.0;
    w.lambda_census = term == LossTerm::Census ? 1.0 : 0.0;

    for (size_t t = 0; t < o.trials; ++t) {
        const size_t c = 3;
        Grid e2d(1, 1, 1), e2d_hat(1, 1, 1), e3d(1, 1, 1), e3d_hat(1, 1, 1);
        Mask valid3d(o.h, o.w);
        const Mask full2d(o.h, o.w);
        for (int redraw = 0;; ++redraw) {
            if (redraw > kMaxRedraws) throw NumericError("loss check: no smooth draw");
            e2d = random_grid(rng, o.h, o.w, c);
            e2d_hat = random_grid(rng, o.h, o.w, c);
            e3d = random_grid(rng, o.h, o.w, c);
            e3d_hat = random_grid(rng, o.h, o.w, c);
            valid3d = Mask(o.h, o.w);
            for (uint8_t& m : valid3d.v) m = rng.uniform() < 0.8 ? 1 : 0;
            if (valid3d.count() < 6) continue;
            if (term == LossTerm::Census &&
                (census_margin(e2d, e2d_hat, w.census_kernel, full2d) < kKinkMargin ||
                 census_margin(e3d, e3d_hat, w.census_kernel, valid3d) < kKinkMargin))
                continue;
            if (term == LossTerm::Smooth &&
                (smooth_margin(e2d, e2d_hat, full2d) < kKinkMargin ||
                 smooth_margin(e3d, e3d_hat, valid3d) < kKinkMargin))
                continue;
            break;
        }

        const LossGrads lg = loss_gradients(e2d, e2d_hat, e3d, e3d_hat, w, valid3d);
        auto f = [&] { return total_loss(e2d, e2d_hat, e3d, e3d_hat, w, valid3d).total; };
        for (size_t i = 0; i < e2d_hat.size(); ++i)
            ck.feed(lg.d_e2d_hat.v[i], central_fd(e2d_hat.v[i], step, f));
        // Invalid pixels carry no loss signal by contract, so the finite
        // difference only probes valid entries; zero gradients at invalid
        // pixels are asserted separately.
        for (size_t n = 0; n < e3d_hat.pixels(); ++n) {
            if (!valid3d.v[n]) continue;
            for (size_t k = 0; k < c; ++k) {
                const size_t i = n * c + k;
                ck.feed(lg.d_e3d_hat.v[i], central_fd(e3d_hat.v[i], step, f));
            }
        }
    }
    return ck.result;
}

LayerCheck check_end_to_end(Rng& rng, const GradCheckOptions& o) {
    Checker ck("end_to_end", o.trials, o.loss_tol, o.sabotage);
    const double step = 1e-6;
    const ModelArch arch = make_arch(o.d2, o.d3, o.fused);
    const LossWeights w;
    const Mask full(o.h, o.w);
    const ForwardOptions fo{RunMode::Train, false};

    for (size_t t = 0; t < o.trials; ++t) {
        ModelParams params;
        Grid e2d(1, 1, 1), e3d(1, 1, 1);
        uint64_t eval_seed = 0;
        ForwardCache cache;
        ForwardResult fr;
        for (int redraw = 0;; ++redraw) {
            if (redraw > kMaxRedraws) throw NumericError("end_to_end check: no smooth draw");
            params = init_params(arch, rng.next_u64());
            e2d = random_grid(rng, o.h, o.w, o.d2);
            e3d = random_grid(rng, o.h, o.w, o.d3);
            eval_seed = rng.next_u64();
            Rng forward_rng(eval_seed);
            cache = ForwardCache{};
            fr = forward(params, e2d, e3d, fo, &forward_rng, &cache);
            const auto cbam_smooth = [&](const CbamCache& cc) {
                return min_abs(cc.za) > kKinkMargin && min_abs(cc.zm) > kKinkMargin &&
                       channel_top2_gap(cc.x) > kKinkMargin && pixel_top2_gap(cc.x1) > kKinkMargin;
            };
            if (!cbam_smooth(cache.dec2d.cbam) || !cbam_smooth(cache.dec3d.cbam)) continue;
            if (census_margin(e2d, fr.e2d_hat, w.census_kernel, full) < kKinkMargin ||
                census_margin(e3d, fr.e3d_hat, w.census_kernel, full) < kKinkMargin)
                continue;
            if (smooth_margin(e2d, fr.e2d_hat, full) < kKinkMargin ||
                smooth_margin(e3d, fr.e3d_hat, full) < kKinkMargin)
                continue;
            break;
        }

        const LossGrads lg = loss_gradients(e2d, fr.e2d_hat, e3d, fr.e3d_hat, w, full);
        const GradientBundle grads = backward(params, cache, lg.d_e2d_hat, lg.d_e3d_hat);

        auto f = [&] {
            Rng forward_rng(eval_seed); // identical dropout masks each evaluation
            const ForwardResult r = forward(params, e2d, e3d, fo, &forward_rng, nullptr);
            return total_loss(e2d, r.e2d_hat, e3d, r.e3d_hat, w, full).total;
        };

        auto ptensors = tensor_list(params);
        auto gtensors = tensor_list(grads);
        for (size_t ti = 0; ti < ptensors.size(); ++ti) {
            Tensor& pt = *ptensors[ti].second;
            const Tensor& gt = *gtensors[ti].second;
            for (size_t i = 0; i < pt.size(); ++i) ck.feed(gt.v[i], central_fd(pt.v[i], step, f));
        }
    }
    return ck.result;
}

} // namespace

std::vector<LayerCheck> run_gradient_checks(const GradCheckOptions& opts) {
    Rng rng(derive_seed(opts.seed, seed_role::kGradCheck));
    std::vector<LayerCheck> out;
    out.push_back(check_linear(rng, opts));
    out.push_back(check_gelu(rng, opts));
    out.push_back(check_layer_norm(rng, opts));
    out.push_back(check_cbam_channel(rng, opts));
    out.push_back(check_cbam_spatial(rng, opts));
    out.push_back(check_loss_term(rng, opts, LossTerm::Sim));
    out.push_back(check_loss_term(rng, opts, LossTerm::Smooth));
    out.push_back(check_loss_term(rng, opts, LossTerm::Census));
    out.push_back(check_end_to_end(rng, opts));
    return out;
}

bool gradcheck_passed(const std::vector<LayerCheck>& checks) {
    for (const LayerCheck& c : checks)
        if (!c.passed()) return false;
    return true;
}

std::string gradcheck_report(const std::vector<LayerCheck>& checks) {
    std::string out = "check             trials   max rel err   tolerance   result\n";
    char line[128];
    for (const LayerCheck& c : checks) {
        std::snprintf(line, sizeof line, "%-16s %7zu %13.2e %11.0e %8s\n", c.name.c_str(),
                      c.trials, c.max_rel_err, c.tolerance, c.passed() ? "pass" : "FAIL");
        out += line;
    }
    out += gradcheck_passed(checks) ? "overall: pass\n" : "overall: FAIL\n";
    return out;
}

} // namespace mafr
