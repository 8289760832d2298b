#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace mafr {

struct GradCheckOptions {
    uint64_t seed = 0;
    size_t trials = 100; // randomized instances per check
    size_t h = 4, w = 4; // spatial extent of the random inputs
    uint32_t d2 = 6, d3 = 9, fused = 8;
    double layer_tol = 1e-5; // isolated layers
    double loss_tol = 1e-4;  // loss terms and the end-to-end composite
    // Test hook: offset added to every analytic gradient before comparison,
    // so tests can confirm the harness rejects wrong gradients.
    double sabotage = 0.0;
};

struct LayerCheck {
    std::string name;
    size_t trials = 0;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_err <= tolerance; }
};

// Central finite differences on f64 against the analytic backward pass, one
// row per layer type / loss term plus the end-to-end composite. Relative
// error is |analytic - fd| / max(1e-3, |analytic|, |fd|); inputs that land
// within 10 fd-steps of a nonsmooth point (ReLU zero, pooling tie, absolute
// value at zero) are redrawn since the derivative is not defined there.
std::vector<LayerCheck> run_gradient_checks(const GradCheckOptions& opts);

bool gradcheck_passed(const std::vector<LayerCheck>& checks);
std::string gradcheck_report(const std::vector<LayerCheck>& checks);

} // namespace mafr
