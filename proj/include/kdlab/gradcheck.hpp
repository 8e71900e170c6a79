#pragma once

// Central finite-difference verification of taped gradients.

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::vector<std::pair<std::string, double>> per_param;  // max rel err per parameter
};

// f must be a deterministic scalar-valued function of the given parameters.
// Checks up to max_coords sampled coordinates per parameter against central
// differences; rel err = |a - n| / max(1e-6, |a| + |n|). The denominator
// floor absorbs coordinates whose true gradient is exactly zero (e.g. biases
// the loss is invariant to), where both sides are pure roundoff; genuine
// disagreements above ~1e-10 still register.
inline GradCheckResult grad_check(const std::function<Tensor()>& f,
                                  const std::vector<std::pair<std::string, Tensor>>& params,
                                  double step, std::size_t max_coords = 8,
                                  std::uint64_t sample_seed = 0,
                                  const std::function<void()>& post_backward_hook = nullptr) {
    if (!(step > 1e-7 && step < 1e-3))
        throw std::invalid_argument("grad_check: step must lie in (1e-7, 1e-3)");

    const double v1 = f().value();
    const double v2 = f().value();
    if (v1 != v2)
        throw std::runtime_error("grad_check: function is not deterministic (" + std::to_string(v1) +
                                 " vs " + std::to_string(v2) + ")");

    for (const auto& [name, p] : params) {
        Tensor t = p;  // shared handle; drop any stale gradient
        t.clear_grad();
    }
    Tensor loss = f();
    backward(loss);
    if (post_backward_hook) post_backward_hook();
    std::vector<std::vector<double>> analytic;
    for (const auto& [name, p] : params) {
        // A parameter the loss does not depend on has gradient zero.
        if (p.has_grad()) analytic.push_back(p.grad());
        else analytic.push_back(std::vector<double>(p.numel(), 0.0));
    }

    GradCheckResult res;
    std::mt19937_64 rng(sample_seed);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor p = params[k].second;
        std::vector<std::size_t> coords(p.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (coords.size() > max_coords) {
            std::shuffle(coords.begin(), coords.end(), rng);
            coords.resize(max_coords);
        }
        double param_max = 0.0;
        for (std::size_t i : coords) {
            const double saved = p.data()[i];
            p.data()[i] = saved + step;
            const double fp = f().value();
            p.data()[i] = saved - step;
            const double fm = f().value();
            p.data()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * step);
            const double a = analytic[k][i];
            const double rel = std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
            param_max = std::max(param_max, rel);
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = params[k].first;
                res.worst_index = i;
                res.worst_analytic = a;
                res.worst_numeric = numeric;
            }
        }
        res.per_param.emplace_back(params[k].first, param_max);
    }
    return res;
}

}  // namespace kdlab
