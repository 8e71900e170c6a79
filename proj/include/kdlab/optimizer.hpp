#pragma once

// Plain Adam with bias correction; no weight decay, no schedules.

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "kdlab/tensor.hpp"

namespace kdlab {

class AdamOptimizer {
public:
    AdamOptimizer() = default;
    AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].numel(), 0.0);
            v_[i].assign(params_[i].numel(), 0.0);
        }
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k];
            // A parameter the current loss does not touch (e.g. a projection
            // whose term is weighted out) has no gradient buffer; leave it
            // and its moment estimates untouched.
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& d = p.data();
            for (std::size_t i = 0; i < d.size(); ++i) {
                m_[k][i] = beta1_ * m_[k][i] + (1.0 - beta1_) * g[i];
                v_[k][i] = beta2_ * v_[k][i] + (1.0 - beta2_) * g[i] * g[i];
                const double mh = m_[k][i] / bc1;
                const double vh = v_[k][i] / bc2;
                d[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
            }
        }
    }

    std::size_t step_count() const { return t_; }
    double lr() const { return lr_; }
    const std::vector<Tensor>& params() const { return params_; }

private:
    std::vector<Tensor> params_;
    double lr_ = 1e-3, beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace kdlab
