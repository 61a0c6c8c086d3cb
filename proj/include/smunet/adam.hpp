#pragma once

#include "smunet/modules.hpp"

namespace smunet {

/// Adam with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8). Moment
/// buffers are part of the checkpointed state; update arithmetic runs in
/// double regardless of the parameter scalar type.
template <typename T>
class Adam {
public:
    Adam() = default;

    Adam(std::vector<Var<T>> params, double lr) : params_(std::move(params)), lr_(lr) {
        for (const auto& p : params_) {
            m_.emplace_back(p->value.shape());
            v_.emplace_back(p->value.shape());
        }
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k];
            if (!p->has_grad()) continue; // parameter unused this step
            auto& g = p->grad();
            for (std::int64_t i = 0; i < p->value.size(); ++i) {
                const double gi = g[i];
                const double m = beta1_ * m_[k][i] + (1 - beta1_) * gi;
                const double v = beta2_ * v_[k][i] + (1 - beta2_) * gi * gi;
                m_[k][i] = static_cast<T>(m);
                v_[k][i] = static_cast<T>(v);
                p->value[i] = static_cast<T>(
                    p->value[i] - lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
            }
        }
    }

    const std::vector<Var<T>>& params() const { return params_; }
    std::int64_t step_count() const { return t_; }
    double learning_rate() const { return lr_; }

    Tensor<T>& moment1(std::size_t k) { return m_[k]; }
    Tensor<T>& moment2(std::size_t k) { return v_[k]; }
    void set_step_count(std::int64_t t) { t_ = t; }

private:
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m_, v_;
    double lr_ = 1e-4;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    std::int64_t t_ = 0;
};

} // namespace smunet
