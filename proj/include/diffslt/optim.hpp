#pragma once

// AdamW with decoupled weight decay and global-norm gradient clipping.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffslt/tensor.hpp"

namespace diffslt {

template <typename S>
struct NamedParam {
    std::string name;
    TensorT<S> tensor;
};

template <typename S>
using ParamList = std::vector<NamedParam<S>>;

template <typename S>
class AdamW {
public:
    AdamW(ParamList<S> params, double lr, double weight_decay = 0.01, double clip_norm = 0.4,
          double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), weight_decay_(weight_decay), clip_norm_(clip_norm),
          beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& p : params_) {
            m_.emplace_back(p.tensor.numel(), S(0));
            v_.emplace_back(p.tensor.numel(), S(0));
            p.tensor.ensure_grad();
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    std::int64_t step_count() const { return step_; }
    const ParamList<S>& params() const { return params_; }

    // Returns the pre-clip global gradient norm.
    double step() {
        double sq = 0.0;
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            for (const S g : params_[pi].tensor.grad()) {
                const double gd = static_cast<double>(g);
                if (std::isnan(gd) || std::isinf(gd))
                    throw std::runtime_error("adamw: non-finite gradient in parameter '" + params_[pi].name + "'");
                sq += gd * gd;
            }
        }
        const double norm = std::sqrt(sq);
        const double scale = (clip_norm_ > 0.0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;

        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t pi = 0; pi < params_.size(); ++pi) {
            auto& data = params_[pi].tensor.data();
            const auto& grad = params_[pi].tensor.grad();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < data.size(); ++i) {
                const double g = static_cast<double>(grad[i]) * scale;
                const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * g;
                const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * g * g;
                m[i] = static_cast<S>(mi);
                v[i] = static_cast<S>(vi);
                const double mhat = mi / bc1;
                const double vhat = vi / bc2;
                const double w = static_cast<double>(data[i]);
                data[i] = static_cast<S>(w - lr_ * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * w));
            }
        }
        return norm;
    }

private:
    ParamList<S> params_;
    std::vector<std::vector<S>> m_, v_;
    double lr_, weight_decay_, clip_norm_, beta1_, beta2_, eps_;
    std::int64_t step_ = 0;
};

inline double cosine_decay_lr(double base_lr, std::int64_t step, std::int64_t total_steps) {
    if (total_steps <= 0) return base_lr;
    const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace diffslt
