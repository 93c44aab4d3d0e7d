#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

namespace uprobe {

struct AdamSettings {
    double learning_rate = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.0;  // decoupled (AdamW), scaled by the step's lr
};

// Adam over a flat parameter vector. Weight decay, when set, applies to the
// entries selected by the decay mask (all entries if no mask is given).
template <typename Scalar>
class Adam {
public:
    Adam(std::size_t n, AdamSettings settings) : s_(settings), m_(n, 0.0), v_(n, 0.0) {}

    void set_decay_mask(std::vector<char> mask) { mask_ = std::move(mask); }

    void step(std::span<Scalar> params, std::span<const Scalar> grad) { step(params, grad, s_.learning_rate); }

    void step(std::span<Scalar> params, std::span<const Scalar> grad, double lr) {
        ++t_;
        const double c1 = 1.0 - std::pow(s_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(s_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const double g = static_cast<double>(grad[i]);
            m_[i] = s_.beta1 * m_[i] + (1.0 - s_.beta1) * g;
            v_[i] = s_.beta2 * v_[i] + (1.0 - s_.beta2) * g * g;
            const double mhat = m_[i] / c1;
            const double vhat = v_[i] / c2;
            double p = static_cast<double>(params[i]);
            if (s_.weight_decay > 0.0 && (mask_.empty() || mask_[i])) p -= lr * s_.weight_decay * p;
            params[i] = static_cast<Scalar>(p - lr * mhat / (std::sqrt(vhat) + s_.epsilon));
        }
    }

    long steps_taken() const { return t_; }

private:
    AdamSettings s_;
    std::vector<double> m_, v_;
    std::vector<char> mask_;
    long t_ = 0;
};

// Cosine decay from `base` at step 0 to `base * floor_fraction` at `total`.
inline double cosine_lr(double base, long step, long total, double floor_fraction = 0.1) {
    if (total <= 1) return base;
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
    const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return base * (floor_fraction + (1.0 - floor_fraction) * cosine);
}

}  // namespace uprobe
