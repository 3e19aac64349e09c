#pragma once

#include <cstddef>
#include <span>

#include "codistill/model.hpp"

namespace codistill {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t warmup_steps = 100;  // linear ramp of lr over the first updates; 0 disables

    void validate() const;
};

/// Learning rate for 1-based update `step`.
double scheduled_lr(const AdamConfig& cfg, std::size_t step);

/// Bias-corrected Adam update of one flat buffer at 1-based `step`.
void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t step, const AdamConfig& cfg);

class Adam {
public:
    Adam() = default;
    explicit Adam(const ModelParams& shape) : m_(shape.config()), v_(shape.config()) {}

    void step(ModelParams& params, const ModelParams& grad, const AdamConfig& cfg);
    std::size_t steps() const { return t_; }
    const ModelParams& first_moment() const { return m_; }
    const ModelParams& second_moment() const { return v_; }

private:
    ModelParams m_, v_;
    std::size_t t_ = 0;
};

}  // namespace codistill
