#include "codistill/optim.hpp"

#include <algorithm>
#include <cmath>

#include "codistill/error.hpp"

namespace codistill {

void AdamConfig::validate() const {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw Error("lr must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw Error("adam betas must be in [0,1)");
    if (!(eps > 0.0)) throw Error("adam eps must be > 0");
}

double scheduled_lr(const AdamConfig& cfg, std::size_t step) {
    if (cfg.warmup_steps == 0 || step >= cfg.warmup_steps) return cfg.lr;
    return cfg.lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
}

void adam_update(std::span<double> param, std::span<const double> grad, std::span<double> m, std::span<double> v,
                 std::size_t step, const AdamConfig& cfg) {
    const double lr = scheduled_lr(cfg, step);
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        if (lr != 0.0) param[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

void Adam::step(ModelParams& params, const ModelParams& grad, const AdamConfig& cfg) {
    if (m_.count() != params.count()) {
        m_ = ModelParams(params.config());
        v_ = ModelParams(params.config());
    }
    ++t_;
    for (std::size_t i = 0; i < params.count(); ++i)
        adam_update(params.tensor(i).values(), grad.tensor(i).values(), m_.tensor(i).values(),
                    v_.tensor(i).values(), t_, cfg);
}

}  // namespace codistill
