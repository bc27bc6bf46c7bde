#pragma once

#include <cmath>
#include <map>
#include <string>

#include "semi/autodiff.hpp"
#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

enum class LrSchedule { Constant, WarmupCosine };

// Raised when a training loop hits a non-finite loss; carries the most recent
// healthy parameter snapshot so callers can checkpoint it.
struct DivergenceError : TrainingError {
    ParamMap last_good;
    int step = 0;
    DivergenceError(const std::string& msg, ParamMap snapshot, int snapshot_step)
        : TrainingError(msg + " (last good snapshot at step " + std::to_string(snapshot_step) + ")"),
          last_good(std::move(snapshot)),
          step(snapshot_step) {}
};

struct OptimizerConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 5e-6;
    LrSchedule schedule = LrSchedule::Constant;
    int warmup_steps = 0;
    int total_steps = 0; // cosine horizon
};

inline double lr_at_step(const OptimizerConfig& cfg, int step) {
    if (cfg.schedule == LrSchedule::Constant) return cfg.lr;
    if (step < cfg.warmup_steps)
        return cfg.lr * static_cast<double>(step + 1) / std::max(1, cfg.warmup_steps);
    const double span = std::max(1, cfg.total_steps - cfg.warmup_steps);
    const double t = std::min(1.0, (step - cfg.warmup_steps) / span);
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

// Decoupled weight decay Adam. Moment slots attach to parameters by name.
class AdamW {
public:
    explicit AdamW(OptimizerConfig cfg) : cfg_(cfg) {}

    const OptimizerConfig& config() const { return cfg_; }

    void step(ParamMap& params, const ParamMap& grads) {
        ++t_;
        const double lr = lr_at_step(cfg_, t_ - 1);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        for (auto& [name, p] : params) {
            auto git = grads.find(name);
            if (git == grads.end()) throw InputError("AdamW: missing gradient for " + name);
            const DenseMatrix& g = git->second;
            if (!g.same_shape(p)) throw InputError("AdamW: gradient shape mismatch for " + name);
            Moments& m = slots_[name];
            if (m.m.size() != p.size()) {
                m.m = DenseMatrix(p.rows, p.cols);
                m.v = DenseMatrix(p.rows, p.cols);
            }
            for (std::size_t i = 0; i < p.size(); ++i) {
                m.m.data[i] = cfg_.beta1 * m.m.data[i] + (1.0 - cfg_.beta1) * g.data[i];
                m.v.data[i] = cfg_.beta2 * m.v.data[i] + (1.0 - cfg_.beta2) * g.data[i] * g.data[i];
                const double mhat = m.m.data[i] / bc1;
                const double vhat = m.v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * p.data[i]);
            }
        }
    }

    int steps_taken() const { return t_; }

private:
    struct Moments {
        DenseMatrix m, v;
    };
    OptimizerConfig cfg_;
    std::map<std::string, Moments> slots_;
    int t_ = 0;
};

} // namespace semi
