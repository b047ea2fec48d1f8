#pragma once

// Decoupled-weight-decay Adam (AdamW) over an explicit parameter registry.
// Params are registered by name; moment buffers live here, keyed by slot.
// The registry is also the audit surface: anything not registered (teacher,
// momentum shadow) can never be updated.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/tensor.hpp"

namespace cmtmae {

struct AdamWConfig {
    double lr = 1.5e-4;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.05;

    void validate() const {
        if (!(lr >= 0.0)) throw ConfigError("lr must be non-negative");
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
            throw ConfigError("betas must lie in [0,1)");
        if (!(eps > 0.0)) throw ConfigError("adam eps must be positive");
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    }
};

class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg) : cfg_(cfg) { cfg_.validate(); }

    void add_param(const std::string& name, const Tensor& param) {
        if (!param.requires_grad())
            throw ContractError("AdamW: parameter '" + name + "' requires no gradients");
        for (const Slot& s : slots_)
            if (s.param.same_node(param))
                throw ContractError("AdamW: parameter '" + name + "' registered twice");
        Slot s;
        s.name = name;
        s.param = param;
        s.m.assign(static_cast<size_t>(param.numel()), 0.0);
        s.v.assign(static_cast<size_t>(param.numel()), 0.0);
        slots_.push_back(std::move(s));
    }

    bool contains(const Tensor& param) const {
        for (const Slot& s : slots_)
            if (s.param.same_node(param)) return true;
        return false;
    }

    size_t size() const { return slots_.size(); }
    int64_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }

    // One update with the given learning rate (schedules live outside).
    // theta <- theta - lr * (mhat / (sqrt(vhat) + eps) + wd * theta).
    // Params whose gradient never materialized this step (not reached by
    // backward) are treated as zero-gradient: moments decay, weight decay
    // still applies.
    void step(double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (Slot& s : slots_) {
            auto& theta = s.param.values_mut();
            for (size_t i = 0; i < theta.size(); ++i) {
                const double g = s.param.grad_or_zero(i);
                s.m[i] = cfg_.beta1 * s.m[i] + (1.0 - cfg_.beta1) * g;
                s.v[i] = cfg_.beta2 * s.v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = s.m[i] / bc1;
                const double vhat = s.v[i] / bc2;
                theta[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * theta[i]);
            }
        }
    }

    void zero_grad() {
        for (Slot& s : slots_) s.param.zero_grad();
    }

    // Moment access for checkpointing, in registration order.
    struct Slot {
        std::string name;
        Tensor param;
        std::vector<double> m, v;
    };

    const std::vector<Slot>& slots() const { return slots_; }
    std::vector<Slot>& slots_mut() { return slots_; }
    void set_steps_taken(int64_t t) { t_ = t; }

  private:
    AdamWConfig cfg_;
    std::vector<Slot> slots_;
    int64_t t_ = 0;
};

// Linear warmup from zero over warmup_steps, then cosine decay to zero at
// total_steps. step is zero-based.
inline double lr_schedule(int64_t step, int64_t warmup_steps, int64_t total_steps, double base_lr) {
    if (total_steps <= 0) throw ConfigError("lr_schedule: total_steps must be positive");
    if (warmup_steps < 0 || warmup_steps > total_steps)
        throw ConfigError("lr_schedule: warmup_steps outside [0, total_steps]");
    if (step < 0) throw ContractError("lr_schedule: negative step");
    if (step < warmup_steps)
        return base_lr * (static_cast<double>(step) + 1.0) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace cmtmae
