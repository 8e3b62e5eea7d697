#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "speechre/autodiff.hpp"
#include "speechre/rng.hpp"
#include "speechre/tensor.hpp"

namespace speechre {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double grad_clip = 0.0;  // 0 disables; otherwise clip by global L2 norm
};

// Adam with bias correction. Moment slots are keyed by parameter name so a
// parameter untouched by some steps (e.g. unused embedding rows never appear
// here at all — gradients are dense per parameter tensor) keeps its state.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    long long step_count() const { return t_; }

    // Schedulers adjust the rate between steps; moments and the step counter
    // are unaffected.
    void set_lr(double lr) { config_.lr = lr; }

    void step(ad::ParamStore& params,
              const std::vector<std::pair<std::string, const Tensor*>>& grads) {
        ++t_;
        double scale = 1.0;
        if (config_.grad_clip > 0.0) {
            double sq = 0.0;
            for (const auto& [name, g] : grads)
                for (double v : g->data) sq += v * v;
            const double norm = std::sqrt(sq);
            if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
        }
        const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            Tensor& p = params.at(name);
            if (!p.same_shape(*g)) throw ContractError("adam: gradient shape mismatch for " + name);
            Slot& s = slot(name, p.shape);
            for (std::size_t i = 0; i < p.size(); ++i) {
                const double gi = g->data[i] * scale;
                s.m.data[i] = config_.beta1 * s.m.data[i] + (1.0 - config_.beta1) * gi;
                s.v.data[i] = config_.beta2 * s.v.data[i] + (1.0 - config_.beta2) * gi * gi;
                const double mhat = s.m.data[i] / bc1;
                const double vhat = s.v.data[i] / bc2;
                p.data[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
            }
        }
    }

private:
    struct Slot {
        Tensor m;
        Tensor v;
    };

    Slot& slot(const std::string& name, const std::vector<std::size_t>& shape) {
        auto it = slots_.find(name);
        if (it == slots_.end()) {
            it = slots_.emplace(name, Slot{Tensor::zeros(shape), Tensor::zeros(shape)}).first;
        }
        return it->second;
    }

    AdamConfig config_;
    long long t_ = 0;
    std::unordered_map<std::string, Slot> slots_;
};

namespace init {

// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))
inline Tensor glorot_uniform(std::vector<std::size_t> shape, std::size_t fan_in,
                             std::size_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.uniform(-a, a);
    return t;
}

// weight matrix {in, out}, composed as x * W
inline Tensor linear_weight(std::size_t in, std::size_t out, Rng& rng) {
    return glorot_uniform({in, out}, in, out, rng);
}

// conv kernel {out_ch, in_ch, kh, kw}; fans count the receptive field
inline Tensor conv_weight(std::size_t out_ch, std::size_t in_ch, std::size_t kh, std::size_t kw,
                          Rng& rng) {
    return glorot_uniform({out_ch, in_ch, kh, kw}, in_ch * kh * kw, out_ch * kh * kw, rng);
}

inline Tensor embedding(std::size_t vocab, std::size_t dim, Rng& rng) {
    Tensor t({vocab, dim});
    for (double& v : t.data) v = rng.uniform(-0.08, 0.08);
    return t;
}

}  // namespace init

}  // namespace speechre
