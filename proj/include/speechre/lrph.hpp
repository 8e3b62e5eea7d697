#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "speechre/autodiff.hpp"
#include "speechre/common.hpp"
#include "speechre/optim.hpp"
#include "speechre/rng.hpp"
#include "speechre/tensor.hpp"

namespace speechre {

// Parameter-name prefix shared by training, inference, and checkpoints.
inline constexpr const char* kLrphPrefix = "lrph";

// CNN head that reads the encoded feature map {frames, dims} as a one-channel
// image and emits an independent probability per relation type.
struct LrphConfig {
    std::vector<std::size_t> channels{16, 32, 64, 128};
    std::size_t kernel = 3;       // odd; stride 1, same padding
    std::size_t pool_h = 4;       // adaptive-average-pool output grid
    std::size_t pool_w = 4;
    double dropout_p = 0.5;
    double threshold = 0.5;       // relation kept when score strictly exceeds

    void validate() const {
        if (channels.empty()) throw ConfigError("lrph: channels must be non-empty");
        for (std::size_t c : channels)
            if (c == 0) throw ConfigError("lrph: channel counts must be positive");
        if (kernel == 0 || kernel % 2 == 0) throw ConfigError("lrph: kernel must be odd");
        if (pool_h == 0 || pool_w == 0) throw ConfigError("lrph: pool dims must be positive");
        if (dropout_p < 0.0 || dropout_p >= 1.0) throw ConfigError("lrph: dropout_p in [0,1)");
        if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("lrph: threshold in (0,1)");
    }

    std::size_t flat_features() const { return channels.back() * pool_h * pool_w; }
};

inline void init_lrph_params(ad::ParamStore& store, const std::string& prefix,
                             const LrphConfig& config, std::size_t n_relations, Rng& rng) {
    config.validate();
    if (n_relations == 0) throw ConfigError("lrph: need at least one relation");
    std::size_t in_ch = 1;
    for (std::size_t layer = 0; layer < config.channels.size(); ++layer) {
        const std::size_t out_ch = config.channels[layer];
        const std::string base = prefix + ".conv" + std::to_string(layer);
        store.add(base + ".w", init::conv_weight(out_ch, in_ch, config.kernel, config.kernel, rng));
        store.add(base + ".b", Tensor::zeros({out_ch}));
        in_ch = out_ch;
    }
    store.add(prefix + ".fc.w",
              init::linear_weight(config.flat_features(), n_relations, rng));
    store.add(prefix + ".fc.b", Tensor::zeros({n_relations}));
}

// Forward pass on a tape. `hidden` is the {frames, dims} encoder output;
// `dropout_rng` may be null when `training` is false. Returns a flat vector
// of per-relation scores in (0,1).
inline ad::Var lrph_scores(ad::TapeParams& params, const std::string& prefix,
                           const LrphConfig& config, ad::Var hidden, Rng* dropout_rng,
                           bool training) {
    config.validate();
    ad::Tape& tape = params.tape();
    const Tensor& h = tape.val(hidden);
    if (h.rank() != 2) throw ContractError("lrph: hidden must be {frames, dims}");
    if (training && dropout_rng == nullptr && config.dropout_p > 0.0) {
        throw ContractError("lrph: training forward needs a dropout rng");
    }

    ad::Var x = tape.reshape(hidden, {1, h.dim(0), h.dim(1)});
    for (std::size_t layer = 0; layer < config.channels.size(); ++layer) {
        const std::string base = prefix + ".conv" + std::to_string(layer);
        x = tape.conv2d_same(x, params[base + ".w"], params[base + ".b"]);
        x = tape.relu(x);
        if (training) x = tape.dropout(x, config.dropout_p, *dropout_rng, true);
    }
    x = tape.adaptive_avg_pool(x, config.pool_h, config.pool_w);
    x = tape.reshape(x, {1, config.flat_features()});
    if (training) x = tape.dropout(x, config.dropout_p, *dropout_rng, true);
    x = tape.matmul(x, params[prefix + ".fc.w"]);
    x = tape.add_row(x, params[prefix + ".fc.b"]);
    x = tape.sigmoid(x);
    const std::size_t n_rel = tape.val(x).dim(1);
    return tape.reshape(x, {n_rel});
}

// Deterministic inference-mode scores (dropout off, no gradients).
inline Tensor lrph_scores_eval(ad::ParamStore& store, const std::string& prefix,
                               const LrphConfig& config, const Tensor& hidden) {
    ad::Tape tape;
    ad::TapeParams params(tape, store, /*trainable=*/false);
    ad::Var h = tape.leaf(hidden, false);
    ad::Var s = lrph_scores(params, prefix, config, h, nullptr, /*training=*/false);
    return tape.val(s);
}

// Plain-value binary cross entropy used by evaluation and tests; matches the
// tape op bit for bit (same clamp).
inline double bce_loss(const Tensor& scores, const std::vector<double>& targets,
                       double eps = 1e-7) {
    if (scores.size() != targets.size()) throw ContractError("bce_loss: length mismatch");
    if (scores.size() == 0) throw ContractError("bce_loss: empty input");
    double loss = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double s = std::min(std::max(scores.data[i], eps), 1.0 - eps);
        loss -= targets[i] * std::log(s) + (1.0 - targets[i]) * std::log(1.0 - s);
    }
    return loss / static_cast<double>(scores.size());
}

// Ids whose score strictly exceeds the threshold.
inline std::set<int> predict_relations(const Tensor& scores, double threshold) {
    std::set<int> out;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores.data[i] > threshold) out.insert(static_cast<int>(i));
    }
    return out;
}

// Training-time augmentation: drop floor(f * n) of the positive relation ids,
// f ~ U[0, 0.5), chosen uniformly at random. Identity when not training.
inline std::set<int> mask_positive_relations(const std::set<int>& ids, Rng& rng, bool training) {
    if (!training || ids.empty()) return ids;
    const double f = rng.uniform() * 0.5;
    const std::size_t n = ids.size();
    const auto remove = static_cast<std::size_t>(std::floor(f * static_cast<double>(n)));
    std::vector<int> pool(ids.begin(), ids.end());
    rng.shuffle(pool);
    return std::set<int>(pool.begin() + static_cast<std::ptrdiff_t>(remove), pool.end());
}

}  // namespace speechre
