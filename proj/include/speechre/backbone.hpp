#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "speechre/autodiff.hpp"
#include "speechre/common.hpp"
#include "speechre/optim.hpp"
#include "speechre/rng.hpp"
#include "speechre/tensor.hpp"
#include "speechre/vocab.hpp"

namespace speechre {

// Encoder-decoder sequence model over feature matrices. Pre-norm residual
// blocks throughout; the encoder mean-pools frames by `downsample` before the
// attention stack, and the decoder is autoregressive over vocabulary ids.
struct ModelConfig {
    std::size_t d_mel = 16;         // input feature dimensionality
    std::size_t d_h = 48;           // model width
    std::size_t n_heads = 4;
    std::size_t d_ff = 192;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t downsample = 2;     // frame block size for mean pooling
    std::size_t max_src_frames = 4096;
    std::size_t max_tgt_len = 256;  // decoder positions, prompt included

    void validate() const {
        if (d_mel == 0 || d_h == 0 || n_heads == 0 || d_ff == 0) {
            throw ConfigError("model: dimensions must be positive");
        }
        if (d_h % n_heads != 0) throw ConfigError("model: d_h must be divisible by n_heads");
        if (enc_layers == 0 || dec_layers == 0) throw ConfigError("model: need at least 1 layer");
        if (downsample == 0) throw ConfigError("model: downsample must be >= 1");
        if (max_src_frames == 0 || max_tgt_len < 2) throw ConfigError("model: sequence limits");
    }
};

// Classic sinusoidal position encoding, rows are positions.
inline Tensor sinusoidal_posenc(std::size_t len, std::size_t dim) {
    Tensor pe({len, dim});
    for (std::size_t pos = 0; pos < len; ++pos) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double expo = static_cast<double>(j - (j % 2)) / static_cast<double>(dim);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
            pe(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return pe;
}

// Additive causal mask {t,t}: 0 where key <= query position, else -1e30.
inline Tensor causal_mask(std::size_t t) {
    Tensor m({t, t});
    for (std::size_t i = 0; i < t; ++i)
        for (std::size_t j = i + 1; j < t; ++j) m(i, j) = -1e30;
    return m;
}

namespace detail {

inline void init_ln(ad::ParamStore& store, const std::string& base, std::size_t d) {
    store.add(base + ".g", Tensor::full({d}, 1.0));
    store.add(base + ".b", Tensor::zeros({d}));
}

inline void init_attn(ad::ParamStore& store, const std::string& base, std::size_t d, Rng& rng) {
    for (const char* w : {".wq", ".wk", ".wv", ".wo"})
        store.add(base + w, init::linear_weight(d, d, rng));
    for (const char* b : {".bq", ".bk", ".bv", ".bo"}) store.add(base + b, Tensor::zeros({d}));
}

inline void init_ffn(ad::ParamStore& store, const std::string& base, std::size_t d,
                     std::size_t d_ff, Rng& rng) {
    store.add(base + ".w1", init::linear_weight(d, d_ff, rng));
    store.add(base + ".b1", Tensor::zeros({d_ff}));
    store.add(base + ".w2", init::linear_weight(d_ff, d, rng));
    store.add(base + ".b2", Tensor::zeros({d}));
}

}  // namespace detail

inline void init_backbone_params(ad::ParamStore& store, const ModelConfig& config,
                                 std::size_t vocab_size, Rng& rng) {
    config.validate();
    if (vocab_size < 4) throw ConfigError("model: vocabulary too small");
    store.add("src_proj.w", init::linear_weight(config.d_mel, config.d_h, rng));
    store.add("src_proj.b", Tensor::zeros({config.d_h}));
    for (std::size_t i = 0; i < config.enc_layers; ++i) {
        const std::string base = "enc." + std::to_string(i);
        detail::init_ln(store, base + ".ln1", config.d_h);
        detail::init_attn(store, base + ".attn", config.d_h, rng);
        detail::init_ln(store, base + ".ln2", config.d_h);
        detail::init_ffn(store, base + ".ffn", config.d_h, config.d_ff, rng);
    }
    detail::init_ln(store, "enc.final_ln", config.d_h);
    store.add("dec.embed", init::embedding(vocab_size, config.d_h, rng));
    for (std::size_t i = 0; i < config.dec_layers; ++i) {
        const std::string base = "dec." + std::to_string(i);
        detail::init_ln(store, base + ".ln1", config.d_h);
        detail::init_attn(store, base + ".self", config.d_h, rng);
        detail::init_ln(store, base + ".ln2", config.d_h);
        detail::init_attn(store, base + ".cross", config.d_h, rng);
        detail::init_ln(store, base + ".ln3", config.d_h);
        detail::init_ffn(store, base + ".ffn", config.d_h, config.d_ff, rng);
    }
    detail::init_ln(store, "dec.final_ln", config.d_h);
    store.add("lm_head.w", init::linear_weight(config.d_h, vocab_size, rng));
    store.add("lm_head.b", Tensor::zeros({vocab_size}));
}

namespace detail {

inline ad::Var ln_block(ad::TapeParams& params, const std::string& base, ad::Var x) {
    ad::Tape& tape = params.tape();
    return tape.layer_norm(x, params[base + ".g"], params[base + ".b"]);
}

inline ad::Var attention_block(ad::TapeParams& params, const std::string& base, ad::Var q_in,
                               ad::Var kv_in, std::size_t n_heads, const Tensor* add_mask) {
    ad::Tape& tape = params.tape();
    ad::Var q = tape.add_row(tape.matmul(q_in, params[base + ".wq"]), params[base + ".bq"]);
    ad::Var k = tape.add_row(tape.matmul(kv_in, params[base + ".wk"]), params[base + ".bk"]);
    ad::Var v = tape.add_row(tape.matmul(kv_in, params[base + ".wv"]), params[base + ".bv"]);
    const std::size_t d = tape.val(q).dim(1);
    const std::size_t dk = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    std::vector<ad::Var> heads;
    heads.reserve(n_heads);
    for (std::size_t h = 0; h < n_heads; ++h) {
        ad::Var qh = tape.slice_cols(q, h * dk, dk);
        ad::Var kh = tape.slice_cols(k, h * dk, dk);
        ad::Var vh = tape.slice_cols(v, h * dk, dk);
        ad::Var scores = tape.scale(tape.matmul_nt(qh, kh), scale);
        ad::Var probs = tape.softmax_rows(scores, add_mask);
        heads.push_back(tape.matmul(probs, vh));
    }
    ad::Var ctx = heads.size() == 1 ? heads[0] : tape.concat_cols(heads);
    return tape.add_row(tape.matmul(ctx, params[base + ".wo"]), params[base + ".bo"]);
}

inline ad::Var ffn_block(ad::TapeParams& params, const std::string& base, ad::Var x) {
    ad::Tape& tape = params.tape();
    ad::Var h = tape.relu(tape.add_row(tape.matmul(x, params[base + ".w1"]), params[base + ".b1"]));
    return tape.add_row(tape.matmul(h, params[base + ".w2"]), params[base + ".b2"]);
}

}  // namespace detail

// Encoder forward on a tape: {frames, d_mel} -> {ceil(frames/downsample), d_h}.
inline ad::Var encode_on_tape(ad::TapeParams& params, const ModelConfig& config, ad::Var src) {
    config.validate();
    ad::Tape& tape = params.tape();
    const Tensor& s = tape.val(src);
    if (s.rank() != 2 || s.dim(1) != config.d_mel) {
        throw ContractError("encode: features must be {frames, " + std::to_string(config.d_mel) +
                            "}");
    }
    if (s.dim(0) == 0) throw ContractError("encode: empty feature matrix");
    if (s.dim(0) > config.max_src_frames) {
        throw ContractError("encode: " + std::to_string(s.dim(0)) + " frames exceeds limit " +
                            std::to_string(config.max_src_frames));
    }
    ad::Var x = tape.add_row(tape.matmul(src, params["src_proj.w"]), params["src_proj.b"]);
    if (config.downsample > 1) x = tape.mean_pool_rows(x, config.downsample);
    x = tape.add_const(x, sinusoidal_posenc(tape.val(x).dim(0), config.d_h));
    for (std::size_t i = 0; i < config.enc_layers; ++i) {
        const std::string base = "enc." + std::to_string(i);
        ad::Var n1 = detail::ln_block(params, base + ".ln1", x);
        x = tape.add(x, detail::attention_block(params, base + ".attn", n1, n1, config.n_heads,
                                                nullptr));
        x = tape.add(x, detail::ffn_block(params, base + ".ffn",
                                          detail::ln_block(params, base + ".ln2", x)));
    }
    return detail::ln_block(params, "enc.final_ln", x);
}

// Teacher-forced decoder forward on a tape: token ids -> {T, V} log-probs.
inline ad::Var decode_logprobs_on_tape(ad::TapeParams& params, const ModelConfig& config,
                                       ad::Var hidden, const std::vector<int>& input_ids,
                                       const Tensor* causal) {
    config.validate();
    if (input_ids.empty()) throw ContractError("decode: empty input sequence");
    if (input_ids.size() > config.max_tgt_len) {
        throw ContractError("decode: sequence length " + std::to_string(input_ids.size()) +
                            " exceeds limit " + std::to_string(config.max_tgt_len));
    }
    ad::Tape& tape = params.tape();
    Tensor local_mask;
    if (causal == nullptr) {
        local_mask = causal_mask(input_ids.size());
        causal = &local_mask;
    }
    ad::Var x = tape.embed_rows(params["dec.embed"], input_ids);
    x = tape.add_const(x, sinusoidal_posenc(input_ids.size(), config.d_h));
    for (std::size_t i = 0; i < config.dec_layers; ++i) {
        const std::string base = "dec." + std::to_string(i);
        ad::Var n1 = detail::ln_block(params, base + ".ln1", x);
        x = tape.add(x, detail::attention_block(params, base + ".self", n1, n1, config.n_heads,
                                                causal));
        x = tape.add(x, detail::attention_block(params, base + ".cross",
                                                detail::ln_block(params, base + ".ln2", x), hidden,
                                                config.n_heads, nullptr));
        x = tape.add(x, detail::ffn_block(params, base + ".ffn",
                                          detail::ln_block(params, base + ".ln3", x)));
    }
    x = detail::ln_block(params, "dec.final_ln", x);
    x = tape.add_row(tape.matmul(x, params["lm_head.w"]), params["lm_head.b"]);
    return tape.log_softmax_rows(x);
}

// Inference-mode encoder: plain tensor in, plain tensor out.
inline Tensor encode(ad::ParamStore& store, const ModelConfig& config, const Tensor& features) {
    ad::Tape tape;
    ad::TapeParams params(tape, store, /*trainable=*/false);
    ad::Var src = tape.leaf(features, false);
    return tape.val(encode_on_tape(params, config, src));
}

// Reference next-token distribution via full teacher-forced recompute; used
// to cross-check the incremental decoder.
inline std::vector<double> next_token_probs_reference(ad::ParamStore& store,
                                                      const ModelConfig& config,
                                                      const Tensor& hidden,
                                                      const std::vector<int>& prefix) {
    ad::Tape tape;
    ad::TapeParams params(tape, store, /*trainable=*/false);
    ad::Var h = tape.leaf(hidden, false);
    ad::Var logp = decode_logprobs_on_tape(params, config, h, prefix, nullptr);
    const Tensor& lp = tape.val(logp);
    const std::size_t t = lp.dim(0) - 1, v = lp.dim(1);
    std::vector<double> probs(v);
    for (std::size_t j = 0; j < v; ++j) probs[j] = std::exp(lp(t, j));
    return probs;
}

namespace detail {

// out = x * w + b for a single row; w is {in, out}
inline void affine_row(const double* x, const Tensor& w, const Tensor& b,
                       std::vector<double>& out) {
    const std::size_t in = w.dim(0), n = w.dim(1);
    out.assign(n, 0.0);
    for (std::size_t i = 0; i < in; ++i) {
        const double xv = x[i];
        if (xv == 0.0) continue;
        const double* wrow = &w.data[i * n];
        for (std::size_t j = 0; j < n; ++j) out[j] += xv * wrow[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] += b.data[j];
}

inline void layer_norm_row(const double* x, const Tensor& g, const Tensor& b, std::size_t d,
                           std::vector<double>& out, double eps = 1e-5) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        const double dv = x[j] - mean;
        var += dv * dv;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    out.resize(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mean) * inv * g.data[j] + b.data[j];
}

inline void softmax_inplace(std::vector<double>& v) {
    double mx = v[0];
    for (double x : v) mx = std::max(mx, x);
    double sum = 0.0;
    for (double& x : v) {
        x = std::exp(x - mx);
        sum += x;
    }
    for (double& x : v) x /= sum;
}

}  // namespace detail

// Incremental greedy decoder with per-layer key/value caches. Numerically
// equivalent to the teacher-forced forward (verified by a parity test); turns
// O(T^3) generation into O(T^2).
class DecoderSession {
public:
    DecoderSession(ad::ParamStore& store, const ModelConfig& config, const Tensor& hidden)
        : store_(store), config_(config) {
        config.validate();
        if (hidden.rank() != 2 || hidden.dim(1) != config.d_h) {
            throw ContractError("decoder session: hidden must be {frames, d_h}");
        }
        if (hidden.dim(0) == 0) throw ContractError("decoder session: empty hidden state");
        layers_.resize(config.dec_layers);
        const std::size_t l = hidden.dim(0), d = config.d_h;
        for (std::size_t i = 0; i < config.dec_layers; ++i) {
            const std::string base = "dec." + std::to_string(i) + ".cross";
            Layer& layer = layers_[i];
            layer.cross_k = Tensor::zeros({l, d});
            layer.cross_v = Tensor::zeros({l, d});
            ad::t_matmul_acc(layer.cross_k, hidden, store.at(base + ".wk"));
            ad::t_matmul_acc(layer.cross_v, hidden, store.at(base + ".wv"));
            const Tensor& bk = store.at(base + ".bk");
            const Tensor& bv = store.at(base + ".bv");
            for (std::size_t r = 0; r < l; ++r) {
                for (std::size_t j = 0; j < d; ++j) {
                    layer.cross_k(r, j) += bk.data[j];
                    layer.cross_v(r, j) += bv.data[j];
                }
            }
        }
    }

    std::size_t length() const { return steps_; }

    // Feed one token; returns the distribution over the next token.
    const std::vector<double>& step(int token_id) {
        if (steps_ >= config_.max_tgt_len) {
            throw ContractError("decoder session: exceeded max_tgt_len");
        }
        const std::size_t d = config_.d_h;
        const Tensor& embed = store_.at("dec.embed");
        if (token_id < 0 || static_cast<std::size_t>(token_id) >= embed.dim(0)) {
            throw ContractError("decoder session: token id out of range");
        }
        std::vector<double> x(d);
        const std::size_t pos = steps_;
        for (std::size_t j = 0; j < d; ++j) {
            const double expo = static_cast<double>(j - (j % 2)) / static_cast<double>(d);
            const double angle = static_cast<double>(pos) / std::pow(10000.0, expo);
            x[j] = embed.data[static_cast<std::size_t>(token_id) * d + j] +
                   ((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
        }

        std::vector<double> norm, q, k, v, ctx(d), tmp;
        for (std::size_t i = 0; i < config_.dec_layers; ++i) {
            const std::string base = "dec." + std::to_string(i);
            Layer& layer = layers_[i];

            // causal self-attention over the cache (keys/values for <= pos)
            detail::layer_norm_row(x.data(), store_.at(base + ".ln1.g"),
                                   store_.at(base + ".ln1.b"), d, norm);
            detail::affine_row(norm.data(), store_.at(base + ".self.wq"),
                               store_.at(base + ".self.bq"), q);
            detail::affine_row(norm.data(), store_.at(base + ".self.wk"),
                               store_.at(base + ".self.bk"), k);
            detail::affine_row(norm.data(), store_.at(base + ".self.wv"),
                               store_.at(base + ".self.bv"), v);
            layer.self_k.insert(layer.self_k.end(), k.begin(), k.end());
            layer.self_v.insert(layer.self_v.end(), v.begin(), v.end());
            attend(q, layer.self_k.data(), layer.self_v.data(), pos + 1, ctx);
            detail::affine_row(ctx.data(), store_.at(base + ".self.wo"),
                               store_.at(base + ".self.bo"), tmp);
            for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];

            // cross-attention over the encoded features
            detail::layer_norm_row(x.data(), store_.at(base + ".ln2.g"),
                                   store_.at(base + ".ln2.b"), d, norm);
            detail::affine_row(norm.data(), store_.at(base + ".cross.wq"),
                               store_.at(base + ".cross.bq"), q);
            attend(q, layer.cross_k.data.data(), layer.cross_v.data.data(), layer.cross_k.dim(0),
                   ctx);
            detail::affine_row(ctx.data(), store_.at(base + ".cross.wo"),
                               store_.at(base + ".cross.bo"), tmp);
            for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];

            // position-wise feed-forward
            detail::layer_norm_row(x.data(), store_.at(base + ".ln3.g"),
                                   store_.at(base + ".ln3.b"), d, norm);
            detail::affine_row(norm.data(), store_.at(base + ".ffn.w1"),
                               store_.at(base + ".ffn.b1"), q);
            for (double& h : q) h = h > 0.0 ? h : 0.0;
            detail::affine_row(q.data(), store_.at(base + ".ffn.w2"), store_.at(base + ".ffn.b2"),
                               tmp);
            for (std::size_t j = 0; j < d; ++j) x[j] += tmp[j];
        }

        detail::layer_norm_row(x.data(), store_.at("dec.final_ln.g"), store_.at("dec.final_ln.b"),
                               d, norm);
        detail::affine_row(norm.data(), store_.at("lm_head.w"), store_.at("lm_head.b"), probs_);
        detail::softmax_inplace(probs_);
        ++steps_;
        return probs_;
    }

private:
    struct Layer {
        std::vector<double> self_k;  // t rows of d_h
        std::vector<double> self_v;
        Tensor cross_k;              // {frames, d_h}
        Tensor cross_v;
    };

    // multi-head attention of one query row against `rows` cached k/v rows
    void attend(const std::vector<double>& q, const double* keys, const double* values,
                std::size_t rows, std::vector<double>& ctx) {
        const std::size_t d = config_.d_h;
        const std::size_t heads = config_.n_heads;
        const std::size_t dk = d / heads;
        const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
        scores_.resize(rows);
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dk;
            for (std::size_t r = 0; r < rows; ++r) {
                const double* krow = keys + r * d + off;
                double acc = 0.0;
                for (std::size_t u = 0; u < dk; ++u) acc += q[off + u] * krow[u];
                scores_[r] = acc * scale;
            }
            detail::softmax_inplace(scores_);
            for (std::size_t r = 0; r < rows; ++r) {
                const double p = scores_[r];
                const double* vrow = values + r * d + off;
                for (std::size_t u = 0; u < dk; ++u) ctx[off + u] += p * vrow[u];
            }
        }
    }

    ad::ParamStore& store_;
    ModelConfig config_;
    std::vector<Layer> layers_;
    std::vector<double> probs_;
    std::vector<double> scores_;
    std::size_t steps_ = 0;
};

struct GenerateResult {
    std::vector<int> tokens;      // generated ids, end marker stripped
    bool truncated = false;       // hit the length budget before the end marker
};

// Greedy decoding: feed the prompt prefix, then repeatedly take the highest-
// probability token (padding and begin markers excluded; ties break to the
// lowest id) until the end marker or the budget.
inline GenerateResult greedy_generate(ad::ParamStore& store, const ModelConfig& config,
                                      const Vocabulary& vocab, const Tensor& hidden,
                                      const std::vector<int>& prefix, std::size_t max_new) {
    if (prefix.empty()) throw ContractError("generate: prefix must be non-empty");
    if (prefix.size() >= config.max_tgt_len) {
        throw ContractError("generate: prefix length " + std::to_string(prefix.size()) +
                            " leaves no room under max_tgt_len " +
                            std::to_string(config.max_tgt_len));
    }
    const std::size_t budget = std::min(max_new, config.max_tgt_len - prefix.size());
    DecoderSession session(store, config, hidden);
    const std::vector<double>* probs = nullptr;
    for (int id : prefix) probs = &session.step(id);

    GenerateResult result;
    for (std::size_t n = 0; n < budget; ++n) {
        int best = -1;
        double best_p = -1.0;
        for (std::size_t j = 0; j < probs->size(); ++j) {
            const int id = static_cast<int>(j);
            if (id == vocab.pad() || id == vocab.bos()) continue;
            if ((*probs)[j] > best_p) {
                best_p = (*probs)[j];
                best = id;
            }
        }
        if (best == vocab.eos()) return result;
        result.tokens.push_back(best);
        if (n + 1 < budget) probs = &session.step(best);
    }
    result.truncated = true;
    return result;
}

// Mean negative log-likelihood of `targets` under row-wise distributions,
// restricted to masked-in positions.
inline double cross_entropy_masked(const Tensor& probs, const std::vector<int>& targets,
                                   const std::vector<char>& mask) {
    if (probs.rank() != 2 || targets.size() != probs.dim(0) || mask.size() != probs.dim(0)) {
        throw ContractError("cross_entropy: shape mismatch");
    }
    double loss = 0.0;
    std::size_t n = 0;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (!mask[t]) continue;
        const auto tgt = static_cast<std::size_t>(targets[t]);
        if (targets[t] < 0 || tgt >= probs.dim(1)) {
            throw ContractError("cross_entropy: target out of range");
        }
        loss -= std::log(probs(t, tgt));
        ++n;
    }
    if (n == 0) throw ContractError("cross_entropy: no masked-in positions");
    return loss / static_cast<double>(n);
}

}  // namespace speechre
