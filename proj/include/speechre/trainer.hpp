#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "speechre/autodiff.hpp"
#include "speechre/backbone.hpp"
#include "speechre/codec.hpp"
#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/ensemble.hpp"
#include "speechre/evaluation.hpp"
#include "speechre/lrph.hpp"
#include "speechre/optim.hpp"
#include "speechre/rng.hpp"
#include "speechre/schema.hpp"
#include "speechre/vocab.hpp"

namespace speechre {

// One decoder training example: a sample rendered under one generation order.
// `full` is [begin, prompt tokens, order control tokens, linearized tree,
// end]; positions before `first_lin` are prompt context and receive no loss.
struct TrainingTarget {
    std::string sample_id;
    OrderView view;
    std::vector<int> full;
    std::size_t first_lin = 0;
};

// Expand one sample into one target per generation order. During training the
// prompt is built from the gold relation set with a random subset of
// positives dropped (independently per target); otherwise the full gold set
// is used.
inline std::vector<TrainingTarget> expand_targets(const Sample& sample,
                                                  const RelationSchema& schema,
                                                  const Vocabulary& vocab, Rng* mask_rng,
                                                  bool training) {
    const std::set<int> gold = gold_relation_ids(sample, schema);
    std::vector<TrainingTarget> out;
    out.reserve(OrderView::all().size());
    for (const OrderView& view : OrderView::all()) {
        std::set<int> prompt_ids = gold;
        if (training) {
            if (mask_rng == nullptr) {
                throw ContractError("expand_targets: training expansion needs an rng");
            }
            prompt_ids = mask_positive_relations(gold, *mask_rng, true);
        }
        TrainingTarget t;
        t.sample_id = sample.id;
        t.view = view;
        t.full.push_back(vocab.bos());
        for (int id : vocab.encode(prompt_tokens(prompt_ids, schema).texts()))
            t.full.push_back(id);
        for (int id : vocab.encode(ctrl_tokens(view).texts())) t.full.push_back(id);
        t.first_lin = t.full.size();
        const TokenSequence lin = linearize(treeify(sample.triples, view), view);
        for (int id : vocab.encode(lin.texts())) t.full.push_back(id);
        t.full.push_back(vocab.eos());
        out.push_back(std::move(t));
    }
    return out;
}

// Teacher-forcing views of a target: input row t predicts full[t+1]; loss is
// masked to the linearized tree and the end marker, never the prompt or the
// order control tokens.
inline void target_io(const TrainingTarget& t, std::vector<int>& input, std::vector<int>& target,
                      std::vector<char>& mask) {
    if (t.full.size() < 2) throw ContractError("target_io: degenerate target");
    input.assign(t.full.begin(), t.full.end() - 1);
    target.assign(t.full.begin() + 1, t.full.end());
    mask.assign(input.size(), 0);
    for (std::size_t i = 0; i < input.size(); ++i) {
        if (i + 1 >= t.first_lin) mask[i] = 1;
    }
}

struct TrainBatchItem {
    const std::string* sample_id = nullptr;
    const Tensor* features = nullptr;
    const std::vector<double>* labels = nullptr;  // per-relation 0/1
    std::vector<const TrainingTarget*> targets;
};

struct TrainStepStats {
    double loss_total = 0.0;
    double loss_lrp = 0.0;
    double loss_dec = 0.0;
    std::size_t n_targets = 0;
};

// One optimizer step on a batch: encode each sample once, score relations,
// decode every target, and step on loss_lrp + loss_dec (means over the batch
// and over targets respectively).
inline TrainStepStats train_step(ad::ParamStore& store, AdamOptimizer& optimizer,
                                 const ModelConfig& model_config, const LrphConfig& lrph_config,
                                 const std::vector<TrainBatchItem>& batch, Rng& dropout_rng) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    ad::Tape tape;
    ad::TapeParams params(tape, store, /*trainable=*/true);
    ad::Var lrp_sum{}, dec_sum{};
    std::size_t n_targets = 0;
    std::map<std::size_t, Tensor> causal_masks;
    std::vector<int> input, target;
    std::vector<char> mask;
    for (const TrainBatchItem& item : batch) {
        ad::Var src = tape.leaf(*item.features, false);
        ad::Var hidden = encode_on_tape(params, model_config, src);
        ad::Var scores =
            lrph_scores(params, kLrphPrefix, lrph_config, hidden, &dropout_rng, /*training=*/true);
        ad::Var bce = tape.bce_mean(scores, *item.labels);
        lrp_sum = lrp_sum.valid() ? tape.add(lrp_sum, bce) : bce;
        for (const TrainingTarget* t : item.targets) {
            target_io(*t, input, target, mask);
            auto mit = causal_masks.find(input.size());
            if (mit == causal_masks.end()) {
                mit = causal_masks.emplace(input.size(), causal_mask(input.size())).first;
            }
            ad::Var logp =
                decode_logprobs_on_tape(params, model_config, hidden, input, &mit->second);
            ad::Var nll = tape.nll_masked(logp, target, mask);
            dec_sum = dec_sum.valid() ? tape.add(dec_sum, nll) : nll;
            ++n_targets;
        }
    }
    if (n_targets == 0) throw ContractError("train_step: batch has no decoder targets");
    ad::Var loss_lrp = tape.scale(lrp_sum, 1.0 / static_cast<double>(batch.size()));
    ad::Var loss_dec = tape.scale(dec_sum, 1.0 / static_cast<double>(n_targets));
    ad::Var loss_total = tape.add(loss_lrp, loss_dec);

    TrainStepStats stats;
    stats.loss_total = tape.val(loss_total).data[0];
    stats.loss_lrp = tape.val(loss_lrp).data[0];
    stats.loss_dec = tape.val(loss_dec).data[0];
    stats.n_targets = n_targets;
    if (!std::isfinite(stats.loss_total)) {
        std::vector<std::string> ids;
        for (const TrainBatchItem& item : batch) ids.push_back(*item.sample_id);
        throw Error("training loss is not finite on batch [" + join(ids, ", ") + "]");
    }
    tape.backward(loss_total);
    optimizer.step(store, params.gradients());
    return stats;
}

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    double lr = 1e-3;
    double grad_clip = 1.0;     // global-norm clip; 0 disables
    std::size_t eval_every = 0;  // dev evals every N epochs; 0 = final only
    double feature_noise_std = 0.0;  // train-time additive input noise; 0 disables
    bool cosine_lr = false;          // cosine-decay the learning rate over epochs
    std::uint64_t seed = 0x5eed;

    void validate() const {
        if (batch_size == 0) throw ConfigError("train: batch_size must be positive");
        if (lr <= 0.0) throw ConfigError("train: lr must be positive");
        if (grad_clip < 0.0) throw ConfigError("train: grad_clip must be >= 0");
        if (feature_noise_std < 0.0) {
            throw ConfigError("train: feature_noise_std must be >= 0");
        }
    }
};

struct Dataset {
    std::vector<Sample> samples;
    std::vector<Tensor> features;  // aligned with samples

    void validate() const {
        if (features.size() != samples.size()) {
            throw ContractError("dataset: features not aligned with samples");
        }
    }
};

struct EvalSummary {
    std::map<std::string, double> view_triplet_f1;  // by generation-order code
    double ensemble_triplet_f1 = 0.0;
    EvalReport ensemble_report;
};

// Run full inference over a dataset and score the ensemble output and each
// single generation order against the gold triples.
inline EvalSummary evaluate_dataset(ad::ParamStore& store, const ModelConfig& model_config,
                                    const LrphConfig& lrph_config,
                                    const EnsembleConfig& ensemble_config,
                                    const RelationSchema& schema, const Vocabulary& vocab,
                                    const Dataset& data) {
    data.validate();
    std::vector<Prediction> voted;
    std::map<std::string, std::vector<Prediction>> per_view;
    for (std::size_t i = 0; i < data.samples.size(); ++i) {
        SampleInference inf =
            infer_sample(store, model_config, lrph_config, schema, vocab, data.features[i],
                         data.samples[i].id, ensemble_config);
        voted.push_back({inf.sample_id, inf.voted});
        for (const ViewPrediction& vp : inf.views) {
            per_view[vp.view.code()].push_back({inf.sample_id, vp.triples});
        }
    }
    EvalSummary summary;
    summary.ensemble_report = evaluate(data.samples, voted, {});
    summary.ensemble_triplet_f1 = summary.ensemble_report.triplet.f1;
    for (const auto& [code, preds] : per_view) {
        summary.view_triplet_f1[code] = evaluate(data.samples, preds, {}).triplet.f1;
    }
    return summary;
}

struct FitResult {
    std::size_t steps = 0;
    std::vector<double> step_loss_total;
    std::vector<double> step_loss_lrp;
    std::vector<double> step_loss_dec;
    double best_dev_ensemble_f1 = -1.0;  // stays -1 when there is no dev set
    EvalSummary final_dev;
};

// Joint training: every epoch re-expands targets (fresh prompt masking),
// shuffles samples, and steps on sample batches. Dev inference runs every
// `eval_every` epochs and once at the end; the best parameters by ensemble
// triplet F1 are copied into `best_params` when given.
inline FitResult fit(ad::ParamStore& store, const RelationSchema& schema, const Vocabulary& vocab,
                     const ModelConfig& model_config, const LrphConfig& lrph_config,
                     const EnsembleConfig& ensemble_config, const TrainConfig& train_config,
                     const Dataset& train, const Dataset& dev,
                     const std::function<void(const nlohmann::json&)>& on_metrics = {},
                     ad::ParamStore* best_params = nullptr) {
    train_config.validate();
    train.validate();
    dev.validate();
    if (train.samples.empty()) throw ContractError("fit: empty training set");

    AdamOptimizer optimizer(
        {train_config.lr, 0.9, 0.999, 1e-8, train_config.grad_clip});
    Rng dropout_rng(train_config.seed, "train.dropout");
    const std::size_t n = train.samples.size();

    std::vector<std::vector<double>> labels;
    labels.reserve(n);
    for (const Sample& s : train.samples) labels.push_back(relation_labels(s, schema));

    FitResult result;
    auto emit = [&on_metrics](const nlohmann::json& j) {
        if (on_metrics) on_metrics(j);
    };
    auto run_eval = [&](std::size_t epoch, bool final_eval) {
        if (dev.samples.empty()) return;
        EvalSummary summary = evaluate_dataset(store, model_config, lrph_config, ensemble_config,
                                               schema, vocab, dev);
        nlohmann::json views = nlohmann::json::object();
        for (const auto& [code, f1] : summary.view_triplet_f1) views[code] = f1;
        emit({{"kind", "eval"},
              {"epoch", epoch},
              {"ensemble", report_to_json(summary.ensemble_report)},
              {"view_triplet_f1", views}});
        if (best_params != nullptr && summary.ensemble_triplet_f1 > result.best_dev_ensemble_f1) {
            *best_params = store;
        }
        result.best_dev_ensemble_f1 =
            std::max(result.best_dev_ensemble_f1, summary.ensemble_triplet_f1);
        if (final_eval) result.final_dev = std::move(summary);
    };

    for (std::size_t epoch = 1; epoch <= train_config.epochs; ++epoch) {
        Rng expand_rng(train_config.seed, "train.expand:" + std::to_string(epoch));
        Rng shuffle_rng(train_config.seed, "train.shuffle:" + std::to_string(epoch));
        Rng noise_rng(train_config.seed, "train.noise:" + std::to_string(epoch));
        if (train_config.cosine_lr) {
            const double frac = static_cast<double>(epoch - 1) /
                                static_cast<double>(train_config.epochs);
            optimizer.set_lr(0.5 * train_config.lr *
                             (1.0 + std::cos(std::numbers::pi * frac)));
        }
        std::vector<std::vector<TrainingTarget>> targets(n);
        for (std::size_t i = 0; i < n; ++i) {
            targets[i] = expand_targets(train.samples[i], schema, vocab, &expand_rng, true);
        }
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order);

        double sum_total = 0.0, sum_lrp = 0.0, sum_dec = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t start = 0; start < n; start += train_config.batch_size) {
            const std::size_t stop = std::min(n, start + train_config.batch_size);
            std::vector<TrainBatchItem> batch;
            std::vector<Tensor> noisy;  // jittered feature copies; addresses must stay stable
            batch.reserve(stop - start);
            noisy.reserve(stop - start);
            for (std::size_t b = start; b < stop; ++b) {
                const std::size_t i = order[b];
                TrainBatchItem item;
                item.sample_id = &train.samples[i].id;
                item.features = &train.features[i];
                if (train_config.feature_noise_std > 0.0) {
                    Tensor jittered = train.features[i];
                    for (double& v : jittered.data) {
                        v += noise_rng.normal(0.0, train_config.feature_noise_std);
                    }
                    noisy.push_back(std::move(jittered));
                    item.features = &noisy.back();
                }
                item.labels = &labels[i];
                for (const TrainingTarget& t : targets[i]) item.targets.push_back(&t);
                batch.push_back(std::move(item));
            }
            TrainStepStats stats = train_step(store, optimizer, model_config, lrph_config, batch,
                                              dropout_rng);
            result.step_loss_total.push_back(stats.loss_total);
            result.step_loss_lrp.push_back(stats.loss_lrp);
            result.step_loss_dec.push_back(stats.loss_dec);
            sum_total += stats.loss_total;
            sum_lrp += stats.loss_lrp;
            sum_dec += stats.loss_dec;
            ++epoch_steps;
            ++result.steps;
        }
        emit({{"kind", "epoch"},
              {"epoch", epoch},
              {"steps", epoch_steps},
              {"loss_total", sum_total / static_cast<double>(epoch_steps)},
              {"loss_lrp", sum_lrp / static_cast<double>(epoch_steps)},
              {"loss_dec", sum_dec / static_cast<double>(epoch_steps)}});
        if (train_config.eval_every > 0 && epoch % train_config.eval_every == 0 &&
            epoch < train_config.epochs) {
            run_eval(epoch, false);
        }
    }
    run_eval(train_config.epochs, true);
    if (best_params != nullptr && result.best_dev_ensemble_f1 < 0.0) *best_params = store;
    return result;
}

}  // namespace speechre
