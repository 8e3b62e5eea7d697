#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "speechre/checkpoint.hpp"
#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/ensemble.hpp"
#include "speechre/evaluation.hpp"
#include "speechre/features.hpp"
#include "speechre/lrph.hpp"
#include "speechre/schema.hpp"
#include "speechre/toy_corpus.hpp"
#include "speechre/trainer.hpp"
#include "speechre/vocab.hpp"

namespace speechre {

// ---------------------------------------------------------------------------
// Run configuration: one JSON document drives a whole experiment. Unknown
// keys are rejected everywhere so typos fail loudly instead of silently
// falling back to defaults.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where,
                       std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool known = false;
        for (const char* a : allowed) {
            if (key == a) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError(where + ": unknown key '" + key + "'");
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(where + "." + key + ": " + e.what());
    }
}

}  // namespace detail

struct RunPaths {
    std::string schema;
    std::string train_manifest;
    std::string dev_manifest;  // optional
    std::string out_dir;
};

struct RunConfig {
    std::uint64_t seed = 0x5eed;
    RunPaths paths;
    SynthConfig synth;
    MelConfig mel;
    ModelConfig model;
    LrphConfig lrph;
    TrainConfig train;
    EnsembleConfig ensemble;
    EvalOptions eval;
};

inline SynthConfig synth_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "synth", {"d_dims", "frames_per_token", "noise_std", "master_seed"});
    SynthConfig c;
    c.d_dims = detail::get_or(j, "d_dims", c.d_dims, "synth");
    c.frames_per_token = detail::get_or(j, "frames_per_token", c.frames_per_token, "synth");
    c.noise_std = detail::get_or(j, "noise_std", c.noise_std, "synth");
    c.master_seed = detail::get_or(j, "master_seed", c.master_seed, "synth");
    return c;
}

inline nlohmann::json synth_config_to_json(const SynthConfig& c) {
    return {{"d_dims", c.d_dims},
            {"frames_per_token", c.frames_per_token},
            {"noise_std", c.noise_std},
            {"master_seed", c.master_seed}};
}

inline MelConfig mel_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "mel", {"sample_rate", "n_mels", "hop_ms", "win_ms", "fmin", "fmax"});
    MelConfig c;
    c.sample_rate = detail::get_or(j, "sample_rate", c.sample_rate, "mel");
    c.n_mels = detail::get_or(j, "n_mels", c.n_mels, "mel");
    c.hop_ms = detail::get_or(j, "hop_ms", c.hop_ms, "mel");
    c.win_ms = detail::get_or(j, "win_ms", c.win_ms, "mel");
    c.fmin = detail::get_or(j, "fmin", c.fmin, "mel");
    c.fmax = detail::get_or(j, "fmax", c.fmax, "mel");
    return c;
}

inline nlohmann::json mel_config_to_json(const MelConfig& c) {
    return {{"sample_rate", c.sample_rate}, {"n_mels", c.n_mels}, {"hop_ms", c.hop_ms},
            {"win_ms", c.win_ms},           {"fmin", c.fmin},     {"fmax", c.fmax}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "model",
                       {"d_mel", "d_h", "n_heads", "d_ff", "enc_layers", "dec_layers",
                        "downsample", "max_src_frames", "max_tgt_len"});
    ModelConfig c;
    c.d_mel = detail::get_or(j, "d_mel", c.d_mel, "model");
    c.d_h = detail::get_or(j, "d_h", c.d_h, "model");
    c.n_heads = detail::get_or(j, "n_heads", c.n_heads, "model");
    c.d_ff = detail::get_or(j, "d_ff", c.d_ff, "model");
    c.enc_layers = detail::get_or(j, "enc_layers", c.enc_layers, "model");
    c.dec_layers = detail::get_or(j, "dec_layers", c.dec_layers, "model");
    c.downsample = detail::get_or(j, "downsample", c.downsample, "model");
    c.max_src_frames = detail::get_or(j, "max_src_frames", c.max_src_frames, "model");
    c.max_tgt_len = detail::get_or(j, "max_tgt_len", c.max_tgt_len, "model");
    c.validate();
    return c;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"d_mel", c.d_mel},
            {"d_h", c.d_h},
            {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},
            {"enc_layers", c.enc_layers},
            {"dec_layers", c.dec_layers},
            {"downsample", c.downsample},
            {"max_src_frames", c.max_src_frames},
            {"max_tgt_len", c.max_tgt_len}};
}

inline LrphConfig lrph_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "lrph",
                       {"channels", "kernel", "pool_h", "pool_w", "dropout_p", "threshold"});
    LrphConfig c;
    c.channels = detail::get_or(j, "channels", c.channels, "lrph");
    c.kernel = detail::get_or(j, "kernel", c.kernel, "lrph");
    c.pool_h = detail::get_or(j, "pool_h", c.pool_h, "lrph");
    c.pool_w = detail::get_or(j, "pool_w", c.pool_w, "lrph");
    c.dropout_p = detail::get_or(j, "dropout_p", c.dropout_p, "lrph");
    c.threshold = detail::get_or(j, "threshold", c.threshold, "lrph");
    c.validate();
    return c;
}

inline nlohmann::json lrph_config_to_json(const LrphConfig& c) {
    return {{"channels", c.channels}, {"kernel", c.kernel},       {"pool_h", c.pool_h},
            {"pool_w", c.pool_w},     {"dropout_p", c.dropout_p}, {"threshold", c.threshold}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "train",
                       {"epochs", "batch_size", "lr", "grad_clip", "eval_every",
                        "feature_noise_std", "cosine_lr"});
    TrainConfig c;
    c.epochs = detail::get_or(j, "epochs", c.epochs, "train");
    c.batch_size = detail::get_or(j, "batch_size", c.batch_size, "train");
    c.lr = detail::get_or(j, "lr", c.lr, "train");
    c.grad_clip = detail::get_or(j, "grad_clip", c.grad_clip, "train");
    c.eval_every = detail::get_or(j, "eval_every", c.eval_every, "train");
    c.feature_noise_std =
        detail::get_or(j, "feature_noise_std", c.feature_noise_std, "train");
    c.cosine_lr = detail::get_or(j, "cosine_lr", c.cosine_lr, "train");
    c.validate();
    return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},
            {"batch_size", c.batch_size},
            {"lr", c.lr},
            {"grad_clip", c.grad_clip},
            {"eval_every", c.eval_every},
            {"feature_noise_std", c.feature_noise_std},
            {"cosine_lr", c.cosine_lr}};
}

inline EnsembleConfig ensemble_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "ensemble", {"lambda_vote", "vote_rule", "max_new_tokens"});
    EnsembleConfig c;
    c.lambda_vote = detail::get_or(j, "lambda_vote", c.lambda_vote, "ensemble");
    c.rule = vote_rule_from_name(
        detail::get_or<std::string>(j, "vote_rule", vote_rule_name(c.rule), "ensemble"));
    c.max_new_tokens = detail::get_or(j, "max_new_tokens", c.max_new_tokens, "ensemble");
    c.validate();
    return c;
}

inline nlohmann::json ensemble_config_to_json(const EnsembleConfig& c) {
    return {{"lambda_vote", c.lambda_vote},
            {"vote_rule", vote_rule_name(c.rule)},
            {"max_new_tokens", c.max_new_tokens}};
}

inline EvalOptions eval_options_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "eval", {"lowercase"});
    EvalOptions c;
    c.lowercase = detail::get_or(j, "lowercase", c.lowercase, "eval");
    return c;
}

inline nlohmann::json eval_options_to_json(const EvalOptions& c) {
    return {{"lowercase", c.lowercase}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    detail::check_keys(j, "config", {"seed", "paths", "synth", "mel", "model", "lrph", "train",
                                     "ensemble", "eval"});
    RunConfig c;
    c.seed = detail::get_or(j, "seed", c.seed, "config");
    if (j.contains("paths")) {
        const nlohmann::json& p = j.at("paths");
        detail::check_keys(p, "paths", {"schema", "train_manifest", "dev_manifest", "out_dir"});
        c.paths.schema = detail::get_or<std::string>(p, "schema", "", "paths");
        c.paths.train_manifest = detail::get_or<std::string>(p, "train_manifest", "", "paths");
        c.paths.dev_manifest = detail::get_or<std::string>(p, "dev_manifest", "", "paths");
        c.paths.out_dir = detail::get_or<std::string>(p, "out_dir", "", "paths");
    }
    if (j.contains("synth")) c.synth = synth_config_from_json(j.at("synth"));
    if (j.contains("mel")) c.mel = mel_config_from_json(j.at("mel"));
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    if (j.contains("lrph")) c.lrph = lrph_config_from_json(j.at("lrph"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("ensemble")) c.ensemble = ensemble_config_from_json(j.at("ensemble"));
    if (j.contains("eval")) c.eval = eval_options_from_json(j.at("eval"));
    c.train.seed = c.seed;
    return c;
}

inline nlohmann::json run_config_to_json(const RunConfig& c) {
    return {{"seed", c.seed},
            {"paths",
             {{"schema", c.paths.schema},
              {"train_manifest", c.paths.train_manifest},
              {"dev_manifest", c.paths.dev_manifest},
              {"out_dir", c.paths.out_dir}}},
            {"synth", synth_config_to_json(c.synth)},
            {"mel", mel_config_to_json(c.mel)},
            {"model", model_config_to_json(c.model)},
            {"lrph", lrph_config_to_json(c.lrph)},
            {"train", train_config_to_json(c.train)},
            {"ensemble", ensemble_config_to_json(c.ensemble)},
            {"eval", eval_options_to_json(c.eval)}};
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    nlohmann::json j;
    try {
        f >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
    }
    return run_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Pipeline steps
// ---------------------------------------------------------------------------

inline std::vector<Tensor> compute_features(const std::vector<Sample>& samples,
                                            const SynthConfig& synth, const MelConfig& mel) {
    std::vector<Tensor> out;
    out.reserve(samples.size());
    for (const Sample& s : samples) out.push_back(sample_features(s, synth, mel).data);
    return out;
}

struct TrainOutcome {
    FitResult fit;
    std::string checkpoint_path;       // final parameters
    std::string best_checkpoint_path;  // best dev ensemble F1 (== final when no dev)
    std::size_t vocab_size = 0;
};

inline TrainOutcome run_train(const RunConfig& config, std::ostream* log = nullptr) {
    if (config.paths.schema.empty() || config.paths.train_manifest.empty() ||
        config.paths.out_dir.empty()) {
        throw ConfigError("train: paths.schema, paths.train_manifest and paths.out_dir required");
    }
    const RelationSchema schema = RelationSchema::load(config.paths.schema);

    Dataset train;
    {
        LoadResult lr = load_manifest(config.paths.train_manifest, schema, {});
        if (log) {
            for (const std::string& m : lr.messages) *log << "warning: " << m << "\n";
        }
        train.samples = std::move(lr.samples);
    }
    Dataset dev;
    if (!config.paths.dev_manifest.empty()) {
        LoadResult lr = load_manifest(config.paths.dev_manifest, schema, {});
        dev.samples = std::move(lr.samples);
    }

    const Vocabulary vocab = Vocabulary::build(schema, train.samples);
    train.features = compute_features(train.samples, config.synth, config.mel);
    dev.features = compute_features(dev.samples, config.synth, config.mel);
    for (std::size_t i = 0; i < train.features.size(); ++i) {
        if (train.features[i].dim(1) != config.model.d_mel) {
            throw ConfigError("train: sample " + train.samples[i].id + " has " +
                              std::to_string(train.features[i].dim(1)) +
                              "-dim features but model.d_mel is " +
                              std::to_string(config.model.d_mel));
        }
    }

    ad::ParamStore params;
    Rng init_rng(config.seed, "init");
    init_backbone_params(params, config.model, vocab.size(), init_rng);
    init_lrph_params(params, kLrphPrefix, config.lrph, static_cast<std::size_t>(schema.size()),
                     init_rng);

    std::filesystem::create_directories(config.paths.out_dir);
    const std::string metrics_path = config.paths.out_dir + "/train_metrics.jsonl";
    std::ofstream metrics(metrics_path, std::ios::binary);
    if (!metrics) throw IoError("cannot open for writing: " + metrics_path);
    auto on_metrics = [&metrics, log](const nlohmann::json& j) {
        metrics << j.dump() << "\n";
        if (log == nullptr) return;
        const std::string kind = j.value("kind", "");
        if (kind == "epoch") {
            *log << "[epoch " << j.at("epoch") << "] loss_total=" << j.at("loss_total")
                 << " loss_lrp=" << j.at("loss_lrp") << " loss_dec=" << j.at("loss_dec") << "\n";
        } else if (kind == "eval") {
            *log << "[eval @ epoch " << j.at("epoch")
                 << "] ensemble_triplet_f1=" << j.at("ensemble").at("triplet").at("f1")
                 << " views=" << j.at("view_triplet_f1").dump() << "\n";
        }
        log->flush();
    };

    ad::ParamStore best;
    TrainOutcome outcome;
    outcome.vocab_size = vocab.size();
    outcome.fit = fit(params, schema, vocab, config.model, config.lrph, config.ensemble,
                      config.train, train, dev, on_metrics, &best);

    const nlohmann::json ckpt_config{{"run", run_config_to_json(config)},
                                     {"schema", schema.to_json()}};
    outcome.checkpoint_path = config.paths.out_dir + "/checkpoint.json";
    save_checkpoint(outcome.checkpoint_path, ckpt_config, vocab, params,
                    static_cast<long long>(outcome.fit.steps));
    outcome.best_checkpoint_path = config.paths.out_dir + "/checkpoint_best.json";
    save_checkpoint(outcome.best_checkpoint_path, ckpt_config, vocab,
                    best.count() > 0 ? best : params,
                    static_cast<long long>(outcome.fit.steps));
    {
        const std::string config_path = config.paths.out_dir + "/config.json";
        std::ofstream cf(config_path, std::ios::binary);
        if (!cf) throw IoError("cannot open for writing: " + config_path);
        cf << run_config_to_json(config).dump(2) << "\n";
    }
    return outcome;
}

struct InferOverrides {
    std::optional<int> lambda_vote;
    std::optional<std::string> vote_rule;
    std::optional<double> threshold;
};

struct InferOutcome {
    std::string predictions_path;
    std::string views_path;
    std::size_t n_samples = 0;
    std::size_t n_truncated_views = 0;
};

// Checkpoints embed the schema and run configuration, so inference needs only
// the checkpoint and a manifest.
inline InferOutcome run_infer(const std::string& checkpoint_path,
                              const std::string& manifest_path, const std::string& out_dir,
                              const InferOverrides& overrides = {}, std::ostream* log = nullptr) {
    LoadedCheckpoint ckpt = load_checkpoint(checkpoint_path);
    if (!ckpt.config.contains("run") || !ckpt.config.contains("schema")) {
        throw IngestError("checkpoint config missing 'run'/'schema' sections");
    }
    RunConfig config = run_config_from_json(ckpt.config.at("run"));
    const RelationSchema schema = RelationSchema::from_json(ckpt.config.at("schema"));
    if (overrides.lambda_vote) config.ensemble.lambda_vote = *overrides.lambda_vote;
    if (overrides.vote_rule) config.ensemble.rule = vote_rule_from_name(*overrides.vote_rule);
    if (overrides.threshold) {
        config.lrph.threshold = *overrides.threshold;
        config.lrph.validate();
    }
    config.ensemble.validate();

    LoadResult lr = load_manifest(manifest_path, schema, {});
    if (log) {
        for (const std::string& m : lr.messages) *log << "warning: " << m << "\n";
    }
    const std::vector<Tensor> features = compute_features(lr.samples, config.synth, config.mel);

    std::filesystem::create_directories(out_dir);
    InferOutcome outcome;
    outcome.predictions_path = out_dir + "/predictions.jsonl";
    outcome.views_path = out_dir + "/views.jsonl";
    std::ofstream views_file(outcome.views_path, std::ios::binary);
    if (!views_file) throw IoError("cannot open for writing: " + outcome.views_path);

    std::vector<Prediction> predictions;
    predictions.reserve(lr.samples.size());
    for (std::size_t i = 0; i < lr.samples.size(); ++i) {
        SampleInference inf =
            infer_sample(ckpt.params, config.model, config.lrph, schema, ckpt.vocab, features[i],
                         lr.samples[i].id, config.ensemble);
        predictions.push_back({inf.sample_id, inf.voted});

        nlohmann::json jviews = nlohmann::json::array();
        for (const ViewPrediction& vp : inf.views) {
            nlohmann::json triples = nlohmann::json::array();
            for (const RelationTriple& t : vp.triples) {
                triples.push_back(
                    {{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}});
            }
            jviews.push_back({{"order", vp.view.code()},
                              {"tokens", vp.tokens},
                              {"triples", triples},
                              {"n_diagnostics", vp.n_diagnostics},
                              {"truncated", vp.truncated}});
            if (vp.truncated) ++outcome.n_truncated_views;
        }
        views_file << nlohmann::json{{"id", inf.sample_id},
                                     {"relation_scores", inf.relation_scores.data},
                                     {"predicted_relations",
                                      std::vector<int>(inf.predicted_relations.begin(),
                                                       inf.predicted_relations.end())},
                                     {"views", jviews}}
                          .dump()
                   << "\n";
    }
    save_predictions(outcome.predictions_path, predictions);
    outcome.n_samples = lr.samples.size();
    if (log) {
        *log << "inferred " << outcome.n_samples << " samples -> " << outcome.predictions_path
             << "\n";
    }
    return outcome;
}

// Score a prediction file against a gold manifest.
inline EvalReport run_eval(const std::string& manifest_path, const std::string& schema_path,
                           const std::string& predictions_path, const EvalOptions& options = {},
                           const std::string& out_path = {}, std::ostream* log = nullptr) {
    const RelationSchema schema = RelationSchema::load(schema_path);
    LoadResult lr = load_manifest(manifest_path, schema, {});
    const std::vector<Prediction> predictions = load_predictions(predictions_path);
    const EvalReport report = evaluate(lr.samples, predictions, options);
    if (!out_path.empty()) {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw IoError("cannot open for writing: " + out_path);
        f << report_to_json(report).dump(2) << "\n";
    }
    if (log) *log << report_to_json(report).dump(2) << "\n";
    return report;
}

// ---------------------------------------------------------------------------
// Corpus utilities
// ---------------------------------------------------------------------------

struct CodecCheckResult {
    std::size_t n_samples = 0;
    std::size_t n_targets = 0;      // samples x generation orders
    std::size_t n_mismatches = 0;   // round trips that lost or changed triples
    std::size_t n_diagnostics = 0;  // parse diagnostics on well-formed input
};

// Round-trip every sample through every generation order and verify the
// parsed triples match the originals exactly.
inline CodecCheckResult codec_check(const std::vector<Sample>& samples,
                                    const RelationSchema& schema) {
    CodecCheckResult r;
    r.n_samples = samples.size();
    for (const Sample& s : samples) {
        for (const OrderView& view : OrderView::all()) {
            const TokenSequence seq = linearize(treeify(s.triples, view), view);
            const ParseResult parsed = parse(seq, view, schema);
            ++r.n_targets;
            if (!(parsed.triples == s.triples)) ++r.n_mismatches;
            r.n_diagnostics += parsed.diagnostics.size();
        }
    }
    return r;
}

inline nlohmann::json data_stats(const std::vector<Sample>& samples,
                                 const RelationSchema& schema) {
    std::size_t n_triples = 0;
    std::size_t max_triples = 0;
    std::size_t transcript_words = 0;
    std::map<std::string, std::size_t> relation_counts;
    for (const RelationInfo& r : schema.relations()) relation_counts[r.name] = 0;
    for (const Sample& s : samples) {
        n_triples += s.triples.size();
        max_triples = std::max(max_triples, s.triples.size());
        transcript_words += split_whitespace(s.transcript).size();
        for (const RelationTriple& t : s.triples) ++relation_counts[t.relation];
    }
    return {{"n_samples", samples.size()},
            {"n_triples", n_triples},
            {"max_triples_per_sample", max_triples},
            {"mean_transcript_words",
             samples.empty() ? 0.0
                             : static_cast<double>(transcript_words) /
                                   static_cast<double>(samples.size())},
            {"relation_counts", relation_counts}};
}

// Write a ready-to-train toy dataset: schema.json, train.jsonl, dev.jsonl.
struct ToygenResult {
    std::string schema_path;
    std::string train_path;
    std::string dev_path;
};

inline ToygenResult write_toy_dataset(const std::string& out_dir, std::size_t n_train,
                                      std::size_t n_dev, std::uint64_t seed) {
    std::filesystem::create_directories(out_dir);
    ToygenResult r;
    r.schema_path = out_dir + "/schema.json";
    r.train_path = out_dir + "/train.jsonl";
    r.dev_path = out_dir + "/dev.jsonl";
    toy_schema().save(r.schema_path);
    ToyCorpusConfig train_cfg;
    train_cfg.n_samples = n_train;
    train_cfg.seed = seed;
    train_cfg.id_prefix = "train";
    save_manifest(r.train_path, toy_corpus(train_cfg));
    ToyCorpusConfig dev_cfg;
    dev_cfg.n_samples = n_dev;
    dev_cfg.seed = splitmix64(seed ^ 0x9e3779b97f4a7c15ull);
    dev_cfg.id_prefix = "dev";
    save_manifest(r.dev_path, toy_corpus(dev_cfg));
    return r;
}

}  // namespace speechre
