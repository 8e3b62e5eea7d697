// Command-line front end: train a model, run ensemble inference, score
// predictions, and inspect or generate corpora.

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "speechre/speechre.hpp"

namespace {

int dispatch(CLI::App& app, int argc, char** argv) {
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    using namespace speechre;

    CLI::App app{"speech relation extraction: multi-order generation with a "
                 "relation-prompting CNN head and voting-ensemble inference"};
    app.require_subcommand(1);

    // --- train ---
    std::string train_config_path;
    std::string train_out_dir;
    std::optional<std::uint64_t> train_seed;
    auto* train_cmd = app.add_subcommand("train", "train a model from a run config");
    train_cmd->add_option("--config", train_config_path, "run config JSON")->required();
    train_cmd->add_option("--out", train_out_dir, "override paths.out_dir");
    train_cmd->add_option("--seed", train_seed, "override the master seed");

    // --- infer ---
    std::string infer_checkpoint, infer_manifest, infer_out;
    InferOverrides overrides;
    auto* infer_cmd = app.add_subcommand("infer", "ensemble inference over a manifest");
    infer_cmd->add_option("--checkpoint", infer_checkpoint, "checkpoint JSON")->required();
    infer_cmd->add_option("--manifest", infer_manifest, "input manifest JSONL")->required();
    infer_cmd->add_option("--out", infer_out, "output directory")->required();
    infer_cmd->add_option("--lambda-vote", overrides.lambda_vote, "vote threshold override");
    infer_cmd->add_option("--vote-rule", overrides.vote_rule,
                          "strict_greater | at_least");
    infer_cmd->add_option("--threshold", overrides.threshold,
                          "relation score threshold override");

    // --- eval ---
    std::string eval_manifest, eval_schema, eval_predictions, eval_out;
    bool eval_lowercase = false;
    auto* eval_cmd = app.add_subcommand("eval", "score predictions against gold triples");
    eval_cmd->add_option("--manifest", eval_manifest, "gold manifest JSONL")->required();
    eval_cmd->add_option("--schema", eval_schema, "relation schema JSON")->required();
    eval_cmd->add_option("--predictions", eval_predictions, "predictions JSONL")->required();
    eval_cmd->add_option("--out", eval_out, "write the report JSON here");
    eval_cmd->add_flag("--lowercase", eval_lowercase, "case-insensitive matching");

    // --- codec-check ---
    std::string cc_manifest, cc_schema;
    auto* cc_cmd = app.add_subcommand(
        "codec-check", "round-trip every sample through every generation order");
    cc_cmd->add_option("--manifest", cc_manifest, "manifest JSONL")->required();
    cc_cmd->add_option("--schema", cc_schema, "relation schema JSON")->required();

    // --- data-stats ---
    std::string ds_manifest, ds_schema;
    auto* ds_cmd = app.add_subcommand("data-stats", "corpus summary statistics");
    ds_cmd->add_option("--manifest", ds_manifest, "manifest JSONL")->required();
    ds_cmd->add_option("--schema", ds_schema, "relation schema JSON")->required();

    // --- toygen ---
    std::string toy_out;
    std::size_t toy_train = 200, toy_dev = 50;
    std::uint64_t toy_seed = 0x70c5;
    auto* toy_cmd = app.add_subcommand("toygen", "generate a synthetic toy dataset");
    toy_cmd->add_option("--out", toy_out, "output directory")->required();
    toy_cmd->add_option("--train", toy_train, "training samples");
    toy_cmd->add_option("--dev", toy_dev, "dev samples");
    toy_cmd->add_option("--seed", toy_seed, "corpus seed");

    if (int rc = dispatch(app, argc, argv); rc != 0 || app.get_subcommands().empty()) return rc;

    try {
        if (train_cmd->parsed()) {
            RunConfig config = load_run_config(train_config_path);
            if (!train_out_dir.empty()) config.paths.out_dir = train_out_dir;
            if (train_seed) {
                config.seed = *train_seed;
                config.train.seed = *train_seed;
            }
            TrainOutcome outcome = run_train(config, &std::cout);
            std::cout << "final checkpoint: " << outcome.checkpoint_path << "\n"
                      << "best checkpoint:  " << outcome.best_checkpoint_path << "\n";
            if (outcome.fit.best_dev_ensemble_f1 >= 0.0) {
                std::cout << "best dev ensemble triplet F1: "
                          << outcome.fit.best_dev_ensemble_f1 << "\n";
            }
        } else if (infer_cmd->parsed()) {
            InferOutcome outcome =
                run_infer(infer_checkpoint, infer_manifest, infer_out, overrides, &std::cout);
            if (outcome.n_truncated_views > 0) {
                std::cout << "note: " << outcome.n_truncated_views
                          << " view generations hit the length budget\n";
            }
        } else if (eval_cmd->parsed()) {
            EvalOptions options;
            options.lowercase = eval_lowercase;
            run_eval(eval_manifest, eval_schema, eval_predictions, options, eval_out, &std::cout);
        } else if (cc_cmd->parsed()) {
            const RelationSchema schema = RelationSchema::load(cc_schema);
            LoadResult lr = load_manifest(cc_manifest, schema, {});
            for (const std::string& m : lr.messages) std::cout << "warning: " << m << "\n";
            const CodecCheckResult r = codec_check(lr.samples, schema);
            std::cout << "samples: " << r.n_samples << "\ntargets: " << r.n_targets
                      << "\nmismatches: " << r.n_mismatches
                      << "\ndiagnostics: " << r.n_diagnostics << "\n";
            return r.n_mismatches == 0 && r.n_diagnostics == 0 ? 0 : 1;
        } else if (ds_cmd->parsed()) {
            const RelationSchema schema = RelationSchema::load(ds_schema);
            LoadResult lr = load_manifest(ds_manifest, schema, {});
            for (const std::string& m : lr.messages) std::cout << "warning: " << m << "\n";
            std::cout << data_stats(lr.samples, schema).dump(2) << "\n";
        } else if (toy_cmd->parsed()) {
            const ToygenResult r = write_toy_dataset(toy_out, toy_train, toy_dev, toy_seed);
            std::cout << "schema:  " << r.schema_path << "\ntrain:   " << r.train_path
                      << "\ndev:     " << r.dev_path << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
