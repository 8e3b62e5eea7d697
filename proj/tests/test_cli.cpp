#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "speechre/cli.hpp"

using namespace speechre;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;

    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() /
               ("speechre_cli_" + std::to_string(::getpid()) + "_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }

    std::string str(const std::string& child = "") const {
        return child.empty() ? path.string() : (path / child).string();
    }
};

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
    std::ifstream f(path);
    REQUIRE(f.good());
    std::vector<nlohmann::json> out;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) out.push_back(nlohmann::json::parse(line));
    }
    return out;
}

// a full run configuration small enough that train + infer finish in seconds
RunConfig tiny_run_config() {
    RunConfig c;
    c.seed = 31337;
    c.synth.d_dims = 8;
    c.synth.frames_per_token = 2;
    c.model.d_mel = 8;
    c.model.d_h = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.model.enc_layers = 1;
    c.model.dec_layers = 1;
    c.model.downsample = 2;
    c.model.max_tgt_len = 48;
    c.lrph.channels = {2, 3};
    c.lrph.pool_h = 2;
    c.lrph.pool_w = 2;
    c.train.epochs = 1;
    c.train.batch_size = 4;
    c.ensemble.max_new_tokens = 24;
    return c;
}

}  // namespace

TEST_CASE("an empty configuration document yields the defaults") {
    const RunConfig c = run_config_from_json(nlohmann::json::object());
    const RunConfig d;
    CHECK(c.seed == d.seed);
    CHECK(c.model.d_h == d.model.d_h);
    CHECK(c.lrph.threshold == d.lrph.threshold);
    CHECK(c.ensemble.lambda_vote == d.ensemble.lambda_vote);
    CHECK(c.eval.lowercase == d.eval.lowercase);
    CHECK(c.paths.schema.empty());
}

TEST_CASE("the run seed is propagated into the training seed") {
    const RunConfig c = run_config_from_json({{"seed", 777}});
    CHECK(c.seed == 777);
    CHECK(c.train.seed == 777);
}

TEST_CASE("run configuration survives a json round trip") {
    RunConfig c = tiny_run_config();
    c.paths = {"s.json", "train.jsonl", "dev.jsonl", "out"};
    c.mel.n_mels = 40;
    c.train.eval_every = 2;
    c.ensemble.lambda_vote = 3;
    c.ensemble.rule = VoteRule::AtLeast;
    c.eval.lowercase = true;

    const nlohmann::json j1 = run_config_to_json(c);
    const RunConfig back = run_config_from_json(j1);
    const nlohmann::json j2 = run_config_to_json(back);
    CHECK(j1 == j2);
    CHECK(back.ensemble.rule == VoteRule::AtLeast);
    CHECK(back.paths.out_dir == "out");
    CHECK(back.train.seed == c.seed);  // derived field, not a stored one
}

TEST_CASE("unknown configuration keys are rejected with their name") {
    CHECK_THROWS_WITH_AS(run_config_from_json({{"bogus", 1}}), doctest::Contains("bogus"),
                         ConfigError);
    for (const char* section :
         {"paths", "synth", "mel", "model", "lrph", "train", "ensemble", "eval"}) {
        const nlohmann::json j{{section, {{"not_a_key", 1}}}};
        CHECK_THROWS_WITH_AS(run_config_from_json(j), doctest::Contains("not_a_key"), ConfigError);
    }
    // a section must be an object, not a scalar
    CHECK_THROWS_AS(run_config_from_json({{"model", 5}}), ConfigError);
}

TEST_CASE("mistyped values report the dotted key path") {
    CHECK_THROWS_WITH_AS(run_config_from_json({{"train", {{"lr", "fast"}}}}),
                         doctest::Contains("train.lr"), ConfigError);
    CHECK_THROWS_WITH_AS(run_config_from_json({{"model", {{"d_h", "wide"}}}}),
                         doctest::Contains("model.d_h"), ConfigError);
}

TEST_CASE("section validation still applies to parsed values") {
    CHECK_THROWS_AS(run_config_from_json({{"model", {{"d_h", 7}, {"n_heads", 2}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"lrph", {{"threshold", 1.5}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"train", {{"batch_size", 0}}}}), ConfigError);
    CHECK_THROWS_AS(run_config_from_json({{"ensemble", {{"vote_rule", "sometimes"}}}}),
                    ConfigError);
}

TEST_CASE("configuration files load with io and parse errors surfaced") {
    TempDir dir("cfg");
    CHECK_THROWS_AS(load_run_config(dir.str("missing.json")), IoError);

    {
        std::ofstream f(dir.str("bad.json"));
        f << "{ not json";
    }
    CHECK_THROWS_AS(load_run_config(dir.str("bad.json")), ConfigError);

    {
        std::ofstream f(dir.str("good.json"));
        f << R"({"seed": 99, "train": {"epochs": 3}})";
    }
    const RunConfig c = load_run_config(dir.str("good.json"));
    CHECK(c.seed == 99);
    CHECK(c.train.epochs == 3);
    CHECK(c.train.seed == 99);
}

TEST_CASE("toy dataset generation is deterministic and loadable") {
    TempDir a("toy_a");
    TempDir b("toy_b");
    const ToygenResult ra = write_toy_dataset(a.str(), 6, 3, 424242);
    const ToygenResult rb = write_toy_dataset(b.str(), 6, 3, 424242);

    CHECK(slurp(ra.schema_path) == slurp(rb.schema_path));
    CHECK(slurp(ra.train_path) == slurp(rb.train_path));
    CHECK(slurp(ra.dev_path) == slurp(rb.dev_path));

    const RelationSchema schema = RelationSchema::load(ra.schema_path);
    CHECK(schema.size() == toy_schema().size());
    const LoadResult train = load_manifest(ra.train_path, schema, {});
    const LoadResult dev = load_manifest(ra.dev_path, schema, {});
    REQUIRE(train.samples.size() == 6);
    REQUIRE(dev.samples.size() == 3);
    CHECK(train.samples[0].id.rfind("train", 0) == 0);
    CHECK(dev.samples[0].id.rfind("dev", 0) == 0);
    // dev gets its own derived seed, so the splits differ
    CHECK(train.samples[0].transcript != dev.samples[0].transcript);
    for (const Sample& s : train.samples) {
        CHECK(s.synthetic_seed.has_value());
        CHECK(!s.triples.empty());
    }
}

TEST_CASE("codec check round-trips the toy corpus cleanly") {
    ToyCorpusConfig cfg;
    cfg.n_samples = 25;
    cfg.seed = 5150;
    const std::vector<Sample> samples = toy_corpus(cfg);
    const CodecCheckResult r = codec_check(samples, toy_schema());
    CHECK(r.n_samples == 25);
    CHECK(r.n_targets == 150);  // six generation orders per sample
    CHECK(r.n_mismatches == 0);
    CHECK(r.n_diagnostics == 0);
}

TEST_CASE("corpus statistics count what is actually there") {
    const RelationSchema schema = toy_schema();
    Sample s1;
    s1.id = "a";
    s1.transcript = "Ada Lovelace worked at the Analytical Engine office";
    s1.triples.insert({"Ada Lovelace", "works_at", "Analytical Engine office"});
    s1.triples.insert({"Ada Lovelace", "lives_in", "London"});
    Sample s2;
    s2.id = "b";
    s2.transcript = "short one";
    s2.triples.insert({"x", "works_at", "y"});

    const nlohmann::json j = data_stats({s1, s2}, schema);
    CHECK(j.at("n_samples") == 2);
    CHECK(j.at("n_triples") == 3);
    CHECK(j.at("max_triples_per_sample") == 2);
    CHECK(j.at("mean_transcript_words").get<double>() == doctest::Approx((8.0 + 2.0) / 2.0));
    CHECK(j.at("relation_counts").at("works_at") == 2);
    CHECK(j.at("relation_counts").at("lives_in") == 1);
    CHECK(j.at("relation_counts").at("founded") == 0);  // zero counts still listed
}

TEST_CASE("training requires the mandatory paths") {
    RunConfig c = tiny_run_config();
    CHECK_THROWS_AS(run_train(c), ConfigError);
}

TEST_CASE("full pipeline: train, infer, evaluate") {
    TempDir dir("e2e");
    const ToygenResult toy = write_toy_dataset(dir.str("data"), 8, 3, 2026);

    RunConfig cfg = tiny_run_config();
    cfg.paths.schema = toy.schema_path;
    cfg.paths.train_manifest = toy.train_path;
    cfg.paths.dev_manifest = toy.dev_path;
    cfg.paths.out_dir = dir.str("run");

    std::ostringstream log;
    const TrainOutcome trained = run_train(cfg, &log);
    CHECK(trained.fit.steps == 2);  // 8 samples / batch 4, one epoch
    CHECK(trained.vocab_size > 12);  // specials + markers + 5 prompts + words
    CHECK(fs::exists(trained.checkpoint_path));
    CHECK(fs::exists(trained.best_checkpoint_path));
    CHECK(fs::exists(dir.str("run") + "/config.json"));
    CHECK(log.str().find("[epoch 1]") != std::string::npos);

    const auto metrics = read_jsonl(dir.str("run") + "/train_metrics.jsonl");
    REQUIRE(metrics.size() == 2);  // one epoch record + the final eval
    CHECK(metrics[0].at("kind") == "epoch");
    CHECK(metrics[1].at("kind") == "eval");
    CHECK(metrics[1].at("view_triplet_f1").size() == 6);

    // the checkpoint is self-describing: schema + run config travel with it
    const LoadedCheckpoint ckpt = load_checkpoint(trained.checkpoint_path);
    CHECK(ckpt.step == 2);
    CHECK(ckpt.config.contains("run"));
    CHECK(ckpt.config.contains("schema"));
    CHECK(ckpt.vocab.size() == trained.vocab_size);

    // inference twice from the same checkpoint produces identical bytes
    const InferOutcome infA =
        run_infer(trained.checkpoint_path, toy.dev_path, dir.str("inf_a"));
    const InferOutcome infB =
        run_infer(trained.checkpoint_path, toy.dev_path, dir.str("inf_b"));
    CHECK(infA.n_samples == 3);
    CHECK(slurp(infA.predictions_path) == slurp(infB.predictions_path));
    CHECK(slurp(infA.views_path) == slurp(infB.views_path));

    const auto views = read_jsonl(infA.views_path);
    REQUIRE(views.size() == 3);
    for (const auto& v : views) {
        REQUIRE(v.at("views").size() == 6);
        for (std::size_t i = 0; i < 6; ++i) {
            CHECK(v.at("views")[i].at("order") == OrderView::all()[i].code());
        }
        CHECK(v.at("relation_scores").size() == 5);
    }

    // scoring the model's own predictions stays within [0, 1]
    const std::string report_path = dir.str("report.json");
    const EvalReport report =
        run_eval(toy.dev_path, toy.schema_path, infA.predictions_path, {}, report_path);
    CHECK(report.triplet.f1 >= 0.0);
    CHECK(report.triplet.f1 <= 1.0);
    const nlohmann::json saved = nlohmann::json::parse(slurp(report_path));
    CHECK(saved.contains("entity"));
    CHECK(saved.contains("relation"));
    CHECK(saved.contains("triplet"));

    // gold predictions evaluate to a perfect score through the same path
    const LoadResult dev = load_manifest(toy.dev_path, RelationSchema::load(toy.schema_path), {});
    std::vector<Prediction> gold;
    for (const Sample& s : dev.samples) gold.push_back({s.id, s.triples});
    const std::string gold_path = dir.str("gold_preds.jsonl");
    save_predictions(gold_path, gold);
    const EvalReport perfect = run_eval(toy.dev_path, toy.schema_path, gold_path);
    CHECK(perfect.entity.f1 == doctest::Approx(1.0));
    CHECK(perfect.relation.f1 == doctest::Approx(1.0));
    CHECK(perfect.triplet.f1 == doctest::Approx(1.0));

    // a vote threshold no view count can exceed empties every prediction
    InferOverrides strict;
    strict.lambda_vote = 7;
    const InferOutcome none =
        run_infer(trained.checkpoint_path, toy.dev_path, dir.str("inf_none"), strict);
    for (const Prediction& p : load_predictions(none.predictions_path)) {
        CHECK(p.triples.empty());
    }

    // overrides are validated before any work happens
    InferOverrides bad_rule;
    bad_rule.vote_rule = "sometimes";
    CHECK_THROWS_AS(run_infer(trained.checkpoint_path, toy.dev_path, dir.str("x"), bad_rule),
                    ConfigError);
    InferOverrides bad_threshold;
    bad_threshold.threshold = 1.5;
    CHECK_THROWS_AS(
        run_infer(trained.checkpoint_path, toy.dev_path, dir.str("x"), bad_threshold),
        ConfigError);

    // relaxing the vote rule can only grow the kept sets
    InferOverrides lax;
    lax.lambda_vote = 1;
    lax.vote_rule = "at_least";
    const InferOutcome wide =
        run_infer(trained.checkpoint_path, toy.dev_path, dir.str("inf_wide"), lax);
    const auto tight_preds = load_predictions(infA.predictions_path);
    const auto wide_preds = load_predictions(wide.predictions_path);
    REQUIRE(tight_preds.size() == wide_preds.size());
    for (std::size_t i = 0; i < tight_preds.size(); ++i) {
        for (const RelationTriple& t : tight_preds[i].triples) {
            CHECK(wide_preds[i].triples.contains(t));
        }
    }
}

TEST_CASE("inference rejects checkpoints without the embedded setup") {
    TempDir dir("bare_ckpt");
    const RelationSchema schema = toy_schema();
    const Vocabulary vocab = Vocabulary::build(schema, {});
    ad::ParamStore params;
    params.add("w", Tensor::row({1.0, 2.0}));
    const std::string path = dir.str("ckpt.json");
    save_checkpoint(path, {{"note", "no run section"}}, vocab, params, 0);
    CHECK_THROWS_AS(run_infer(path, "unused.jsonl", dir.str("out")), IngestError);
}
