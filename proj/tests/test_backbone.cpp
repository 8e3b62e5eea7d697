#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "speechre/backbone.hpp"
#include "speechre/vocab.hpp"

using namespace speechre;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_mel = 6;
    cfg.d_h = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 32;
    cfg.enc_layers = 2;
    cfg.dec_layers = 2;
    cfg.downsample = 2;
    cfg.max_tgt_len = 32;
    return cfg;
}

Vocabulary tiny_vocab(int extra_words) {
    std::vector<std::string> tokens{kPadToken, kBosToken, kEosToken, kUnkToken};
    for (int i = 0; i < extra_words; ++i) tokens.push_back("w" + std::to_string(i));
    return Vocabulary::from_tokens(std::move(tokens));
}

Tensor random_features(std::size_t frames, std::size_t dims, Rng& rng) {
    Tensor t({frames, dims});
    for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("vocabulary construction and lookups") {
    const RelationSchema schema = RelationSchema::from_relations({
        {0, "works at", "<works_at>"},
        {1, "lives_in", "<lives_in>"},
    });
    Sample s;
    s.id = "a";
    s.transcript = "zeta alpha beta";
    s.triples.insert({"alpha", "works at", "beta corp"});
    s.synthetic_seed = 1;

    const Vocabulary v = Vocabulary::build(schema, {s});
    // specials first, then schema reserved tokens, then sorted corpus words
    CHECK(v.token(0) == kPadToken);
    CHECK(v.token(1) == kBosToken);
    CHECK(v.token(2) == kEosToken);
    CHECK(v.token(3) == kUnkToken);
    CHECK(v.token(4) == "<h>");
    CHECK(v.token(5) == "<r>");
    CHECK(v.token(6) == "<t>");
    CHECK(v.token(7) == "<works_at>");
    CHECK(v.token(8) == "<lives_in>");
    // remaining words sorted: alpha at beta corp lives_in works zeta
    CHECK(v.id("alpha") == 9);
    CHECK(v.id("zeta") == static_cast<int>(v.size()) - 1);
    CHECK(v.has("corp"));
    CHECK(v.has("lives_in"));  // relation-name word
    CHECK(v.id("never-seen") == v.unk());

    const std::vector<int> ids = v.encode({"alpha", "beta", "mystery"});
    CHECK(ids[0] == 9);
    CHECK(ids[2] == v.unk());
    CHECK(v.decode(ids) == std::vector<std::string>{"alpha", "beta", kUnkToken});
    CHECK_THROWS_AS(v.token(-1), ContractError);
    CHECK_THROWS_AS(v.token(static_cast<int>(v.size())), ContractError);

    const Vocabulary back = Vocabulary::from_json(v.to_json());
    CHECK(back.size() == v.size());
    CHECK(back.id("zeta") == v.id("zeta"));

    CHECK_THROWS_AS(Vocabulary::from_tokens({"<pad>", "<bos>", "<eos>"}), ContractError);
    CHECK_THROWS_AS(Vocabulary::from_tokens({"<bos>", "<pad>", "<eos>", "<unk>"}), ContractError);
    CHECK_THROWS_AS(Vocabulary::from_tokens({"<pad>", "<bos>", "<eos>", "<unk>", "x", "x"}),
                    ContractError);
}

TEST_CASE("sinusoidal position encoding") {
    const Tensor pe = sinusoidal_posenc(4, 6);
    CHECK(pe.dim(0) == 4);
    CHECK(pe.dim(1) == 6);
    // position 0: sin(0)=0 on even dims, cos(0)=1 on odd dims
    for (std::size_t j = 0; j < 6; j += 2) CHECK(pe.data[j] == doctest::Approx(0.0));
    for (std::size_t j = 1; j < 6; j += 2) CHECK(pe.data[j] == doctest::Approx(1.0));
    // dim 0 oscillates as sin(pos)
    for (std::size_t pos = 0; pos < 4; ++pos) {
        CHECK(pe(pos, 0) == doctest::Approx(std::sin(static_cast<double>(pos))));
        CHECK(pe(pos, 1) == doctest::Approx(std::cos(static_cast<double>(pos))));
    }
    // paired dims share a wavelength
    const double angle2 = 2.0 / std::pow(10000.0, 2.0 / 6.0);
    CHECK(pe(2, 2) == doctest::Approx(std::sin(angle2)));
    CHECK(pe(2, 3) == doctest::Approx(std::cos(angle2)));
}

TEST_CASE("causal mask blocks future positions only") {
    const Tensor m = causal_mask(4);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            const double expect = j > i ? -1e30 : 0.0;
            CHECK(m.data[i * 4 + j] == expect);
        }
    }
}

TEST_CASE("model config validation") {
    CHECK_NOTHROW(tiny_config().validate());
    ModelConfig bad = tiny_config();
    bad.d_h = 15;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.enc_layers = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.downsample = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.max_tgt_len = 1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter initialization lays out every block") {
    const ModelConfig cfg = tiny_config();
    Rng rng(11);
    ad::ParamStore store;
    init_backbone_params(store, cfg, 20, rng);

    CHECK(store.at("src_proj.w").shape == std::vector<std::size_t>{6, 16});
    CHECK(store.at("dec.embed").shape == std::vector<std::size_t>{20, 16});
    CHECK(store.at("lm_head.w").shape == std::vector<std::size_t>{16, 20});
    CHECK(store.at("lm_head.b").shape == std::vector<std::size_t>{20});
    for (const char* name :
         {"enc.0.ln1.g", "enc.0.attn.wq", "enc.0.attn.bo", "enc.0.ffn.w1", "enc.1.ffn.w2",
          "enc.final_ln.g", "dec.0.self.wk", "dec.0.cross.wv", "dec.1.ln3.b", "dec.final_ln.b"}) {
        CHECK(store.has(name));
    }

    ad::ParamStore other;
    CHECK_THROWS_AS(init_backbone_params(other, cfg, 3, rng), ConfigError);

    // same seed, same initialization
    Rng r1(42), r2(42);
    ad::ParamStore s1, s2;
    init_backbone_params(s1, cfg, 20, r1);
    init_backbone_params(s2, cfg, 20, r2);
    CHECK(s1.at("src_proj.w").data == s2.at("src_proj.w").data);
    CHECK(s1.at("dec.embed").data == s2.at("dec.embed").data);
}

TEST_CASE("encoder output shape and normalization") {
    const ModelConfig cfg = tiny_config();
    Rng rng(12);
    ad::ParamStore store;
    init_backbone_params(store, cfg, 20, rng);

    const Tensor features = random_features(11, cfg.d_mel, rng);
    const Tensor hidden = encode(store, cfg, features);
    CHECK(hidden.dim(0) == 6);  // ceil(11 / 2)
    CHECK(hidden.dim(1) == cfg.d_h);
    CHECK(hidden.all_finite());

    // final layer norm leaves every row with zero mean (gain 1, bias 0 at init)
    for (std::size_t i = 0; i < hidden.dim(0); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < cfg.d_h; ++j) mean += hidden(i, j);
        CHECK(std::abs(mean / static_cast<double>(cfg.d_h)) < 1e-12);
    }

    CHECK_THROWS_AS(encode(store, cfg, random_features(5, cfg.d_mel + 1, rng)), ContractError);
    CHECK_THROWS_AS(encode(store, cfg, Tensor({0, cfg.d_mel})), ContractError);
    ModelConfig small = cfg;
    small.max_src_frames = 8;
    CHECK_THROWS_AS(encode(store, small, random_features(9, cfg.d_mel, rng)), ContractError);
}

TEST_CASE("teacher-forced decoding emits normalized distributions") {
    const ModelConfig cfg = tiny_config();
    Rng rng(13);
    ad::ParamStore store;
    init_backbone_params(store, cfg, 15, rng);
    const Tensor hidden = encode(store, cfg, random_features(8, cfg.d_mel, rng));

    ad::Tape tape;
    ad::TapeParams params(tape, store, false);
    const std::vector<int> ids{1, 5, 9, 4};
    const ad::Var logp =
        decode_logprobs_on_tape(params, cfg, tape.leaf(hidden, false), ids, nullptr);
    const Tensor& lp = tape.val(logp);
    REQUIRE(lp.dim(0) == 4);
    REQUIRE(lp.dim(1) == 15);
    for (std::size_t t = 0; t < 4; ++t) {
        double sum = 0.0;
        for (std::size_t j = 0; j < 15; ++j) sum += std::exp(lp(t, j));
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    }

    CHECK_THROWS_AS(decode_logprobs_on_tape(params, cfg, tape.leaf(hidden, false), {}, nullptr),
                    ContractError);
    const std::vector<int> too_long(cfg.max_tgt_len + 1, 1);
    CHECK_THROWS_AS(
        decode_logprobs_on_tape(params, cfg, tape.leaf(hidden, false), too_long, nullptr),
        ContractError);
}

TEST_CASE("future tokens cannot influence earlier distributions") {
    const ModelConfig cfg = tiny_config();
    Rng rng(14);
    ad::ParamStore store;
    init_backbone_params(store, cfg, 15, rng);
    const Tensor hidden = encode(store, cfg, random_features(8, cfg.d_mel, rng));

    auto logp_at = [&](const std::vector<int>& ids, std::size_t row) {
        ad::Tape tape;
        ad::TapeParams params(tape, store, false);
        const Tensor& lp =
            tape.val(decode_logprobs_on_tape(params, cfg, tape.leaf(hidden, false), ids, nullptr));
        std::vector<double> out(lp.dim(1));
        for (std::size_t j = 0; j < out.size(); ++j) out[j] = lp(row, j);
        return out;
    };
    const std::vector<double> short_row = logp_at({1, 5, 9}, 1);
    const std::vector<double> long_row = logp_at({1, 5, 9, 4, 7, 2}, 1);
    for (std::size_t j = 0; j < short_row.size(); ++j) {
        CHECK(short_row[j] == doctest::Approx(long_row[j]).epsilon(1e-12));
    }
}

TEST_CASE("incremental decoder matches the full recompute at every step") {
    const ModelConfig cfg = tiny_config();
    Rng rng(15);
    ad::ParamStore store;
    init_backbone_params(store, cfg, 18, rng);
    const Tensor hidden = encode(store, cfg, random_features(10, cfg.d_mel, rng));

    const std::vector<int> sequence{1, 7, 12, 3, 9, 16, 4, 4, 10};
    DecoderSession session(store, cfg, hidden);
    std::vector<int> prefix;
    double worst = 0.0;
    for (int id : sequence) {
        prefix.push_back(id);
        const std::vector<double>& incremental = session.step(id);
        const std::vector<double> reference = next_token_probs_reference(store, cfg, hidden, prefix);
        REQUIRE(incremental.size() == reference.size());
        for (std::size_t j = 0; j < reference.size(); ++j) {
            worst = std::max(worst, std::abs(incremental[j] - reference[j]));
        }
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("greedy decoding: tie breaking, stop token, and budget") {
    const ModelConfig cfg = tiny_config();
    const Vocabulary vocab = tiny_vocab(8);  // ids 0..11
    Rng rng(16);
    ad::ParamStore store;
    init_backbone_params(store, cfg, vocab.size(), rng);
    const Tensor hidden = encode(store, cfg, random_features(6, cfg.d_mel, rng));

    // flatten the output distribution: identical logits everywhere
    store.at("lm_head.w") = Tensor::zeros({cfg.d_h, vocab.size()});
    store.at("lm_head.b") = Tensor::zeros({vocab.size()});

    SUBCASE("uniform logits tie-break to the lowest eligible id, the stop token") {
        const GenerateResult r = greedy_generate(store, cfg, vocab, hidden, {vocab.bos()}, 10);
        CHECK(r.tokens.empty());
        CHECK_FALSE(r.truncated);
    }

    SUBCASE("a favored token repeats until the budget is spent") {
        Tensor bias = Tensor::zeros({vocab.size()});
        bias.data[7] = 5.0;
        store.at("lm_head.b") = bias;
        const GenerateResult r = greedy_generate(store, cfg, vocab, hidden, {vocab.bos()}, 4);
        CHECK(r.tokens == std::vector<int>{7, 7, 7, 7});
        CHECK(r.truncated);
    }

    SUBCASE("padding and begin markers are never emitted") {
        Tensor bias = Tensor::zeros({vocab.size()});
        bias.data[static_cast<std::size_t>(vocab.pad())] = 50.0;
        bias.data[static_cast<std::size_t>(vocab.bos())] = 40.0;
        bias.data[5] = 1.0;
        store.at("lm_head.b") = bias;
        const GenerateResult r = greedy_generate(store, cfg, vocab, hidden, {vocab.bos()}, 3);
        CHECK(r.tokens == std::vector<int>{5, 5, 5});
    }

    SUBCASE("preconditions") {
        CHECK_THROWS_AS(greedy_generate(store, cfg, vocab, hidden, {}, 4), ContractError);
        const std::vector<int> huge(cfg.max_tgt_len, 1);
        CHECK_THROWS_AS(greedy_generate(store, cfg, vocab, hidden, huge, 4), ContractError);
    }
}

TEST_CASE("greedy decoding is deterministic with trained-shape weights") {
    const ModelConfig cfg = tiny_config();
    const Vocabulary vocab = tiny_vocab(10);
    Rng rng(17);
    ad::ParamStore store;
    init_backbone_params(store, cfg, vocab.size(), rng);
    const Tensor hidden = encode(store, cfg, random_features(9, cfg.d_mel, rng));

    const GenerateResult a = greedy_generate(store, cfg, vocab, hidden, {vocab.bos(), 6}, 8);
    const GenerateResult b = greedy_generate(store, cfg, vocab, hidden, {vocab.bos(), 6}, 8);
    CHECK(a.tokens == b.tokens);
    CHECK(a.truncated == b.truncated);
    CHECK(a.tokens.size() <= 8);
}

TEST_CASE("masked cross entropy over probability rows") {
    Tensor probs({3, 10});
    for (double& v : probs.data) v = 0.1;
    const double ce = cross_entropy_masked(probs, {0, 4, 9}, {1, 1, 1});
    CHECK(ce == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    probs(0, 0) = 1e-30;  // masked-out rows must not matter
    const double ce2 = cross_entropy_masked(probs, {0, 4, 9}, {0, 1, 1});
    CHECK(ce2 == doctest::Approx(std::log(10.0)).epsilon(1e-12));

    CHECK_THROWS_AS(cross_entropy_masked(probs, {0, 4}, {1, 1}), ContractError);
    CHECK_THROWS_AS(cross_entropy_masked(probs, {0, 4, 10}, {1, 1, 1}), ContractError);
    CHECK_THROWS_AS(cross_entropy_masked(probs, {0, 4, 9}, {0, 0, 0}), ContractError);
}
