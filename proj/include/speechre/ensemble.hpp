#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "speechre/backbone.hpp"
#include "speechre/codec.hpp"
#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/lrph.hpp"
#include "speechre/schema.hpp"
#include "speechre/tensor.hpp"
#include "speechre/vocab.hpp"

namespace speechre {

// Whether a triple needs strictly more than `lambda_vote` votes or at least
// that many to survive the ensemble.
enum class VoteRule { StrictGreater, AtLeast };

inline const char* vote_rule_name(VoteRule rule) {
    return rule == VoteRule::StrictGreater ? "strict_greater" : "at_least";
}

inline VoteRule vote_rule_from_name(const std::string& name) {
    if (name == "strict_greater") return VoteRule::StrictGreater;
    if (name == "at_least") return VoteRule::AtLeast;
    throw ConfigError("unknown vote rule '" + name + "' (strict_greater | at_least)");
}

struct EnsembleConfig {
    int lambda_vote = 2;
    VoteRule rule = VoteRule::StrictGreater;
    std::size_t max_new_tokens = 192;  // generation budget per view

    void validate() const {
        if (lambda_vote < 0) throw ConfigError("ensemble: lambda_vote must be >= 0");
        if (max_new_tokens == 0) throw ConfigError("ensemble: max_new_tokens must be positive");
    }
};

// Triples kept by majority voting across the per-view candidate sets. Each
// view contributes at most one vote per triple (the sets are deduplicated).
inline TripleSet vote(const std::vector<TripleSet>& view_sets, int lambda_vote, VoteRule rule) {
    if (lambda_vote < 0) throw ConfigError("vote: lambda_vote must be >= 0");
    std::map<RelationTriple, int> counts;
    for (const TripleSet& s : view_sets)
        for (const RelationTriple& t : s) ++counts[t];
    TripleSet out;
    for (const auto& [triple, count] : counts) {
        const bool keep =
            rule == VoteRule::StrictGreater ? count > lambda_vote : count >= lambda_vote;
        if (keep) out.insert(triple);
    }
    return out;
}

struct ViewPrediction {
    OrderView view;
    std::vector<std::string> tokens;  // raw generated tokens, end marker stripped
    TripleSet triples;
    std::size_t n_diagnostics = 0;
    bool truncated = false;
};

struct SampleInference {
    std::string sample_id;
    Tensor relation_scores;            // per-relation probabilities from the CNN head
    std::set<int> predicted_relations;
    std::vector<ViewPrediction> views;  // fixed view enumeration order
    TripleSet voted;
};

// Full inference for one sample: encode once, score relations once, decode
// under every generation order, then vote.
inline SampleInference infer_sample(ad::ParamStore& store, const ModelConfig& model_config,
                                    const LrphConfig& lrph_config, const RelationSchema& schema,
                                    const Vocabulary& vocab, const Tensor& features,
                                    const std::string& sample_id,
                                    const EnsembleConfig& ensemble) {
    ensemble.validate();
    SampleInference result;
    result.sample_id = sample_id;

    const Tensor hidden = encode(store, model_config, features);
    result.relation_scores = lrph_scores_eval(store, kLrphPrefix, lrph_config, hidden);
    result.predicted_relations = predict_relations(result.relation_scores, lrph_config.threshold);

    const TokenSequence prompt = prompt_tokens(result.predicted_relations, schema);
    std::vector<TripleSet> view_sets;
    view_sets.reserve(OrderView::all().size());
    for (const OrderView& view : OrderView::all()) {
        std::vector<int> prefix{vocab.bos()};
        for (int id : vocab.encode(prompt.texts())) prefix.push_back(id);
        for (int id : vocab.encode(ctrl_tokens(view).texts())) prefix.push_back(id);

        GenerateResult gen =
            greedy_generate(store, model_config, vocab, hidden, prefix, ensemble.max_new_tokens);

        ViewPrediction vp;
        vp.view = view;
        vp.tokens = vocab.decode(gen.tokens);
        vp.truncated = gen.truncated;
        ParseResult parsed = parse_tokens(vp.tokens, view, schema);
        vp.triples = std::move(parsed.triples);
        vp.n_diagnostics = parsed.diagnostics.size();
        view_sets.push_back(vp.triples);
        result.views.push_back(std::move(vp));
    }
    result.voted = vote(view_sets, ensemble.lambda_vote, ensemble.rule);
    return result;
}

}  // namespace speechre
