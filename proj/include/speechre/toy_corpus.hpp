#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/rng.hpp"
#include "speechre/schema.hpp"

namespace speechre {

// Small self-contained corpus for end-to-end runs: single-word entities,
// transcripts built from one clause per triple, synthetic audio features
// keyed by a per-sample seed. The mapping from transcript to triples is
// unambiguous by construction, so a model can actually learn it.
namespace toy {

inline const std::vector<std::string>& people() {
    static const std::vector<std::string> v{"alice", "bob",   "carol", "dave",
                                            "erin",  "frank", "grace", "heidi"};
    return v;
}

inline const std::vector<std::string>& orgs() {
    static const std::vector<std::string> v{"acme", "globex", "initech", "umbrella"};
    return v;
}

inline const std::vector<std::string>& places() {
    static const std::vector<std::string> v{"paris", "london", "tokyo", "oslo"};
    return v;
}

}  // namespace toy

inline RelationSchema toy_schema() {
    return RelationSchema::from_relations({{0, "works_at", "<works_at>"},
                                           {1, "lives_in", "<lives_in>"},
                                           {2, "founded", "<founded>"},
                                           {3, "visited", "<visited>"},
                                           {4, "knows", "<knows>"}});
}

struct ToyCorpusConfig {
    std::size_t n_samples = 200;
    std::uint64_t seed = 0x70c5;
    int max_triples = 3;        // triples per sample drawn uniformly from 1..max
    std::string id_prefix = "toy";
};

inline std::vector<Sample> toy_corpus(const ToyCorpusConfig& config) {
    if (config.n_samples == 0) throw ConfigError("toy corpus: n_samples must be positive");
    if (config.max_triples < 1) throw ConfigError("toy corpus: max_triples must be >= 1");
    const RelationSchema schema = toy_schema();

    std::vector<Sample> out;
    out.reserve(config.n_samples);
    for (std::size_t i = 0; i < config.n_samples; ++i) {
        Rng rng(config.seed, "toy.sample:" + std::to_string(i));
        const std::size_t n_triples =
            1 + rng.below(static_cast<std::uint64_t>(config.max_triples));

        Sample sample;
        sample.id = config.id_prefix + "-" + std::to_string(i);
        sample.synthetic_seed = substream_seed(config.seed, "toy.audio:" + std::to_string(i));

        std::vector<std::string> clauses;
        while (sample.triples.size() < n_triples) {
            const int rel = static_cast<int>(rng.below(schema.size()));
            auto pick = [&rng](const std::vector<std::string>& pool) {
                return pool[rng.below(pool.size())];
            };
            RelationTriple triple;
            triple.relation = schema.at(rel).name;
            triple.head = pick(toy::people());
            switch (rel) {
                case 0: triple.tail = pick(toy::orgs()); break;   // works_at
                case 1: triple.tail = pick(toy::places()); break;  // lives_in
                case 2: triple.tail = pick(toy::orgs()); break;   // founded
                case 3: triple.tail = pick(toy::places()); break;  // visited
                default:                                           // knows
                    do {
                        triple.tail = pick(toy::people());
                    } while (triple.tail == triple.head);
            }
            if (sample.triples.contains(triple)) continue;
            sample.triples.insert(triple);

            std::string clause = triple.head;
            switch (rel) {
                case 0: clause += " works at "; break;
                case 1: clause += " lives in "; break;
                case 2: clause += " founded "; break;
                case 3: clause += " visited "; break;
                default: clause += " knows "; break;
            }
            clause += triple.tail;
            clauses.push_back(std::move(clause));
        }
        // Canonical clause order: the toy world narrates facts sorted by
        // surface form, which keeps the mapping transcript -> linearized tree
        // learnable at smoke-test compute budgets.
        std::sort(clauses.begin(), clauses.end());
        sample.transcript = join(clauses, " and ");
        out.push_back(std::move(sample));
    }
    return out;
}

}  // namespace speechre
