#pragma once

#include <fstream>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "speechre/common.hpp"
#include "speechre/data.hpp"

namespace speechre {

struct Prediction {
    std::string sample_id;
    TripleSet triples;
};

struct EvalOptions {
    bool lowercase = false;  // fold case before comparing; whitespace is always normalized
};

struct MicroMetrics {
    long long tp = 0;
    long long predicted = 0;
    long long gold = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

struct EvalReport {
    MicroMetrics entity;
    MicroMetrics relation;
    MicroMetrics triplet;
    std::size_t n_samples = 0;
};

inline MicroMetrics micro_from_counts(long long tp, long long predicted, long long gold) {
    MicroMetrics m;
    m.tp = tp;
    m.predicted = predicted;
    m.gold = gold;
    m.precision = predicted > 0 ? static_cast<double>(tp) / static_cast<double>(predicted) : 0.0;
    m.recall = gold > 0 ? static_cast<double>(tp) / static_cast<double>(gold) : 0.0;
    m.f1 = (m.precision + m.recall) > 0.0
               ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
               : 0.0;
    return m;
}

namespace detail {

inline std::string eval_normalize(const std::string& s, const EvalOptions& options) {
    std::string n = normalize_whitespace(s);
    return options.lowercase ? to_lower(n) : n;
}

struct SampleSets {
    std::set<std::string> entities;
    std::set<std::string> relations;
    std::set<std::tuple<std::string, std::string, std::string>> triplets;
};

inline SampleSets extract_sets(const TripleSet& triples, const EvalOptions& options) {
    SampleSets s;
    for (const RelationTriple& t : triples) {
        const std::string h = eval_normalize(t.head, options);
        const std::string r = eval_normalize(t.relation, options);
        const std::string tl = eval_normalize(t.tail, options);
        s.entities.insert(h);
        s.entities.insert(tl);
        s.relations.insert(r);
        s.triplets.emplace(h, r, tl);
    }
    return s;
}

template <typename SetT>
inline void tally(const SetT& pred, const SetT& gold, long long& tp, long long& np,
                  long long& ng) {
    np += static_cast<long long>(pred.size());
    ng += static_cast<long long>(gold.size());
    for (const auto& item : pred)
        if (gold.count(item)) ++tp;
}

}  // namespace detail

// Exact-match micro metrics over a corpus. Predictions are matched to gold
// samples by id; a gold sample without a prediction counts as an empty
// prediction. Predictions whose id is not in the gold corpus (or repeated)
// are contract violations and are reported by id.
inline EvalReport evaluate(const std::vector<Sample>& gold,
                           const std::vector<Prediction>& predictions,
                           const EvalOptions& options = {}) {
    std::map<std::string, const TripleSet*> pred_by_id;
    std::vector<std::string> bad_ids;
    std::set<std::string> gold_ids;
    for (const Sample& s : gold) gold_ids.insert(s.id);
    for (const Prediction& p : predictions) {
        if (!gold_ids.count(p.sample_id) || pred_by_id.count(p.sample_id)) {
            bad_ids.push_back(p.sample_id);
            continue;
        }
        pred_by_id[p.sample_id] = &p.triples;
    }
    if (!bad_ids.empty()) {
        throw ContractError("evaluate: unknown or duplicate prediction ids: " +
                            join(bad_ids, ", "));
    }

    long long e_tp = 0, e_p = 0, e_g = 0;
    long long r_tp = 0, r_p = 0, r_g = 0;
    long long t_tp = 0, t_p = 0, t_g = 0;
    static const TripleSet kEmpty;
    for (const Sample& s : gold) {
        auto it = pred_by_id.find(s.id);
        const TripleSet& pred = it == pred_by_id.end() ? kEmpty : *it->second;
        const detail::SampleSets ps = detail::extract_sets(pred, options);
        const detail::SampleSets gs = detail::extract_sets(s.triples, options);
        detail::tally(ps.entities, gs.entities, e_tp, e_p, e_g);
        detail::tally(ps.relations, gs.relations, r_tp, r_p, r_g);
        detail::tally(ps.triplets, gs.triplets, t_tp, t_p, t_g);
    }

    EvalReport report;
    report.entity = micro_from_counts(e_tp, e_p, e_g);
    report.relation = micro_from_counts(r_tp, r_p, r_g);
    report.triplet = micro_from_counts(t_tp, t_p, t_g);
    report.n_samples = gold.size();
    return report;
}

inline nlohmann::json metrics_to_json(const MicroMetrics& m) {
    return nlohmann::json{{"tp", m.tp},           {"predicted", m.predicted}, {"gold", m.gold},
                          {"precision", m.precision}, {"recall", m.recall},   {"f1", m.f1}};
}

inline nlohmann::json report_to_json(const EvalReport& report) {
    return nlohmann::json{{"n_samples", report.n_samples},
                          {"entity", metrics_to_json(report.entity)},
                          {"relation", metrics_to_json(report.relation)},
                          {"triplet", metrics_to_json(report.triplet)}};
}

// ---------------------------------------------------------------------------
// Prediction files: one JSON object per line, {"id": ..., "triples": [...]}.
// Key order is fixed by the serializer so identical predictions produce
// byte-identical files.
// ---------------------------------------------------------------------------

inline nlohmann::json prediction_to_json(const Prediction& p) {
    nlohmann::json triples = nlohmann::json::array();
    for (const RelationTriple& t : p.triples) {
        triples.push_back({{"head", t.head}, {"relation", t.relation}, {"tail", t.tail}});
    }
    return nlohmann::json{{"id", p.sample_id}, {"triples", triples}};
}

inline std::string serialize_predictions(const std::vector<Prediction>& predictions) {
    std::string out;
    for (const Prediction& p : predictions) {
        out += prediction_to_json(p).dump();
        out += '\n';
    }
    return out;
}

inline void save_predictions(const std::string& path,
                             const std::vector<Prediction>& predictions) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f << serialize_predictions(predictions);
    if (!f) throw IoError("write failed: " + path);
}

inline std::vector<Prediction> load_predictions(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    std::vector<Prediction> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IngestError(path + ":" + std::to_string(lineno) + ": bad JSON: " + e.what());
        }
        if (!j.is_object() || !j.contains("id") || !j.contains("triples")) {
            throw IngestError(path + ":" + std::to_string(lineno) +
                              ": expected {id, triples} object");
        }
        Prediction p;
        p.sample_id = j.at("id").get<std::string>();
        for (const auto& jt : j.at("triples")) {
            p.triples.insert(RelationTriple{jt.at("head").get<std::string>(),
                                            jt.at("relation").get<std::string>(),
                                            jt.at("tail").get<std::string>()});
        }
        out.push_back(std::move(p));
    }
    return out;
}

}  // namespace speechre
