#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "speechre/common.hpp"
#include "speechre/schema.hpp"

namespace speechre {

struct RelationTriple {
    std::string head;
    std::string relation;
    std::string tail;

    auto operator<=>(const RelationTriple&) const = default;
};

// Deduplicated set of triples under exact string equality. std::set keeps
// iteration order deterministic.
class TripleSet {
public:
    TripleSet() = default;

    explicit TripleSet(std::vector<RelationTriple> triples) {
        for (auto& t : triples) insert(std::move(t));
    }

    bool insert(RelationTriple t) { return set_.insert(std::move(t)).second; }
    bool contains(const RelationTriple& t) const { return set_.count(t) > 0; }
    std::size_t size() const { return set_.size(); }
    bool empty() const { return set_.empty(); }

    auto begin() const { return set_.begin(); }
    auto end() const { return set_.end(); }

    bool operator==(const TripleSet& o) const { return set_ == o.set_; }

private:
    std::set<RelationTriple> set_;
};

// One manifest record. Features come either from an audio file or from the
// deterministic synthetic generator, never both.
struct Sample {
    std::string id;
    std::string transcript;
    TripleSet triples;
    std::optional<std::string> audio_path;
    std::optional<std::uint64_t> synthetic_seed;
};

struct LoadOptions {
    // when false, records whose entities are not transcript substrings are
    // kept with a warning; when true they are rejected
    bool reject_on_substring_miss = false;
    // when true, malformed records are skipped and counted instead of
    // aborting the whole load
    bool skip_malformed = false;
};

struct LoadResult {
    std::vector<Sample> samples;
    int warned = 0;
    int rejected = 0;
    std::vector<std::string> messages;
};

using RelationLabelVector = std::vector<double>;  // 0/1 per relation id

namespace detail {

inline Sample parse_manifest_record(const nlohmann::json& j, int line_no,
                                    const RelationSchema& schema) {
    const std::string where = "manifest line " + std::to_string(line_no);
    if (!j.is_object()) throw IngestError(where + ": record must be an object");

    static const std::set<std::string> known = {"id", "transcript", "triples",
                                                "audio_path", "synthetic_seed"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw IngestError(where + ": unknown field '" + it.key() + "'");
        }
    }
    for (const char* field : {"id", "transcript", "triples"}) {
        if (!j.contains(field)) throw IngestError(where + ": missing field '" + std::string(field) + "'");
    }

    Sample s;
    if (!j["id"].is_string()) throw IngestError(where + ": id must be a string");
    s.id = j["id"].get<std::string>();
    if (s.id.empty()) throw IngestError(where + ": empty id");

    if (!j["transcript"].is_string()) throw IngestError(where + ": transcript must be a string");
    s.transcript = normalize_whitespace(j["transcript"].get<std::string>());
    if (s.transcript.empty()) throw IngestError(where + " (sample " + s.id + "): empty transcript");

    const bool has_audio = j.contains("audio_path");
    const bool has_seed = j.contains("synthetic_seed");
    if (has_audio == has_seed) {
        throw IngestError(where + " (sample " + s.id +
                          "): exactly one of audio_path / synthetic_seed required");
    }
    if (has_audio) {
        if (!j["audio_path"].is_string()) throw IngestError(where + ": audio_path must be a string");
        s.audio_path = j["audio_path"].get<std::string>();
    } else {
        if (!j["synthetic_seed"].is_number_unsigned() && !j["synthetic_seed"].is_number_integer()) {
            throw IngestError(where + ": synthetic_seed must be an integer");
        }
        s.synthetic_seed = j["synthetic_seed"].get<std::uint64_t>();
    }

    if (!j["triples"].is_array()) throw IngestError(where + ": triples must be an array");
    const auto reserved = schema.reserved_tokens();
    for (const auto& tj : j["triples"]) {
        if (!tj.is_array() || tj.size() != 3 || !tj[0].is_string() || !tj[1].is_string() ||
            !tj[2].is_string()) {
            throw IngestError(where + " (sample " + s.id + "): each triple must be [head, relation, tail]");
        }
        RelationTriple t;
        t.head = normalize_whitespace(tj[0].get<std::string>());
        t.relation = tj[1].get<std::string>();
        t.tail = normalize_whitespace(tj[2].get<std::string>());
        if (t.head.empty() || t.tail.empty()) {
            throw IngestError(where + " (sample " + s.id + "): empty head or tail");
        }
        if (!schema.has_name(t.relation)) {
            throw IngestError(where + " (sample " + s.id + "): unknown relation '" + t.relation + "'");
        }
        for (const auto& token : reserved) {
            if (t.head.find(token) != std::string::npos ||
                t.tail.find(token) != std::string::npos) {
                throw IngestError(where + " (sample " + s.id + "): entity contains reserved token '" +
                                  token + "'");
            }
        }
        s.triples.insert(std::move(t));
    }
    return s;
}

}  // namespace detail

// Line-delimited JSON records. Malformed records abort with the line number
// unless options.skip_malformed is set; entity/transcript substring misses
// warn by default.
inline LoadResult load_manifest(const std::string& path, const RelationSchema& schema,
                                const LoadOptions& options = {}) {
    std::ifstream in(path);
    if (!in) throw IoError("manifest: cannot open " + path);

    LoadResult result;
    std::set<std::string> ids;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        Sample s;
        try {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(line);
            } catch (const nlohmann::json::exception& e) {
                throw IngestError("manifest line " + std::to_string(line_no) +
                                  ": invalid JSON: " + e.what());
            }
            s = detail::parse_manifest_record(j, line_no, schema);
            if (!ids.insert(s.id).second) {
                throw IngestError("manifest line " + std::to_string(line_no) +
                                  ": duplicate sample id '" + s.id + "'");
            }
        } catch (const IngestError& e) {
            if (options.skip_malformed) {
                ++result.rejected;
                result.messages.push_back(e.what());
                continue;
            }
            throw;
        }

        bool miss = false;
        for (const auto& t : s.triples) {
            if (s.transcript.find(t.head) == std::string::npos ||
                s.transcript.find(t.tail) == std::string::npos) {
                miss = true;
                break;
            }
        }
        if (miss) {
            std::string msg = "sample " + s.id + ": entity not found in transcript";
            if (options.reject_on_substring_miss) {
                ++result.rejected;
                result.messages.push_back(msg + " (rejected)");
                continue;
            }
            ++result.warned;
            result.messages.push_back(msg + " (warned)");
        }
        result.samples.push_back(std::move(s));
    }
    return result;
}

inline nlohmann::json sample_to_json(const Sample& s) {
    nlohmann::json triples = nlohmann::json::array();
    for (const auto& t : s.triples) {
        triples.push_back(nlohmann::json::array({t.head, t.relation, t.tail}));
    }
    nlohmann::json j{{"id", s.id}, {"transcript", s.transcript}, {"triples", triples}};
    if (s.audio_path) j["audio_path"] = *s.audio_path;
    if (s.synthetic_seed) j["synthetic_seed"] = *s.synthetic_seed;
    return j;
}

inline std::string serialize_manifest(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out += sample_to_json(s).dump();
        out += "\n";
    }
    return out;
}

inline void save_manifest(const std::string& path, const std::vector<Sample>& samples) {
    std::ofstream out(path);
    if (!out) throw IoError("manifest: cannot write " + path);
    out << serialize_manifest(samples);
}

// y_i = 1 iff relation i appears in any triple of the sample.
inline RelationLabelVector relation_labels(const Sample& sample, const RelationSchema& schema) {
    RelationLabelVector y(static_cast<std::size_t>(schema.size()), 0.0);
    for (const auto& t : sample.triples) {
        y[static_cast<std::size_t>(schema.id_of(t.relation))] = 1.0;
    }
    return y;
}

inline std::set<int> gold_relation_ids(const Sample& sample, const RelationSchema& schema) {
    std::set<int> ids;
    for (const auto& t : sample.triples) ids.insert(schema.id_of(t.relation));
    return ids;
}

}  // namespace speechre
