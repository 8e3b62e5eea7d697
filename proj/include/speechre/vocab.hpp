#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/schema.hpp"

namespace speechre {

inline constexpr const char* kPadToken = "<pad>";
inline constexpr const char* kBosToken = "<bos>";
inline constexpr const char* kEosToken = "<eos>";
inline constexpr const char* kUnkToken = "<unk>";

// Closed token inventory: specials, structure markers, relation prompt
// tokens, then every word observed in transcripts, entity mentions, and
// relation names (sorted, deduplicated). Ids are dense and stable for a
// given schema + corpus, which keeps checkpoints reproducible.
class Vocabulary {
public:
    static Vocabulary build(const RelationSchema& schema, const std::vector<Sample>& samples) {
        std::vector<std::string> tokens{kPadToken, kBosToken, kEosToken, kUnkToken};
        for (const std::string& reserved : schema.reserved_tokens()) tokens.push_back(reserved);

        std::set<std::string> seen(tokens.begin(), tokens.end());
        std::set<std::string> words;
        auto take = [&](const std::string& text) {
            for (const std::string& w : split_whitespace(text))
                if (!seen.count(w)) words.insert(w);
        };
        for (const RelationInfo& rel : schema.relations()) take(rel.name);
        for (const Sample& sample : samples) {
            take(sample.transcript);
            for (const RelationTriple& t : sample.triples) {
                take(t.head);
                take(t.relation);
                take(t.tail);
            }
        }
        tokens.insert(tokens.end(), words.begin(), words.end());
        return from_tokens(std::move(tokens));
    }

    static Vocabulary from_tokens(std::vector<std::string> tokens) {
        if (tokens.size() < 4 || tokens[0] != kPadToken || tokens[1] != kBosToken ||
            tokens[2] != kEosToken || tokens[3] != kUnkToken) {
            throw ContractError("vocabulary: special tokens missing or misplaced");
        }
        Vocabulary v;
        v.tokens_ = std::move(tokens);
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
            if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second) {
                throw ContractError("vocabulary: duplicate token " + v.tokens_[i]);
            }
        }
        return v;
    }

    std::size_t size() const { return tokens_.size(); }
    int pad() const { return 0; }
    int bos() const { return 1; }
    int eos() const { return 2; }
    int unk() const { return 3; }

    bool has(const std::string& token) const { return index_.count(token) > 0; }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? unk() : it->second;
    }

    const std::string& token(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
            throw ContractError("vocabulary: id out of range");
        }
        return tokens_[static_cast<std::size_t>(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& words) const {
        std::vector<int> out;
        out.reserve(words.size());
        for (const std::string& w : words) out.push_back(id(w));
        return out;
    }

    std::vector<std::string> decode(const std::vector<int>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (int i : ids) out.push_back(token(i));
        return out;
    }

    nlohmann::json to_json() const { return nlohmann::json(tokens_); }

    static Vocabulary from_json(const nlohmann::json& j) {
        if (!j.is_array()) throw ContractError("vocabulary: expected a JSON array");
        return from_tokens(j.get<std::vector<std::string>>());
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

}  // namespace speechre
