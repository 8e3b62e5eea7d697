#pragma once

#include <array>
#include <fstream>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "speechre/common.hpp"

namespace speechre {

// Structural marker tokens shared by the tree codec and the vocabulary.
inline constexpr const char* kHeadMarker = "<h>";
inline constexpr const char* kRelMarker = "<r>";
inline constexpr const char* kTailMarker = "<t>";

struct RelationInfo {
    int id = 0;
    std::string name;
    std::string prompt_token;
};

// The predefined relation set R: contiguous ids 0..|R|-1, unique names and
// prompt tokens, all distinct from the structural markers.
class RelationSchema {
public:
    RelationSchema() = default;

    static RelationSchema from_relations(std::vector<RelationInfo> relations) {
        RelationSchema s;
        s.relations_ = std::move(relations);
        std::sort(s.relations_.begin(), s.relations_.end(),
                  [](const RelationInfo& a, const RelationInfo& b) { return a.id < b.id; });
        s.validate();
        for (std::size_t i = 0; i < s.relations_.size(); ++i) {
            s.by_name_[s.relations_[i].name] = static_cast<int>(i);
        }
        return s;
    }

    static RelationSchema from_json(const nlohmann::json& j) {
        if (!j.is_object() || !j.contains("relations") || !j["relations"].is_array()) {
            throw ConfigError("schema: expected object with a 'relations' array");
        }
        std::vector<RelationInfo> rels;
        for (const auto& r : j["relations"]) {
            RelationInfo info;
            if (!r.is_object() || !r.contains("id") || !r.contains("name") ||
                !r.contains("prompt_token")) {
                throw ConfigError("schema: each relation needs id, name, prompt_token");
            }
            info.id = r["id"].get<int>();
            info.name = r["name"].get<std::string>();
            info.prompt_token = r["prompt_token"].get<std::string>();
            rels.push_back(std::move(info));
        }
        return from_relations(std::move(rels));
    }

    static RelationSchema load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("schema: cannot open " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("schema: invalid JSON in " + path + ": " + e.what());
        }
        return from_json(j);
    }

    nlohmann::json to_json() const {
        nlohmann::json rels = nlohmann::json::array();
        for (const auto& r : relations_) {
            rels.push_back({{"id", r.id}, {"name", r.name}, {"prompt_token", r.prompt_token}});
        }
        return nlohmann::json{{"relations", rels}};
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw IoError("schema: cannot write " + path);
        out << to_json().dump(2) << "\n";
    }

    int size() const { return static_cast<int>(relations_.size()); }

    const std::vector<RelationInfo>& relations() const { return relations_; }

    bool has_name(const std::string& name) const { return by_name_.count(name) > 0; }

    int id_of(const std::string& name) const {
        auto it = by_name_.find(name);
        if (it == by_name_.end()) throw ContractError("schema: unknown relation name '" + name + "'");
        return it->second;
    }

    const RelationInfo& at(int id) const {
        if (id < 0 || id >= size()) {
            throw ContractError("schema: relation id " + std::to_string(id) + " out of range");
        }
        return relations_[static_cast<std::size_t>(id)];
    }

    // Markers plus prompt tokens; entity surface forms must not contain any
    // of these as a substring.
    std::vector<std::string> reserved_tokens() const {
        std::vector<std::string> out = {kHeadMarker, kRelMarker, kTailMarker};
        for (const auto& r : relations_) out.push_back(r.prompt_token);
        return out;
    }

private:
    void validate() const {
        std::set<std::string> seen;
        seen.insert(kHeadMarker);
        seen.insert(kRelMarker);
        seen.insert(kTailMarker);
        for (std::size_t i = 0; i < relations_.size(); ++i) {
            const auto& r = relations_[i];
            if (r.id != static_cast<int>(i)) {
                throw ConfigError("schema: relation ids must be contiguous 0..N-1, got id " +
                                  std::to_string(r.id) + " at position " + std::to_string(i));
            }
            if (r.name.empty()) throw ConfigError("schema: empty relation name (id " + std::to_string(r.id) + ")");
            if (r.prompt_token.empty()) {
                throw ConfigError("schema: empty prompt token for relation '" + r.name + "'");
            }
            if (!seen.insert(r.name).second) {
                throw ConfigError("schema: duplicate or reserved relation name '" + r.name + "'");
            }
            if (!seen.insert(r.prompt_token).second) {
                throw ConfigError("schema: duplicate or reserved prompt token '" + r.prompt_token + "'");
            }
        }
    }

    std::vector<RelationInfo> relations_;
    std::unordered_map<std::string, int> by_name_;
};

}  // namespace speechre
