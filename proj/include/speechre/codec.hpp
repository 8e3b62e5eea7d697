#pragma once

#include <algorithm>
#include <array>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "speechre/common.hpp"
#include "speechre/data.hpp"
#include "speechre/schema.hpp"

namespace speechre {

enum class TripleElem { Head, Rel, Tail };

inline const char* marker_token(TripleElem e) {
    switch (e) {
        case TripleElem::Head: return kHeadMarker;
        case TripleElem::Rel: return kRelMarker;
        case TripleElem::Tail: return kTailMarker;
    }
    return kHeadMarker;
}

// One of the six permutations of (head, relation, tail). The permutation
// governs tree layering, control tokens, and linearization order.
struct OrderView {
    std::array<TripleElem, 3> order{TripleElem::Head, TripleElem::Rel, TripleElem::Tail};

    bool operator==(const OrderView&) const = default;

    // position (0-based) of an element within this view
    int position_of(TripleElem e) const {
        for (int i = 0; i < 3; ++i)
            if (order[static_cast<std::size_t>(i)] == e) return i;
        throw ContractError("order view: element not present");
    }

    std::string code() const {
        std::string s;
        for (TripleElem e : order) {
            s += (e == TripleElem::Head ? 'h' : e == TripleElem::Rel ? 'r' : 't');
        }
        return s;
    }

    static OrderView from_code(const std::string& code) {
        if (code.size() != 3) throw ConfigError("order view code must have 3 characters: " + code);
        OrderView v;
        std::set<char> seen;
        for (int i = 0; i < 3; ++i) {
            char c = code[static_cast<std::size_t>(i)];
            if (!seen.insert(c).second) throw ConfigError("order view code repeats '" + std::string(1, c) + "'");
            switch (c) {
                case 'h': v.order[static_cast<std::size_t>(i)] = TripleElem::Head; break;
                case 'r': v.order[static_cast<std::size_t>(i)] = TripleElem::Rel; break;
                case 't': v.order[static_cast<std::size_t>(i)] = TripleElem::Tail; break;
                default: throw ConfigError("order view code may only contain h, r, t: " + code);
            }
        }
        return v;
    }

    // All six views, fixed enumeration order.
    static const std::vector<OrderView>& all() {
        static const std::vector<OrderView> views = [] {
            std::vector<OrderView> out;
            for (const char* c : {"hrt", "htr", "rht", "rth", "thr", "trh"}) {
                out.push_back(from_code(c));
            }
            return out;
        }();
        return views;
    }

    // triple element values in view order
    std::array<std::string, 3> project(const RelationTriple& t) const {
        std::array<std::string, 3> out;
        for (int i = 0; i < 3; ++i) {
            switch (order[static_cast<std::size_t>(i)]) {
                case TripleElem::Head: out[static_cast<std::size_t>(i)] = t.head; break;
                case TripleElem::Rel: out[static_cast<std::size_t>(i)] = t.relation; break;
                case TripleElem::Tail: out[static_cast<std::size_t>(i)] = t.tail; break;
            }
        }
        return out;
    }

    // inverse projection: view-ordered values back to a triple
    RelationTriple unproject(const std::array<std::string, 3>& values) const {
        RelationTriple t;
        for (int i = 0; i < 3; ++i) {
            const std::string& v = values[static_cast<std::size_t>(i)];
            switch (order[static_cast<std::size_t>(i)]) {
                case TripleElem::Head: t.head = v; break;
                case TripleElem::Rel: t.relation = v; break;
                case TripleElem::Tail: t.tail = v; break;
            }
        }
        return t;
    }
};

enum class TokenRole { Prompt, Ctrl, Marker, Text };

struct AnnotatedToken {
    std::string text;
    TokenRole role = TokenRole::Text;

    bool operator==(const AnnotatedToken&) const = default;
};

struct TokenSequence {
    std::vector<AnnotatedToken> tokens;

    void push(std::string text, TokenRole role) {
        tokens.push_back({std::move(text), role});
    }

    void append(const TokenSequence& other) {
        tokens.insert(tokens.end(), other.tokens.begin(), other.tokens.end());
    }

    std::size_t size() const { return tokens.size(); }
    bool empty() const { return tokens.empty(); }

    std::string joined() const {
        std::string out;
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) out += ' ';
            out += tokens[i].text;
        }
        return out;
    }

    std::vector<std::string> texts() const {
        std::vector<std::string> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(t.text);
        return out;
    }

    bool operator==(const TokenSequence&) const = default;
};

// Four-layer tree (root implicit): level-2 groups keyed by the view's first
// element, level-3 groups by the second, leaves holding the third. Insertion
// order follows the lexicographic canonical ordering of the projected triples.
struct RelationTree {
    struct Level3 {
        std::string key;
        std::vector<std::string> leaves;
    };
    struct Level2 {
        std::string key;
        std::vector<Level3> children;
    };

    OrderView view;
    std::vector<Level2> groups;

    std::size_t level2_count() const { return groups.size(); }

    std::size_t level3_count() const {
        std::size_t n = 0;
        for (const auto& g : groups) n += g.children.size();
        return n;
    }

    std::size_t leaf_count() const {
        std::size_t n = 0;
        for (const auto& g : groups)
            for (const auto& c : g.children) n += c.leaves.size();
        return n;
    }
};

inline RelationTree treeify(const TripleSet& triples, OrderView view) {
    std::vector<std::array<std::string, 3>> projected;
    projected.reserve(triples.size());
    for (const auto& t : triples) projected.push_back(view.project(t));
    std::sort(projected.begin(), projected.end());

    RelationTree tree;
    tree.view = view;
    for (const auto& p : projected) {
        if (tree.groups.empty() || tree.groups.back().key != p[0]) {
            tree.groups.push_back({p[0], {}});
        }
        auto& g = tree.groups.back();
        if (g.children.empty() || g.children.back().key != p[1]) {
            g.children.push_back({p[1], {}});
        }
        auto& c = g.children.back();
        if (c.leaves.empty() || c.leaves.back() != p[2]) {
            c.leaves.push_back(p[2]);
        }
    }
    return tree;
}

// Depth-first serialization: entering a node at level k emits the marker for
// the view's (k-1)-th element followed by the node's value split on
// whitespace. Leaves under one parent come out consecutively.
inline TokenSequence linearize(const RelationTree& tree, OrderView view) {
    if (!(tree.view == view)) {
        throw ContractError("linearize: tree was built under view " + tree.view.code() +
                            ", not " + view.code());
    }
    TokenSequence seq;
    auto emit = [&seq](int depth_pos, const std::string& value, OrderView v) {
        seq.push(marker_token(v.order[static_cast<std::size_t>(depth_pos)]), TokenRole::Marker);
        for (auto& word : split_whitespace(value)) seq.push(std::move(word), TokenRole::Text);
    };
    for (const auto& g : tree.groups) {
        emit(0, g.key, view);
        for (const auto& c : g.children) {
            emit(1, c.key, view);
            for (const auto& leaf : c.leaves) emit(2, leaf, view);
        }
    }
    return seq;
}

struct ParseDiagnostic {
    enum class Kind { MissingPrefix, EmptyText, UnknownRelation, StrayText };
    Kind kind;
    std::size_t token_index = 0;
    std::string detail;
};

struct ParseResult {
    TripleSet triples;
    std::vector<ParseDiagnostic> diagnostics;
};

// Stack-based inverse of linearize. Tolerates arbitrary token soup: malformed
// fragments are skipped and recorded as diagnostics, never thrown.
inline ParseResult parse_tokens(const std::vector<std::string>& tokens, OrderView view,
                                const RelationSchema& schema) {
    ParseResult result;

    std::array<std::string, 3> values;
    std::array<bool, 3> have{false, false, false};
    int open_slot = -1;        // 0-based view position currently accumulating
    bool open_valid = false;   // false while skipping a malformed fragment
    std::vector<std::string> accum;
    bool stray_run = false;
    std::size_t open_at = 0;

    auto marker_position = [&view](const std::string& tok) -> int {
        for (int i = 0; i < 3; ++i) {
            if (tok == marker_token(view.order[static_cast<std::size_t>(i)])) return i;
        }
        return -1;
    };

    auto finalize = [&](std::size_t at) {
        if (open_slot < 0 || !open_valid) return;
        const auto slot = static_cast<std::size_t>(open_slot);
        std::string text = join(accum);
        if (text.empty()) {
            result.diagnostics.push_back({ParseDiagnostic::Kind::EmptyText, at,
                                          "empty value after marker at view position " +
                                              std::to_string(open_slot + 1)});
            have[slot] = false;
            return;
        }
        if (view.order[slot] == TripleElem::Rel && !schema.has_name(text)) {
            result.diagnostics.push_back(
                {ParseDiagnostic::Kind::UnknownRelation, at, "unknown relation '" + text + "'"});
            have[slot] = false;
            return;
        }
        values[slot] = std::move(text);
        have[slot] = true;
        if (open_slot == 2 && have[0] && have[1]) {
            result.triples.insert(view.unproject(values));
        }
    };

    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const std::string& tok = tokens[i];
        int pos = marker_position(tok);
        if (pos < 0) {
            if (open_slot < 0) {
                if (!stray_run) {
                    result.diagnostics.push_back(
                        {ParseDiagnostic::Kind::StrayText, i, "text before any marker"});
                    stray_run = true;
                }
                continue;
            }
            if (open_valid) accum.push_back(tok);
            continue;
        }

        stray_run = false;
        finalize(i);
        // a marker at view position k invalidates any deeper state
        for (int d = pos; d < 3; ++d) have[static_cast<std::size_t>(d)] = false;

        bool prefix_ok = true;
        for (int d = 0; d < pos; ++d) {
            if (!have[static_cast<std::size_t>(d)]) prefix_ok = false;
        }
        if (!prefix_ok) {
            result.diagnostics.push_back(
                {ParseDiagnostic::Kind::MissingPrefix, i,
                 std::string("marker '") + tok + "' with incomplete prefix"});
            open_slot = pos;
            open_valid = false;
            accum.clear();
            continue;
        }
        open_slot = pos;
        open_valid = true;
        open_at = i;
        accum.clear();
    }
    finalize(open_at);
    return result;
}

inline ParseResult parse(const TokenSequence& seq, OrderView view, const RelationSchema& schema) {
    return parse_tokens(seq.texts(), view, schema);
}

// The three markers in view order; tells the decoder which linearization
// order to produce.
inline TokenSequence ctrl_tokens(OrderView view) {
    TokenSequence seq;
    for (TripleElem e : view.order) seq.push(marker_token(e), TokenRole::Ctrl);
    return seq;
}

// Prompt tokens of the given relations, ascending by relation id.
inline TokenSequence prompt_tokens(const std::set<int>& relation_ids, const RelationSchema& schema) {
    TokenSequence seq;
    for (int id : relation_ids) {
        seq.push(schema.at(id).prompt_token, TokenRole::Prompt);
    }
    return seq;
}

}  // namespace speechre
