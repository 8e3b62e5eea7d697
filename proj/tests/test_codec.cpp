#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <string>
#include <vector>

#include "speechre/codec.hpp"
#include "support/oracles.hpp"

using namespace speechre;

namespace {

RelationSchema test_schema() {
    return RelationSchema::from_relations({
        {0, "r1", "<r1>"},
        {1, "r2", "<r2>"},
        {2, "multi word rel", "<mwr>"},
    });
}

TripleSet triples(std::initializer_list<RelationTriple> ts) {
    TripleSet out;
    for (const auto& t : ts) out.insert(t);
    return out;
}

}  // namespace

TEST_CASE("order view codes, positions and the fixed enumeration") {
    const auto& views = OrderView::all();
    REQUIRE(views.size() == 6);
    std::vector<std::string> codes;
    for (const auto& v : views) codes.push_back(v.code());
    CHECK(codes == std::vector<std::string>{"hrt", "htr", "rht", "rth", "thr", "trh"});

    const OrderView rth = OrderView::from_code("rth");
    CHECK(rth.position_of(TripleElem::Rel) == 0);
    CHECK(rth.position_of(TripleElem::Tail) == 1);
    CHECK(rth.position_of(TripleElem::Head) == 2);
    CHECK(rth.code() == "rth");

    CHECK_THROWS_AS(OrderView::from_code("hr"), ConfigError);
    CHECK_THROWS_AS(OrderView::from_code("hrx"), ConfigError);
    CHECK_THROWS_AS(OrderView::from_code("hht"), ConfigError);
}

TEST_CASE("projection and unprojection are inverses") {
    const RelationTriple t{"Ada", "r1", "Initech"};
    for (const auto& view : OrderView::all()) {
        const auto p = view.project(t);
        CHECK(view.unproject(p) == t);
    }
    const auto p = OrderView::from_code("trh").project(t);
    CHECK(p == std::array<std::string, 3>{"Initech", "r1", "Ada"});
}

TEST_CASE("linearization of a single triple") {
    const TripleSet s = triples({{"A", "r1", "B"}});
    const TokenSequence hrt = linearize(treeify(s, OrderView::from_code("hrt")),
                                        OrderView::from_code("hrt"));
    CHECK(hrt.joined() == "<h> A <r> r1 <t> B");

    const TokenSequence rth = linearize(treeify(s, OrderView::from_code("rth")),
                                        OrderView::from_code("rth"));
    CHECK(rth.joined() == "<r> r1 <t> B <h> A");
}

TEST_CASE("shared prefixes are emitted once") {
    // two triples share the head; two of them also share the relation
    const TripleSet s = triples({{"A", "r1", "B"}, {"A", "r1", "C"}, {"A", "r2", "D"}});
    const OrderView hrt = OrderView::from_code("hrt");
    CHECK(linearize(treeify(s, hrt), hrt).joined() == "<h> A <r> r1 <t> B <t> C <r> r2 <t> D");

    // under tail-first grouping nothing is shared
    const OrderView thr = OrderView::from_code("thr");
    CHECK(linearize(treeify(s, thr), thr).joined() ==
          "<t> B <h> A <r> r1 <t> C <h> A <r> r1 <t> D <h> A <r> r2");
}

TEST_CASE("multi-word values split into one token per word") {
    const TripleSet s = triples({{"New York", "multi word rel", "Los Angeles"}});
    const OrderView hrt = OrderView::from_code("hrt");
    const TokenSequence seq = linearize(treeify(s, hrt), hrt);
    CHECK(seq.joined() == "<h> New York <r> multi word rel <t> Los Angeles");
    CHECK(seq.size() == 10);
    CHECK(seq.tokens[0].role == TokenRole::Marker);
    CHECK(seq.tokens[1].role == TokenRole::Text);
}

TEST_CASE("tree layer counts match the distinct-prefix oracle") {
    Rng rng(2024);
    const RelationSchema schema = test_schema();
    std::vector<std::string> names;
    for (const auto& r : schema.relations()) names.push_back(r.name);

    for (int it = 0; it < 300; ++it) {
        const TripleSet s = oracles::random_triple_set(rng, names, 8);
        for (const auto& view : OrderView::all()) {
            const RelationTree tree = treeify(s, view);
            const auto expect = oracles::group_counts(s, view);
            CHECK(tree.level2_count() == expect.level2);
            CHECK(tree.level3_count() == expect.level3);
            CHECK(tree.leaf_count() == expect.leaves);
            // keys at each layer are sorted and unique
            for (std::size_t i = 1; i < tree.groups.size(); ++i) {
                CHECK(tree.groups[i - 1].key < tree.groups[i].key);
            }
        }
    }
}

TEST_CASE("empty triple set produces an empty tree and sequence") {
    const OrderView hrt = OrderView::from_code("hrt");
    const RelationTree tree = treeify(TripleSet{}, hrt);
    CHECK(tree.level2_count() == 0);
    const TokenSequence seq = linearize(tree, hrt);
    CHECK(seq.empty());
    const ParseResult r = parse(seq, hrt, test_schema());
    CHECK(r.triples.empty());
    CHECK(r.diagnostics.empty());
}

TEST_CASE("linearize rejects a tree built under a different view") {
    const TripleSet s = triples({{"A", "r1", "B"}});
    const RelationTree tree = treeify(s, OrderView::from_code("hrt"));
    CHECK_THROWS_AS(linearize(tree, OrderView::from_code("rth")), ContractError);
}

TEST_CASE("round trip over random triple sets and all six views") {
    Rng rng(99);
    const RelationSchema schema = test_schema();
    std::vector<std::string> names;
    for (const auto& r : schema.relations()) names.push_back(r.name);

    for (int it = 0; it < 500; ++it) {
        const TripleSet s = oracles::random_triple_set(rng, names, 8);
        for (const auto& view : OrderView::all()) {
            const ParseResult r = parse(linearize(treeify(s, view), view), view, schema);
            CHECK(r.triples == s);
            CHECK(r.diagnostics.empty());
        }
    }
}

TEST_CASE("parser reports malformed fragments instead of throwing") {
    const RelationSchema schema = test_schema();
    const OrderView hrt = OrderView::from_code("hrt");

    SUBCASE("marker with incomplete prefix") {
        const ParseResult r = parse_tokens({"<t>", "B"}, hrt, schema);
        CHECK(r.triples.empty());
        REQUIRE(r.diagnostics.size() == 1);
        CHECK(r.diagnostics[0].kind == ParseDiagnostic::Kind::MissingPrefix);
        CHECK(r.diagnostics[0].token_index == 0);
    }

    SUBCASE("text before any marker") {
        const ParseResult r = parse_tokens({"junk", "more", "<h>", "A", "<r>", "r1", "<t>", "B"},
                                           hrt, schema);
        CHECK(r.triples == triples({{"A", "r1", "B"}}));
        REQUIRE(r.diagnostics.size() == 1);  // a run of stray text counts once
        CHECK(r.diagnostics[0].kind == ParseDiagnostic::Kind::StrayText);
    }

    SUBCASE("empty value after a marker") {
        const ParseResult r = parse_tokens({"<h>", "<r>", "r1", "<t>", "B"}, hrt, schema);
        CHECK(r.triples.empty());
        bool saw_empty = false;
        for (const auto& d : r.diagnostics) {
            saw_empty |= (d.kind == ParseDiagnostic::Kind::EmptyText);
        }
        CHECK(saw_empty);
    }

    SUBCASE("unknown relation name") {
        const ParseResult r = parse_tokens({"<h>", "A", "<r>", "mystery", "<t>", "B"}, hrt, schema);
        CHECK(r.triples.empty());
        bool saw_unknown = false;
        for (const auto& d : r.diagnostics) {
            saw_unknown |= (d.kind == ParseDiagnostic::Kind::UnknownRelation);
        }
        CHECK(saw_unknown);
    }

    SUBCASE("valid triple after a broken one is still recovered") {
        const ParseResult r = parse_tokens(
            {"<r>", "r1", "<h>", "A2", "<r>", "r1", "<t>", "B"}, hrt, schema);
        // first "<r>" has no head prefix under hrt; the rest parses
        CHECK(r.triples == triples({{"A2", "r1", "B"}}));
        CHECK(r.diagnostics.size() == 1);
    }
}

TEST_CASE("parser never throws on arbitrary token soup") {
    Rng rng(7777);
    const RelationSchema schema = test_schema();
    const std::vector<std::string> pool = {"<h>", "<r>",   "<t>", "r1",  "r2",  "alpha",
                                           "beta", "<r1>", "",    "<h>", "word"};
    for (int it = 0; it < 2000; ++it) {
        std::vector<std::string> tokens;
        const std::size_t n = rng.below(20);
        for (std::size_t i = 0; i < n; ++i) tokens.push_back(pool[rng.below(pool.size())]);
        const OrderView view = OrderView::all()[rng.below(6)];
        CHECK_NOTHROW(parse_tokens(tokens, view, schema));
    }
}

TEST_CASE("control tokens name the view order") {
    CHECK(ctrl_tokens(OrderView::from_code("hrt")).joined() == "<h> <r> <t>");
    CHECK(ctrl_tokens(OrderView::from_code("rth")).joined() == "<r> <t> <h>");
    CHECK(ctrl_tokens(OrderView::from_code("trh")).joined() == "<t> <r> <h>");
    const TokenSequence seq = ctrl_tokens(OrderView::from_code("hrt"));
    for (const auto& t : seq.tokens) CHECK(t.role == TokenRole::Ctrl);
}

TEST_CASE("relation prompts come out ascending by id") {
    const RelationSchema schema = test_schema();
    const TokenSequence seq = prompt_tokens({2, 0}, schema);
    CHECK(seq.joined() == "<r1> <mwr>");
    for (const auto& t : seq.tokens) CHECK(t.role == TokenRole::Prompt);
    CHECK(prompt_tokens({}, schema).empty());
}
