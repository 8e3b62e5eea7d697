#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "speechre/data.hpp"
#include "speechre/schema.hpp"

using namespace speechre;

namespace {

RelationSchema two_relation_schema() {
    return RelationSchema::from_relations({
        {0, "works_at", "<works_at>"},
        {1, "lives_in", "<lives_in>"},
    });
}

struct TempFile {
    std::filesystem::path path;
    explicit TempFile(const std::string& name, const std::string& content) {
        path = std::filesystem::temp_directory_path() /
               ("speechre_test_" + std::to_string(::getpid()) + "_" + name);
        std::ofstream out(path);
        out << content;
    }
    ~TempFile() { std::filesystem::remove(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("schema accepts a valid relation set and exposes lookups") {
    const RelationSchema s = two_relation_schema();
    CHECK(s.size() == 2);
    CHECK(s.at(0).name == "works_at");
    CHECK(s.at(1).prompt_token == "<lives_in>");
    CHECK(s.id_of("lives_in") == 1);
    CHECK(s.has_name("works_at"));
    CHECK_FALSE(s.has_name("nope"));
    CHECK_THROWS_AS(s.id_of("nope"), ContractError);
    CHECK_THROWS_AS(s.at(2), ContractError);
    CHECK_THROWS_AS(s.at(-1), ContractError);

    const auto reserved = s.reserved_tokens();
    REQUIRE(reserved.size() == 5);
    CHECK(reserved[0] == "<h>");
    CHECK(reserved[1] == "<r>");
    CHECK(reserved[2] == "<t>");
    CHECK(reserved[3] == "<works_at>");
    CHECK(reserved[4] == "<lives_in>");
}

TEST_CASE("schema rejects malformed relation sets") {
    CHECK_THROWS_AS(RelationSchema::from_relations({{1, "a", "<a>"}}), ConfigError);   // gap
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "a", "<a>"}, {0, "b", "<b>"}}),
                    ConfigError);                                                      // dup id
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "a", "<a>"}, {1, "a", "<b>"}}),
                    ConfigError);                                                      // dup name
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "a", "<a>"}, {1, "b", "<a>"}}),
                    ConfigError);                                                      // dup prompt
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "", "<a>"}}), ConfigError);    // empty name
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "a", ""}}), ConfigError);      // empty prompt
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "<h>", "<a>"}}), ConfigError); // marker clash
    CHECK_THROWS_AS(RelationSchema::from_relations({{0, "a", "<t>"}}), ConfigError);   // marker clash
}

TEST_CASE("schema json round trip") {
    const RelationSchema s = two_relation_schema();
    const RelationSchema back = RelationSchema::from_json(s.to_json());
    CHECK(back.size() == s.size());
    for (int i = 0; i < s.size(); ++i) {
        CHECK(back.at(i).name == s.at(i).name);
        CHECK(back.at(i).prompt_token == s.at(i).prompt_token);
    }
    CHECK_THROWS_AS(RelationSchema::from_json(nlohmann::json::array()), ConfigError);
    CHECK_THROWS_AS(RelationSchema::from_json(nlohmann::json{{"relations", 3}}), ConfigError);
}

TEST_CASE("manifest loads valid records and normalizes whitespace") {
    const RelationSchema schema = two_relation_schema();
    TempFile f("ok.jsonl",
               R"({"id":"s1","transcript":"  Ada   works at Initech ","triples":[["Ada","works_at","Initech"]],"synthetic_seed":7})"
               "\n"
               "\n"  // blank lines are skipped
               R"({"id":"s2","transcript":"Bob lives in Oslo","triples":[["Bob","lives_in","Oslo"],["Bob","lives_in","Oslo"]],"audio_path":"x.wav"})"
               "\n");
    const LoadResult r = load_manifest(f.str(), schema);
    REQUIRE(r.samples.size() == 2);
    CHECK(r.warned == 0);
    CHECK(r.rejected == 0);
    CHECK(r.samples[0].id == "s1");
    CHECK(r.samples[0].transcript == "Ada works at Initech");
    CHECK(r.samples[0].synthetic_seed == 7);
    CHECK_FALSE(r.samples[0].audio_path.has_value());
    CHECK(r.samples[1].audio_path == "x.wav");
    CHECK(r.samples[1].triples.size() == 1);  // duplicate triple deduplicated
}

TEST_CASE("manifest rejects malformed records with the line number") {
    const RelationSchema schema = two_relation_schema();
    const std::string good =
        R"({"id":"ok","transcript":"Ada works at Initech","triples":[["Ada","works_at","Initech"]],"synthetic_seed":1})";

    auto expect_reject = [&](const std::string& name, const std::string& bad_line) {
        TempFile f(name, good + "\n" + bad_line + "\n");
        CHECK_THROWS_AS(load_manifest(f.str(), schema), IngestError);
        // and with skip_malformed, only the bad record is dropped
        LoadOptions opts;
        opts.skip_malformed = true;
        const LoadResult r = load_manifest(f.str(), schema, opts);
        CHECK(r.samples.size() == 1);
        CHECK(r.rejected == 1);
        REQUIRE(r.messages.size() == 1);
        CHECK(r.messages[0].find("line 2") != std::string::npos);
    };

    expect_reject("json.jsonl", "{not json");
    expect_reject("unknown.jsonl",
                  R"({"id":"b","transcript":"t","triples":[],"synthetic_seed":1,"extra":1})");
    expect_reject("dupid.jsonl", good);  // same id again
    expect_reject("noid.jsonl", R"({"transcript":"t","triples":[],"synthetic_seed":1})");
    expect_reject("emptyid.jsonl", R"({"id":"","transcript":"t","triples":[],"synthetic_seed":1})");
    expect_reject("empty_transcript.jsonl",
                  R"({"id":"b","transcript":"   ","triples":[],"synthetic_seed":1})");
    expect_reject("both_sources.jsonl",
                  R"({"id":"b","transcript":"t","triples":[],"synthetic_seed":1,"audio_path":"x"})");
    expect_reject("no_source.jsonl", R"({"id":"b","transcript":"t","triples":[]})");
    expect_reject("bad_triple.jsonl",
                  R"({"id":"b","transcript":"t","triples":[["a","works_at"]],"synthetic_seed":1})");
    expect_reject("unknown_rel.jsonl",
                  R"({"id":"b","transcript":"a r b","triples":[["a","sibling_of","b"]],"synthetic_seed":1})");
    expect_reject("empty_entity.jsonl",
                  R"({"id":"b","transcript":"t","triples":[["","works_at","x"]],"synthetic_seed":1})");
    expect_reject("reserved_entity.jsonl",
                  R"({"id":"b","transcript":"t","triples":[["a <h> b","works_at","x"]],"synthetic_seed":1})");
    expect_reject("prompt_in_entity.jsonl",
                  R"({"id":"b","transcript":"t","triples":[["a","works_at","x <works_at>"]],"synthetic_seed":1})");
}

TEST_CASE("entity/transcript substring misses warn by default and reject on request") {
    const RelationSchema schema = two_relation_schema();
    TempFile f("miss.jsonl",
               R"({"id":"m","transcript":"nothing to see","triples":[["Ada","works_at","Initech"]],"synthetic_seed":1})"
               "\n");

    const LoadResult warned = load_manifest(f.str(), schema);
    CHECK(warned.samples.size() == 1);
    CHECK(warned.warned == 1);
    REQUIRE(warned.messages.size() == 1);
    CHECK(warned.messages[0].find("sample m") != std::string::npos);

    LoadOptions opts;
    opts.reject_on_substring_miss = true;
    const LoadResult rejected = load_manifest(f.str(), schema, opts);
    CHECK(rejected.samples.empty());
    CHECK(rejected.rejected == 1);
}

TEST_CASE("manifest serialization round trips") {
    const RelationSchema schema = two_relation_schema();
    Sample s1;
    s1.id = "a";
    s1.transcript = "Ada works at Initech";
    s1.triples.insert({"Ada", "works_at", "Initech"});
    s1.synthetic_seed = 99;
    Sample s2;
    s2.id = "b";
    s2.transcript = "Bob lives in Oslo";
    s2.triples.insert({"Bob", "lives_in", "Oslo"});
    s2.audio_path = "clip.wav";

    TempFile f("rt.jsonl", serialize_manifest({s1, s2}));
    const LoadResult r = load_manifest(f.str(), schema);
    REQUIRE(r.samples.size() == 2);
    CHECK(r.samples[0].id == s1.id);
    CHECK(r.samples[0].transcript == s1.transcript);
    CHECK(r.samples[0].triples == s1.triples);
    CHECK(r.samples[0].synthetic_seed == s1.synthetic_seed);
    CHECK(r.samples[1].audio_path == s2.audio_path);
    CHECK(r.samples[1].triples == s2.triples);
}

TEST_CASE("relation label vectors are multi-hot over relation ids") {
    const RelationSchema schema = two_relation_schema();
    Sample s;
    s.id = "x";
    s.transcript = "Ada works at Initech and lives in Oslo";
    s.triples.insert({"Ada", "works_at", "Initech"});
    s.triples.insert({"Ada", "lives_in", "Oslo"});
    s.triples.insert({"Bob", "lives_in", "Oslo"});

    const RelationLabelVector y = relation_labels(s, schema);
    CHECK(y == RelationLabelVector{1.0, 1.0});
    CHECK(gold_relation_ids(s, schema) == std::set<int>{0, 1});

    Sample only_second;
    only_second.id = "y";
    only_second.transcript = "Bob lives in Oslo";
    only_second.triples.insert({"Bob", "lives_in", "Oslo"});
    CHECK(relation_labels(only_second, schema) == RelationLabelVector{0.0, 1.0});

    Sample empty;
    empty.id = "z";
    empty.transcript = "nothing";
    CHECK(relation_labels(empty, schema) == RelationLabelVector{0.0, 0.0});
    CHECK(gold_relation_ids(empty, schema).empty());
}

TEST_CASE("triple sets deduplicate and compare by value") {
    TripleSet a;
    CHECK(a.insert({"h", "r", "t"}));
    CHECK_FALSE(a.insert({"h", "r", "t"}));
    CHECK(a.insert({"h", "r", "u"}));
    CHECK(a.size() == 2);
    CHECK(a.contains({"h", "r", "t"}));
    CHECK_FALSE(a.contains({"h", "q", "t"}));

    TripleSet b(std::vector<RelationTriple>{{"h", "r", "u"}, {"h", "r", "t"}});
    CHECK(a == b);
}
