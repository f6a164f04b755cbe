#include "doctest.h"

#include <cstdio>
#include <filesystem>

#include "clincoder/corpus.hpp"
#include "clincoder/synthetic.hpp"

using namespace clincoder;

TEST_CASE("preprocess drops non-alphabetic tokens and lowercases") {
    CHECK(preprocess("BP 120/80") == std::vector<std::string>{"bp"});
    CHECK(preprocess("").empty());
    CHECK(preprocess("Acute Heart   FAILURE!") ==
          std::vector<std::string>{"acute", "heart", "failure!"});
}

TEST_CASE("preprocess truncates to 2500 tokens") {
    std::string text;
    for (int i = 0; i < 3000; ++i) text += "tok ";
    auto toks = preprocess(text);
    CHECK(toks.size() == 2500);
}

TEST_CASE("preprocess is idempotent") {
    const std::string raw = "The QUICK 12 brown-fox 99/100 jumps  OVER";
    auto once = preprocess(raw);
    std::string joined;
    for (const auto& t : once) { joined += t; joined += ' '; }
    CHECK(preprocess(joined) == once);
}

TEST_CASE("preprocess_with_offsets tracks character ranges") {
    auto res = preprocess_with_offsets("BP 120/80 heart");
    REQUIRE(res.tokens.size() == 2);
    CHECK(res.tokens[0] == "bp");
    CHECK(res.tokens[1] == "heart");
    CHECK(res.char_ranges[1].first == 10);
    CHECK(res.char_ranges[1].second == 15);
}

static Document make_doc(std::string id, std::vector<std::string> toks,
                         std::string patient = {}) {
    Document d;
    d.doc_id = id;
    d.patient_id = patient.empty() ? id : patient;
    d.tokens = std::move(toks);
    return d;
}

TEST_CASE("vocabulary respects the min document frequency threshold") {
    std::vector<Document> docs;
    // "common" in 3 docs, "rare" in 2
    docs.push_back(make_doc("a", {"common", "rare"}));
    docs.push_back(make_doc("b", {"common", "rare", "common"}));
    docs.push_back(make_doc("c", {"common"}));
    auto v = Vocabulary::build(docs, 3);
    CHECK(v.lookup("common") != Vocabulary::kUnk);
    CHECK(v.lookup("rare") == Vocabulary::kUnk);
    CHECK(v.lookup("never-seen") == Vocabulary::kUnk);
    CHECK(Vocabulary::kPad == 0);
    CHECK(Vocabulary::kUnk == 1);
}

TEST_CASE("vocabulary errors on an empty corpus") {
    std::vector<Document> docs;
    CHECK_THROWS_WITH(Vocabulary::build(docs), "empty corpus");
}

TEST_CASE("vocabulary order is lexicographic and lookup is total") {
    std::vector<Document> docs;
    docs.push_back(make_doc("a", {"zebra", "apple"}));
    auto v = Vocabulary::build(docs, 1);
    CHECK(v.entries() == std::vector<std::string>{"apple", "zebra"});
    CHECK(v.lookup("apple") == 2);
    CHECK(v.lookup("zebra") == 3);
}

TEST_CASE("split_by_patient keeps patients together and is deterministic") {
    std::vector<Document> docs;
    docs.push_back(make_doc("d1", {"x"}, "p1"));
    docs.push_back(make_doc("d2", {"x"}, "p1"));
    for (int i = 0; i < 20; ++i)
        docs.push_back(make_doc("e" + std::to_string(i), {"x"}, "q" + std::to_string(i)));
    auto s1 = split_by_patient(docs, {0.8, 0.1, 0.1}, 7);
    auto s2 = split_by_patient(docs, {0.8, 0.1, 0.1}, 7);
    CHECK(s1.train == s2.train);
    CHECK(s1.dev == s2.dev);
    CHECK(s1.test == s2.test);

    auto in = [](const std::vector<std::string>& v, const std::string& x) {
        return std::find(v.begin(), v.end(), x) != v.end();
    };
    int together = 0;
    for (const auto* part : {&s1.train, &s1.dev, &s1.test})
        if (in(*part, "d1") && in(*part, "d2")) ++together;
    CHECK(together == 1);
}

TEST_CASE("split sizes track ratios for single-doc patients") {
    std::vector<Document> docs;
    for (int i = 0; i < 100; ++i)
        docs.push_back(make_doc("d" + std::to_string(i), {"x"}));
    auto s = split_by_patient(docs, {0.8, 0.1, 0.1}, 42);
    CHECK(s.train.size() == 80);
    CHECK(s.dev.size() == 10);
    CHECK(s.test.size() == 10);
}

TEST_CASE("split partitions the corpus exactly once, any seed") {
    std::vector<Document> docs;
    for (int i = 0; i < 37; ++i)
        docs.push_back(make_doc("d" + std::to_string(i), {"x"},
                                "p" + std::to_string(i % 13)));
    for (std::uint64_t seed : {1ull, 2ull, 99ull}) {
        auto s = split_by_patient(docs, {0.6, 0.2, 0.2}, seed);
        std::set<std::string> all;
        for (const auto* part : {&s.train, &s.dev, &s.test})
            for (const auto& id : *part) CHECK(all.insert(id).second);
        CHECK(all.size() == docs.size());
        // patient disjointness
        std::map<std::string, std::string> patient_of;
        for (const auto& d : docs) patient_of[d.doc_id] = d.patient_id;
        std::map<std::string, int> patient_part;
        int part_idx = 0;
        for (const auto* part : {&s.train, &s.dev, &s.test}) {
            for (const auto& id : *part) {
                auto [it, inserted] = patient_part.emplace(patient_of[id], part_idx);
                CHECK(it->second == part_idx);
            }
            ++part_idx;
        }
    }
}

TEST_CASE("split errors when patients are fewer than splits") {
    std::vector<Document> docs;
    docs.push_back(make_doc("a", {"x"}, "p"));
    docs.push_back(make_doc("b", {"x"}, "p"));
    CHECK_THROWS(split_by_patient(docs, {0.8, 0.1, 0.1}, 1));
}

TEST_CASE("coverage_stats arithmetic") {
    Document d = make_doc("a", std::vector<std::string>(10, "tok"));
    d.annotations = {{2, 3, "c1"}, {7, 8, "c2"}};
    auto s = coverage_stats({d});
    CHECK(s.total_concepts == 2);
    CHECK(s.mean_fraction_tokens_annotated == doctest::Approx(0.2));
    CHECK(s.mean_tokens_per_doc == doctest::Approx(10.0));

    d.annotations.clear();
    auto s0 = coverage_stats({d});
    CHECK(s0.total_concepts == 0);
    CHECK(s0.mean_fraction_tokens_annotated == 0.0);
}

TEST_CASE("synthetic generator is deterministic and honors coverage") {
    SyntheticSpec spec;
    spec.seed = 123;
    spec.coverage = 0.35;
    spec.train_docs = 60;
    spec.dev_docs = 10;
    spec.test_docs = 10;
    spec.variants_per_concept = VariantDistribution::constant(3);
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    REQUIRE(a.documents.size() == b.documents.size());
    for (std::size_t i = 0; i < a.documents.size(); ++i) {
        CHECK(a.documents[i].tokens == b.documents[i].tokens);
        CHECK(a.documents[i].labels == b.documents[i].labels);
        CHECK(a.documents[i].annotations == b.documents[i].annotations);
    }
    auto stats = coverage_stats(a.documents);
    CHECK(stats.mean_fraction_tokens_annotated == doctest::Approx(0.35).epsilon(0.06));
    CHECK(std::abs(stats.mean_fraction_tokens_annotated - 0.35) < 0.02);
}

TEST_CASE("synthetic generator with zero coverage emits no annotations") {
    SyntheticSpec spec;
    spec.coverage = 0.0;
    auto c = generate_synthetic(spec);
    for (const auto& d : c.documents) CHECK(d.annotations.empty());
}

TEST_CASE("variants_per_concept is a construction parameter") {
    SyntheticSpec spec;
    spec.variants_per_concept = VariantDistribution::constant(5);
    spec.concept_count = 12;
    auto c = generate_synthetic(spec);
    std::map<std::string, std::set<std::string>> phrases_per_concept;
    for (const auto& [phrase, codes] : c.dictionary.items())
        for (const auto& code : codes)
            phrases_per_concept[code].insert(Dictionary::join(phrase));
    CHECK(phrases_per_concept.size() == 12);
    for (const auto& [code, phrases] : phrases_per_concept) {
        CHECK(phrases.size() == 5);
        CHECK(c.variants_per_concept.at(code) == 5);
    }
}

TEST_CASE("synthetic documents obey document invariants") {
    SyntheticSpec spec;
    spec.seed = 5;
    auto c = generate_synthetic(spec);
    for (const auto& d : c.documents) {
        CHECK(d.tokens.size() <= kMaxDocTokens);
        for (const auto& t : d.tokens) {
            CHECK(has_alpha(t));
            CHECK(t == to_lower(t));
        }
        for (const auto& l : d.labels) CHECK(c.label_space.contains(l));
    }
}

TEST_CASE("documents jsonl round trip") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "clincoder-corpus-test";
    fs::create_directories(dir);
    std::vector<Document> docs;
    auto d = make_doc("d1", {"heart", "failure"}, "p1");
    d.labels = {"x", "y"};
    docs.push_back(d);
    auto path = (dir / "documents.jsonl").string();
    save_documents(path, docs, "cafe");
    auto loaded = load_documents(path);
    REQUIRE(loaded.size() == 1);
    CHECK(loaded[0].doc_id == "d1");
    CHECK(loaded[0].patient_id == "p1");
    CHECK(loaded[0].tokens == docs[0].tokens);
    CHECK(loaded[0].labels == docs[0].labels);
    fs::remove_all(dir);
}

TEST_CASE("load_documents preprocesses raw text records") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "clincoder-corpus-raw";
    fs::create_directories(dir);
    auto path = (dir / "documents.jsonl").string();
    {
        std::ofstream out(path);
        out << R"({"doc_id":"d1","patient_id":"p1","text":"BP 120/80 Heart","labels":[]})" << "\n";
    }
    auto docs = load_documents(path);
    REQUIRE(docs.size() == 1);
    CHECK(docs[0].tokens == std::vector<std::string>{"bp", "heart"});
    fs::remove_all(dir);
}
