#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "clincoder/annotator.hpp"
#include "clincoder/synthetic.hpp"

using namespace clincoder;
namespace fs = std::filesystem;

namespace {
Document doc_of(std::vector<std::string> toks) {
    Document d;
    d.doc_id = "t";
    d.patient_id = "t";
    d.tokens = std::move(toks);
    return d;
}
} // namespace

TEST_CASE("annotate matches phrases greedily left to right") {
    Dictionary dict;
    dict.add({"heart", "failure"}, "428");
    auto anns = annotate(doc_of({"acute", "heart", "failure"}), dict);
    REQUIRE(anns.size() == 1);
    CHECK(anns[0] == Annotation{1, 3, "428"});
    CHECK(annotate(doc_of({}), dict).empty());
}

TEST_CASE("annotate prefers the longest match") {
    Dictionary dict;
    dict.add({"heart"}, "X");
    dict.add({"heart", "failure"}, "Y");
    auto anns = annotate(doc_of({"heart", "failure"}), dict);
    REQUIRE(anns.size() == 1);
    CHECK(anns[0] == Annotation{0, 2, "Y"});
}

TEST_CASE("annotate emits one annotation per mapped code, sharing the span") {
    Dictionary dict;
    dict.add({"apnea"}, "A");
    dict.add({"apnea"}, "B");
    auto anns = annotate(doc_of({"apnea"}), dict);
    REQUIRE(anns.size() == 2);
    CHECK(anns[0].code == "A"); // dictionary file order breaks ties
    CHECK(anns[1].code == "B");
    CHECK(anns[0].start == anns[1].start);
}

TEST_CASE("annotate output is sorted and non-overlapping") {
    std::mt19937_64 rng(3);
    SyntheticSpec spec;
    spec.coverage = 0.5;
    spec.train_docs = 20;
    spec.dev_docs = 5;
    spec.test_docs = 5;
    spec.variants_per_concept = VariantDistribution::constant(4);
    auto corpus = generate_synthetic(spec);
    for (const auto& d : corpus.documents) {
        auto anns = annotate(d, corpus.dictionary);
        for (std::size_t i = 1; i < anns.size(); ++i) {
            CHECK(anns[i].start >= anns[i - 1].start);
            if (anns[i - 1].span_length() && anns[i].start < anns[i - 1].end)
                CHECK(anns[i].start == anns[i - 1].start); // same-span multi-code only
        }
    }
    (void)rng;
}

TEST_CASE("align exposes covering sets and first-emitted selection") {
    auto d = doc_of({"a", "b", "c", "d"});
    auto a = align(d, {{1, 3, "428"}});
    CHECK_FALSE(a.selected[0].has_value());
    CHECK(*a.selected[1] == "428");
    CHECK(*a.selected[2] == "428");
    CHECK_FALSE(a.selected[3].has_value());

    auto two = align(doc_of({"x"}), {{0, 1, "A"}, {0, 1, "B"}});
    CHECK(*two.selected[0] == "A");
    CHECK(two.concept_sets[0] == std::vector<std::string>{"A", "B"});

    auto none = align(doc_of({"x", "y"}), {});
    CHECK_FALSE(none.selected[0].has_value());
    CHECK_FALSE(none.selected[1].has_value());

    CHECK_THROWS(align(doc_of({"x"}), {{0, 5, "A"}}));
}

TEST_CASE("raw_codes_predict marks exactly the label-space codes present") {
    LabelSpace ls({"A", "B", "C"});
    std::vector<Annotation> anns{{0, 1, "A"}, {1, 2, "B"}, {2, 3, "D"}};
    CHECK(raw_codes_predict(anns, ls) == std::vector<int>{1, 1, 0});
    CHECK(raw_codes_predict({}, ls) == std::vector<int>{0, 0, 0});
}

TEST_CASE("raw codes recover gold labels on a mismatch-free synthetic corpus") {
    SyntheticSpec spec;
    spec.specificity_mismatch = 0.0;
    spec.coverage = 0.4;
    spec.train_docs = 15;
    spec.dev_docs = 3;
    spec.test_docs = 3;
    auto corpus = generate_synthetic(spec);
    // label space := concept codes, labels := annotated codes
    std::vector<std::string> codes;
    for (const auto& [c, _] : corpus.variants_per_concept) codes.push_back(c);
    LabelSpace ls(codes);
    for (std::size_t i = 0; i < corpus.documents.size(); ++i) {
        std::set<std::string> gold_codes;
        for (const auto& a : corpus.gold[i]) gold_codes.insert(a.code);
        auto pred = raw_codes_predict(corpus.documents[i].annotations, ls);
        std::set<std::string> predicted;
        for (std::size_t l = 0; l < codes.size(); ++l)
            if (pred[l]) predicted.insert(codes[l]);
        CHECK(predicted == gold_codes);
    }
}

TEST_CASE("align agrees with raw codes on singly-covered tokens") {
    Dictionary dict;
    dict.add({"heart"}, "H");
    dict.add({"apnea"}, "A");
    auto d = doc_of({"heart", "x", "apnea"});
    auto anns = annotate(d, dict);
    auto a = align(d, anns);
    LabelSpace ls({"H", "A"});
    std::set<std::string> via_align;
    for (const auto& sel : a.selected)
        if (sel) via_align.insert(*sel);
    auto pred = raw_codes_predict(anns, ls);
    std::set<std::string> via_raw;
    for (std::size_t l = 0; l < ls.size(); ++l)
        if (pred[l]) via_raw.insert(ls.code(l));
    CHECK(via_align == via_raw);
}

TEST_CASE("external character-offset annotations map onto surviving tokens") {
    const std::string raw = "Pt has 120/80 heart failure today";
    // "heart failure" occupies chars 14..27
    auto res = map_external_spans(raw, {{14, 27, "428"}});
    REQUIRE(res.annotations.size() == 1);
    // surviving tokens: pt has heart failure today -> heart=2, failure=3
    CHECK(res.annotations[0] == Annotation{2, 4, "428"});
    CHECK(res.discarded == 0);

    // span covering only the dropped token "120/80" (chars 7..13)
    auto dropped = map_external_spans(raw, {{7, 13, "X"}});
    CHECK(dropped.annotations.empty());
    CHECK(dropped.discarded == 1);

    CHECK_THROWS(map_external_spans(raw, {{0, 999, "X"}}));
}

TEST_CASE("import_external_annotations reads the jsonl format") {
    auto dir = fs::temp_directory_path() / "clincoder-ext";
    fs::create_directories(dir);
    auto path = (dir / "external.jsonl").string();
    {
        std::ofstream out(path);
        out << R"({"doc_id":"d1","spans":[{"begin_char":0,"end_char":5,"code":"H"}]})" << "\n";
        out << R"({"doc_id":"other","spans":[{"begin_char":0,"end_char":5,"code":"Z"}]})" << "\n";
    }
    auto res = import_external_annotations(path, "d1", "heart attack");
    REQUIRE(res.annotations.size() == 1);
    CHECK(res.annotations[0].code == "H");
    CHECK(res.annotations[0].start == 0);

    {
        std::ofstream out(path);
    }
    auto empty = import_external_annotations(path, "d1", "heart attack");
    CHECK(empty.annotations.empty());
    fs::remove_all(dir);
}

TEST_CASE("annotations jsonl round trip") {
    auto dir = fs::temp_directory_path() / "clincoder-anns";
    fs::create_directories(dir);
    auto path = (dir / "annotations.jsonl").string();
    std::vector<Document> docs{doc_of({"a", "b"}), doc_of({"c"})};
    docs[0].doc_id = "d0";
    docs[1].doc_id = "d1";
    docs[0].annotations = {{0, 2, "X"}};
    save_annotations(path, docs, "abcd");
    std::vector<Document> fresh{doc_of({"a", "b"}), doc_of({"c"})};
    fresh[0].doc_id = "d0";
    fresh[1].doc_id = "d1";
    load_annotations(path, fresh);
    CHECK(fresh[0].annotations == docs[0].annotations);
    CHECK(fresh[1].annotations.empty());
    fs::remove_all(dir);
}

TEST_CASE("threaded annotation equals sequential annotation") {
    SyntheticSpec spec;
    spec.coverage = 0.4;
    spec.train_docs = 30;
    spec.dev_docs = 5;
    spec.test_docs = 5;
    auto corpus = generate_synthetic(spec);
    auto seq = corpus.documents;
    auto par = corpus.documents;
    annotate_all(seq, corpus.dictionary, 1);
    annotate_all(par, corpus.dictionary, 4);
    for (std::size_t i = 0; i < seq.size(); ++i)
        CHECK(seq[i].annotations == par[i].annotations);
}
