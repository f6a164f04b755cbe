#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "clincoder/corpus.hpp"
#include "clincoder/ontology.hpp"

namespace clincoder {

/// Greedy left-to-right longest-match over the token sequence. Every code
/// mapped to a matched phrase is emitted as its own Annotation sharing the
/// span; codes keep dictionary insertion order so downstream first-concept
/// selection is deterministic. Matched tokens are consumed, so spans never
/// overlap.
inline std::vector<Annotation> annotate(const Document& doc, const Dictionary& dict) {
    std::vector<Annotation> out;
    const std::size_t n = doc.tokens.size();
    const std::size_t max_len = dict.max_phrase_length();
    std::size_t i = 0;
    while (i < n) {
        std::size_t best_len = 0;
        const std::vector<std::string>* best_codes = nullptr;
        std::string joined;
        for (std::size_t len = 1; len <= max_len && i + len <= n; ++len) {
            if (len == 1) joined = doc.tokens[i];
            else { joined += ' '; joined += doc.tokens[i + len - 1]; }
            const auto& codes = dict.lookup_joined(joined);
            if (!codes.empty()) { best_len = len; best_codes = &codes; }
        }
        if (best_len == 0) { ++i; continue; }
        for (const auto& code : *best_codes)
            out.push_back(Annotation{i, i + best_len, code});
        i += best_len;
    }
    return out;
}

/// Annotate a whole corpus, optionally fanning out across threads.
inline void annotate_all(std::vector<Document>& docs, const Dictionary& dict,
                         unsigned threads = 1) {
    if (threads <= 1 || docs.size() < 2) {
        for (auto& d : docs) d.annotations = annotate(d, dict);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t chunk = (docs.size() + threads - 1) / threads;
    for (unsigned t = 0; t < threads; ++t) {
        std::size_t lo = t * chunk;
        std::size_t hi = std::min(docs.size(), lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&docs, &dict, lo, hi] {
            for (std::size_t i = lo; i < hi; ++i)
                docs[i].annotations = annotate(docs[i], dict);
        });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------

/// Per-token concept view: the full covering set and the selected concept
/// (first-emitted covering annotation), empty where no annotation covers the
/// token.
struct TokenConceptAlignment {
    std::vector<std::vector<std::string>> concept_sets; // C_n
    std::vector<std::optional<std::string>> selected;   // c_n

    std::size_t size() const { return selected.size(); }
};

inline TokenConceptAlignment align(const Document& doc,
                                   const std::vector<Annotation>& annotations) {
    TokenConceptAlignment a;
    const std::size_t n = doc.tokens.size();
    a.concept_sets.assign(n, {});
    a.selected.assign(n, std::nullopt);
    for (const auto& ann : annotations) {
        if (ann.start >= ann.end || ann.end > n)
            throw std::runtime_error("annotation span out of range in doc " + doc.doc_id);
        for (std::size_t i = ann.start; i < ann.end; ++i) {
            auto& set = a.concept_sets[i];
            if (std::find(set.begin(), set.end(), ann.code) == set.end())
                set.push_back(ann.code);
            if (!a.selected[i]) a.selected[i] = ann.code;
        }
    }
    return a;
}

/// The raw-codes baseline: annotator output used directly as document-level
/// predictions. Entry l is 1 iff some annotation carries label code l.
inline std::vector<int> raw_codes_predict(const std::vector<Annotation>& annotations,
                                          const LabelSpace& labels) {
    std::vector<int> y(labels.size(), 0);
    for (const auto& a : annotations)
        if (auto idx = labels.index_of(a.code)) y[*idx] = 1;
    return y;
}

// ---------------------------------------------------------------------------
// External annotator output: character offsets over the raw text.

struct ImportResult {
    std::vector<Annotation> annotations;
    std::size_t discarded = 0; // spans whose tokens did not survive preprocessing
};

/// Maps {"begin_char","end_char","code"} spans onto preprocessed token
/// indices. A token belongs to a span if its character range overlaps it.
inline ImportResult map_external_spans(const std::string& raw_text,
                                       const std::vector<std::tuple<std::size_t, std::size_t, std::string>>& spans) {
    TokenOffsets toks = preprocess_with_offsets(raw_text);
    ImportResult res;
    for (const auto& [begin_char, end_char, code] : spans) {
        if (begin_char > end_char || end_char > raw_text.size())
            throw std::runtime_error("character span beyond raw text");
        std::size_t first = toks.tokens.size(), last = 0;
        bool any = false;
        for (std::size_t i = 0; i < toks.tokens.size(); ++i) {
            auto [tb, te] = toks.char_ranges[i];
            if (tb < end_char && begin_char < te) {
                if (!any) first = i;
                last = i;
                any = true;
            }
        }
        if (!any) { ++res.discarded; continue; }
        res.annotations.push_back(Annotation{first, last + 1, code});
    }
    return res;
}

/// File format: one {"doc_id","spans":[{"begin_char","end_char","code"}]}
/// object per line. Only spans for `doc_id` are returned.
inline ImportResult import_external_annotations(const std::string& path,
                                                const std::string& doc_id,
                                                const std::string& raw_text) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::tuple<std::size_t, std::size_t, std::string>> spans;
    std::string line;
    while (std::getline(in, line)) {
        if (is_comment_or_blank(line)) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        if (j.at("doc_id").get<std::string>() != doc_id) continue;
        for (const auto& s : j.at("spans"))
            spans.emplace_back(s.at("begin_char").get<std::size_t>(),
                               s.at("end_char").get<std::size_t>(),
                               s.at("code").get<std::string>());
    }
    return map_external_spans(raw_text, spans);
}

// ---------------------------------------------------------------------------
// annotations.jsonl: token-index spans, end exclusive.

inline void save_annotations(const std::string& path, const std::vector<Document>& docs,
                             const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    for (const auto& d : docs) {
        nlohmann::json spans = nlohmann::json::array();
        for (const auto& a : d.annotations)
            spans.push_back({{"start", a.start}, {"end", a.end}, {"code", a.code}});
        out << nlohmann::json{{"doc_id", d.doc_id}, {"spans", spans}}.dump() << "\n";
    }
}

/// Attaches spans from annotations.jsonl to matching documents in place.
inline void load_annotations(const std::string& path, std::vector<Document>& docs) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::unordered_map<std::string, Document*> by_id;
    for (auto& d : docs) by_id[d.doc_id] = &d;
    std::string line;
    while (std::getline(in, line)) {
        if (is_comment_or_blank(line)) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        auto it = by_id.find(j.at("doc_id").get<std::string>());
        if (it == by_id.end()) continue;
        it->second->annotations.clear();
        for (const auto& s : j.at("spans"))
            it->second->annotations.push_back(Annotation{
                s.at("start").get<std::size_t>(),
                s.at("end").get<std::size_t>(),
                s.at("code").get<std::string>()});
    }
}

} // namespace clincoder
