#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "json.hpp"

#include "clincoder/common.hpp"

namespace clincoder {

constexpr std::size_t kMaxDocTokens = 2500;

/// A token span carrying one concept code. `end` is exclusive.
struct Annotation {
    std::size_t start = 0;
    std::size_t end = 0;
    std::string code;

    std::size_t span_length() const { return end - start; }
    bool operator==(const Annotation&) const = default;
};

struct Document {
    std::string doc_id;
    std::string patient_id;
    std::vector<std::string> tokens;
    std::set<std::string> labels;
    std::vector<Annotation> annotations;
};

// ---------------------------------------------------------------------------
// Preprocessing: whitespace tokenize, lowercase, drop tokens without an
// alphabetic character, truncate to kMaxDocTokens.

inline bool has_alpha(const std::string& tok) {
    return std::any_of(tok.begin(), tok.end(),
                       [](unsigned char c) { return std::isalpha(c) != 0; });
}

inline std::string to_lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

inline std::vector<std::string> preprocess(const std::string& raw_text) {
    std::vector<std::string> out;
    std::istringstream iss(raw_text);
    std::string tok;
    while (iss >> tok && out.size() < kMaxDocTokens) {
        if (!has_alpha(tok)) continue;
        out.push_back(to_lower(tok));
    }
    return out;
}

/// Token along with its [begin, end) character range in the raw text.
/// Needed to map external character-offset annotations onto token indices.
struct TokenOffsets {
    std::vector<std::string> tokens;
    std::vector<std::pair<std::size_t, std::size_t>> char_ranges;
};

inline TokenOffsets preprocess_with_offsets(const std::string& raw_text) {
    TokenOffsets out;
    std::size_t i = 0;
    const std::size_t n = raw_text.size();
    while (i < n && out.tokens.size() < kMaxDocTokens) {
        while (i < n && std::isspace(static_cast<unsigned char>(raw_text[i]))) ++i;
        if (i >= n) break;
        std::size_t begin = i;
        while (i < n && !std::isspace(static_cast<unsigned char>(raw_text[i]))) ++i;
        std::string tok = raw_text.substr(begin, i - begin);
        if (!has_alpha(tok)) continue;
        out.tokens.push_back(to_lower(tok));
        out.char_ranges.emplace_back(begin, i);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

class Vocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;

    Vocabulary() = default;

    /// Tokens occurring in at least `min_df` distinct training documents get
    /// their own index; everything else resolves to UNK at lookup time.
    /// Ordering is lexicographic so builds are machine-independent.
    static Vocabulary build(const std::vector<Document>& train_docs, std::size_t min_df = 3) {
        if (train_docs.empty()) throw std::runtime_error("empty corpus");
        std::map<std::string, std::size_t> doc_freq;
        for (const auto& doc : train_docs) {
            std::set<std::string> uniq(doc.tokens.begin(), doc.tokens.end());
            for (const auto& t : uniq) ++doc_freq[t];
        }
        Vocabulary v;
        v.min_doc_frequency_ = min_df;
        for (const auto& [tok, df] : doc_freq) {
            if (df >= min_df) {
                v.index_[tok] = v.tokens_.size() + 2;
                v.tokens_.push_back(tok);
            }
        }
        return v;
    }

    static Vocabulary from_tokens(std::vector<std::string> sorted_tokens, std::size_t min_df = 3) {
        Vocabulary v;
        v.min_doc_frequency_ = min_df;
        v.tokens_ = std::move(sorted_tokens);
        for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_[v.tokens_[i]] = i + 2;
        return v;
    }

    std::size_t lookup(const std::string& tok) const {
        auto it = index_.find(tok);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& tok) const { return index_.count(tok) > 0; }

    /// Total index count including PAD and UNK.
    std::size_t size() const { return tokens_.size() + 2; }
    std::size_t min_doc_frequency() const { return min_doc_frequency_; }
    const std::vector<std::string>& entries() const { return tokens_; }

    std::uint64_t content_hash() const {
        std::string blob;
        for (const auto& t : tokens_) { blob += t; blob += '\n'; }
        return fnv1a(blob);
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> tokens_; // non-reserved entries, index i+2
    std::size_t min_doc_frequency_ = 3;
};

// ---------------------------------------------------------------------------
// Patient-disjoint splitting

struct CorpusSplit {
    std::vector<std::string> train, dev, test;
};

/// Shuffles patient groups with `seed`, then deals whole groups to the split
/// currently furthest below its requested ratio. Documents sharing a
/// patient_id always land in the same split.
inline CorpusSplit split_by_patient(const std::vector<Document>& docs,
                                    const std::array<double, 3>& ratios,
                                    std::uint64_t seed) {
    const double rsum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(rsum - 1.0) > 1e-9)
        throw std::invalid_argument("split ratios must sum to 1");

    std::map<std::string, std::vector<std::string>> by_patient;
    for (const auto& d : docs) by_patient[d.patient_id].push_back(d.doc_id);
    if (by_patient.size() < 3)
        throw std::runtime_error("fewer distinct patients than splits");

    std::vector<std::string> patients;
    patients.reserve(by_patient.size());
    for (const auto& [p, _] : by_patient) patients.push_back(p);
    std::mt19937_64 rng(seed);
    for (std::size_t i = patients.size(); i > 1; --i)
        std::swap(patients[i - 1], patients[rand_index(rng, i)]);

    CorpusSplit split;
    std::array<std::vector<std::string>*, 3> buckets{&split.train, &split.dev, &split.test};
    std::array<double, 3> assigned{0, 0, 0};
    const double total = static_cast<double>(docs.size());
    for (const auto& p : patients) {
        // deficit = requested share minus current share; largest deficit wins
        std::size_t best = 0;
        double best_deficit = -1e300;
        for (std::size_t k = 0; k < 3; ++k) {
            double deficit = ratios[k] - assigned[k] / total;
            if (deficit > best_deficit) { best_deficit = deficit; best = k; }
        }
        for (const auto& id : by_patient[p]) buckets[best]->push_back(id);
        assigned[best] += static_cast<double>(by_patient[p].size());
    }
    return split;
}

// ---------------------------------------------------------------------------
// Coverage statistics (the Table-1-style report)

struct CoverageStats {
    std::size_t total_concepts = 0;
    double mean_concepts_per_doc = 0.0;
    double mean_fraction_tokens_annotated = 0.0;
    double mean_tokens_per_doc = 0.0;
};

inline CoverageStats coverage_stats(const std::vector<Document>& docs) {
    CoverageStats s;
    if (docs.empty()) return s;
    double frac_sum = 0.0, tok_sum = 0.0;
    for (const auto& d : docs) {
        s.total_concepts += d.annotations.size();
        tok_sum += static_cast<double>(d.tokens.size());
        if (!d.tokens.empty()) {
            std::vector<char> covered(d.tokens.size(), 0);
            for (const auto& a : d.annotations)
                for (std::size_t i = a.start; i < a.end && i < covered.size(); ++i)
                    covered[i] = 1;
            frac_sum += static_cast<double>(std::count(covered.begin(), covered.end(), 1)) /
                        static_cast<double>(d.tokens.size());
        }
    }
    const double n = static_cast<double>(docs.size());
    s.mean_concepts_per_doc = static_cast<double>(s.total_concepts) / n;
    s.mean_fraction_tokens_annotated = frac_sum / n;
    s.mean_tokens_per_doc = tok_sum / n;
    return s;
}

// ---------------------------------------------------------------------------
// File I/O. All writers may emit leading '#' comment lines (config hash);
// all readers skip them.

inline bool is_comment_or_blank(const std::string& line) {
    return line.empty() || line[0] == '#';
}

/// documents.jsonl: {"doc_id","patient_id","text","labels"} (raw) or the same
/// with "tokens" (preprocessed). Raw text is preprocessed on load.
inline std::vector<Document> load_documents(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<Document> docs;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (is_comment_or_blank(line)) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad json: " + e.what());
        }
        Document d;
        d.doc_id = j.at("doc_id").get<std::string>();
        d.patient_id = j.value("patient_id", d.doc_id);
        if (j.contains("tokens")) {
            d.tokens = j.at("tokens").get<std::vector<std::string>>();
        } else {
            d.tokens = preprocess(j.at("text").get<std::string>());
        }
        if (j.contains("labels"))
            for (const auto& l : j.at("labels")) d.labels.insert(l.get<std::string>());
        docs.push_back(std::move(d));
    }
    return docs;
}

inline void save_documents(const std::string& path, const std::vector<Document>& docs,
                           const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    for (const auto& d : docs) {
        nlohmann::json j;
        j["doc_id"] = d.doc_id;
        j["patient_id"] = d.patient_id;
        j["tokens"] = d.tokens;
        j["labels"] = std::vector<std::string>(d.labels.begin(), d.labels.end());
        out << j.dump() << "\n";
    }
}

inline CorpusSplit load_split(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string content, line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') continue;
        content += line;
        content += '\n';
    }
    nlohmann::json j = nlohmann::json::parse(content);
    CorpusSplit s;
    s.train = j.at("train").get<std::vector<std::string>>();
    s.dev = j.at("dev").get<std::vector<std::string>>();
    s.test = j.at("test").get<std::vector<std::string>>();
    return s;
}

inline void save_split(const std::string& path, const CorpusSplit& s,
                       const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    nlohmann::json j;
    j["train"] = s.train;
    j["dev"] = s.dev;
    j["test"] = s.test;
    out << j.dump(2) << "\n";
}

} // namespace clincoder
