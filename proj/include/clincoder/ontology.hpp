#pragma once

#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "clincoder/common.hpp"
#include "clincoder/corpus.hpp"

namespace clincoder {

/// Tree-shaped code hierarchy. Roots carry no parent.
class Ontology {
public:
    void add_code(const std::string& code) { parent_.emplace(code, std::string{}); }

    void add_edge(const std::string& child, const std::string& parent) {
        parent_[child] = parent;
        parent_.emplace(parent, std::string{});
    }

    bool contains(const std::string& code) const { return parent_.count(code) > 0; }
    std::size_t size() const { return parent_.size(); }

    const std::string& parent(const std::string& code) const {
        auto it = parent_.find(code);
        if (it == parent_.end()) throw std::runtime_error("unknown code: " + code);
        return it->second; // empty for roots
    }

    /// Self first, root last.
    std::vector<std::string> ancestors(const std::string& code) const {
        if (!contains(code)) throw std::runtime_error("unknown code: " + code);
        std::vector<std::string> chain;
        std::string cur = code;
        while (true) {
            chain.push_back(cur);
            const std::string& p = parent(cur);
            if (p.empty()) break;
            cur = p;
        }
        return chain;
    }

    std::vector<std::string> codes() const {
        std::vector<std::string> out;
        out.reserve(parent_.size());
        for (const auto& [c, _] : parent_) out.push_back(c);
        return out;
    }

    /// Throws on cycles or dangling parents.
    void validate() const {
        for (const auto& [code, par] : parent_) {
            if (!par.empty() && !parent_.count(par))
                throw std::runtime_error("dangling parent: " + par);
            // walk to root, bounded by node count
            std::size_t steps = 0;
            std::string cur = code;
            while (!parent_.at(cur).empty()) {
                cur = parent_.at(cur);
                if (++steps > parent_.size())
                    throw std::runtime_error("cycle detected at code: " + code);
            }
        }
    }

private:
    std::map<std::string, std::string> parent_; // code -> parent ("" for roots)
};

/// ontology.tsv: child<TAB>parent per line; roots as child<TAB>-
inline Ontology load_ontology(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Ontology o;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (is_comment_or_blank(line)) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed line (no tab)");
        std::string child = line.substr(0, tab);
        std::string parent = line.substr(tab + 1);
        if (child.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty child code");
        if (parent == "-" || parent.empty())
            o.add_code(child);
        else
            o.add_edge(child, parent);
    }
    try {
        o.validate();
    } catch (const std::exception& e) {
        throw std::runtime_error(path + ": " + e.what());
    }
    return o;
}

inline void save_ontology(const std::string& path, const Ontology& o,
                          const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    for (const auto& code : o.codes()) {
        const std::string& p = o.parent(code);
        out << code << '\t' << (p.empty() ? "-" : p) << '\n';
    }
}

// ---------------------------------------------------------------------------

/// Surface-phrase (preprocessed token sequence) -> concept codes.
class Dictionary {
public:
    void add(std::vector<std::string> phrase, const std::string& code) {
        if (phrase.empty()) throw std::invalid_argument("empty phrase");
        auto& codes = entries_[join(phrase)];
        if (std::find(codes.begin(), codes.end(), code) == codes.end())
            codes.push_back(code); // file order preserved for tie-breaking
        max_phrase_len_ = std::max(max_phrase_len_, phrase.size());
    }

    /// Codes for an exact phrase, in insertion order. Empty if absent.
    const std::vector<std::string>& lookup(const std::vector<std::string>& phrase) const {
        static const std::vector<std::string> kNone;
        auto it = entries_.find(join(phrase));
        return it == entries_.end() ? kNone : it->second;
    }

    bool contains_joined(const std::string& joined) const { return entries_.count(joined) > 0; }

    const std::vector<std::string>& lookup_joined(const std::string& joined) const {
        static const std::vector<std::string> kNone;
        auto it = entries_.find(joined);
        return it == entries_.end() ? kNone : it->second;
    }

    std::size_t max_phrase_length() const { return max_phrase_len_; }
    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }

    /// (phrase tokens, codes) pairs in lexicographic phrase order.
    std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> items() const {
        std::vector<std::pair<std::vector<std::string>, std::vector<std::string>>> out;
        std::map<std::string, const std::vector<std::string>*> sorted;
        for (const auto& [k, v] : entries_) sorted[k] = &v;
        for (const auto& [k, v] : sorted) out.emplace_back(split(k), *v);
        return out;
    }

    static std::string join(const std::vector<std::string>& toks) {
        std::string s;
        for (std::size_t i = 0; i < toks.size(); ++i) {
            if (i) s += ' ';
            s += toks[i];
        }
        return s;
    }

    static std::vector<std::string> split(const std::string& s) {
        std::vector<std::string> out;
        std::istringstream iss(s);
        std::string t;
        while (iss >> t) out.push_back(t);
        return out;
    }

private:
    std::unordered_map<std::string, std::vector<std::string>> entries_;
    std::size_t max_phrase_len_ = 0;
};

/// dictionary.tsv: phrase<TAB>code, multiple lines per phrase allowed.
/// Validates codes against the ontology when one is supplied.
inline Dictionary load_dictionary(const std::string& path, const Ontology* ontology = nullptr) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    Dictionary d;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (is_comment_or_blank(line)) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": malformed line (no tab)");
        std::vector<std::string> phrase = Dictionary::split(line.substr(0, tab));
        std::string code = line.substr(tab + 1);
        if (phrase.empty() || code.empty())
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": empty phrase or code");
        if (ontology && !ontology->contains(code))
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": code not in ontology: " + code);
        d.add(std::move(phrase), code);
    }
    return d;
}

inline void save_dictionary(const std::string& path, const Dictionary& d,
                            const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    for (const auto& [phrase, codes] : d.items())
        for (const auto& c : codes)
            out << Dictionary::join(phrase) << '\t' << c << '\n';
}

// ---------------------------------------------------------------------------

/// Concept code -> dense index with PAD/UNK, mirroring Vocabulary. Includes
/// all ancestors of kept codes so hierarchy embeddings have rows to train.
class ConceptVocabulary {
public:
    static constexpr std::size_t kPad = 0;
    static constexpr std::size_t kUnk = 1;

    ConceptVocabulary() = default;

    static ConceptVocabulary build(const std::vector<Document>& train_docs,
                                   const Ontology& ontology,
                                   std::size_t min_df = 3) {
        std::map<std::string, std::size_t> doc_freq;
        for (const auto& doc : train_docs) {
            std::set<std::string> uniq;
            for (const auto& a : doc.annotations) uniq.insert(a.code);
            for (const auto& c : uniq) ++doc_freq[c];
        }
        std::set<std::string> keep;
        for (const auto& [code, df] : doc_freq)
            if (df >= min_df) keep.insert(code);
        // augment with ancestors of kept codes
        std::set<std::string> with_ancestors = keep;
        for (const auto& code : keep)
            if (ontology.contains(code))
                for (const auto& anc : ontology.ancestors(code)) with_ancestors.insert(anc);
        ConceptVocabulary v;
        v.min_doc_frequency_ = min_df;
        for (const auto& code : with_ancestors) {
            v.index_[code] = v.codes_.size() + 2;
            v.codes_.push_back(code);
        }
        return v;
    }

    static ConceptVocabulary from_codes(std::vector<std::string> sorted_codes, std::size_t min_df = 3) {
        ConceptVocabulary v;
        v.min_doc_frequency_ = min_df;
        v.codes_ = std::move(sorted_codes);
        for (std::size_t i = 0; i < v.codes_.size(); ++i) v.index_[v.codes_[i]] = i + 2;
        return v;
    }

    std::size_t lookup(const std::string& code) const {
        auto it = index_.find(code);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& code) const { return index_.count(code) > 0; }
    std::size_t size() const { return codes_.size() + 2; }
    std::size_t min_doc_frequency() const { return min_doc_frequency_; }
    const std::vector<std::string>& entries() const { return codes_; }

    std::uint64_t content_hash() const {
        std::string blob;
        for (const auto& c : codes_) { blob += c; blob += '\n'; }
        return fnv1a(blob);
    }

private:
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::string> codes_;
    std::size_t min_doc_frequency_ = 3;
};

// ---------------------------------------------------------------------------

/// Ordered label code list; line order of labels.txt fixes the index order.
class LabelSpace {
public:
    LabelSpace() = default;

    explicit LabelSpace(std::vector<std::string> codes) : codes_(std::move(codes)) {
        for (std::size_t i = 0; i < codes_.size(); ++i) {
            if (!index_.emplace(codes_[i], i).second)
                throw std::runtime_error("duplicate label code: " + codes_[i]);
        }
    }

    std::size_t size() const { return codes_.size(); }
    const std::vector<std::string>& codes() const { return codes_; }
    const std::string& code(std::size_t i) const { return codes_.at(i); }

    std::optional<std::size_t> index_of(const std::string& code) const {
        auto it = index_.find(code);
        if (it == index_.end()) return std::nullopt;
        return it->second;
    }

    bool contains(const std::string& code) const { return index_.count(code) > 0; }

private:
    std::vector<std::string> codes_;
    std::unordered_map<std::string, std::size_t> index_;
};

inline LabelSpace load_label_space(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<std::string> codes;
    std::string line;
    while (std::getline(in, line)) {
        if (is_comment_or_blank(line)) continue;
        codes.push_back(line);
    }
    return LabelSpace(std::move(codes));
}

inline void save_label_space(const std::string& path, const LabelSpace& labels,
                             const std::string& config_hash = {}) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
    for (const auto& c : labels.codes()) out << c << '\n';
}

} // namespace clincoder
