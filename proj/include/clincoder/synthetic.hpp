#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "clincoder/annotator.hpp"
#include "clincoder/common.hpp"
#include "clincoder/corpus.hpp"
#include "clincoder/ontology.hpp"

namespace clincoder {

/// Distribution over the number of distinct surface phrases per concept.
/// A plain constant is the common case.
struct VariantDistribution {
    std::vector<std::pair<std::size_t, double>> support{{1, 1.0}}; // (count, weight)

    static VariantDistribution constant(std::size_t k) { return {{{k, 1.0}}}; }

    std::size_t sample(std::mt19937_64& rng) const {
        if (support.empty()) throw std::invalid_argument("empty variant distribution");
        double total = 0;
        for (const auto& [k, w] : support) {
            if (k == 0 || w < 0) throw std::invalid_argument("variant counts must be positive");
            total += w;
        }
        double u = rand_real(rng) * total;
        for (const auto& [k, w] : support) {
            u -= w;
            if (u <= 0) return k;
        }
        return support.back().first;
    }
};

struct SyntheticSpec {
    std::size_t vocab_size = 200;   // filler vocabulary size
    std::size_t concept_count = 30;
    std::size_t label_count = 10;
    std::size_t train_docs = 100;
    std::size_t dev_docs = 20;
    std::size_t test_docs = 20;
    std::size_t mean_doc_length = 50;
    double coverage = 0.3;          // fraction of tokens annotated
    VariantDistribution variants_per_concept = VariantDistribution::constant(1);
    double label_signal = 0.9;      // prob a mentioned predictive concept fires its label
    double specificity_mismatch = 0.0; // prob an annotation is emitted as the parent code
    std::size_t concepts_per_label = 3;
    std::uint64_t seed = 1;

    void validate() const {
        if (coverage < 0 || coverage > 1) throw std::invalid_argument("coverage must be in [0,1]");
        if (specificity_mismatch < 0 || specificity_mismatch > 1)
            throw std::invalid_argument("specificity_mismatch must be in [0,1]");
        if (label_signal < 0 || label_signal > 1)
            throw std::invalid_argument("label_signal must be in [0,1]");
        if (vocab_size == 0 || concept_count == 0 || label_count == 0 || mean_doc_length == 0 ||
            train_docs == 0 || dev_docs == 0 || test_docs == 0)
            throw std::invalid_argument("all counts must be positive");
    }
};

struct SyntheticCorpus {
    std::vector<Document> documents;                 // annotations = emitted codes
    std::vector<std::vector<Annotation>> gold;       // pre-mismatch, parallel to documents
    Dictionary dictionary;
    Ontology ontology;
    LabelSpace label_space;
    CorpusSplit split;
    std::map<std::string, std::size_t> variants_per_concept; // construction record
    std::vector<std::vector<std::string>> label_concepts;    // predictive subset per label
};

namespace detail {

// lowercase base-26 name with a distinguishing prefix
inline std::string word_name(const std::string& prefix, std::size_t idx) {
    std::string s;
    do {
        s.push_back(static_cast<char>('a' + idx % 26));
        idx /= 26;
    } while (idx > 0);
    return prefix + std::string(s.rbegin(), s.rend());
}

inline std::size_t truncated_geometric(std::mt19937_64& rng, std::size_t mean, std::size_t cap) {
    if (mean <= 1) return 1;
    const double p = 1.0 / static_cast<double>(mean);
    double u = rand_real(rng);
    if (u >= 1.0) u = std::nextafter(1.0, 0.0);
    auto n = static_cast<std::size_t>(1.0 + std::floor(std::log1p(-u) / std::log1p(-p)));
    return std::clamp<std::size_t>(n, 1, cap);
}

} // namespace detail

/// Fully deterministic given spec.seed. Concepts own disjoint surface-token
/// alphabets, labels are noisy ORs over fixed concept subsets, and emitted
/// annotations are lifted to the parent code with probability
/// specificity_mismatch.
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    SyntheticCorpus out;

    // ontology: concepts grouped 4-per-parent, parents are roots
    std::vector<std::string> concepts, parents;
    const std::size_t group = 4;
    const std::size_t parent_count = (spec.concept_count + group - 1) / group;
    for (std::size_t g = 0; g < parent_count; ++g) {
        parents.push_back(detail::word_name("p", g));
        out.ontology.add_code(parents.back());
    }
    for (std::size_t c = 0; c < spec.concept_count; ++c) {
        concepts.push_back(detail::word_name("c", c));
        out.ontology.add_edge(concepts[c], parents[c / group]);
    }

    // dictionary: variant count drawn per concept; every 4th variant of a
    // concept is a two-token phrase, all surface tokens globally unique
    std::size_t surface_id = 0;
    std::vector<std::vector<std::vector<std::string>>> phrases(spec.concept_count);
    for (std::size_t c = 0; c < spec.concept_count; ++c) {
        std::size_t v = spec.variants_per_concept.sample(rng);
        out.variants_per_concept[concepts[c]] = v;
        for (std::size_t k = 0; k < v; ++k) {
            std::vector<std::string> phrase;
            phrase.push_back(detail::word_name("s", surface_id++));
            if (k % 4 == 3) phrase.push_back(detail::word_name("s", surface_id++));
            out.dictionary.add(phrase, concepts[c]);
            phrases[c].push_back(std::move(phrase));
        }
    }

    if (spec.coverage > 0 && spec.mean_doc_length < 1)
        throw std::runtime_error("coverage unreachable: documents too short for any phrase");

    // label space: each label watches a fixed random concept subset
    std::vector<std::string> label_codes;
    const std::size_t subset = std::min(spec.concepts_per_label, spec.concept_count);
    for (std::size_t l = 0; l < spec.label_count; ++l) {
        label_codes.push_back(detail::word_name("l", l));
        std::vector<std::size_t> pool(spec.concept_count);
        for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
        std::vector<std::string> chosen;
        for (std::size_t k = 0; k < subset; ++k) {
            std::size_t j = k + rand_index(rng, pool.size() - k);
            std::swap(pool[k], pool[j]);
            chosen.push_back(concepts[pool[k]]);
        }
        out.label_concepts.push_back(std::move(chosen));
    }
    out.label_space = LabelSpace(label_codes);

    // concept -> labels watching it
    std::map<std::string, std::vector<std::size_t>> watchers;
    for (std::size_t l = 0; l < out.label_concepts.size(); ++l)
        for (const auto& c : out.label_concepts[l]) watchers[c].push_back(l);

    auto gen_doc = [&](const std::string& split_name, std::size_t idx,
                       const std::string& patient) {
        Document d;
        d.doc_id = split_name + "-" + std::to_string(idx);
        d.patient_id = patient;
        const std::size_t n = detail::truncated_geometric(rng, spec.mean_doc_length, kMaxDocTokens);
        const auto target = static_cast<std::size_t>(std::llround(spec.coverage * static_cast<double>(n)));

        struct Unit {
            std::vector<std::string> tokens;
            std::string code; // empty for filler
        };
        std::vector<Unit> units;
        std::size_t covered = 0;
        std::size_t stale = 0;
        while (covered < target) {
            std::size_t c = rand_index(rng, spec.concept_count);
            std::size_t k = rand_index(rng, phrases[c].size());
            const auto& phrase = phrases[c][k];
            if (covered + phrase.size() > n) {
                if (++stale > 64) break; // only multi-token phrases fit no longer
                continue;
            }
            units.push_back(Unit{phrase, concepts[c]});
            covered += phrase.size();
        }
        if (spec.coverage > 0 && covered == 0 && target > 0)
            throw std::runtime_error("coverage unreachable: no phrase fits document of length " +
                                     std::to_string(n));
        for (std::size_t i = covered; i < n; ++i)
            units.push_back(Unit{{detail::word_name("f", rand_index(rng, spec.vocab_size))}, {}});
        for (std::size_t i = units.size(); i > 1; --i)
            std::swap(units[i - 1], units[rand_index(rng, i)]);

        std::vector<Annotation> gold;
        for (const auto& u : units) {
            std::size_t start = d.tokens.size();
            for (const auto& t : u.tokens) d.tokens.push_back(t);
            if (!u.code.empty()) gold.push_back(Annotation{start, d.tokens.size(), u.code});
        }

        // noisy-OR labels over mentioned predictive concepts
        std::set<std::string> mentioned;
        for (const auto& a : gold) mentioned.insert(a.code);
        std::vector<char> fired(spec.label_count, 0);
        for (const auto& c : mentioned) {
            auto it = watchers.find(c);
            if (it == watchers.end()) continue;
            for (std::size_t l : it->second)
                if (rand_bernoulli(rng, spec.label_signal)) fired[l] = 1;
        }
        for (std::size_t l = 0; l < spec.label_count; ++l)
            if (fired[l]) d.labels.insert(label_codes[l]);

        // emitted annotations, possibly lifted to the parent code
        for (const auto& g : gold) {
            Annotation e = g;
            if (spec.specificity_mismatch > 0 && rand_bernoulli(rng, spec.specificity_mismatch))
                e.code = out.ontology.parent(g.code);
            d.annotations.push_back(e);
        }
        out.gold.push_back(std::move(gold));
        out.documents.push_back(std::move(d));
    };

    std::size_t patient_id = 0;
    auto gen_split = [&](const std::string& name, std::size_t count, std::vector<std::string>& ids) {
        std::string patient;
        for (std::size_t i = 0; i < count; ++i) {
            // every 5th document shares the previous patient
            if (i % 5 != 4 || patient.empty()) patient = detail::word_name("pt", patient_id++);
            gen_doc(name, i, patient);
            ids.push_back(out.documents.back().doc_id);
        }
    };
    gen_split("train", spec.train_docs, out.split.train);
    gen_split("dev", spec.dev_docs, out.split.dev);
    gen_split("test", spec.test_docs, out.split.test);
    return out;
}

} // namespace clincoder
