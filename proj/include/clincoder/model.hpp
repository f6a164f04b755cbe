#pragma once

#include <optional>
#include <string>
#include <vector>

#include "clincoder/annotator.hpp"
#include "clincoder/autograd.hpp"
#include "clincoder/corpus.hpp"
#include "clincoder/ontology.hpp"

namespace clincoder {

// ---------------------------------------------------------------------------
// Token policy: what represents a matched token and what an unmatched one.
// The six named configurations cover the baseline, both augmentation
// schemes, and the three ablations.

enum class MatchedRepr { Word, Concept, Zero, Gate };
enum class UnmatchedRepr { Word, Zero };

struct TokenPolicy {
    MatchedRepr matched = MatchedRepr::Word;
    UnmatchedRepr unmatched = UnmatchedRepr::Word;

    static TokenPolicy named(const std::string& name) {
        if (name == "baseline") return {MatchedRepr::Word, UnmatchedRepr::Word};
        if (name == "full-replace") return {MatchedRepr::Concept, UnmatchedRepr::Word};
        if (name == "linear-combination") return {MatchedRepr::Gate, UnmatchedRepr::Word};
        if (name == "dummy-concepts") return {MatchedRepr::Zero, UnmatchedRepr::Word};
        if (name == "concepts-only") return {MatchedRepr::Word, UnmatchedRepr::Zero};
        if (name == "concepts-only-concept-embeddings")
            return {MatchedRepr::Concept, UnmatchedRepr::Zero};
        throw std::invalid_argument("unknown token policy: " + name);
    }

    std::string name() const {
        if (matched == MatchedRepr::Word && unmatched == UnmatchedRepr::Word) return "baseline";
        if (matched == MatchedRepr::Concept && unmatched == UnmatchedRepr::Word) return "full-replace";
        if (matched == MatchedRepr::Gate && unmatched == UnmatchedRepr::Word) return "linear-combination";
        if (matched == MatchedRepr::Zero && unmatched == UnmatchedRepr::Word) return "dummy-concepts";
        if (matched == MatchedRepr::Word && unmatched == UnmatchedRepr::Zero) return "concepts-only";
        if (matched == MatchedRepr::Concept && unmatched == UnmatchedRepr::Zero)
            return "concepts-only-concept-embeddings";
        throw std::logic_error("unnamed token policy");
    }

    bool uses_concepts() const {
        return matched == MatchedRepr::Concept || matched == MatchedRepr::Gate;
    }
    bool uses_gate() const { return matched == MatchedRepr::Gate; }
};

// ---------------------------------------------------------------------------

struct ModelConfig {
    std::size_t embed_dim = 100;       // d_e
    std::size_t conv_dim = 50;         // d_c
    std::size_t kernel_width = 10;
    double dropout = 0.2;
    double learning_rate = 0.0001;
    std::size_t batch_size = 12;
    std::size_t attention_hidden = 20; // scorer MLP hidden size (ReLU)
    double init_range = 0.1;
    std::size_t gate_min_pair_count = 2;

    void validate() const {
        if (embed_dim == 0 || conv_dim == 0 || kernel_width == 0 || batch_size == 0 ||
            attention_hidden == 0)
            throw std::invalid_argument("model dimensions must be positive");
        if (dropout < 0.0 || dropout >= 1.0)
            throw std::invalid_argument("dropout must be in [0,1)");
        if (learning_rate <= 0.0) throw std::invalid_argument("learning rate must be positive");
    }
};

struct GramConfig {
    bool enabled = false;
};

struct OverlapConfig {
    bool enabled = false;
    std::size_t context = 2; // tokens of context on each side
};

enum class AuxHead { Linear, Mlp };
enum class SharePoint { PreConvolution, PostConvolution };

struct AuxConfig {
    AuxHead head = AuxHead::Linear;
    SharePoint share_point = SharePoint::PreConvolution;
    double lambda = 0.0;
    std::size_t hidden = 700;

    void validate() const {
        if (lambda < 0) throw std::invalid_argument("lambda must be nonnegative");
    }
};

inline std::string aux_head_name(AuxHead h) { return h == AuxHead::Linear ? "linear" : "mlp"; }
inline std::string share_point_name(SharePoint s) {
    return s == SharePoint::PreConvolution ? "pre_convolution" : "post_convolution";
}
inline AuxHead aux_head_from(const std::string& s) {
    if (s == "linear") return AuxHead::Linear;
    if (s == "mlp") return AuxHead::Mlp;
    throw std::invalid_argument("unknown aux head: " + s);
}
inline SharePoint share_point_from(const std::string& s) {
    if (s == "pre_convolution") return SharePoint::PreConvolution;
    if (s == "post_convolution") return SharePoint::PostConvolution;
    throw std::invalid_argument("unknown share point: " + s);
}

// ---------------------------------------------------------------------------
// GateTable: (word index, concept index) -> gate parameter slot. Pairs seen
// at least gate_min_pair_count times in training get their own slot; the
// fallback chain (UNK,c) -> (w,UNK) -> (UNK,UNK) makes lookup total.

class GateTable {
public:
    GateTable() = default;

    static std::uint64_t key(std::size_t w, std::size_t c) {
        return (static_cast<std::uint64_t>(w) << 32) | static_cast<std::uint64_t>(c);
    }

    static GateTable build(const std::vector<Document>& train_docs,
                           const Vocabulary& words, const ConceptVocabulary& concepts,
                           std::size_t min_pair_count = 2) {
        std::map<std::uint64_t, std::size_t> counts;
        for (const auto& doc : train_docs) {
            auto a = align(doc, doc.annotations);
            for (std::size_t n = 0; n < doc.tokens.size(); ++n) {
                if (!a.selected[n]) continue;
                ++counts[key(words.lookup(doc.tokens[n]), concepts.lookup(*a.selected[n]))];
            }
        }
        GateTable g;
        g.word_count_ = words.size();
        g.concept_count_ = concepts.size();
        for (const auto& [k, c] : counts)
            if (c >= min_pair_count) g.slots_[k] = g.ordered_keys_.size(), g.ordered_keys_.push_back(k);
        // fallbacks: one per concept, one per word, one global
        for (std::size_t c = 0; c < concepts.size(); ++c)
            g.slots_[key(Vocabulary::kUnk, c)] = g.ordered_keys_.size(),
            g.ordered_keys_.push_back(key(Vocabulary::kUnk, c));
        for (std::size_t w = 0; w < words.size(); ++w) {
            auto k = key(w, ConceptVocabulary::kUnk);
            if (!g.slots_.count(k)) g.slots_[k] = g.ordered_keys_.size(), g.ordered_keys_.push_back(k);
        }
        return g;
    }

    static GateTable from_keys(std::vector<std::uint64_t> keys, std::size_t words,
                               std::size_t concepts) {
        GateTable g;
        g.word_count_ = words;
        g.concept_count_ = concepts;
        g.ordered_keys_ = std::move(keys);
        for (std::size_t i = 0; i < g.ordered_keys_.size(); ++i) g.slots_[g.ordered_keys_[i]] = i;
        return g;
    }

    std::size_t lookup(std::size_t w, std::size_t c) const {
        if (auto it = slots_.find(key(w, c)); it != slots_.end()) return it->second;
        if (auto it = slots_.find(key(Vocabulary::kUnk, c)); it != slots_.end()) return it->second;
        if (auto it = slots_.find(key(w, ConceptVocabulary::kUnk)); it != slots_.end())
            return it->second;
        return slots_.at(key(Vocabulary::kUnk, ConceptVocabulary::kUnk));
    }

    std::size_t size() const { return ordered_keys_.size(); }
    const std::vector<std::uint64_t>& keys() const { return ordered_keys_; }

private:
    std::unordered_map<std::uint64_t, std::size_t> slots_;
    std::vector<std::uint64_t> ordered_keys_;
    std::size_t word_count_ = 0, concept_count_ = 0;
};

// ---------------------------------------------------------------------------

struct ForwardResult {
    ag::Var input;       // composed input D, d_e x N (post-dropout in training)
    ag::Var conv;        // H, d_c x N
    ag::Var logits;      // L x 1
    Eigen::VectorXd probs;        // sigmoid(logits)
    ag::Mat attention;            // L x N per-label attention, on request
    ag::Var shared_pre;  // representation feeding pre-convolution span heads
    ag::Var shared_post; // representation feeding post-convolution span heads
};

/// CNN with per-label attention plus the concept-composition front end and
/// the auxiliary span head. Holds all parameters; forward passes register
/// them on a caller-supplied tape.
class Model {
public:
    Model(ModelConfig config, Vocabulary vocab, ConceptVocabulary concepts,
          LabelSpace labels, Ontology ontology, TokenPolicy policy, GateTable gates,
          OverlapConfig overlap, GramConfig gram, AuxConfig aux, std::uint64_t seed)
        : config_(config), vocab_(std::move(vocab)), concepts_(std::move(concepts)),
          labels_(std::move(labels)), ontology_(std::move(ontology)), policy_(policy),
          gates_(std::move(gates)), overlap_(overlap), gram_(gram), aux_(aux), seed_(seed) {
        config_.validate();
        aux_.validate();
        init_parameters();
    }

    const ModelConfig& config() const { return config_; }
    const Vocabulary& vocab() const { return vocab_; }
    const ConceptVocabulary& concepts() const { return concepts_; }
    const LabelSpace& labels() const { return labels_; }
    const Ontology& ontology() const { return ontology_; }
    const TokenPolicy& policy() const { return policy_; }
    TokenPolicy& policy() { return policy_; }
    const GateTable& gate_table() const { return gates_; }
    const OverlapConfig& overlap_config() const { return overlap_; }
    const GramConfig& gram_config() const { return gram_; }
    GramConfig& gram_config() { return gram_; }
    OverlapConfig& overlap_config_mutable() { return overlap_; }
    const AuxConfig& aux_config() const { return aux_; }
    AuxConfig& aux_config() { return aux_; }
    std::uint64_t seed() const { return seed_; }

    ag::ParameterStore& params() { return params_; }
    const ag::ParameterStore& params() const { return params_; }

    std::size_t aux_input_dim() const {
        return aux_.share_point == SharePoint::PreConvolution ? config_.embed_dim
                                                              : config_.conv_dim;
    }

    // -- forward ------------------------------------------------------------

    struct PassContext {
        ag::Tape* tape = nullptr;
        bool training = false;
        bool requires_grad = true;
        std::mt19937_64* dropout_rng = nullptr;
        bool want_attention = false;
        const std::vector<char>* pad_mask = nullptr; // per-column validity
    };

    ForwardResult forward(PassContext ctx, const Document& doc,
                          const TokenConceptAlignment* alignment) {
        if (doc.tokens.empty()) throw std::runtime_error("empty document: " + doc.doc_id);
        ag::Tape& t = *ctx.tape;
        const std::size_t n = doc.tokens.size();

        auto word_emb = t.leaf(params_.get("word_emb").value, ctx.requires_grad);
        bind(word_emb, "word_emb");

        std::vector<std::size_t> widx(n);
        for (std::size_t i = 0; i < n; ++i) widx[i] = vocab_.lookup(doc.tokens[i]);
        ag::Var x_word = ag::gather_columns(t, word_emb, widx);

        ag::Var composed = compose(t, ctx, doc, alignment, word_emb, x_word, widx);

        // dropout after concept augmentation
        if (ctx.training && config_.dropout > 0.0) {
            if (!ctx.dropout_rng) throw std::runtime_error("training pass needs a dropout rng");
            const double keep = 1.0 - config_.dropout;
            ag::Mat mask(composed->value.rows(), composed->value.cols());
            for (Eigen::Index c = 0; c < mask.cols(); ++c)
                for (Eigen::Index r = 0; r < mask.rows(); ++r)
                    mask(r, c) = rand_bernoulli(*ctx.dropout_rng, keep) ? 1.0 / keep : 0.0;
            composed = ag::apply_mask(t, composed, mask);
        }

        ForwardResult res;
        res.input = composed;
        res.shared_pre = composed;

        // convolution, length preserving
        auto conv_w = t.leaf(params_.get("conv_w").value, ctx.requires_grad);
        bind(conv_w, "conv_w");
        auto conv_b = t.leaf(params_.get("conv_b").value, ctx.requires_grad);
        bind(conv_b, "conv_b");
        auto windows = ag::im2col(t, composed, config_.kernel_width);
        auto h = ag::tanh(t, ag::add_colvec(t, ag::matmul(t, conv_w, windows), conv_b));
        res.conv = h;
        res.shared_post = h;

        // per-label attention pooling
        auto attn_u = t.leaf(params_.get("attn_u").value, ctx.requires_grad);
        bind(attn_u, "attn_u");
        auto out_w = t.leaf(params_.get("out_w").value, ctx.requires_grad);
        bind(out_w, "out_w");
        auto out_b = t.leaf(params_.get("out_b").value, ctx.requires_grad);
        bind(out_b, "out_b");

        auto scores = ag::matmul(t, attn_u, h); // L x N
        auto attn = ag::softmax_rows(t, scores, ctx.pad_mask);
        if (ctx.want_attention) res.attention = attn->value;
        auto pooled = ag::matmul(t, h, ag::transpose(t, attn));    // d_c x L
        auto logits = ag::add(t, ag::rowwise_dot(t, out_w, ag::transpose(t, pooled)), out_b);
        res.logits = logits;
        res.probs = (1.0 / (1.0 + (-logits->value.col(0).array()).exp())).matrix();
        return res;
    }

    /// Span head: elementwise max over the span's shared-representation
    /// columns, then the linear or MLP head. Returns unnormalized logits
    /// over the concept vocabulary.
    ag::Var aux_logits(ag::Tape& t, const ForwardResult& fwd, const Annotation& span,
                       bool requires_grad = true) {
        if (span.start >= span.end) throw std::runtime_error("empty span");
        const ag::Var& shared =
            aux_.share_point == SharePoint::PreConvolution ? fwd.shared_pre : fwd.shared_post;
        auto z = ag::colspan_max(t, shared, span.start, span.end);
        if (aux_.head == AuxHead::Linear) {
            auto w = t.leaf(params_.get("aux_lin_w").value, requires_grad);
            bind(w, "aux_lin_w");
            auto b = t.leaf(params_.get("aux_lin_b").value, requires_grad);
            bind(b, "aux_lin_b");
            return ag::add(t, ag::matmul(t, w, z), b);
        }
        auto w1 = t.leaf(params_.get("aux_w1").value, requires_grad);
        bind(w1, "aux_w1");
        auto b1 = t.leaf(params_.get("aux_b1").value, requires_grad);
        bind(b1, "aux_b1");
        auto w2 = t.leaf(params_.get("aux_w2").value, requires_grad);
        bind(w2, "aux_w2");
        auto b2 = t.leaf(params_.get("aux_b2").value, requires_grad);
        bind(b2, "aux_b2");
        auto hidden = ag::relu(t, ag::add(t, ag::matmul(t, w1, z), b1));
        return ag::add(t, ag::matmul(t, w2, hidden), b2);
    }

    /// Softmax over the concept vocabulary for one span.
    Eigen::VectorXd aux_forward(const ForwardResult& fwd, const Annotation& span) {
        ag::Tape t; // values only
        auto logits = aux_logits(t, fwd, span, false);
        Eigen::ArrayXd a = logits->value.col(0).array();
        a -= a.maxCoeff();
        Eigen::ArrayXd e = a.exp();
        return (e / e.sum()).matrix();
    }

    /// After backward: copy tape-leaf gradients into the parameter store.
    /// Leaves registered through bind() share the parameter's value matrix
    /// by copy, so gradients are pulled back explicitly.
    void collect_gradients() {
        for (auto& [leaf, name] : bound_) {
            if (leaf->requires_grad) params_.get(name).grad += leaf->grad;
        }
        bound_.clear();
        // PAD rows stay zero and receive no updates
        params_.get("word_emb").grad.row(Vocabulary::kPad).setZero();
        params_.get("concept_emb").grad.row(ConceptVocabulary::kPad).setZero();
    }

    void discard_bindings() { bound_.clear(); }

    void apply_pad_constraint() {
        params_.get("word_emb").value.row(Vocabulary::kPad).setZero();
        params_.get("concept_emb").value.row(ConceptVocabulary::kPad).setZero();
    }

    /// Inference scores for a corpus; never reads annotations unless the
    /// policy itself consumes concepts.
    Eigen::MatrixXd predict(const std::vector<Document>& docs,
                            const std::vector<const TokenConceptAlignment*>* alignments = nullptr) {
        Eigen::MatrixXd scores(static_cast<Eigen::Index>(docs.size()),
                               static_cast<Eigen::Index>(labels_.size()));
        for (std::size_t i = 0; i < docs.size(); ++i) {
            ag::Tape t;
            PassContext ctx;
            ctx.tape = &t;
            ctx.requires_grad = false;
            const TokenConceptAlignment* a = alignments ? (*alignments)[i] : nullptr;
            TokenConceptAlignment local;
            if (!a && policy_.uses_concepts()) {
                local = align(docs[i], docs[i].annotations);
                a = &local;
            }
            auto fwd = forward(ctx, docs[i], a);
            scores.row(static_cast<Eigen::Index>(i)) = fwd.probs.transpose();
            discard_bindings();
        }
        return scores;
    }

private:
    void bind(const ag::Var& leaf, const std::string& name) {
        if (leaf->requires_grad) bound_.emplace_back(leaf, name);
    }

    void init_parameters() {
        std::mt19937_64 rng(seed_);
        const auto de = static_cast<Eigen::Index>(config_.embed_dim);
        const auto dc = static_cast<Eigen::Index>(config_.conv_dim);
        const auto L = static_cast<Eigen::Index>(labels_.size());
        const auto k = static_cast<Eigen::Index>(config_.kernel_width);
        const auto h = static_cast<Eigen::Index>(config_.attention_hidden);
        const double r = config_.init_range;

        params_.create("word_emb", static_cast<Eigen::Index>(vocab_.size()), de, rng, r);
        params_.create("concept_emb", static_cast<Eigen::Index>(concepts_.size()), de, rng, r);
        params_.create("conv_w", dc, k * de, rng, r);
        params_.create_zero("conv_b", dc, 1);
        params_.create("attn_u", L, dc, rng, r);
        params_.create("out_w", L, dc, rng, r);
        params_.create_zero("out_b", L, 1);
        // gate logits start at 0: beta = 0.5, unbiased between word and concept
        params_.create_zero("gates", std::max<Eigen::Index>(1, static_cast<Eigen::Index>(gates_.size())), 1);
        params_.create("ov_w1", h, 5 * de, rng, r);
        params_.create_zero("ov_b1", h, 1);
        params_.create("ov_w2", 1, h, rng, r);
        params_.create_zero("ov_b2", 1, 1);
        params_.create("gr_w1", h, 2 * de, rng, r);
        params_.create_zero("gr_b1", h, 1);
        params_.create("gr_w2", 1, h, rng, r);
        params_.create_zero("gr_b2", 1, 1);
        const auto daux = static_cast<Eigen::Index>(aux_input_dim());
        const auto C = static_cast<Eigen::Index>(concepts_.size());
        params_.create("aux_lin_w", C, daux, rng, r);
        params_.create_zero("aux_lin_b", C, 1);
        params_.create("aux_w1", static_cast<Eigen::Index>(aux_.hidden), daux, rng, r);
        params_.create_zero("aux_b1", static_cast<Eigen::Index>(aux_.hidden), 1);
        params_.create("aux_w2", C, static_cast<Eigen::Index>(aux_.hidden), rng, r);
        params_.create_zero("aux_b2", C, 1);
        apply_pad_constraint();
    }

    // one concept-embedding column per token; identity of the column depends
    // on overlap attention and hierarchy mixing
    ag::Var concept_columns(ag::Tape& t, PassContext& ctx, const Document& doc,
                            const TokenConceptAlignment* alignment, const ag::Var& x_word) {
        const std::size_t n = doc.tokens.size();
        auto concept_emb = t.leaf(params_.get("concept_emb").value, ctx.requires_grad);
        bind(concept_emb, "concept_emb");

        if (!overlap_.enabled && !gram_.enabled) {
            std::vector<std::size_t> cidx(n, ConceptVocabulary::kUnk);
            if (alignment)
                for (std::size_t i = 0; i < n; ++i)
                    if (alignment->selected[i]) cidx[i] = concepts_.lookup(*alignment->selected[i]);
            return ag::gather_columns(t, concept_emb, cidx);
        }

        GramScorer gram_scorer =
            gram_.enabled ? make_gram_scorer(t, ctx.requires_grad) : GramScorer{};
        OverlapScorer ov_scorer =
            overlap_.enabled ? make_overlap_scorer(t, ctx.requires_grad) : OverlapScorer{};

        std::vector<ag::Var> cols;
        cols.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (!alignment || !alignment->selected[i]) {
                cols.push_back(embed_concept_index(t, concept_emb, ConceptVocabulary::kUnk));
                continue;
            }
            const auto& set = alignment->concept_sets[i];
            if (overlap_.enabled && set.size() > 1) {
                cols.push_back(overlap_attention(t, ov_scorer, gram_scorer, concept_emb, x_word,
                                                 i, set));
            } else {
                cols.push_back(embed_concept(t, gram_scorer, concept_emb, *alignment->selected[i]));
            }
        }
        return ag::hconcat(t, cols);
    }

    struct GramScorer {
        ag::Var w1, b1, w2, b2;
        bool ready = false;
    };
    struct OverlapScorer {
        ag::Var w1, b1, w2, b2;
        bool ready = false;
    };

    GramScorer make_gram_scorer(ag::Tape& t, bool rg) {
        GramScorer s;
        s.w1 = t.leaf(params_.get("gr_w1").value, rg); bind(s.w1, "gr_w1");
        s.b1 = t.leaf(params_.get("gr_b1").value, rg); bind(s.b1, "gr_b1");
        s.w2 = t.leaf(params_.get("gr_w2").value, rg); bind(s.w2, "gr_w2");
        s.b2 = t.leaf(params_.get("gr_b2").value, rg); bind(s.b2, "gr_b2");
        s.ready = true;
        return s;
    }

    OverlapScorer make_overlap_scorer(ag::Tape& t, bool rg) {
        OverlapScorer s;
        s.w1 = t.leaf(params_.get("ov_w1").value, rg); bind(s.w1, "ov_w1");
        s.b1 = t.leaf(params_.get("ov_b1").value, rg); bind(s.b1, "ov_b1");
        s.w2 = t.leaf(params_.get("ov_w2").value, rg); bind(s.w2, "ov_w2");
        s.b2 = t.leaf(params_.get("ov_b2").value, rg); bind(s.b2, "ov_b2");
        s.ready = true;
        return s;
    }

public:
    /// Standalone hierarchy-mixed embedding of one code, for inspection.
    ag::Var gram_embed_node(ag::Tape& t, const std::string& code, bool requires_grad = false) {
        auto concept_emb = t.leaf(params_.get("concept_emb").value, requires_grad);
        bind(concept_emb, "concept_emb");
        auto scorer = make_gram_scorer(t, requires_grad);
        return gram_embed(t, code, concept_emb, scorer);
    }

private:

    static ag::Var embed_concept_index(ag::Tape& t, const ag::Var& concept_emb, std::size_t idx) {
        return ag::gather_columns(t, concept_emb, {idx});
    }

public:
    /// Hierarchy-mixed embedding: attention over the code and its ancestors,
    /// scored by a two-layer perceptron on (child, ancestor) embedding pairs.
    /// Unknown codes fall back to the UNK embedding with no mixing.
    ag::Var gram_embed(ag::Tape& t, const std::string& code, const ag::Var& concept_emb,
                       const GramScorer& scorer) {
        if (!concepts_.contains(code) || !ontology_.contains(code))
            return embed_concept_index(t, concept_emb, concepts_.lookup(code));
        auto chain = ontology_.ancestors(code);
        auto self_col = embed_concept_index(t, concept_emb, concepts_.lookup(code));
        if (chain.size() == 1 || !scorer.ready) return self_col;
        std::vector<ag::Var> embeds, score_parts;
        for (const auto& anc : chain) {
            auto e = embed_concept_index(t, concept_emb, concepts_.lookup(anc));
            auto pair = ag::vconcat(t, {self_col, e});
            auto hidden = ag::relu(t, ag::add(t, ag::matmul(t, scorer.w1, pair), scorer.b1));
            auto score = ag::add(t, ag::matmul(t, scorer.w2, hidden), scorer.b2);
            embeds.push_back(e);
            score_parts.push_back(score);
        }
        auto scores = ag::hconcat(t, score_parts);        // 1 x J
        auto alpha = ag::softmax_rows(t, scores);         // 1 x J
        auto stack = ag::hconcat(t, embeds);              // d_e x J
        return ag::matmul(t, stack, ag::transpose(t, alpha));
    }

private:
    ag::Var embed_concept(ag::Tape& t, const GramScorer& gram_scorer, const ag::Var& concept_emb,
                          const std::string& code) {
        if (gram_.enabled) return gram_embed(t, code, concept_emb, gram_scorer);
        return embed_concept_index(t, concept_emb, concepts_.lookup(code));
    }

    /// Attention over a token's overlapping concepts, scored against the
    /// +/-2 word-embedding context (zero columns at sequence edges).
    ag::Var overlap_attention(ag::Tape& t, const OverlapScorer& scorer,
                              const GramScorer& gram_scorer, const ag::Var& concept_emb,
                              const ag::Var& x_word, std::size_t pos,
                              const std::vector<std::string>& concept_set) {
        if (concept_set.empty()) throw std::runtime_error("overlap attention on empty concept set");
        const auto n = static_cast<long>(x_word->value.cols());
        const auto de = static_cast<Eigen::Index>(config_.embed_dim);
        std::vector<ag::Var> ctx_parts;
        for (long off : {-2L, -1L, 1L, 2L}) {
            long j = static_cast<long>(pos) + off;
            if (j < 0 || j >= n)
                ctx_parts.push_back(t.constant(ag::Mat::Zero(de, 1))); // PAD column
            else
                ctx_parts.push_back(ag::slice_col(t, x_word, static_cast<std::size_t>(j)));
        }
        auto context = ag::vconcat(t, ctx_parts); // 4*d_e x 1
        std::vector<ag::Var> embeds, score_parts;
        for (const auto& code : concept_set) {
            auto phi = embed_concept(t, gram_scorer, concept_emb, code);
            auto joint = ag::vconcat(t, {context, phi}); // 5*d_e x 1
            auto hidden = ag::relu(t, ag::add(t, ag::matmul(t, scorer.w1, joint), scorer.b1));
            auto score = ag::add(t, ag::matmul(t, scorer.w2, hidden), scorer.b2);
            embeds.push_back(phi);
            score_parts.push_back(score);
        }
        auto alpha = ag::softmax_rows(t, ag::hconcat(t, score_parts)); // 1 x J
        return ag::matmul(t, ag::hconcat(t, embeds), ag::transpose(t, alpha));
    }

    ag::Var compose(ag::Tape& t, PassContext& ctx, const Document& doc,
                    const TokenConceptAlignment* alignment, const ag::Var& word_emb,
                    const ag::Var& x_word, const std::vector<std::size_t>& widx) {
        (void)word_emb;
        (void)widx;
        const std::size_t n = doc.tokens.size();
        if (policy_.matched == MatchedRepr::Word && policy_.unmatched == UnmatchedRepr::Word)
            return x_word;

        ag::Mat matched_row = ag::Mat::Zero(1, static_cast<Eigen::Index>(n));
        if (alignment)
            for (std::size_t i = 0; i < n; ++i)
                if (alignment->selected[i]) matched_row(0, static_cast<Eigen::Index>(i)) = 1.0;
        ag::Mat unmatched_row = ag::Mat::Ones(1, static_cast<Eigen::Index>(n)) - matched_row;

        switch (policy_.matched) {
            case MatchedRepr::Zero: { // dummy-concepts
                auto mask = t.constant(unmatched_row);
                return ag::colwise_scale(t, x_word, mask);
            }
            case MatchedRepr::Word: { // concepts-only
                auto mask = t.constant(matched_row);
                return ag::colwise_scale(t, x_word, mask);
            }
            case MatchedRepr::Concept: {
                auto x_conc = concept_columns(t, ctx, doc, alignment, x_word);
                auto part_c = ag::colwise_scale(t, x_conc, t.constant(matched_row));
                if (policy_.unmatched == UnmatchedRepr::Zero) return part_c;
                auto part_w = ag::colwise_scale(t, x_word, t.constant(unmatched_row));
                return ag::add(t, part_c, part_w);
            }
            case MatchedRepr::Gate: {
                auto x_conc = concept_columns(t, ctx, doc, alignment, x_word);
                auto gates = t.leaf(params_.get("gates").value, ctx.requires_grad);
                bind(gates, "gates");
                std::vector<std::size_t> slot(n, 0);
                for (std::size_t i = 0; i < n; ++i) {
                    if (alignment && alignment->selected[i])
                        slot[i] = gates_.lookup(vocab_.lookup(doc.tokens[i]),
                                                concepts_.lookup(*alignment->selected[i]));
                }
                auto logits = ag::gather_row(t, gates, slot);
                // beta forced to exactly 0 where no concept is assigned
                auto beta = ag::cmul(t, ag::sigmoid(t, logits), t.constant(matched_row));
                auto ones = t.constant(ag::Mat::Ones(1, static_cast<Eigen::Index>(n)));
                auto inv = ag::sub(t, ones, beta);
                return ag::add(t, ag::colwise_scale(t, x_conc, beta),
                               ag::colwise_scale(t, x_word, inv));
            }
        }
        throw std::logic_error("unreachable");
    }

    ModelConfig config_;
    Vocabulary vocab_;
    ConceptVocabulary concepts_;
    LabelSpace labels_;
    Ontology ontology_;
    TokenPolicy policy_;
    GateTable gates_;
    OverlapConfig overlap_;
    GramConfig gram_;
    AuxConfig aux_;
    std::uint64_t seed_;
    ag::ParameterStore params_;
    std::vector<std::pair<ag::Var, std::string>> bound_;
};

} // namespace clincoder
