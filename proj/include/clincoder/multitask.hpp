#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "clincoder/eval.hpp"
#include "clincoder/model.hpp"

namespace clincoder {

/// Default sweep grid for the auxiliary loss weight.
inline const std::vector<double> kLambdaGrid = {0.001, 0.01, 0.1, 0.5, 1, 10, 50, 100, 1000};

// ---------------------------------------------------------------------------

/// Stops once the tracked metric has gone `patience` consecutive epochs
/// without improving on its best value.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Returns true when `metric` improves the best seen so far.
    bool observe(double metric) {
        if (metric > best_) {
            best_ = metric;
            since_best_ = 0;
            return true;
        }
        ++since_best_;
        return false;
    }

    bool should_stop() const { return since_best_ >= patience_; }
    double best() const { return best_; }
    std::size_t epochs_since_best() const { return since_best_; }

private:
    std::size_t patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    std::size_t since_best_ = 0;
};

// ---------------------------------------------------------------------------

/// Elementwise max over the span's columns. Exposed standalone for tests;
/// the model routes through ag::colspan_max on the shared representation.
inline Eigen::VectorXd span_repr(const Eigen::MatrixXd& columns, std::size_t start,
                                 std::size_t end) {
    if (start >= end || end > static_cast<std::size_t>(columns.cols()))
        throw std::invalid_argument("empty or out-of-range span");
    Eigen::VectorXd z = columns.col(static_cast<Eigen::Index>(start));
    for (std::size_t j = start + 1; j < end; ++j)
        z = z.cwiseMax(columns.col(static_cast<Eigen::Index>(j)));
    return z;
}

/// BCE (mean over labels, summed over documents) plus lambda times the mean
/// span negative log-likelihood. An empty span batch contributes exactly 0,
/// keeping the loss consistent with lambda = 0.
inline double joint_loss(const Eigen::MatrixXd& probs, const Eigen::MatrixXi& targets,
                         const std::vector<double>& span_nlls, double lambda) {
    if (probs.rows() != targets.rows() || probs.cols() != targets.cols())
        throw std::invalid_argument("shape mismatch");
    double bce = 0;
    for (Eigen::Index i = 0; i < probs.rows(); ++i) {
        double doc = 0;
        for (Eigen::Index l = 0; l < probs.cols(); ++l) {
            const double p = std::clamp(probs(i, l), 1e-12, 1.0 - 1e-12);
            doc += targets(i, l) ? -std::log(p) : -std::log1p(-p);
        }
        bce += doc / static_cast<double>(probs.cols());
    }
    if (span_nlls.empty() || lambda == 0.0) return bce;
    double aux = 0;
    for (double v : span_nlls) aux += v;
    return bce + lambda * aux / static_cast<double>(span_nlls.size());
}

// ---------------------------------------------------------------------------

/// Fraction of spans whose argmax auxiliary prediction equals the annotator
/// code. Span-level: one prediction per annotation.
inline double tagging_accuracy(Model& model, const std::vector<Document>& docs) {
    std::size_t total = 0, correct = 0;
    for (const auto& doc : docs) {
        if (doc.annotations.empty() || doc.tokens.empty()) continue;
        ag::Tape t;
        Model::PassContext ctx;
        ctx.tape = &t;
        ctx.requires_grad = false;
        TokenConceptAlignment a = align(doc, doc.annotations);
        auto fwd = model.forward(ctx, doc, &a);
        for (const auto& span : doc.annotations) {
            auto logits = model.aux_logits(t, fwd, span, false);
            Eigen::Index argmax = 0;
            logits->value.col(0).maxCoeff(&argmax);
            if (static_cast<std::size_t>(argmax) == model.concepts().lookup(span.code)) ++correct;
            ++total;
        }
    }
    if (total == 0) throw std::runtime_error("no spans");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------

struct TrainerConfig {
    std::size_t max_epochs = 200;
    std::size_t patience = 10;
    std::uint64_t seed = 1;
    bool keep_best = true; // restore parameters from the best dev-P@k epoch
};

struct EpochRecord {
    std::size_t epoch = 0;
    double loss = 0, bce = 0, aux_nll = 0;
    double dev_p_at_k = 0;
    double dev_micro_f1 = 0;
    double dev_macro_f1 = 0;
    double tagging_acc = 0; // on training spans; 0 when lambda == 0
    bool stopped = false;
};

struct TrainResult {
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;
    double best_dev_p_at_k = 0;
    double tagging_acc_first_epoch = 0;
    double tagging_acc_last_epoch = 0;
};

inline Eigen::MatrixXi gold_matrix(const std::vector<Document>& docs, const LabelSpace& labels) {
    Eigen::MatrixXi gold = Eigen::MatrixXi::Zero(static_cast<Eigen::Index>(docs.size()),
                                                 static_cast<Eigen::Index>(labels.size()));
    for (std::size_t i = 0; i < docs.size(); ++i)
        for (const auto& l : docs[i].labels)
            if (auto idx = labels.index_of(l))
                gold(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(*idx)) = 1;
    return gold;
}

/// Joint training: coding BCE always, plus the span-prediction scaffold when
/// lambda > 0. Early stopping watches dev P@k only; the auxiliary task never
/// influences the stopping decision. Deterministic given the seed: when
/// lambda == 0 the auxiliary path is never evaluated and never consumes RNG,
/// so the trajectory is bit-identical to a baseline run.
inline TrainResult train(Model& model, const std::vector<Document>& train_docs,
                         const std::vector<Document>& dev_docs, const TrainerConfig& cfg) {
    if (train_docs.empty()) throw std::runtime_error("empty training set");
    if (dev_docs.empty()) throw std::runtime_error("missing dev split");
    const double lambda = model.aux_config().lambda;
    if (lambda > 0) {
        bool any = false;
        for (const auto& d : train_docs)
            if (!d.annotations.empty()) { any = true; break; }
        if (!any) throw std::runtime_error("lambda > 0 requires training annotations");
    }

    // alignments are fixed; compute once
    std::vector<TokenConceptAlignment> alignments;
    alignments.reserve(train_docs.size());
    for (const auto& d : train_docs) alignments.push_back(align(d, d.annotations));

    const std::size_t L = model.labels().size();
    const std::size_t eval_k = std::min<std::size_t>(8, L);
    Eigen::MatrixXi dev_gold = gold_matrix(dev_docs, model.labels());

    std::mt19937_64 rng(cfg.seed);
    ag::AdamOptimizer opt(model.config().learning_rate);
    EarlyStopping stopper(cfg.patience);
    TrainResult result;

    std::vector<std::size_t> order(train_docs.size());
    std::iota(order.begin(), order.end(), 0);

    std::vector<ag::Mat> best_params;
    auto snapshot = [&]() {
        best_params.clear();
        for (const auto* p : std::as_const(model.params()).all()) best_params.push_back(p->value);
    };
    auto restore = [&]() {
        if (best_params.empty()) return;
        auto all = model.params().all();
        for (std::size_t i = 0; i < all.size(); ++i) all[i]->value = best_params[i];
    };

    const std::size_t batch_size = model.config().batch_size;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rand_index(rng, i)]);

        double epoch_loss = 0, epoch_bce = 0, epoch_aux = 0;
        std::size_t epoch_spans = 0;
        for (std::size_t b = 0; b < order.size(); b += batch_size) {
            ag::Tape t;
            Model::PassContext ctx;
            ctx.tape = &t;
            ctx.training = true;
            ctx.dropout_rng = &rng;
            ag::Var bce_total, aux_total;
            std::size_t span_count = 0;
            const std::size_t hi = std::min(order.size(), b + batch_size);
            for (std::size_t j = b; j < hi; ++j) {
                const Document& doc = train_docs[order[j]];
                if (doc.tokens.empty()) continue;
                const TokenConceptAlignment& a = alignments[order[j]];
                auto fwd = model.forward(ctx, doc, &a);
                ag::Mat target = ag::Mat::Zero(static_cast<Eigen::Index>(L), 1);
                for (const auto& l : doc.labels)
                    if (auto idx = model.labels().index_of(l))
                        target(static_cast<Eigen::Index>(*idx), 0) = 1.0;
                auto bce = ag::bce_with_logits_mean(t, fwd.logits, target);
                bce_total = bce_total ? ag::add(t, bce_total, bce) : bce;
                if (lambda > 0) {
                    for (const auto& span : doc.annotations) {
                        auto logits = model.aux_logits(t, fwd, span);
                        auto nll =
                            ag::nll_from_logits(t, logits, model.concepts().lookup(span.code));
                        aux_total = aux_total ? ag::add(t, aux_total, nll) : nll;
                        ++span_count;
                    }
                }
            }
            if (!bce_total) continue;
            ag::Var loss = bce_total;
            if (lambda > 0 && span_count > 0) {
                auto aux_mean =
                    ag::scale(t, aux_total, lambda / static_cast<double>(span_count));
                loss = ag::add(t, loss, aux_mean);
                epoch_aux += aux_total->value(0, 0);
                epoch_spans += span_count;
            }
            model.params().zero_grad();
            t.backward(loss);
            model.collect_gradients();
            opt.step(model.params());
            model.apply_pad_constraint();
            epoch_loss += loss->value(0, 0);
            epoch_bce += bce_total->value(0, 0);
        }

        Eigen::MatrixXd dev_scores = model.predict(dev_docs);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = epoch_loss;
        rec.bce = epoch_bce;
        rec.aux_nll = epoch_spans ? epoch_aux / static_cast<double>(epoch_spans) : 0.0;
        rec.dev_p_at_k = p_at_k(dev_scores, dev_gold, eval_k);
        rec.dev_micro_f1 = f1(dev_scores, dev_gold, Average::Micro);
        rec.dev_macro_f1 = f1(dev_scores, dev_gold, Average::Macro);
        if (lambda > 0) rec.tagging_acc = tagging_accuracy(model, train_docs);
        if (epoch == 1) result.tagging_acc_first_epoch = rec.tagging_acc;
        result.tagging_acc_last_epoch = rec.tagging_acc;

        const bool improved = stopper.observe(rec.dev_p_at_k);
        if (improved) {
            result.best_epoch = epoch;
            result.best_dev_p_at_k = rec.dev_p_at_k;
            if (cfg.keep_best) snapshot();
        }
        rec.stopped = stopper.should_stop();
        result.log.push_back(rec);
        if (rec.stopped) break;
    }
    if (cfg.keep_best) restore();
    return result;
}

// ---------------------------------------------------------------------------

/// One row of the lambda-sweep grid: dev-set coding metrics plus the
/// auxiliary tagging accuracy after the first and after the last epoch.
struct LambdaSweepRow {
    double lambda = 0;
    MetricsReport dev;
    double tagging_acc_first_epoch = 0;
    double tagging_acc_last_epoch = 0;
};

/// Train one model per lambda in `grid` and evaluate each on the dev split.
/// `make_model` must return a freshly initialized model for the given lambda
/// so every run starts from the same seed.
template <class MakeModel>
std::vector<LambdaSweepRow> sweep_lambda(MakeModel&& make_model,
                                         const std::vector<Document>& train_docs,
                                         const std::vector<Document>& dev_docs,
                                         const TrainerConfig& cfg,
                                         const std::vector<double>& grid = kLambdaGrid) {
    std::vector<LambdaSweepRow> rows;
    rows.reserve(grid.size());
    for (double lambda : grid) {
        Model model = make_model(lambda);
        auto res = train(model, train_docs, dev_docs, cfg);
        LambdaSweepRow row;
        row.lambda = lambda;
        Eigen::MatrixXd scores = model.predict(dev_docs);
        row.dev = compute_metrics(scores, gold_matrix(dev_docs, model.labels()));
        row.tagging_acc_first_epoch = res.tagging_acc_first_epoch;
        row.tagging_acc_last_epoch = res.tagging_acc_last_epoch;
        rows.push_back(row);
    }
    return rows;
}

} // namespace clincoder
