#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "clincoder/common.hpp"

namespace clincoder {

using Mat = Eigen::MatrixXd;   // documents x labels
using IMat = Eigen::MatrixXi;

// ---------------------------------------------------------------------------
// Ranking metrics. Ties in P@k/R@k are broken by label index (stable sort);
// AUC/AP use average ranks so tied scores contribute half-credit, matching
// the pairwise-comparison definition.

/// Label indices of one document sorted by descending score, stable in index.
inline std::vector<std::size_t> rank_labels(const Eigen::RowVectorXd& scores) {
    std::vector<std::size_t> idx(static_cast<std::size_t>(scores.size()));
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return scores(static_cast<Eigen::Index>(a)) > scores(static_cast<Eigen::Index>(b));
    });
    return idx;
}

inline double p_at_k(const Mat& scores, const IMat& gold, std::size_t k) {
    if (static_cast<std::size_t>(scores.cols()) < k)
        throw std::invalid_argument("p_at_k: fewer labels than k");
    double sum = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        auto order = rank_labels(scores.row(i));
        std::size_t hits = 0;
        for (std::size_t j = 0; j < k; ++j)
            hits += gold(i, static_cast<Eigen::Index>(order[j])) != 0 ? 1u : 0u;
        sum += static_cast<double>(hits) / static_cast<double>(k);
    }
    return scores.rows() == 0 ? 0.0 : sum / static_cast<double>(scores.rows());
}

/// Documents with no gold labels are excluded from the denominator.
inline double r_at_k(const Mat& scores, const IMat& gold, std::size_t k) {
    if (static_cast<std::size_t>(scores.cols()) < k)
        throw std::invalid_argument("r_at_k: fewer labels than k");
    double sum = 0;
    std::size_t counted = 0;
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        std::size_t npos = 0;
        for (Eigen::Index l = 0; l < gold.cols(); ++l) npos += gold(i, l) != 0 ? 1u : 0u;
        if (npos == 0) continue;
        auto order = rank_labels(scores.row(i));
        std::size_t hits = 0;
        for (std::size_t j = 0; j < k; ++j)
            hits += gold(i, static_cast<Eigen::Index>(order[j])) != 0 ? 1u : 0u;
        sum += static_cast<double>(hits) / static_cast<double>(npos);
        ++counted;
    }
    return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
}

// ---------------------------------------------------------------------------
// F1

struct Confusion {
    std::size_t tp = 0, fp = 0, fn = 0;
};

inline double f1_from_confusion(const Confusion& c) {
    const double denom = 2.0 * static_cast<double>(c.tp) + static_cast<double>(c.fp) +
                         static_cast<double>(c.fn);
    return denom == 0.0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / denom;
}

enum class Average { Macro, Micro };

inline std::vector<Confusion> per_label_confusions(const Mat& scores, const IMat& gold,
                                                   double threshold) {
    std::vector<Confusion> cs(static_cast<std::size_t>(scores.cols()));
    for (Eigen::Index l = 0; l < scores.cols(); ++l) {
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            bool pred = scores(i, l) >= threshold;
            bool truth = gold(i, l) != 0;
            if (pred && truth) ++cs[static_cast<std::size_t>(l)].tp;
            else if (pred && !truth) ++cs[static_cast<std::size_t>(l)].fp;
            else if (!pred && truth) ++cs[static_cast<std::size_t>(l)].fn;
        }
    }
    return cs;
}

inline double f1(const Mat& scores, const IMat& gold, Average mode, double threshold = 0.5) {
    auto cs = per_label_confusions(scores, gold, threshold);
    if (mode == Average::Micro) {
        Confusion pooled;
        for (const auto& c : cs) { pooled.tp += c.tp; pooled.fp += c.fp; pooled.fn += c.fn; }
        return f1_from_confusion(pooled);
    }
    double sum = 0;
    for (const auto& c : cs) sum += f1_from_confusion(c);
    return cs.empty() ? 0.0 : sum / static_cast<double>(cs.size());
}

// ---------------------------------------------------------------------------
// AUC / AP over a single score column. Ties handled by average rank (AUC)
// and by grouping tied scores into one step (AP).

inline double binary_auc(const std::vector<double>& scores, const std::vector<int>& gold) {
    std::size_t npos = 0, nneg = 0;
    for (int g : gold) (g ? npos : nneg)++;
    if (npos == 0 || nneg == 0) throw std::runtime_error("auc needs both classes");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // sum of average ranks of positives
    double rank_sum = 0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
        const double avg_rank = (static_cast<double>(i) + static_cast<double>(j - 1)) / 2.0 + 1.0;
        for (std::size_t t = i; t < j; ++t)
            if (gold[idx[t]]) rank_sum += avg_rank;
        i = j;
    }
    const double np = static_cast<double>(npos), nn = static_cast<double>(nneg);
    return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

inline double binary_ap(const std::vector<double>& scores, const std::vector<int>& gold) {
    std::size_t npos = 0;
    for (int g : gold) npos += g ? 1u : 0u;
    if (npos == 0) throw std::runtime_error("ap needs a positive");
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    // tied scores form one group; precision evaluated at the group boundary
    double ap = 0;
    std::size_t seen = 0, hits = 0, i = 0;
    while (i < idx.size()) {
        std::size_t j = i, group_hits = 0;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            group_hits += gold[idx[j]] ? 1u : 0u;
            ++j;
        }
        seen += j - i;
        hits += group_hits;
        if (group_hits > 0)
            ap += static_cast<double>(group_hits) * static_cast<double>(hits) /
                  static_cast<double>(seen);
        i = j;
    }
    return ap / static_cast<double>(npos);
}

struct RankMetric {
    double value = 0;
    std::vector<std::size_t> skipped_labels; // macro labels without both classes
};

inline RankMetric auc(const Mat& scores, const IMat& gold, Average mode) {
    RankMetric out;
    if (mode == Average::Micro) {
        std::vector<double> s;
        std::vector<int> g;
        s.reserve(static_cast<std::size_t>(scores.size()));
        for (Eigen::Index i = 0; i < scores.rows(); ++i)
            for (Eigen::Index l = 0; l < scores.cols(); ++l) {
                s.push_back(scores(i, l));
                g.push_back(gold(i, l));
            }
        out.value = binary_auc(s, g);
        return out;
    }
    double sum = 0;
    std::size_t counted = 0;
    for (Eigen::Index l = 0; l < scores.cols(); ++l) {
        std::size_t npos = 0;
        for (Eigen::Index i = 0; i < gold.rows(); ++i) npos += gold(i, l) != 0 ? 1u : 0u;
        if (npos == 0 || npos == static_cast<std::size_t>(gold.rows())) {
            out.skipped_labels.push_back(static_cast<std::size_t>(l));
            continue;
        }
        std::vector<double> s;
        std::vector<int> g;
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            s.push_back(scores(i, l));
            g.push_back(gold(i, l));
        }
        sum += binary_auc(s, g);
        ++counted;
    }
    if (counted == 0) throw std::runtime_error("no evaluable labels for macro auc");
    out.value = sum / static_cast<double>(counted);
    return out;
}

inline RankMetric ap(const Mat& scores, const IMat& gold, Average mode) {
    RankMetric out;
    if (mode == Average::Micro) {
        std::vector<double> s;
        std::vector<int> g;
        for (Eigen::Index i = 0; i < scores.rows(); ++i)
            for (Eigen::Index l = 0; l < scores.cols(); ++l) {
                s.push_back(scores(i, l));
                g.push_back(gold(i, l));
            }
        out.value = binary_ap(s, g);
        return out;
    }
    double sum = 0;
    std::size_t counted = 0;
    for (Eigen::Index l = 0; l < scores.cols(); ++l) {
        std::size_t npos = 0;
        for (Eigen::Index i = 0; i < gold.rows(); ++i) npos += gold(i, l) != 0 ? 1u : 0u;
        if (npos == 0 || npos == static_cast<std::size_t>(gold.rows())) {
            out.skipped_labels.push_back(static_cast<std::size_t>(l));
            continue;
        }
        std::vector<double> s;
        std::vector<int> g;
        for (Eigen::Index i = 0; i < scores.rows(); ++i) {
            s.push_back(scores(i, l));
            g.push_back(gold(i, l));
        }
        sum += binary_ap(s, g);
        ++counted;
    }
    if (counted == 0) throw std::runtime_error("no evaluable labels for macro ap");
    out.value = sum / static_cast<double>(counted);
    return out;
}

// ---------------------------------------------------------------------------
// Frequency-bucketed F1: rare <= 50 < semi-rare <= 1000 < common.

enum class Bucket { Rare, SemiRare, Common };

inline Bucket frequency_bucket(std::size_t train_count) {
    if (train_count <= 50) return Bucket::Rare;
    if (train_count <= 1000) return Bucket::SemiRare;
    return Bucket::Common;
}

inline const char* bucket_name(Bucket b) {
    switch (b) {
        case Bucket::Rare: return "rare";
        case Bucket::SemiRare: return "semi_rare";
        default: return "common";
    }
}

/// Micro-F1 within each nonempty bucket; empty buckets are absent.
inline std::map<std::string, double> bucketed_f1(const Mat& scores, const IMat& gold,
                                                 const std::vector<std::size_t>& train_counts,
                                                 double threshold = 0.5) {
    if (train_counts.size() != static_cast<std::size_t>(scores.cols()))
        throw std::invalid_argument("train counts size mismatch");
    std::map<std::string, Confusion> pooled;
    auto cs = per_label_confusions(scores, gold, threshold);
    for (std::size_t l = 0; l < cs.size(); ++l) {
        auto& c = pooled[bucket_name(frequency_bucket(train_counts[l]))];
        c.tp += cs[l].tp;
        c.fp += cs[l].fp;
        c.fn += cs[l].fn;
    }
    std::map<std::string, double> out;
    for (const auto& [name, c] : pooled) out[name] = f1_from_confusion(c);
    return out;
}

// ---------------------------------------------------------------------------

struct MetricsReport {
    double macro_auc = 0, micro_auc = 0;
    double macro_ap = 0, micro_ap = 0;
    double macro_f1 = 0, micro_f1 = 0;
    double p_at_8 = 0, p_at_15 = 0;
    double r_at_8 = 0, r_at_15 = 0;
    std::map<std::string, double> bucket_f1;          // empty if counts absent
    std::optional<double> tagging_accuracy;
    std::vector<std::size_t> skipped_labels_auc, skipped_labels_ap;
    bool rank_metrics_available = true; // false for the score-less raw-codes baseline
};

inline MetricsReport compute_metrics(const Mat& scores, const IMat& gold,
                                     const std::vector<std::size_t>* train_counts = nullptr,
                                     double threshold = 0.5) {
    MetricsReport r;
    auto mac_auc = auc(scores, gold, Average::Macro);
    auto mic_auc = auc(scores, gold, Average::Micro);
    auto mac_ap = ap(scores, gold, Average::Macro);
    auto mic_ap = ap(scores, gold, Average::Micro);
    r.macro_auc = mac_auc.value;
    r.micro_auc = mic_auc.value;
    r.macro_ap = mac_ap.value;
    r.micro_ap = mic_ap.value;
    r.skipped_labels_auc = mac_auc.skipped_labels;
    r.skipped_labels_ap = mac_ap.skipped_labels;
    r.macro_f1 = f1(scores, gold, Average::Macro, threshold);
    r.micro_f1 = f1(scores, gold, Average::Micro, threshold);
    const auto L = static_cast<std::size_t>(scores.cols());
    if (L >= 8) { r.p_at_8 = p_at_k(scores, gold, 8); r.r_at_8 = r_at_k(scores, gold, 8); }
    if (L >= 15) { r.p_at_15 = p_at_k(scores, gold, 15); r.r_at_15 = r_at_k(scores, gold, 15); }
    if (train_counts) r.bucket_f1 = bucketed_f1(scores, gold, *train_counts, threshold);
    return r;
}

/// Score-less binary predictions (the raw-codes baseline): P@k/R@k sample k
/// elements uniformly from the predicted set with a fixed seed; AUC/AP are
/// not applicable.
inline MetricsReport compute_metrics_binary(const IMat& preds, const IMat& gold,
                                            std::uint64_t seed,
                                            const std::vector<std::size_t>* train_counts = nullptr) {
    MetricsReport r;
    r.rank_metrics_available = false;
    Mat scores = preds.cast<double>();
    r.macro_f1 = f1(scores, gold, Average::Macro);
    r.micro_f1 = f1(scores, gold, Average::Micro);
    if (train_counts) r.bucket_f1 = bucketed_f1(scores, gold, *train_counts);

    std::mt19937_64 rng(seed);
    auto sampled_at_k = [&](std::size_t k, bool precision) {
        double sum = 0;
        std::size_t counted = 0;
        for (Eigen::Index i = 0; i < preds.rows(); ++i) {
            std::vector<std::size_t> predicted;
            std::size_t npos = 0;
            for (Eigen::Index l = 0; l < preds.cols(); ++l) {
                if (preds(i, l)) predicted.push_back(static_cast<std::size_t>(l));
                npos += gold(i, l) != 0 ? 1u : 0u;
            }
            if (!precision && npos == 0) continue;
            for (std::size_t j = predicted.size(); j > 1; --j)
                std::swap(predicted[j - 1], predicted[rand_index(rng, j)]);
            std::size_t take = std::min(k, predicted.size());
            std::size_t hits = 0;
            for (std::size_t j = 0; j < take; ++j)
                hits += gold(i, static_cast<Eigen::Index>(predicted[j])) != 0 ? 1u : 0u;
            sum += precision ? static_cast<double>(hits) / static_cast<double>(k)
                             : (npos ? static_cast<double>(hits) / static_cast<double>(npos) : 0.0);
            ++counted;
        }
        return counted == 0 ? 0.0 : sum / static_cast<double>(counted);
    };
    const auto L = static_cast<std::size_t>(preds.cols());
    if (L >= 8) { r.p_at_8 = sampled_at_k(8, true); r.r_at_8 = sampled_at_k(8, false); }
    if (L >= 15) { r.p_at_15 = sampled_at_k(15, true); r.r_at_15 = sampled_at_k(15, false); }
    return r;
}

} // namespace clincoder
