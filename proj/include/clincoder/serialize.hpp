#pragma once

#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"

#include "clincoder/eval.hpp"
#include "clincoder/model.hpp"
#include "clincoder/multitask.hpp"

namespace clincoder {

using nlohmann::json;

inline json model_config_to_json(const ModelConfig& c) {
    return {{"embed_dim", c.embed_dim},
            {"conv_dim", c.conv_dim},
            {"kernel_width", c.kernel_width},
            {"dropout", c.dropout},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"attention_hidden", c.attention_hidden},
            {"init_range", c.init_range},
            {"gate_min_pair_count", c.gate_min_pair_count}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.conv_dim = j.value("conv_dim", c.conv_dim);
    c.kernel_width = j.value("kernel_width", c.kernel_width);
    c.dropout = j.value("dropout", c.dropout);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.attention_hidden = j.value("attention_hidden", c.attention_hidden);
    c.init_range = j.value("init_range", c.init_range);
    c.gate_min_pair_count = j.value("gate_min_pair_count", c.gate_min_pair_count);
    return c;
}

inline json aux_config_to_json(const AuxConfig& a) {
    return {{"head", aux_head_name(a.head)},
            {"share_point", share_point_name(a.share_point)},
            {"lambda", a.lambda},
            {"hidden", a.hidden}};
}

inline AuxConfig aux_config_from_json(const json& j) {
    AuxConfig a;
    a.head = aux_head_from(j.value("head", std::string("linear")));
    a.share_point = share_point_from(j.value("share_point", std::string("pre_convolution")));
    a.lambda = j.value("lambda", 0.0);
    a.hidden = j.value("hidden", a.hidden);
    return a;
}

inline json matrix_to_json(const ag::Mat& m) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline ag::Mat matrix_from_json(const json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows ? static_cast<Eigen::Index>(j[0].size()) : 0;
    ag::Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index c = 0; c < cols; ++c)
            m(i, c) = j[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)].get<double>();
    return m;
}

/// Combined identity of the vocabularies and label order a checkpoint was
/// trained against; evaluation refuses to run across a mismatch.
inline std::string vocabulary_hash(const Model& m) {
    std::string blob = hex64(m.vocab().content_hash()) + hex64(m.concepts().content_hash());
    for (const auto& l : m.labels().codes()) { blob += l; blob += '\n'; }
    return hex64(fnv1a(blob));
}

/// Self-describing archive: config, vocabularies, ontology, gate keys,
/// policy name, and every parameter tensor.
inline void save_checkpoint(const std::string& path, const Model& m,
                            const std::string& config_hash = {}) {
    json j;
    j["format"] = "clincoder-checkpoint-v1";
    if (!config_hash.empty()) j["config_hash"] = config_hash;
    j["config"] = model_config_to_json(m.config());
    j["policy"] = m.policy().name();
    j["aux"] = aux_config_to_json(m.aux_config());
    j["overlap_enabled"] = m.overlap_config().enabled;
    j["gram_enabled"] = m.gram_config().enabled;
    j["seed"] = m.seed();
    j["vocab"] = m.vocab().entries();
    j["vocab_min_df"] = m.vocab().min_doc_frequency();
    j["concept_vocab"] = m.concepts().entries();
    j["concept_min_df"] = m.concepts().min_doc_frequency();
    j["labels"] = m.labels().codes();
    j["vocab_hash"] = vocabulary_hash(m);
    json edges = json::array();
    for (const auto& code : m.ontology().codes())
        edges.push_back({code, m.ontology().parent(code)});
    j["ontology"] = edges;
    j["gate_keys"] = m.gate_table().keys();
    json params;
    for (const auto* p : m.params().all()) params[p->name] = matrix_to_json(p->value);
    j["params"] = std::move(params);

    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump() << "\n";
}

inline std::unique_ptr<Model> load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    json j;
    in >> j;
    if (j.value("format", std::string{}) != "clincoder-checkpoint-v1")
        throw std::runtime_error(path + ": not a clincoder checkpoint");

    ModelConfig config = model_config_from_json(j.at("config"));
    auto vocab = Vocabulary::from_tokens(j.at("vocab").get<std::vector<std::string>>(),
                                         j.value("vocab_min_df", std::size_t{3}));
    auto concepts =
        ConceptVocabulary::from_codes(j.at("concept_vocab").get<std::vector<std::string>>(),
                                      j.value("concept_min_df", std::size_t{3}));
    LabelSpace labels(j.at("labels").get<std::vector<std::string>>());
    Ontology ontology;
    for (const auto& e : j.at("ontology")) {
        std::string child = e[0].get<std::string>();
        std::string parent = e[1].get<std::string>();
        if (parent.empty()) ontology.add_code(child);
        else ontology.add_edge(child, parent);
    }
    auto gates = GateTable::from_keys(j.at("gate_keys").get<std::vector<std::uint64_t>>(),
                                      vocab.size(), concepts.size());
    TokenPolicy policy = TokenPolicy::named(j.at("policy").get<std::string>());
    OverlapConfig overlap;
    overlap.enabled = j.value("overlap_enabled", false);
    GramConfig gram;
    gram.enabled = j.value("gram_enabled", false);
    AuxConfig aux = aux_config_from_json(j.at("aux"));

    auto model = std::make_unique<Model>(config, std::move(vocab), std::move(concepts),
                                         std::move(labels), std::move(ontology), policy,
                                         std::move(gates), overlap, gram, aux,
                                         j.value("seed", std::uint64_t{0}));
    for (auto& [name, value] : j.at("params").items())
        model->params().get(name).value = matrix_from_json(value);
    model->apply_pad_constraint();
    return model;
}

// ---------------------------------------------------------------------------

inline json metrics_to_json(const MetricsReport& r) {
    json j;
    if (r.rank_metrics_available) {
        j["macro_auc"] = r.macro_auc;
        j["micro_auc"] = r.micro_auc;
        j["macro_ap"] = r.macro_ap;
        j["micro_ap"] = r.micro_ap;
    } else {
        j["macro_auc"] = nullptr;
        j["micro_auc"] = nullptr;
        j["macro_ap"] = nullptr;
        j["micro_ap"] = nullptr;
    }
    j["macro_f1"] = r.macro_f1;
    j["micro_f1"] = r.micro_f1;
    j["p_at_8"] = r.p_at_8;
    j["p_at_15"] = r.p_at_15;
    j["r_at_8"] = r.r_at_8;
    j["r_at_15"] = r.r_at_15;
    for (const auto& [name, v] : r.bucket_f1) j["f1_" + name] = v;
    if (r.tagging_accuracy) j["tagging_accuracy"] = *r.tagging_accuracy;
    j["skipped_labels_auc"] = r.skipped_labels_auc;
    j["skipped_labels_ap"] = r.skipped_labels_ap;
    return j;
}

inline void save_metrics(const std::string& path, const MetricsReport& r,
                         const std::string& config_hash) {
    json j = metrics_to_json(r);
    j["config_hash"] = config_hash;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << j.dump(2) << "\n";
}

/// Training log: one JSON object per epoch.
inline void save_training_log(const std::string& path, const TrainResult& result,
                              const std::string& config_hash) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "# config_hash=" << config_hash << "\n";
    for (const auto& rec : result.log) {
        json j = {{"epoch", rec.epoch},
                  {"loss", rec.loss},
                  {"bce", rec.bce},
                  {"aux_nll", rec.aux_nll},
                  {"dev_p_at_k", rec.dev_p_at_k},
                  {"dev_micro_f1", rec.dev_micro_f1},
                  {"dev_macro_f1", rec.dev_macro_f1},
                  {"tagging_accuracy", rec.tagging_acc},
                  {"stopped", rec.stopped}};
        out << j.dump() << "\n";
    }
}

/// Sweep CSV: one row per lambda with the dev-set coding metrics and the
/// first/last-epoch auxiliary tagging accuracy.
inline void save_sweep_csv(const std::string& path, const std::vector<LambdaSweepRow>& rows,
                           const std::string& config_hash) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << "# config_hash=" << config_hash << "\n";
    out << "lambda,macro_auc,micro_auc,macro_ap,micro_ap,macro_f1,micro_f1,"
           "r_at_8,r_at_15,p_at_8,p_at_15,tagging_acc_first_epoch,tagging_acc_last_epoch\n";
    out.precision(10);
    for (const auto& r : rows) {
        out << r.lambda << ',' << r.dev.macro_auc << ',' << r.dev.micro_auc << ','
            << r.dev.macro_ap << ',' << r.dev.micro_ap << ',' << r.dev.macro_f1 << ','
            << r.dev.micro_f1 << ',' << r.dev.r_at_8 << ',' << r.dev.r_at_15 << ','
            << r.dev.p_at_8 << ',' << r.dev.p_at_15 << ',' << r.tagging_acc_first_epoch << ','
            << r.tagging_acc_last_epoch << "\n";
    }
}

} // namespace clincoder
