#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "clincoder/annotator.hpp"
#include "clincoder/corpus.hpp"
#include "clincoder/eval.hpp"
#include "clincoder/model.hpp"
#include "clincoder/multitask.hpp"
#include "clincoder/ontology.hpp"
#include "clincoder/serialize.hpp"
#include "clincoder/synthetic.hpp"

namespace {

using namespace clincoder;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Shared option bundles

struct ModelOpts {
    std::string policy = "baseline";
    std::size_t embed_dim = 100;
    std::size_t conv_dim = 50;
    std::size_t kernel_width = 10;
    double dropout = 0.2;
    double learning_rate = 0.0001;
    std::size_t batch_size = 12;
    std::size_t attention_hidden = 20;
    std::size_t min_df = 3;
    std::size_t gate_min_pair = 2;
    bool overlap = false;
    bool gram = false;
    double lambda = 0.0;
    std::string aux_head = "linear";
    std::string share_point = "pre_convolution";
    std::size_t aux_hidden = 700;
    std::uint64_t seed = 1;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--policy", policy,
                        "baseline | full-replace | linear-combination | dummy-concepts | "
                        "concepts-only | concepts-only-concept-embeddings");
        cmd->add_option("--embed-dim", embed_dim, "word/concept embedding size");
        cmd->add_option("--conv-dim", conv_dim, "convolution filter count");
        cmd->add_option("--kernel-width", kernel_width, "convolution kernel width");
        cmd->add_option("--dropout", dropout, "embedding dropout rate");
        cmd->add_option("--learning-rate", learning_rate, "Adam learning rate");
        cmd->add_option("--batch-size", batch_size, "training batch size");
        cmd->add_option("--attention-hidden", attention_hidden, "attention scorer hidden size");
        cmd->add_option("--min-df", min_df, "vocabulary document-frequency threshold");
        cmd->add_option("--gate-min-pair", gate_min_pair, "gate (word,concept) pair count threshold");
        cmd->add_flag("--overlap", overlap, "contextual attention over overlapping concepts");
        cmd->add_flag("--gram", gram, "hierarchy-attention concept embeddings");
        cmd->add_option("--lambda", lambda, "auxiliary span-prediction loss weight");
        cmd->add_option("--aux-head", aux_head, "linear | mlp");
        cmd->add_option("--share-point", share_point, "pre_convolution | post_convolution");
        cmd->add_option("--aux-hidden", aux_hidden, "mlp auxiliary head hidden size");
        cmd->add_option("--seed", seed, "parameter init and shuffle seed");
    }

    ModelConfig model_config() const {
        ModelConfig c;
        c.embed_dim = embed_dim;
        c.conv_dim = conv_dim;
        c.kernel_width = kernel_width;
        c.dropout = dropout;
        c.learning_rate = learning_rate;
        c.batch_size = batch_size;
        c.attention_hidden = attention_hidden;
        c.gate_min_pair_count = gate_min_pair;
        return c;
    }

    AuxConfig aux_config(double lam) const {
        AuxConfig a;
        a.head = aux_head_from(aux_head);
        a.share_point = share_point_from(share_point);
        a.lambda = lam;
        a.hidden = aux_hidden;
        return a;
    }
};

struct TrainOpts {
    std::size_t epochs = 200;
    std::size_t patience = 10;
    bool no_keep_best = false;

    void add_to(CLI::App* cmd) {
        cmd->add_option("--epochs", epochs, "maximum training epochs");
        cmd->add_option("--patience", patience, "early-stopping patience (dev P@k)");
        cmd->add_flag("--no-keep-best", no_keep_best, "keep final instead of best-dev parameters");
    }

    TrainerConfig trainer_config(std::uint64_t seed) const {
        TrainerConfig t;
        t.max_epochs = epochs;
        t.patience = patience;
        t.seed = seed;
        t.keep_best = !no_keep_best;
        return t;
    }
};

// Hash of the fully-parsed command line; embedded in every output artifact.
std::string config_hash_of(const CLI::App& app) {
    std::string blob;
    for (const CLI::App* sub : app.get_subcommands()) blob += sub->get_name() + "\n";
    std::function<void(const CLI::App*)> walk = [&](const CLI::App* a) {
        for (const auto* opt : a->get_options()) {
            auto res = opt->results();
            if (res.empty()) continue;
            blob += opt->get_name();
            for (const auto& r : res) { blob += '='; blob += r; }
            blob += '\n';
        }
        for (const CLI::App* sub : a->get_subcommands()) walk(sub);
    };
    walk(&app);
    return hex64(fnv1a(blob));
}

// ---------------------------------------------------------------------------
// Corpus assembly helpers

std::vector<Document> select_docs(const std::vector<Document>& all,
                                  const std::vector<std::string>& ids) {
    std::map<std::string, const Document*> by_id;
    for (const auto& d : all) by_id[d.doc_id] = &d;
    std::vector<Document> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw std::runtime_error("split references unknown doc_id: " + id);
        out.push_back(*it->second);
    }
    return out;
}

std::vector<std::size_t> label_train_counts(const std::vector<Document>& train_docs,
                                            const LabelSpace& labels) {
    std::vector<std::size_t> counts(labels.size(), 0);
    for (const auto& d : train_docs)
        for (const auto& l : d.labels)
            if (auto idx = labels.index_of(l)) ++counts[*idx];
    return counts;
}

Model build_model(const ModelOpts& opts, double lambda,
                  const std::vector<Document>& train_docs, const LabelSpace& labels,
                  const Ontology& ontology) {
    auto vocab = Vocabulary::build(train_docs, opts.min_df);
    auto concepts = ConceptVocabulary::build(train_docs, ontology, opts.min_df);
    auto gates = GateTable::build(train_docs, vocab, concepts, opts.gate_min_pair);
    OverlapConfig overlap;
    overlap.enabled = opts.overlap;
    GramConfig gram;
    gram.enabled = opts.gram;
    return Model(opts.model_config(), std::move(vocab), std::move(concepts), labels, ontology,
                 TokenPolicy::named(opts.policy), std::move(gates), overlap, gram,
                 opts.aux_config(lambda), opts.seed);
}

// ---------------------------------------------------------------------------
// SVG rendering (written to a buffer first; nothing touches disk on error)

std::string bar_chart_svg(const std::string& title,
                          const std::vector<std::pair<std::string, double>>& bars,
                          double y_max, const std::string& config_hash) {
    const int bar_w = 70, gap = 40, margin = 60, height = 320, plot_h = 220;
    const int width = margin * 2 + static_cast<int>(bars.size()) * (bar_w + gap);
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
      << height << "\">\n";
    s << "<!-- config_hash=" << config_hash << " -->\n";
    s << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
    s << "<line x1=\"" << margin - 10 << "\" y1=\"" << 40 + plot_h << "\" x2=\""
      << width - margin + 10 << "\" y2=\"" << 40 + plot_h << "\" stroke=\"black\"/>\n";
    int x = margin;
    for (const auto& [label, value] : bars) {
        const double frac = y_max > 0 ? value / y_max : 0;
        const int h = static_cast<int>(frac * plot_h);
        s << "<rect x=\"" << x << "\" y=\"" << 40 + plot_h - h << "\" width=\"" << bar_w
          << "\" height=\"" << h << "\" fill=\"#4878a8\"/>\n";
        s << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << 40 + plot_h - h - 6
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
          << value << "</text>\n";
        s << "<text x=\"" << x + bar_w / 2 << "\" y=\"" << 40 + plot_h + 20
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
          << label << "</text>\n";
        x += bar_w + gap;
    }
    s << "</svg>\n";
    return s.str();
}

void write_whole_file(const std::string& path, const std::string& content) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << content;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_annotate(const std::string& documents_path, const std::string& dictionary_path,
                 const std::string& ontology_path, const std::string& out_annotations,
                 const std::string& out_stats, unsigned threads, const std::string& hash) {
    Ontology ontology;
    if (!ontology_path.empty()) ontology = load_ontology(ontology_path);
    Dictionary dict =
        load_dictionary(dictionary_path, ontology_path.empty() ? nullptr : &ontology);
    if (dict.empty()) throw std::runtime_error("empty dictionary: " + dictionary_path);
    auto docs = load_documents(documents_path);
    annotate_all(docs, dict, threads);
    save_annotations(out_annotations, docs, hash);
    if (!out_stats.empty()) {
        CoverageStats st = coverage_stats(docs);
        json j = {{"config_hash", hash},
                  {"documents", docs.size()},
                  {"total_concepts", st.total_concepts},
                  {"mean_concepts_per_doc", st.mean_concepts_per_doc},
                  {"mean_fraction_tokens_annotated", st.mean_fraction_tokens_annotated},
                  {"mean_tokens_per_doc", st.mean_tokens_per_doc}};
        write_whole_file(out_stats, j.dump(2) + "\n");
    }
    std::cout << "annotated " << docs.size() << " documents -> " << out_annotations << "\n";
    return 0;
}

int cmd_simulate(const SyntheticSpec& spec, const std::string& out_dir,
                 const std::string& hash) {
    SyntheticCorpus corpus = generate_synthetic(spec);
    std::filesystem::create_directories(out_dir);
    auto p = [&](const char* name) { return (std::filesystem::path(out_dir) / name).string(); };
    save_documents(p("documents.jsonl"), corpus.documents, hash);
    save_annotations(p("annotations.jsonl"), corpus.documents, hash);
    save_dictionary(p("dictionary.tsv"), corpus.dictionary, hash);
    save_ontology(p("ontology.tsv"), corpus.ontology, hash);
    save_label_space(p("labels.txt"), corpus.label_space, hash);
    save_split(p("split.json"), corpus.split, hash);
    CoverageStats st = coverage_stats(corpus.documents);
    json j = {{"config_hash", hash},
              {"documents", corpus.documents.size()},
              {"total_concepts", st.total_concepts},
              {"mean_concepts_per_doc", st.mean_concepts_per_doc},
              {"mean_fraction_tokens_annotated", st.mean_fraction_tokens_annotated},
              {"mean_tokens_per_doc", st.mean_tokens_per_doc},
              {"phrases_per_concept", corpus.variants_per_concept}};
    write_whole_file(p("stats.json"), j.dump(2) + "\n");
    std::cout << "wrote synthetic corpus bundle -> " << out_dir << "\n";
    return 0;
}

struct CorpusBundle {
    std::vector<Document> train, dev, test;
    LabelSpace labels;
    Ontology ontology;
};

CorpusBundle load_bundle(const std::string& documents_path, const std::string& annotations_path,
                         const std::string& labels_path, const std::string& ontology_path,
                         const std::string& split_path) {
    auto docs = load_documents(documents_path);
    if (!annotations_path.empty()) load_annotations(annotations_path, docs);
    CorpusBundle b;
    b.labels = load_label_space(labels_path);
    if (!ontology_path.empty()) b.ontology = load_ontology(ontology_path);
    CorpusSplit split = load_split(split_path);
    b.train = select_docs(docs, split.train);
    b.dev = select_docs(docs, split.dev);
    b.test = select_docs(docs, split.test);
    return b;
}

int cmd_train(const CorpusBundle& bundle, const ModelOpts& mopts, const TrainOpts& topts,
              const std::string& out_checkpoint, const std::string& out_log,
              const std::string& hash) {
    Model model = build_model(mopts, mopts.lambda, bundle.train, bundle.labels, bundle.ontology);
    TrainResult res = train(model, bundle.train, bundle.dev, topts.trainer_config(mopts.seed));
    save_checkpoint(out_checkpoint, model, hash);
    if (!out_log.empty()) save_training_log(out_log, res, hash);
    std::cout << "trained " << res.log.size() << " epochs, best dev P@k " << res.best_dev_p_at_k
              << " at epoch " << res.best_epoch << " -> " << out_checkpoint << "\n";
    return 0;
}

int cmd_evaluate(const std::string& documents_path, const std::string& annotations_path,
                 const std::string& labels_path, const std::string& split_path,
                 const std::string& split_name, const std::string& checkpoint_path,
                 const std::string& out_metrics, const std::string& hash) {
    auto model = load_checkpoint(checkpoint_path);

    // the checkpoint records the hash of the vocabularies and label order it
    // was trained with; refuse to score against anything else
    {
        std::ifstream in(checkpoint_path);
        json j;
        in >> j;
        const std::string stored = j.value("vocab_hash", std::string{});
        const std::string actual = vocabulary_hash(*model);
        if (!stored.empty() && stored != actual)
            throw std::runtime_error("vocabulary hash mismatch: checkpoint declares " + stored +
                                     " but its contents hash to " + actual);
    }
    LabelSpace labels = load_label_space(labels_path);
    if (labels.codes() != model->labels().codes())
        throw std::runtime_error("vocabulary hash mismatch: label space in " + labels_path +
                                 " differs from the checkpoint's");

    auto docs = load_documents(documents_path);
    if (!annotations_path.empty()) load_annotations(annotations_path, docs);

    std::vector<Document> eval_docs;
    const std::vector<std::size_t>* counts_ptr = nullptr;
    std::vector<std::size_t> counts;
    if (!split_path.empty()) {
        CorpusSplit split = load_split(split_path);
        const auto& ids = split_name == "train" ? split.train
                        : split_name == "dev"   ? split.dev
                                                : split.test;
        eval_docs = select_docs(docs, ids);
        counts = label_train_counts(select_docs(docs, split.train), labels);
        counts_ptr = &counts;
    } else {
        eval_docs = std::move(docs);
    }
    if (eval_docs.empty()) throw std::runtime_error("no documents to evaluate");

    Eigen::MatrixXd scores = model->predict(eval_docs);
    MetricsReport report =
        compute_metrics(scores, gold_matrix(eval_docs, labels), counts_ptr);
    save_metrics(out_metrics, report, hash);
    std::cout << "evaluated " << eval_docs.size() << " documents, micro-F1 " << report.micro_f1
              << " -> " << out_metrics << "\n";
    return 0;
}

int cmd_sweep_lambda(const CorpusBundle& bundle, const ModelOpts& mopts, const TrainOpts& topts,
                     const std::string& out_csv, const std::string& hash) {
    auto make_model = [&](double lambda) {
        return build_model(mopts, lambda, bundle.train, bundle.labels, bundle.ontology);
    };
    auto rows = sweep_lambda(make_model, bundle.train, bundle.dev,
                             topts.trainer_config(mopts.seed));
    save_sweep_csv(out_csv, rows, hash);
    std::cout << "swept " << rows.size() << " lambda values -> " << out_csv << "\n";
    return 0;
}

int cmd_plot(const std::string& metrics_path, const std::string& stats_path,
             const std::string& out_f1, const std::string& out_hist, const std::string& hash) {
    // render everything before writing anything; a failure leaves no partial image
    std::vector<std::pair<std::string, std::string>> pending;

    if (!out_f1.empty()) {
        if (metrics_path.empty()) throw std::runtime_error("--out-f1-svg requires --metrics");
        std::ifstream in(metrics_path);
        if (!in) throw std::runtime_error("cannot open " + metrics_path);
        json j;
        in >> j;
        std::vector<std::pair<std::string, double>> bars;
        for (const char* name : {"f1_rare", "f1_semi_rare", "f1_common"})
            if (j.contains(name)) bars.emplace_back(name + 3, j[name].get<double>());
        if (bars.empty())
            throw std::runtime_error("no bucket F1 values in " + metrics_path);
        pending.emplace_back(out_f1, bar_chart_svg("Test F1 by code frequency bucket", bars,
                                                   1.0, hash));
    }
    if (!out_hist.empty()) {
        if (stats_path.empty()) throw std::runtime_error("--out-hist-svg requires --stats");
        std::ifstream in(stats_path);
        if (!in) throw std::runtime_error("cannot open " + stats_path);
        json j;
        in >> j;
        if (!j.contains("phrases_per_concept") || j["phrases_per_concept"].empty())
            throw std::runtime_error("no phrases_per_concept data in " + stats_path);
        std::map<std::size_t, std::size_t> hist;
        for (const auto& [code, v] : j["phrases_per_concept"].items())
            ++hist[v.get<std::size_t>()];
        std::vector<std::pair<std::string, double>> bars;
        double y_max = 1;
        for (const auto& [k, n] : hist) {
            bars.emplace_back(std::to_string(k), static_cast<double>(n));
            y_max = std::max(y_max, static_cast<double>(n));
        }
        pending.emplace_back(out_hist,
                             bar_chart_svg("Concepts by phrase-variant count", bars, y_max, hash));
    }
    if (pending.empty())
        throw std::runtime_error("nothing to plot: pass --out-f1-svg and/or --out-hist-svg");
    for (const auto& [path, svg] : pending) write_whole_file(path, svg);
    for (const auto& [path, _] : pending) std::cout << "wrote " << path << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept-augmented multi-label clinical coder"};
    app.require_subcommand(1);

    // annotate
    auto* an = app.add_subcommand("annotate", "dictionary-annotate a corpus");
    std::string an_docs, an_dict, an_onto, an_out, an_stats;
    unsigned an_threads = 1;
    an->add_option("--documents", an_docs, "documents.jsonl")->required();
    an->add_option("--dictionary", an_dict, "dictionary.tsv")->required();
    an->add_option("--ontology", an_onto, "ontology.tsv (validates dictionary codes)");
    an->add_option("--out-annotations", an_out, "output annotations.jsonl")->required();
    an->add_option("--out-stats", an_stats, "output coverage stats json");
    an->add_option("--threads", an_threads, "worker threads");

    // simulate
    auto* si = app.add_subcommand("simulate", "generate a synthetic corpus bundle");
    SyntheticSpec spec;
    std::size_t si_variants = 1;
    std::string si_out = "synthetic";
    si->add_option("--vocab-size", spec.vocab_size, "filler vocabulary size");
    si->add_option("--concepts", spec.concept_count, "concept count");
    si->add_option("--labels", spec.label_count, "label count");
    si->add_option("--train-docs", spec.train_docs, "training documents");
    si->add_option("--dev-docs", spec.dev_docs, "dev documents");
    si->add_option("--test-docs", spec.test_docs, "test documents");
    si->add_option("--mean-doc-length", spec.mean_doc_length, "mean tokens per document");
    si->add_option("--coverage", spec.coverage, "fraction of tokens annotated");
    si->add_option("--variants", si_variants, "surface phrases per concept");
    si->add_option("--label-signal", spec.label_signal, "label firing probability");
    si->add_option("--specificity-mismatch", spec.specificity_mismatch,
                   "probability an annotation is lifted to its parent code");
    si->add_option("--concepts-per-label", spec.concepts_per_label, "predictive concepts per label");
    si->add_option("--seed", spec.seed, "generator seed");
    si->add_option("--out-dir", si_out, "output directory");

    // train
    auto* tr = app.add_subcommand("train", "train a model on the train split");
    std::string tr_docs, tr_ann, tr_labels, tr_onto, tr_split, tr_ckpt, tr_log;
    ModelOpts tr_mopts;
    TrainOpts tr_topts;
    tr->add_option("--documents", tr_docs, "documents.jsonl")->required();
    tr->add_option("--annotations", tr_ann, "annotations.jsonl");
    tr->add_option("--labels", tr_labels, "labels.txt")->required();
    tr->add_option("--ontology", tr_onto, "ontology.tsv");
    tr->add_option("--split", tr_split, "split.json")->required();
    tr->add_option("--out-checkpoint", tr_ckpt, "output checkpoint path")->required();
    tr->add_option("--out-log", tr_log, "output per-epoch training log (jsonl)");
    tr_mopts.add_to(tr);
    tr_topts.add_to(tr);

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "score a checkpoint on a corpus");
    std::string ev_docs, ev_ann, ev_labels, ev_split, ev_split_name = "test", ev_ckpt, ev_out;
    ev->add_option("--documents", ev_docs, "documents.jsonl")->required();
    ev->add_option("--annotations", ev_ann, "annotations.jsonl (only needed by concept policies)");
    ev->add_option("--labels", ev_labels, "labels.txt (must match the checkpoint)")->required();
    ev->add_option("--split", ev_split, "split.json (enables bucketed F1 via train counts)");
    ev->add_option("--split-name", ev_split_name, "train | dev | test")
        ->check(CLI::IsMember({"train", "dev", "test"}));
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
    ev->add_option("--out-metrics", ev_out, "output metrics.json")->required();

    // sweep-lambda
    auto* sw = app.add_subcommand("sweep-lambda",
                                  "train one model per lambda on the default grid");
    std::string sw_docs, sw_ann, sw_labels, sw_onto, sw_split, sw_out;
    ModelOpts sw_mopts;
    TrainOpts sw_topts;
    sw->add_option("--documents", sw_docs, "documents.jsonl")->required();
    sw->add_option("--annotations", sw_ann, "annotations.jsonl")->required();
    sw->add_option("--labels", sw_labels, "labels.txt")->required();
    sw->add_option("--ontology", sw_onto, "ontology.tsv");
    sw->add_option("--split", sw_split, "split.json")->required();
    sw->add_option("--out-csv", sw_out, "output sweep csv")->required();
    sw_mopts.add_to(sw);
    sw_topts.add_to(sw);

    // plot
    auto* pl = app.add_subcommand("plot", "render result figures as svg");
    std::string pl_metrics, pl_stats, pl_f1, pl_hist;
    pl->add_option("--metrics", pl_metrics, "metrics.json from evaluate");
    pl->add_option("--stats", pl_stats, "stats.json from simulate or annotate");
    pl->add_option("--out-f1-svg", pl_f1, "bucketed-F1 bar chart");
    pl->add_option("--out-hist-svg", pl_hist, "phrases-per-concept histogram");

    CLI11_PARSE(app, argc, argv);

    try {
        const std::string hash = config_hash_of(app);
        if (*an) return cmd_annotate(an_docs, an_dict, an_onto, an_out, an_stats, an_threads, hash);
        if (*si) {
            spec.variants_per_concept = VariantDistribution::constant(si_variants);
            return cmd_simulate(spec, si_out, hash);
        }
        if (*tr) {
            auto bundle = load_bundle(tr_docs, tr_ann, tr_labels, tr_onto, tr_split);
            return cmd_train(bundle, tr_mopts, tr_topts, tr_ckpt, tr_log, hash);
        }
        if (*ev)
            return cmd_evaluate(ev_docs, ev_ann, ev_labels, ev_split, ev_split_name, ev_ckpt,
                                ev_out, hash);
        if (*sw) {
            auto bundle = load_bundle(sw_docs, sw_ann, sw_labels, sw_onto, sw_split);
            return cmd_sweep_lambda(bundle, sw_mopts, sw_topts, sw_out, hash);
        }
        if (*pl) return cmd_plot(pl_metrics, pl_stats, pl_f1, pl_hist, hash);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}
