#include "doctest.h"

#include "clincoder/multitask.hpp"
#include "clincoder/synthetic.hpp"

using namespace clincoder;

namespace {

struct Fixture {
    ModelConfig cfg;
    Vocabulary vocab;
    ConceptVocabulary concepts;
    LabelSpace labels{{"c1", "c2", "c3"}};
    Ontology ontology;

    Fixture() {
        cfg.embed_dim = 8;
        cfg.conv_dim = 6;
        cfg.kernel_width = 3;
        cfg.attention_hidden = 4;
        cfg.dropout = 0.0;
        cfg.learning_rate = 0.01;
        cfg.batch_size = 4;
        vocab = Vocabulary::from_tokens({"apnea", "failure", "heart", "sleep", "the"});
        ontology.add_code("root");
        ontology.add_edge("c1", "root");
        ontology.add_edge("c2", "root");
        ontology.add_edge("c3", "c2");
        concepts = ConceptVocabulary::from_codes({"c1", "c2", "c3", "root"});
    }

    Model make(const std::string& policy, AuxConfig aux = {}, std::uint64_t seed = 7) const {
        auto gates = GateTable::from_keys(
            {GateTable::key(Vocabulary::kUnk, ConceptVocabulary::kUnk)}, vocab.size(),
            concepts.size());
        return Model(cfg, vocab, concepts, labels, ontology, TokenPolicy::named(policy), gates,
                     {}, {}, aux, seed);
    }

    Document doc(std::string id, std::vector<std::string> toks,
                 std::vector<Annotation> anns = {}, std::set<std::string> lab = {}) const {
        Document d;
        d.doc_id = id;
        d.patient_id = id;
        d.tokens = std::move(toks);
        d.annotations = std::move(anns);
        d.labels = std::move(lab);
        return d;
    }
};

} // namespace

TEST_CASE("span_repr takes the elementwise maximum") {
    Eigen::MatrixXd m(2, 3);
    m << 1, 3, 2,
         5, -4, -1;
    Eigen::VectorXd z = span_repr(m, 0, 2);
    CHECK(z(0) == 3);
    CHECK(z(1) == 5);
    Eigen::VectorXd neg = span_repr(m, 1, 3);
    CHECK(neg(1) == -1); // all-negative rows keep their maximum, not 0
    CHECK_THROWS(span_repr(m, 2, 2));
    CHECK_THROWS(span_repr(m, 0, 9));
}

TEST_CASE("joint_loss reduces to bce when lambda or the span batch is empty") {
    Eigen::MatrixXd probs(1, 2);
    probs << 0.5, 0.5;
    Eigen::MatrixXi gold(1, 2);
    gold << 1, 0;
    const double bce = -std::log(0.5); // mean over 2 labels of two ln2 terms
    CHECK(joint_loss(probs, gold, {}, 5.0) == doctest::Approx(bce));
    CHECK(joint_loss(probs, gold, {1.0, 3.0}, 0.0) == doctest::Approx(bce));
    // lambda = 1, mean nll = ln4
    CHECK(joint_loss(probs, gold, {std::log(4.0)}, 1.0) ==
          doctest::Approx(bce + 1.3862943611198906));
    CHECK_THROWS(joint_loss(probs, Eigen::MatrixXi::Zero(2, 2), {}, 0.0));
}

TEST_CASE("joint_loss is monotone in lambda for a fixed span batch") {
    Eigen::MatrixXd probs(2, 3);
    probs << 0.2, 0.9, 0.4,
             0.7, 0.3, 0.6;
    Eigen::MatrixXi gold(2, 3);
    gold << 0, 1, 0,
            1, 0, 1;
    std::vector<double> nlls{0.5, 1.5, 0.25};
    double prev = joint_loss(probs, gold, nlls, 0.0);
    for (double lambda : kLambdaGrid) {
        double cur = joint_loss(probs, gold, nlls, lambda);
        CHECK(cur > prev);
        prev = cur;
    }
}

TEST_CASE("the lambda grid matches the published sweep") {
    CHECK(kLambdaGrid ==
          std::vector<double>{0.001, 0.01, 0.1, 0.5, 1, 10, 50, 100, 1000});
}

TEST_CASE("early stopping fires after exactly patience non-improving epochs") {
    EarlyStopping es(3);
    CHECK(es.observe(0.5));
    CHECK_FALSE(es.observe(0.4));
    CHECK_FALSE(es.should_stop());
    CHECK_FALSE(es.observe(0.5)); // equal is not an improvement
    CHECK_FALSE(es.should_stop());
    CHECK_FALSE(es.observe(0.45));
    CHECK(es.should_stop());
    CHECK(es.best() == doctest::Approx(0.5));

    // improvement resets the counter
    EarlyStopping es2(2);
    es2.observe(0.1);
    es2.observe(0.05);
    CHECK(es2.observe(0.2));
    CHECK(es2.epochs_since_best() == 0);
    CHECK_FALSE(es2.should_stop());
}

TEST_CASE("tagging accuracy counts spans, not documents") {
    Fixture f;
    AuxConfig aux;
    aux.lambda = 1.0;
    auto m = f.make("baseline", aux);
    std::vector<Document> docs;
    docs.push_back(f.doc("a", {"heart", "failure"}, {{0, 1, "c1"}, {1, 2, "c2"}}));
    docs.push_back(f.doc("b", {"apnea", "sleep"}, {{0, 1, "c3"}, {1, 2, "c1"}}));
    double acc = tagging_accuracy(m, docs);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
    // recount manually from the aux softmax argmax
    std::size_t correct = 0, total = 0;
    for (const auto& d : docs) {
        ag::Tape t;
        Model::PassContext ctx;
        ctx.tape = &t;
        ctx.requires_grad = false;
        auto a = align(d, d.annotations);
        auto fwd = m.forward(ctx, d, &a);
        for (const auto& span : d.annotations) {
            auto p = m.aux_forward(fwd, span);
            Eigen::Index argmax = 0;
            p.maxCoeff(&argmax);
            if (static_cast<std::size_t>(argmax) == m.concepts().lookup(span.code)) ++correct;
            ++total;
        }
        m.discard_bindings();
    }
    CHECK(total == 4);
    CHECK(acc == doctest::Approx(static_cast<double>(correct) / 4.0));

    CHECK_THROWS_WITH(tagging_accuracy(m, {f.doc("c", {"heart"})}), "no spans");
}

TEST_CASE("aux_forward is a softmax over the concept vocabulary") {
    Fixture f;
    auto m = f.make("baseline");
    auto d = f.doc("a", {"heart", "failure", "the"}, {{0, 2, "c1"}});
    ag::Tape t;
    Model::PassContext ctx;
    ctx.tape = &t;
    ctx.requires_grad = false;
    auto fwd = m.forward(ctx, d, nullptr);
    auto p = m.aux_forward(fwd, d.annotations[0]);
    m.discard_bindings();
    CHECK(p.size() == static_cast<Eigen::Index>(f.concepts.size()));
    CHECK(p.sum() == doctest::Approx(1.0));
    CHECK(p.minCoeff() > 0.0);

    // zeroed linear head: exactly uniform
    m.params().get("aux_lin_w").value.setZero();
    m.params().get("aux_lin_b").value.setZero();
    ag::Tape t2;
    ctx.tape = &t2;
    auto fwd2 = m.forward(ctx, d, nullptr);
    auto u = m.aux_forward(fwd2, d.annotations[0]);
    m.discard_bindings();
    for (Eigen::Index i = 0; i < u.size(); ++i)
        CHECK(u(i) == doctest::Approx(1.0 / static_cast<double>(f.concepts.size())));
}

TEST_CASE("training loop runs, logs, and restores the best epoch") {
    Fixture f;
    auto m = f.make("baseline");
    std::vector<Document> train_set{
        f.doc("a", {"heart", "failure", "the"}, {}, {"c1"}),
        f.doc("b", {"sleep", "apnea", "the"}, {}, {"c2"}),
        f.doc("c", {"heart", "failure"}, {}, {"c1"}),
        f.doc("d", {"apnea"}, {}, {"c2"}),
    };
    std::vector<Document> dev_set{
        f.doc("e", {"heart", "failure"}, {}, {"c1"}),
        f.doc("f", {"sleep", "apnea"}, {}, {"c2"}),
    };
    TrainerConfig tc;
    tc.max_epochs = 12;
    tc.patience = 4;
    auto res = train(m, train_set, dev_set, tc);
    REQUIRE_FALSE(res.log.empty());
    CHECK(res.log.size() <= 12);
    CHECK(res.best_epoch >= 1);
    for (std::size_t i = 0; i < res.log.size(); ++i) {
        CHECK(res.log[i].epoch == i + 1);
        CHECK(res.log[i].tagging_acc == 0.0); // lambda == 0
    }
    // restored parameters reproduce the recorded best dev P@k
    Eigen::MatrixXd scores = m.predict(dev_set);
    CHECK(p_at_k(scores, gold_matrix(dev_set, m.labels()), 3) ==
          doctest::Approx(res.best_dev_p_at_k));

    CHECK_THROWS(train(m, {}, dev_set, tc));
    CHECK_THROWS(train(m, train_set, {}, tc));
}

TEST_CASE("lambda > 0 without annotations is rejected") {
    Fixture f;
    AuxConfig aux;
    aux.lambda = 0.5;
    auto m = f.make("baseline", aux);
    std::vector<Document> train_set{f.doc("a", {"heart"}, {}, {"c1"})};
    std::vector<Document> dev_set{f.doc("b", {"heart"}, {}, {"c1"})};
    TrainerConfig tc;
    tc.max_epochs = 1;
    CHECK_THROWS_WITH(train(m, train_set, dev_set, tc),
                      doctest::Contains("requires training annotations"));
}

TEST_CASE("training is deterministic given the seed") {
    Fixture f;
    std::vector<Document> train_set{
        f.doc("a", {"heart", "failure"}, {{0, 1, "c1"}}, {"c1"}),
        f.doc("b", {"sleep", "apnea"}, {{1, 2, "c2"}}, {"c2"}),
    };
    std::vector<Document> dev_set{f.doc("c", {"heart"}, {}, {"c1"})};
    TrainerConfig tc;
    tc.max_epochs = 3;
    AuxConfig aux;
    aux.lambda = 0.5;

    auto m1 = f.make("linear-combination", aux);
    auto m2 = f.make("linear-combination", aux);
    auto r1 = train(m1, train_set, dev_set, tc);
    auto r2 = train(m2, train_set, dev_set, tc);
    REQUIRE(r1.log.size() == r2.log.size());
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].loss == r2.log[i].loss);
        CHECK(r1.log[i].tagging_acc == r2.log[i].tagging_acc);
    }
    CHECK((m1.params().get("conv_w").value - m2.params().get("conv_w").value).isZero(0));
}

TEST_CASE("aux gradient check through the shared representation") {
    Fixture f;
    AuxConfig aux;
    aux.lambda = 1.0;
    aux.head = AuxHead::Mlp;
    aux.hidden = 5;
    auto m = f.make("linear-combination", aux);
    auto d = f.doc("a", {"heart", "failure", "apnea"}, {{0, 2, "c1"}, {2, 3, "c2"}});
    auto a = align(d, d.annotations);

    auto loss_value = [&]() {
        ag::Tape t;
        Model::PassContext ctx;
        ctx.tape = &t;
        ctx.requires_grad = false;
        auto fwd = m.forward(ctx, d, &a);
        double total = 0;
        for (const auto& span : d.annotations) {
            auto logits = m.aux_logits(t, fwd, span, false);
            auto nll = ag::nll_from_logits(t, logits, m.concepts().lookup(span.code));
            total += nll->value(0, 0);
        }
        m.discard_bindings();
        return total;
    };

    // analytic gradients
    {
        ag::Tape t;
        Model::PassContext ctx;
        ctx.tape = &t;
        auto fwd = m.forward(ctx, d, &a);
        ag::Var total;
        for (const auto& span : d.annotations) {
            auto logits = m.aux_logits(t, fwd, span);
            auto nll = ag::nll_from_logits(t, logits, m.concepts().lookup(span.code));
            total = total ? ag::add(t, total, nll) : nll;
        }
        m.params().zero_grad();
        t.backward(total);
        m.collect_gradients();
    }

    const double eps = 1e-6;
    for (const char* name : {"word_emb", "concept_emb", "gates", "aux_w1", "aux_w2", "aux_b2"}) {
        auto& p = m.params().get(name);
        Eigen::MatrixXd analytic = p.grad;
        std::mt19937_64 pick(fnv1a(name));
        for (int rep = 0; rep < 5; ++rep) {
            const auto i = static_cast<Eigen::Index>(
                rand_index(pick, static_cast<std::size_t>(p.value.rows())));
            const auto j = static_cast<Eigen::Index>(
                rand_index(pick, static_cast<std::size_t>(p.value.cols())));
            const double orig = p.value(i, j);
            p.value(i, j) = orig + eps;
            const double up = loss_value();
            p.value(i, j) = orig - eps;
            const double dn = loss_value();
            p.value(i, j) = orig;
            const double numeric = (up - dn) / (2 * eps);
            const double scale = std::max({1.0, std::abs(numeric), std::abs(analytic(i, j))});
            CHECK(std::abs(analytic(i, j) - numeric) / scale < 1e-4);
        }
    }
}

TEST_CASE("a multitask model overfits span tagging on a tiny synthetic set") {
    SyntheticSpec spec;
    spec.vocab_size = 60;
    spec.concept_count = 8;
    spec.label_count = 4;
    spec.train_docs = 10;
    spec.dev_docs = 2;
    spec.test_docs = 2;
    spec.mean_doc_length = 20;
    spec.coverage = 0.5;
    spec.seed = 3;
    auto corpus = generate_synthetic(spec);

    std::vector<Document> train_set, dev_set;
    for (const auto& d : corpus.documents) {
        bool is_dev = std::find(corpus.split.dev.begin(), corpus.split.dev.end(), d.doc_id) !=
                      corpus.split.dev.end();
        bool is_test = std::find(corpus.split.test.begin(), corpus.split.test.end(), d.doc_id) !=
                       corpus.split.test.end();
        if (is_dev) dev_set.push_back(d);
        else if (!is_test) train_set.push_back(d);
    }

    ModelConfig cfg;
    cfg.embed_dim = 16;
    cfg.conv_dim = 10;
    cfg.kernel_width = 3;
    cfg.attention_hidden = 4;
    cfg.dropout = 0.0;
    cfg.learning_rate = 0.05;
    cfg.batch_size = 5;
    auto vocab = Vocabulary::build(train_set, 1);
    auto concepts = ConceptVocabulary::build(train_set, corpus.ontology, 1);
    AuxConfig aux;
    aux.lambda = 1.0;
    auto gates = GateTable::build(train_set, vocab, concepts, 2);
    Model m(cfg, vocab, concepts, corpus.label_space, corpus.ontology,
            TokenPolicy::named("baseline"), gates, {}, {}, aux, 5);

    TrainerConfig tc;
    tc.max_epochs = 40;
    tc.patience = 40;
    tc.keep_best = false;
    auto res = train(m, train_set, dev_set, tc);
    CHECK(res.tagging_acc_last_epoch > res.tagging_acc_first_epoch);
    CHECK(res.tagging_acc_last_epoch > 0.9);
}
