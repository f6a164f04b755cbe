#include "doctest.h"

#include "clincoder/autograd.hpp"

using namespace clincoder;
using namespace clincoder::ag;

namespace {

Mat random_mat(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double range = 1.0) {
    return Mat::NullaryExpr(r, c, [&]() { return rand_uniform_sym(rng, range); });
}

// central-difference gradient of a scalar-valued graph builder w.r.t. one
// input matrix
template <class BuildLoss>
void check_gradient(Mat& input, BuildLoss&& build, double eps = 1e-6, double tol = 1e-5) {
    Tape t;
    auto leaf = t.leaf(input, true);
    auto loss = build(t, leaf);
    t.backward(loss);
    Mat analytic = leaf->grad;
    for (Eigen::Index i = 0; i < input.rows(); ++i)
        for (Eigen::Index j = 0; j < input.cols(); ++j) {
            const double orig = input(i, j);
            input(i, j) = orig + eps;
            Tape tp;
            double up = build(tp, tp.leaf(input, false))->value(0, 0);
            input(i, j) = orig - eps;
            Tape tm;
            double dn = build(tm, tm.leaf(input, false))->value(0, 0);
            input(i, j) = orig;
            const double numeric = (up - dn) / (2 * eps);
            const double scale = std::max({1.0, std::abs(numeric), std::abs(analytic(i, j))});
            CHECK(std::abs(analytic(i, j) - numeric) / scale < tol);
        }
}

} // namespace

TEST_CASE("matmul and add gradients") {
    std::mt19937_64 rng(1);
    Mat a = random_mat(rng, 3, 4);
    Mat b = random_mat(rng, 4, 2);
    check_gradient(a, [&](Tape& t, Var x) {
        auto bb = t.constant(b);
        return sum(t, matmul(t, x, bb));
    });
    check_gradient(b, [&](Tape& t, Var x) {
        auto aa = t.constant(a);
        return sum(t, add(t, matmul(t, aa, x), matmul(t, aa, x)));
    });
}

TEST_CASE("nonlinearity gradients") {
    std::mt19937_64 rng(2);
    Mat a = random_mat(rng, 3, 3) + Mat::Constant(3, 3, 0.1); // keep off the relu kink
    check_gradient(a, [](Tape& t, Var x) { return sum(t, relu(t, x)); });
    check_gradient(a, [](Tape& t, Var x) { return sum(t, ag::tanh(t, x)); });
    check_gradient(a, [](Tape& t, Var x) { return sum(t, sigmoid(t, x)); });
}

TEST_CASE("softmax_rows gradient and masking") {
    std::mt19937_64 rng(3);
    Mat a = random_mat(rng, 2, 5);
    Mat w = random_mat(rng, 2, 5);
    check_gradient(a, [&](Tape& t, Var x) {
        return sum(t, cmul(t, softmax_rows(t, x), t.constant(w)));
    });

    std::vector<char> valid{1, 1, 0, 1, 0};
    Tape t;
    auto s = softmax_rows(t, t.constant(a), &valid);
    for (Eigen::Index i = 0; i < 2; ++i) {
        CHECK(s->value(i, 2) == 0.0);
        CHECK(s->value(i, 4) == 0.0);
        CHECK(s->value.row(i).sum() == doctest::Approx(1.0));
    }
}

TEST_CASE("gather ops route gradients to the right rows") {
    std::mt19937_64 rng(4);
    Mat table = random_mat(rng, 6, 3);
    std::vector<std::size_t> idx{1, 4, 1, 0};
    Mat w = random_mat(rng, 3, 4);
    check_gradient(table, [&](Tape& t, Var x) {
        return sum(t, cmul(t, gather_columns(t, x, idx), t.constant(w)));
    });

    Mat vec = random_mat(rng, 5, 1);
    Mat rw = random_mat(rng, 1, 3);
    std::vector<std::size_t> ridx{2, 2, 4};
    check_gradient(vec, [&](Tape& t, Var x) {
        return sum(t, cmul(t, gather_row(t, x, ridx), t.constant(rw)));
    });
}

TEST_CASE("im2col preserves length and gradients") {
    std::mt19937_64 rng(5);
    Mat x = random_mat(rng, 3, 7);
    Tape t;
    auto col = im2col(t, t.constant(x), 5);
    CHECK(col->value.rows() == 15);
    CHECK(col->value.cols() == 7);
    // center window of column 0 is the column itself; left part zero-padded
    CHECK(col->value.block(0, 0, 6, 1).isZero());
    CHECK((col->value.block(6, 0, 3, 1) - x.col(0)).isZero(0));

    Mat w = random_mat(rng, 15, 7);
    check_gradient(x, [&](Tape& tt, Var xx) {
        return sum(tt, cmul(tt, im2col(tt, xx, 5), tt.constant(w)));
    });
}

TEST_CASE("colspan_max picks elementwise maxima with correct subgradient") {
    Mat x(2, 3);
    x << 1, 3, 2,
         5, -1, 0;
    Tape t;
    auto m = colspan_max(t, t.constant(x), 0, 3);
    CHECK(m->value(0, 0) == 3);
    CHECK(m->value(1, 0) == 5);
    CHECK_THROWS(colspan_max(t, t.constant(x), 2, 2));

    std::mt19937_64 rng(6);
    Mat y = random_mat(rng, 4, 5);
    Mat w = random_mat(rng, 4, 1);
    check_gradient(y, [&](Tape& tt, Var xx) {
        return sum(tt, cmul(tt, colspan_max(tt, xx, 1, 4), tt.constant(w)));
    });
}

TEST_CASE("concat, slice, scale and transpose gradients") {
    std::mt19937_64 rng(7);
    Mat a = random_mat(rng, 3, 4);
    Mat w = random_mat(rng, 4, 3);
    check_gradient(a, [&](Tape& t, Var x) {
        auto tr = transpose(t, x);
        return sum(t, cmul(t, tr, t.constant(w)));
    });
    Mat w2 = random_mat(rng, 6, 1);
    check_gradient(a, [&](Tape& t, Var x) {
        auto v = vconcat(t, {slice_col(t, x, 0), slice_col(t, x, 2)});
        return sum(t, cmul(t, v, t.constant(w2)));
    });
    Mat row = random_mat(rng, 1, 4);
    check_gradient(a, [&](Tape& t, Var x) {
        return sum(t, colwise_scale(t, x, t.constant(row)));
    });
    check_gradient(row, [&](Tape& t, Var x) {
        return sum(t, colwise_scale(t, t.constant(a), x));
    });
    Mat col = random_mat(rng, 3, 1);
    check_gradient(col, [&](Tape& t, Var x) {
        return sum(t, add_colvec(t, t.constant(a), x));
    });
}

TEST_CASE("bce_with_logits matches the explicit formula and its gradient") {
    std::mt19937_64 rng(8);
    Mat logits = random_mat(rng, 4, 2, 3.0);
    Mat targets(4, 2);
    targets << 1, 0, 0, 1, 1, 1, 0, 0;

    Tape t;
    auto loss = bce_with_logits_mean(t, t.constant(logits), targets);
    double expected = 0;
    for (Eigen::Index j = 0; j < 2; ++j) {
        double doc = 0;
        for (Eigen::Index i = 0; i < 4; ++i) {
            double p = 1.0 / (1.0 + std::exp(-logits(i, j)));
            doc += targets(i, j) ? -std::log(p) : -std::log(1 - p);
        }
        expected += doc / 4.0;
    }
    CHECK(loss->value(0, 0) == doctest::Approx(expected));
    check_gradient(logits, [&](Tape& tt, Var x) { return bce_with_logits_mean(tt, x, targets); });
}

TEST_CASE("nll_from_logits equals -log softmax and its gradient") {
    std::mt19937_64 rng(9);
    Mat logits = random_mat(rng, 5, 1, 2.0);
    Tape t;
    auto loss = nll_from_logits(t, t.constant(logits), 2);
    Eigen::ArrayXd e = (logits.col(0).array() - logits.col(0).maxCoeff()).exp();
    double expected = -std::log(e(2) / e.sum());
    CHECK(loss->value(0, 0) == doctest::Approx(expected));
    check_gradient(logits, [&](Tape& tt, Var x) { return nll_from_logits(tt, x, 2); });
}

TEST_CASE("rowwise_dot gradient") {
    std::mt19937_64 rng(10);
    Mat a = random_mat(rng, 4, 3);
    Mat b = random_mat(rng, 4, 3);
    check_gradient(a, [&](Tape& t, Var x) { return sum(t, rowwise_dot(t, x, t.constant(b))); });
    check_gradient(b, [&](Tape& t, Var x) { return sum(t, rowwise_dot(t, t.constant(a), x)); });
}

TEST_CASE("adam updates nothing when gradients stay zero") {
    ParameterStore store;
    std::mt19937_64 rng(11);
    auto& p = store.create("w", 2, 2, rng, 0.1);
    Mat before = p.value;
    AdamOptimizer opt(0.01);
    for (int i = 0; i < 3; ++i) {
        store.zero_grad();
        opt.step(store);
    }
    CHECK((p.value - before).isZero(0));
}
