#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "clincoder/common.hpp"

namespace clincoder::ag {

using Mat = Eigen::MatrixXd;

// Dynamic reverse-mode tape over Eigen matrices. Nodes are created through
// the free functions below; Tape::backward runs the recorded closures in
// reverse order. One tape per forward/backward pass; parameters live outside
// the tape and are re-registered as leaves each pass.

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::function<void()> backward; // adds into parents' grad
};

using Var = std::shared_ptr<Node>;

class Tape {
public:
    Var leaf(Mat value, bool requires_grad) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        if (requires_grad) n->grad = Mat::Zero(n->value.rows(), n->value.cols());
        order_.push_back(n);
        return n;
    }

    Var constant(Mat value) { return leaf(std::move(value), false); }

    Var make(Mat value, std::vector<Var> parents, std::function<void()> backward) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        for (const auto& p : parents)
            if (p->requires_grad) { n->requires_grad = true; break; }
        if (n->requires_grad) {
            n->grad = Mat::Zero(n->value.rows(), n->value.cols());
            n->backward = std::move(backward);
        }
        order_.push_back(n);
        return n;
    }

    /// Seeds `root` with gradient 1 (must be 1x1) and runs the tape backward.
    void backward(const Var& root) {
        if (root->value.size() != 1) throw std::runtime_error("backward root must be scalar");
        if (!root->requires_grad) return;
        root->grad.setConstant(1.0);
        for (auto it = order_.rbegin(); it != order_.rend(); ++it)
            if ((*it)->requires_grad && (*it)->backward) (*it)->backward();
    }

    std::size_t size() const { return order_.size(); }

private:
    std::vector<Var> order_;
};

// ---------------------------------------------------------------------------
// ops
//
// Each closure needs access to the result's gradient, so ops capture the
// result node weakly via a two-step helper.
namespace detail {
template <class F>
Var unary(Tape& t, const Var& a, Mat value, F&& df) {
    auto out = t.make(std::move(value), {a}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [a, wout, df = std::forward<F>(df)]() {
            auto o = wout.lock();
            if (a->requires_grad) df(*o, *a);
        };
    }
    return out;
}

template <class F>
Var binary(Tape& t, const Var& a, const Var& b, Mat value, F&& df) {
    auto out = t.make(std::move(value), {a, b}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [a, b, wout, df = std::forward<F>(df)]() {
            auto o = wout.lock();
            df(*o, *a, *b);
        };
    }
    return out;
}
} // namespace detail

inline Var add(Tape& t, const Var& a, const Var& b) {
    return detail::binary(t, a, b, a->value + b->value, [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad += o.grad;
        if (b.requires_grad) b.grad += o.grad;
    });
}

inline Var sub(Tape& t, const Var& a, const Var& b) {
    return detail::binary(t, a, b, a->value - b->value, [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad += o.grad;
        if (b.requires_grad) b.grad -= o.grad;
    });
}

inline Var matmul(Tape& t, const Var& a, const Var& b) {
    return detail::binary(t, a, b, a->value * b->value, [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad += o.grad * b.value.transpose();
        if (b.requires_grad) b.grad += a.value.transpose() * o.grad;
    });
}

inline Var cmul(Tape& t, const Var& a, const Var& b) {
    return detail::binary(t, a, b, a->value.cwiseProduct(b->value), [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad += o.grad.cwiseProduct(b.value);
        if (b.requires_grad) b.grad += o.grad.cwiseProduct(a.value);
    });
}

/// Multiply each column of `a` by the matching entry of row vector `r`.
inline Var colwise_scale(Tape& t, const Var& a, const Var& r) {
    Mat v = a->value.array().rowwise() * r->value.row(0).array();
    return detail::binary(t, a, r, std::move(v), [](Node& o, Node& a, Node& r) {
        if (a.requires_grad) a.grad.array() += o.grad.array().rowwise() * r.value.row(0).array();
        if (r.requires_grad)
            r.grad.row(0) += o.grad.cwiseProduct(a.value).colwise().sum();
    });
}

/// Add column vector `b` to every column of `a`.
inline Var add_colvec(Tape& t, const Var& a, const Var& b) {
    Mat v = a->value.array().colwise() + b->value.col(0).array();
    return detail::binary(t, a, b, std::move(v), [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad += o.grad;
        if (b.requires_grad) b.grad.col(0) += o.grad.rowwise().sum();
    });
}

inline Var scale(Tape& t, const Var& a, double s) {
    return detail::unary(t, a, a->value * s, [s](Node& o, Node& a) { a.grad += o.grad * s; });
}

inline Var relu(Tape& t, const Var& a) {
    return detail::unary(t, a, a->value.cwiseMax(0.0), [](Node& o, Node& a) {
        a.grad.array() += o.grad.array() * (a.value.array() > 0.0).cast<double>();
    });
}

inline Var tanh(Tape& t, const Var& a) {
    Mat v = a->value.array().tanh();
    return detail::unary(t, a, std::move(v), [](Node& o, Node& a) {
        a.grad.array() += o.grad.array() * (1.0 - a.value.array().tanh().square());
    });
}

inline Var sigmoid(Tape& t, const Var& a) {
    Mat v = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
    auto out = detail::unary(t, a, std::move(v), [](Node&, Node&) {});
    std::weak_ptr<Node> wout = out;
    if (out->requires_grad)
        out->backward = [a, wout]() {
            auto o = wout.lock();
            if (a->requires_grad)
                a->grad.array() += o->grad.array() * o->value.array() * (1.0 - o->value.array());
        };
    return out;
}

inline Var sum(Tape& t, const Var& a) {
    Mat v(1, 1);
    v(0, 0) = a->value.sum();
    return detail::unary(t, a, std::move(v), [](Node& o, Node& a) {
        a.grad.array() += o.grad(0, 0);
    });
}

/// Gather rows of `table` (a parameter matrix) into a d x N matrix of
/// column embeddings; row i of the table becomes column j when idx[j] == i.
inline Var gather_columns(Tape& t, const Var& table, const std::vector<std::size_t>& idx) {
    Mat v(table->value.cols(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j)
        v.col(static_cast<Eigen::Index>(j)) =
            table->value.row(static_cast<Eigen::Index>(idx[j])).transpose();
    auto out = t.make(std::move(v), {table}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [table, wout, idx]() {
            auto o = wout.lock();
            for (std::size_t j = 0; j < idx.size(); ++j)
                table->grad.row(static_cast<Eigen::Index>(idx[j])) +=
                    o->grad.col(static_cast<Eigen::Index>(j)).transpose();
        };
    }
    return out;
}

/// Gather scalar entries of a column-vector parameter into a 1 x N row.
inline Var gather_row(Tape& t, const Var& vec, const std::vector<std::size_t>& idx) {
    Mat v(1, static_cast<Eigen::Index>(idx.size()));
    for (std::size_t j = 0; j < idx.size(); ++j)
        v(0, static_cast<Eigen::Index>(j)) = vec->value(static_cast<Eigen::Index>(idx[j]), 0);
    auto out = t.make(std::move(v), {vec}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [vec, wout, idx]() {
            auto o = wout.lock();
            for (std::size_t j = 0; j < idx.size(); ++j)
                vec->grad(static_cast<Eigen::Index>(idx[j]), 0) +=
                    o->grad(0, static_cast<Eigen::Index>(j));
        };
    }
    return out;
}

/// Stack the k columns around each position (zero padded at the edges) into
/// a (k*d) x N matrix, for a same-length convolution via matmul.
inline Var im2col(Tape& t, const Var& x, std::size_t kernel) {
    const auto d = x->value.rows();
    const auto n = x->value.cols();
    const auto half = static_cast<Eigen::Index>(kernel / 2);
    Mat v = Mat::Zero(static_cast<Eigen::Index>(kernel) * d, n);
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index w = 0; w < static_cast<Eigen::Index>(kernel); ++w) {
            Eigen::Index src = j + w - half;
            if (src < 0 || src >= n) continue;
            v.block(w * d, j, d, 1) = x->value.col(src);
        }
    auto out = t.make(std::move(v), {x}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [x, wout, kernel, d, n, half]() {
            auto o = wout.lock();
            for (Eigen::Index j = 0; j < n; ++j)
                for (Eigen::Index w = 0; w < static_cast<Eigen::Index>(kernel); ++w) {
                    Eigen::Index src = j + w - half;
                    if (src < 0 || src >= n) continue;
                    x->grad.col(src) += o->grad.block(w * d, j, d, 1);
                }
        };
    }
    return out;
}

/// Row-wise softmax with an optional column validity mask (0 columns get
/// exactly zero probability and contribute nothing to the normalizer).
inline Var softmax_rows(Tape& t, const Var& a, const std::vector<char>* valid = nullptr) {
    Mat v(a->value.rows(), a->value.cols());
    for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < a->value.cols(); ++j) {
            if (valid && !(*valid)[static_cast<std::size_t>(j)]) continue;
            mx = std::max(mx, a->value(i, j));
        }
        double z = 0;
        for (Eigen::Index j = 0; j < a->value.cols(); ++j) {
            if (valid && !(*valid)[static_cast<std::size_t>(j)]) { v(i, j) = 0; continue; }
            v(i, j) = std::exp(a->value(i, j) - mx);
            z += v(i, j);
        }
        for (Eigen::Index j = 0; j < a->value.cols(); ++j) v(i, j) /= z;
    }
    auto out = t.make(std::move(v), {a}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [a, wout]() {
            auto o = wout.lock();
            for (Eigen::Index i = 0; i < a->value.rows(); ++i) {
                const double dot = o->grad.row(i).dot(o->value.row(i));
                a->grad.row(i).array() +=
                    o->value.row(i).array() * (o->grad.row(i).array() - dot);
            }
        };
    }
    return out;
}

/// Elementwise max over the columns [start, end) of x; subgradient routes to
/// the first argmax entry per row.
inline Var colspan_max(Tape& t, const Var& x, std::size_t start, std::size_t end) {
    if (start >= end || end > static_cast<std::size_t>(x->value.cols()))
        throw std::runtime_error("colspan_max: empty or out-of-range span");
    const auto d = x->value.rows();
    Mat v(d, 1);
    std::vector<Eigen::Index> argmax(static_cast<std::size_t>(d));
    for (Eigen::Index r = 0; r < d; ++r) {
        Eigen::Index best = static_cast<Eigen::Index>(start);
        for (auto j = static_cast<Eigen::Index>(start); j < static_cast<Eigen::Index>(end); ++j)
            if (x->value(r, j) > x->value(r, best)) best = j;
        argmax[static_cast<std::size_t>(r)] = best;
        v(r, 0) = x->value(r, best);
    }
    auto out = t.make(std::move(v), {x}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [x, wout, argmax, d]() {
            auto o = wout.lock();
            for (Eigen::Index r = 0; r < d; ++r)
                x->grad(r, argmax[static_cast<std::size_t>(r)]) += o->grad(r, 0);
        };
    }
    return out;
}

/// Vertical concatenation of column vectors.
inline Var vconcat(Tape& t, const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p->value.rows();
    Mat v(rows, 1);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.block(at, 0, p->value.rows(), 1) = p->value;
        at += p->value.rows();
    }
    auto out = t.make(std::move(v), parts, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [parts, wout]() {
            auto o = wout.lock();
            Eigen::Index at = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) p->grad += o->grad.block(at, 0, p->value.rows(), 1);
                at += p->value.rows();
            }
        };
    }
    return out;
}

/// Horizontal concatenation of equally-tall columns/matrices.
inline Var hconcat(Tape& t, const std::vector<Var>& parts) {
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front()->value.rows();
    for (const auto& p : parts) cols += p->value.cols();
    Mat v(rows, cols);
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        v.block(0, at, rows, p->value.cols()) = p->value;
        at += p->value.cols();
    }
    auto out = t.make(std::move(v), parts, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [parts, wout, rows]() {
            auto o = wout.lock();
            Eigen::Index at = 0;
            for (const auto& p : parts) {
                if (p->requires_grad) p->grad += o->grad.block(0, at, rows, p->value.cols());
                at += p->value.cols();
            }
        };
    }
    return out;
}

inline Var slice_col(Tape& t, const Var& x, std::size_t col) {
    Mat v = x->value.col(static_cast<Eigen::Index>(col));
    auto out = t.make(std::move(v), {x}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [x, wout, col]() {
            auto o = wout.lock();
            x->grad.col(static_cast<Eigen::Index>(col)) += o->grad;
        };
    }
    return out;
}

inline Var transpose(Tape& t, const Var& a) {
    return detail::unary(t, a, a->value.transpose(), [](Node& o, Node& a) {
        a.grad += o.grad.transpose();
    });
}

/// Row-wise dot product of two LxD matrices -> Lx1 column.
inline Var rowwise_dot(Tape& t, const Var& a, const Var& b) {
    Mat v = a->value.cwiseProduct(b->value).rowwise().sum();
    return detail::binary(t, a, b, std::move(v), [](Node& o, Node& a, Node& b) {
        if (a.requires_grad) a.grad.array() += b.value.array().colwise() * o.grad.col(0).array();
        if (b.requires_grad) b.grad.array() += a.value.array().colwise() * o.grad.col(0).array();
    });
}

/// Numerically stable binary cross-entropy from logits, mean over entries of
/// each column (labels), summed over columns (documents). Targets constant.
inline Var bce_with_logits_mean(Tape& t, const Var& logits, const Mat& targets) {
    const auto rows = logits->value.rows();
    const auto cols = logits->value.cols();
    double total = 0;
    for (Eigen::Index j = 0; j < cols; ++j)
        for (Eigen::Index i = 0; i < rows; ++i) {
            const double z = logits->value(i, j), y = targets(i, j);
            // max(z,0) - z*y + log(1 + exp(-|z|))
            total += std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
        }
    Mat v(1, 1);
    v(0, 0) = total / static_cast<double>(rows);
    auto out = t.make(std::move(v), {logits}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [logits, wout, targets, rows]() {
            auto o = wout.lock();
            const double g = o->grad(0, 0) / static_cast<double>(rows);
            logits->grad.array() +=
                g * (1.0 / (1.0 + (-logits->value.array()).exp()) - targets.array());
        };
    }
    return out;
}

/// -log softmax(logits)[target] for a column vector of logits.
inline Var nll_from_logits(Tape& t, const Var& logits, std::size_t target) {
    const auto n = logits->value.rows();
    const double mx = logits->value.col(0).maxCoeff();
    double z = 0;
    for (Eigen::Index i = 0; i < n; ++i) z += std::exp(logits->value(i, 0) - mx);
    const double logz = std::log(z) + mx;
    Mat v(1, 1);
    v(0, 0) = logz - logits->value(static_cast<Eigen::Index>(target), 0);
    auto out = t.make(std::move(v), {logits}, nullptr);
    if (out->requires_grad) {
        std::weak_ptr<Node> wout = out;
        out->backward = [logits, wout, target, logz]() {
            auto o = wout.lock();
            const double g = o->grad(0, 0);
            logits->grad.array() += g * (logits->value.array() - logz).exp();
            logits->grad(static_cast<Eigen::Index>(target), 0) -= g;
        };
    }
    return out;
}

/// Inverted dropout with a caller-provided mask (1/keep or 0 entries).
inline Var apply_mask(Tape& t, const Var& a, const Mat& mask) {
    return detail::unary(t, a, a->value.cwiseProduct(mask), [mask](Node& o, Node& a) {
        a.grad += o.grad.cwiseProduct(mask);
    });
}

// ---------------------------------------------------------------------------
// Parameters and optimizer

struct Parameter {
    std::string name;
    Mat value;
    Mat grad;  // accumulated by the tape leaf registered per pass
    Mat m, v;  // optimizer state
};

class ParameterStore {
public:
    Parameter& create(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                      std::mt19937_64& rng, double init_range) {
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = Mat::NullaryExpr(rows, cols, [&]() { return rand_uniform_sym(rng, init_range); });
        p->grad = Mat::Zero(rows, cols);
        p->m = Mat::Zero(rows, cols);
        p->v = Mat::Zero(rows, cols);
        params_.push_back(std::move(p));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter& create_zero(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        auto p = std::make_unique<Parameter>();
        p->name = name;
        p->value = Mat::Zero(rows, cols);
        p->grad = Mat::Zero(rows, cols);
        p->m = Mat::Zero(rows, cols);
        p->v = Mat::Zero(rows, cols);
        params_.push_back(std::move(p));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }
    const Parameter& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::runtime_error("unknown parameter: " + name);
        return *params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::vector<Parameter*> all() {
        std::vector<Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }
    std::vector<const Parameter*> all() const {
        std::vector<const Parameter*> out;
        out.reserve(params_.size());
        for (auto& p : params_) out.push_back(p.get());
        return out;
    }

    void zero_grad() {
        for (auto& p : params_) p->grad.setZero();
    }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Adam; the learning rate default follows the ported base-model settings.
class AdamOptimizer {
public:
    explicit AdamOptimizer(double lr = 1e-4, double beta1 = 0.9, double beta2 = 0.999,
                           double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(ParameterStore& store) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (Parameter* p : store.all()) {
            p->m = beta1_ * p->m + (1.0 - beta1_) * p->grad;
            p->v = beta2_ * p->v + (1.0 - beta2_) * p->grad.cwiseProduct(p->grad);
            p->value.array() -=
                lr_ * (p->m.array() / bc1) / ((p->v.array() / bc2).sqrt() + eps_);
        }
    }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
};

} // namespace clincoder::ag
