#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "deepdemand/numcore/tensor.hpp"

namespace deepdemand::numcore {

class Graph;

/// Handle to a node recorded on a Graph.
struct Var {
    Graph* graph = nullptr;
    std::size_t index = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

/// Tape for reverse-mode differentiation. One graph per batch; it is discarded after backward().
/// Parameters enter as leaves and receive their gradient in Parameter::grad.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t)>;

    struct Node {
        Tensor value;
        Tensor grad;
        bool requires_grad = false;
        bool grad_ready = false;
        Parameter* parameter = nullptr;
        BackwardFn backward;
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value) {
        nodes_.push_back(Node{std::move(value), {}, false, false, nullptr, {}});
        return {this, nodes_.size() - 1};
    }

    Var parameter(Parameter& p) {
        nodes_.push_back(Node{p.value, {}, true, false, &p, {}});
        return {this, nodes_.size() - 1};
    }

    /// Records an op. `backward` reads grad(self) and accumulates into its inputs via accumulate().
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (const Var& v : inputs) needs = needs || nodes_[v.index].requires_grad;
        nodes_.push_back(Node{std::move(value), {}, needs, false, nullptr, needs ? std::move(backward) : BackwardFn{}});
        return {this, nodes_.size() - 1};
    }

    const Tensor& value(Var v) const { return nodes_[v.index].value; }
    const Tensor& value(std::size_t i) const { return nodes_[i].value; }
    bool requires_grad(Var v) const { return nodes_[v.index].requires_grad; }

    /// Gradient of the last backward() loss w.r.t. node v (zeros if unreachable).
    Tensor grad(Var v) const {
        const Node& n = nodes_[v.index];
        return n.grad_ready ? n.grad : Tensor::zeros_like(n.value);
    }

    const Tensor& out_grad(std::size_t self) const { return nodes_[self].grad; }

    /// Mutable gradient buffer of an input, allocated on first use. Null if the input needs no gradient.
    Tensor* accumulate(Var input) {
        Node& n = nodes_[input.index];
        if (!n.requires_grad) return nullptr;
        if (!n.grad_ready) {
            n.grad = Tensor::zeros_like(n.value);
            n.grad_ready = true;
        }
        return &n.grad;
    }

    void backward(Var loss) {
        Node& root = nodes_[loss.index];
        if (root.value.size() != 1)
            throw ContractError("backward() requires a scalar loss, got shape " + shape_string(root.value.shape()));
        for (Node& n : nodes_) n.grad_ready = false;
        root.grad = Tensor(root.value.shape(), 1.0);
        root.grad_ready = true;
        for (std::size_t i = loss.index + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.grad_ready || !n.requires_grad) continue;
            if (n.backward) n.backward(*this, i);
            if (n.parameter) {
                auto dst = n.parameter->grad.values();
                auto src = n.grad.values();
                for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
            }
        }
    }

    std::size_t size() const noexcept { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->value(*this); }

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

inline void add_into(Tensor* dst, const Tensor& src, double scale = 1.0) {
    if (!dst) return;
    auto d = dst->values();
    auto s = src.values();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += scale * s[i];
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

inline ConstMapMat as_matrix(const Tensor& t) {
    return ConstMapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
inline MapMat as_matrix(Tensor& t) {
    return MapMat(t.data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}

template <typename F, typename DF>
Var unary(Var a, F f, DF df) {
    Graph& g = *a.graph;
    const Tensor& x = a.value();
    Tensor out = Tensor::zeros_like(x);
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
    return g.record(std::move(out), {a}, [a, df](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        const Tensor& x = g.value(a);
        const Tensor& y = g.value(self);
        const Tensor& gy = g.out_grad(self);
        for (std::size_t i = 0; i < x.size(); ++i) (*ga)[i] += gy[i] * df(x[i], y[i]);
    });
}

}  // namespace detail

inline Var add(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    detail::add_into(&out, b.value());
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        detail::add_into(g.accumulate(a), g.out_grad(self));
        detail::add_into(g.accumulate(b), g.out_grad(self));
    });
}

inline Var sub(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    detail::add_into(&out, b.value(), -1.0);
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        detail::add_into(g.accumulate(a), g.out_grad(self));
        detail::add_into(g.accumulate(b), g.out_grad(self), -1.0);
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    detail::require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        if (Tensor* ga = g.accumulate(a))
            for (std::size_t i = 0; i < gy.size(); ++i) (*ga)[i] += gy[i] * g.value(b)[i];
        if (Tensor* gb = g.accumulate(b))
            for (std::size_t i = 0; i < gy.size(); ++i) (*gb)[i] += gy[i] * g.value(a)[i];
    });
}

inline Var scale(Var a, double s) {
    return detail::unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

inline Var add_scalar(Var a, double s) {
    return detail::unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var square(Var a) {
    return detail::unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

inline Var relu(Var a) {
    return detail::unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                         [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var softplus(Var a) {
    return detail::unary(a, [](double x) { return numcore::softplus(x); },
                         [](double x, double) { return sigmoid(x); });
}

inline Var tanh(Var a) {
    return detail::unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var exp(Var a) {
    return detail::unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

inline Var log(Var a) {
    return detail::unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

/// Matrix product of a [n x k] and b [k x m].
inline Var matmul(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
        throw ShapeError("matmul: " + shape_string(A.shape()) + " x " + shape_string(B.shape()));
    Tensor out(Shape{A.rows(), B.cols()});
    detail::as_matrix(out).noalias() = detail::as_matrix(A) * detail::as_matrix(B);
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        auto gy = detail::as_matrix(g.out_grad(self));
        if (Tensor* ga = g.accumulate(a)) detail::as_matrix(*ga).noalias() += gy * detail::as_matrix(g.value(b)).transpose();
        if (Tensor* gb = g.accumulate(b)) detail::as_matrix(*gb).noalias() += detail::as_matrix(g.value(a)).transpose() * gy;
    });
}

/// x [n x m] + bias [m], broadcast over rows.
inline Var add_bias(Var x, Var bias) {
    const Tensor& X = x.value();
    const Tensor& b = bias.value();
    if (X.rank() != 2 || b.rank() != 1 || b.size() != X.cols())
        throw ShapeError("add_bias: " + shape_string(X.shape()) + " + " + shape_string(b.shape()));
    Tensor out = X;
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += b[c];
    return x.graph->record(std::move(out), {x, bias}, [x, bias](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        detail::add_into(g.accumulate(x), gy);
        if (Tensor* gb = g.accumulate(bias))
            for (std::size_t r = 0; r < gy.rows(); ++r)
                for (std::size_t c = 0; c < gy.cols(); ++c) (*gb)[c] += gy.at(r, c);
    });
}

inline Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.graph->record(std::move(out), {a}, [a](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        auto src = g.out_grad(self).values();
        for (std::size_t i = 0; i < src.size(); ++i) (*ga)[i] += src[i];
    });
}

inline Var sum(Var a) {
    double s = 0.0;
    for (double v : a.value().values()) s += v;
    return a.graph->record(Tensor::scalar(s), {a}, [a](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        const double gy = g.out_grad(self)[0];
        for (double& v : ga->values()) v += gy;
    });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

/// Sum of a elementwise-weighted by constant weights of the same size.
inline Var weighted_sum(Var a, std::vector<double> weights) {
    if (weights.size() != a.value().size())
        throw ShapeError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                         shape_string(a.value().shape()));
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) s += weights[i] * a.value()[i];
    return a.graph->record(Tensor::scalar(s), {a}, [a, w = std::move(weights)](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        const double gy = g.out_grad(self)[0];
        for (std::size_t i = 0; i < w.size(); ++i) (*ga)[i] += gy * w[i];
    });
}

/// Row-wise inner products of two [n x m] matrices -> [n].
inline Var row_dot(Var a, Var b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    detail::require_same_shape(A, B, "row_dot");
    Tensor out(Shape{A.rows()});
    for (std::size_t r = 0; r < A.rows(); ++r) out[r] = dot(A.row(r), B.row(r));
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, std::size_t self) {
        const Tensor& gy = g.out_grad(self);
        const Tensor& A = g.value(a);
        const Tensor& B = g.value(b);
        Tensor* ga = g.accumulate(a);
        Tensor* gb = g.accumulate(b);
        for (std::size_t r = 0; r < A.rows(); ++r)
            for (std::size_t c = 0; c < A.cols(); ++c) {
                if (ga) ga->at(r, c) += gy[r] * B.at(r, c);
                if (gb) gb->at(r, c) += gy[r] * A.at(r, c);
            }
    });
}

/// Scales every row of a [n x m] to unit Euclidean norm. A zero row raises NumericalError naming the row.
inline Var row_normalize(Var a) {
    const Tensor& A = a.value();
    if (A.rank() != 2) throw ShapeError("row_normalize expects a matrix, got " + shape_string(A.shape()));
    Tensor out = A;
    std::vector<double> norms(A.rows());
    for (std::size_t r = 0; r < A.rows(); ++r) {
        norms[r] = norm2(A.row(r));
        if (!(norms[r] > 0.0)) throw NumericalError("row_normalize: row " + std::to_string(r) + " has zero norm");
        for (double& v : out.row(r)) v /= norms[r];
    }
    return a.graph->record(std::move(out), {a}, [a, norms = std::move(norms)](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        const Tensor& y = g.value(self);
        const Tensor& gy = g.out_grad(self);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            const double proj = dot(y.row(r), gy.row(r));
            for (std::size_t c = 0; c < y.cols(); ++c)
                ga->at(r, c) += (gy.at(r, c) - proj * y.at(r, c)) / norms[r];
        }
    });
}

/// Rows of a selected by index, in order (duplicates allowed).
inline Var gather_rows(Var a, std::vector<std::size_t> idx) {
    const Tensor& A = a.value();
    if (A.rank() != 2) throw ShapeError("gather_rows expects a matrix");
    Tensor out(Shape{idx.size(), A.cols()});
    for (std::size_t k = 0; k < idx.size(); ++k) {
        if (idx[k] >= A.rows()) throw ShapeError("gather_rows: row " + std::to_string(idx[k]) + " out of range");
        std::copy(A.row(idx[k]).begin(), A.row(idx[k]).end(), out.row(k).begin());
    }
    return a.graph->record(std::move(out), {a}, [a, idx = std::move(idx)](Graph& g, std::size_t self) {
        Tensor* ga = g.accumulate(a);
        if (!ga) return;
        const Tensor& gy = g.out_grad(self);
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (std::size_t c = 0; c < gy.cols(); ++c) ga->at(idx[k], c) += gy.at(k, c);
    });
}

}  // namespace deepdemand::numcore
