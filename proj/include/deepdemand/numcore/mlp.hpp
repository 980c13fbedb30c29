#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "deepdemand/numcore/autodiff.hpp"
#include "deepdemand/numcore/rng.hpp"

namespace deepdemand::numcore {

enum class Activation { identity, relu, softplus, tanh };

inline const char* to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::softplus: return "softplus";
        case Activation::tanh: return "tanh";
    }
    return "?";
}

inline Activation activation_from_string(const std::string& s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "softplus") return Activation::softplus;
    if (s == "tanh") return Activation::tanh;
    throw ContractError("unknown activation '" + s + "'");
}

inline double activate(Activation a, double x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::softplus: return softplus(x);
        case Activation::tanh: return std::tanh(x);
    }
    return x;
}

inline Var activate(Activation a, Var x) {
    switch (a) {
        case Activation::identity: return x;
        case Activation::relu: return relu(x);
        case Activation::softplus: return softplus(x);
        case Activation::tanh: return tanh(x);
    }
    return x;
}

/// y = act(x W + b) with W stored [in x out].
struct DenseLayer {
    Parameter weight;
    Parameter bias;
    Activation activation = Activation::identity;

    std::size_t in_dim() const { return weight.value.rows(); }
    std::size_t out_dim() const { return weight.value.cols(); }
};

/// Feedforward network: a chain of dense layers.
class Mlp {
public:
    Mlp() = default;

    /// widths = {in, h1, ..., out}; activations has widths.size()-1 entries. Weights ~ N(0, 2/fan_in) for relu
    /// layers and N(0, 1/fan_in) otherwise; biases start at zero.
    static Mlp make(const std::vector<std::size_t>& widths, const std::vector<Activation>& activations, Rng& rng,
                    const std::string& name = "mlp") {
        if (widths.size() < 2 || activations.size() != widths.size() - 1)
            throw ContractError("Mlp::make: need widths.size()-1 activations");
        Mlp net;
        for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
            const std::size_t in = widths[l], out = widths[l + 1];
            const double sd = std::sqrt((activations[l] == Activation::relu ? 2.0 : 1.0) / static_cast<double>(in));
            Tensor w(Shape{in, out});
            for (double& v : w.values()) v = sd * standard_normal(rng);
            const std::string prefix = name + ".layer" + std::to_string(l);
            net.layers_.push_back(DenseLayer{Parameter(prefix + ".weight", std::move(w)),
                                             Parameter(prefix + ".bias", Tensor(Shape{out})), activations[l]});
        }
        return net;
    }

    static Mlp from_layers(std::vector<DenseLayer> layers) {
        for (std::size_t l = 1; l < layers.size(); ++l)
            if (layers[l].in_dim() != layers[l - 1].out_dim())
                throw ShapeError("Mlp layers do not chain at layer " + std::to_string(l));
        Mlp net;
        net.layers_ = std::move(layers);
        return net;
    }

    bool empty() const noexcept { return layers_.empty(); }
    std::size_t in_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
    std::size_t out_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
    const std::vector<DenseLayer>& layers() const noexcept { return layers_; }
    std::vector<DenseLayer>& layers() noexcept { return layers_; }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (DenseLayer& l : layers_) {
            out.push_back(&l.weight);
            out.push_back(&l.bias);
        }
        return out;
    }

    /// Forward pass on a batch [n x in] without recording.
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 2 || x.cols() != in_dim())
            throw ShapeError("mlp input " + shape_string(x.shape()) + " does not match in-dim " +
                             std::to_string(in_dim()));
        Tensor h = x;
        for (const DenseLayer& l : layers_) {
            Tensor next(Shape{h.rows(), l.out_dim()});
            detail::as_matrix(next).noalias() = detail::as_matrix(h) * detail::as_matrix(l.weight.value);
            for (std::size_t r = 0; r < next.rows(); ++r)
                for (std::size_t c = 0; c < next.cols(); ++c)
                    next.at(r, c) = activate(l.activation, next.at(r, c) + l.bias.value[c]);
            h = std::move(next);
        }
        return h;
    }

    /// Recorded forward pass; parameters enter the graph as leaves.
    Var forward(Graph& g, Var x) {
        if (x.value().rank() != 2 || x.value().cols() != in_dim())
            throw ShapeError("mlp input " + shape_string(x.value().shape()) + " does not match in-dim " +
                             std::to_string(in_dim()));
        Var h = x;
        for (DenseLayer& l : layers_) {
            h = add_bias(matmul(h, g.parameter(l.weight)), g.parameter(l.bias));
            h = activate(l.activation, h);
        }
        return h;
    }

private:
    std::vector<DenseLayer> layers_;
};

/// Single-vector forward pass.
inline std::vector<double> mlp_forward(const Mlp& net, std::span<const double> input) {
    if (input.size() != net.in_dim())
        throw ShapeError("mlp_forward: input length " + std::to_string(input.size()) + " vs in-dim " +
                         std::to_string(net.in_dim()));
    Tensor x(Shape{1, input.size()}, std::vector<double>(input.begin(), input.end()));
    Tensor y = net.forward(x);
    return {y.values().begin(), y.values().end()};
}

}  // namespace deepdemand::numcore
