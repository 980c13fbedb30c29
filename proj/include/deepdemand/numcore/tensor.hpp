#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "deepdemand/errors.hpp"

namespace deepdemand::numcore {

using Shape = std::vector<std::size_t>;

inline std::string shape_string(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor of doubles. Rank 0 is a scalar, rank 1 a vector, rank 2 a matrix.
class Tensor {
public:
    Tensor() : shape_{}, values_(1, 0.0) {}

    explicit Tensor(Shape shape, double fill = 0.0)
        : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (shape_size(shape_) != values_.size())
            throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                             std::to_string(values_.size()) + " values");
    }

    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return Tensor(Shape{n}, std::move(v));
    }
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return Tensor(Shape{rows, cols}, std::move(v));
    }
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    std::size_t rows() const noexcept { return rank() == 0 ? 1 : shape_[0]; }
    std::size_t cols() const noexcept { return rank() < 2 ? 1 : shape_[1]; }

    double& operator[](std::size_t i) noexcept { return values_[i]; }
    double operator[](std::size_t i) const noexcept { return values_[i]; }
    double& at(std::size_t r, std::size_t c) noexcept { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const noexcept { return values_[r * cols() + c]; }
    double item() const {
        if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
        return values_[0];
    }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }
    std::span<double> row(std::size_t r) noexcept { return {values_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const noexcept { return {values_.data() + r * cols(), cols()}; }
    double* data() noexcept { return values_.data(); }
    const double* data() const noexcept { return values_.data(); }

    Tensor reshaped(Shape s) const { return Tensor(std::move(s), values_); }
    void fill(double v) { std::fill(values_.begin(), values_.end(), v); }
    bool all_finite() const {
        for (double v : values_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor& o) const { return shape_ == o.shape_ && values_ == o.values_; }

private:
    Shape shape_;
    std::vector<double> values_;
};

/// A named trainable tensor with its gradient accumulator.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;

    Parameter() = default;
    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(Tensor::zeros_like(value)) {}

    void zero_grad() { grad = Tensor::zeros_like(value); }
};

inline double softplus(double x) noexcept {
    return x > 30.0 ? x : (x < -30.0 ? std::exp(x) : std::log1p(std::exp(x)));
}

inline double sigmoid(double x) noexcept {
    if (x >= 0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw ShapeError("dot product of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

/// Numerically stable log(sum(exp(x))). Empty input gives -inf.
inline double log_sum_exp(std::span<const double> x) {
    double m = -INFINITY;
    for (double v : x) m = std::max(m, v);
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

}  // namespace deepdemand::numcore
