#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "altcast/errors.hpp"

namespace altcast {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major double tensor. Rank 0 is a scalar, rank 1 a vector,
// rank 2 a matrix; nothing in the library needs more.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)), data_(shape_size(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> values)
        : shape_(std::move(shape)), data_(std::move(values)) {
        if (data_.size() != shape_size(shape_))
            throw ShapeMismatch("tensor " + shape_str(shape_) + " expects " +
                                std::to_string(shape_size(shape_)) +
                                " values, got " + std::to_string(data_.size()));
    }

    static Tensor scalar(double v) {
        Tensor t{Shape{}};
        t.data_[0] = v;
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor{std::move(shape)}; }

    static Tensor full(Shape shape, double v) {
        Tensor t{std::move(shape)};
        std::fill(t.data_.begin(), t.data_.end(), v);
        return t;
    }

    static Tensor matrix(std::size_t rows, std::size_t cols,
                         std::initializer_list<double> values) {
        return Tensor{Shape{rows, cols}, std::vector<double>(values)};
    }

    static Tensor vector(std::initializer_list<double> values) {
        std::vector<double> v(values);
        return Tensor{Shape{v.size()}, std::move(v)};
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    // 2-D accessors; rank-1 tensors count as a single row.
    std::size_t rows() const {
        if (rank() == 2) return shape_[0];
        if (rank() <= 1) return 1;
        throw ShapeMismatch("rows() on rank-" + std::to_string(rank()) + " tensor");
    }
    std::size_t cols() const {
        if (rank() == 2) return shape_[1];
        if (rank() == 1) return shape_[0];
        if (rank() == 0) return 1;
        throw ShapeMismatch("cols() on rank-" + std::to_string(rank()) + " tensor");
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double scalar_value() const {
        if (size() != 1)
            throw ShapeMismatch("scalar_value() on tensor " + shape_str(shape_));
        return data_[0];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool operator==(const Tensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

private:
    Shape shape_;
    std::vector<double> data_;
};

namespace detail {

using EigenMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstEigenMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstEigenMap as_matrix(const Tensor& t, std::size_t rows, std::size_t cols) {
    return ConstEigenMap(t.data(), static_cast<Eigen::Index>(rows),
                         static_cast<Eigen::Index>(cols));
}

// out (+)= op_a(a) * op_b(b), with optional transposes. Shapes are the
// caller's responsibility; this is the one hot loop in the library.
inline void gemm(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& out,
                 bool accumulate = false) {
    const std::size_t m = ta ? a.cols() : a.rows();
    const std::size_t k = ta ? a.rows() : a.cols();
    const std::size_t n = tb ? b.rows() : b.cols();
    auto am = as_matrix(a, a.rows(), a.cols());
    auto bm = as_matrix(b, b.rows(), b.cols());
    EigenMap om(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    (void)k;
    if (!accumulate) om.setZero();
    if (!ta && !tb)
        om.noalias() += am * bm;
    else if (ta && !tb)
        om.noalias() += am.transpose() * bm;
    else if (!ta && tb)
        om.noalias() += am * bm.transpose();
    else
        om.noalias() += am.transpose() * bm.transpose();
}

}  // namespace detail

}  // namespace altcast
