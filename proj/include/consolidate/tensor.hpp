#pragma once

// Dense tensors and the double-precision matrix type used by every numerical
// kernel. Tensors store 32-bit values; all reductions accumulate in 64-bit.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "consolidate/error.hpp"

namespace consolidate {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
    std::string out = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(shape[i]);
    }
    return out + ")";
}

/// Row-major float32 array of rank 1 or 2.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)) {
        check_shape();
        data_.assign(shape_size(shape_), 0.0f);
    }

    Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
        check_shape();
        if (data_.size() != shape_size(shape_)) {
            fail(ErrorCode::shape, "tensor data length " + std::to_string(data_.size()) +
                                       " does not match shape " + shape_string(shape_));
        }
    }

    static Tensor vector(std::vector<float> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
        return Tensor({rows, cols}, std::move(values));
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
    std::size_t cols() const noexcept { return shape_.size() < 2 ? 1 : shape_[1]; }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float& operator[](std::size_t i) noexcept { return data_[i]; }
    float operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols() + c]; }
    float& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols() + c]; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
    }

    /// Bitwise equality of shape and payload.
    friend bool operator==(const Tensor& a, const Tensor& b) noexcept {
        return a.shape_ == b.shape_ && a.data_.size() == b.data_.size() &&
               (a.data_.empty() ||
                std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0);
    }

private:
    void check_shape() const {
        if (shape_.empty() || shape_.size() > 2) {
            fail(ErrorCode::shape, "tensors must be rank 1 or 2, got rank " +
                                       std::to_string(shape_.size()));
        }
        for (auto d : shape_) {
            if (d == 0) fail(ErrorCode::shape, "zero dimension in shape " + shape_string(shape_));
        }
    }

    Shape shape_;
    std::vector<float> data_;
};

inline void require_finite(const Tensor& t, std::string_view what) {
    if (!t.all_finite()) fail(ErrorCode::data, "non-finite value in " + std::string(what));
}

inline double frobenius_norm(std::span<const double> values) {
    double acc = 0.0;
    for (double v : values) acc += v * v;
    return std::sqrt(acc);
}

inline double frobenius_norm(const Tensor& t) {
    double acc = 0.0;
    for (float v : t.data()) acc += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(acc);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline std::vector<double> to_double(std::span<const float> values) {
    return {values.begin(), values.end()};
}

inline std::vector<float> to_float(std::span<const double> values) {
    std::vector<float> out(values.size());
    std::transform(values.begin(), values.end(), out.begin(),
                   [](double v) { return static_cast<float>(v); });
    return out;
}

/// Row-major double matrix for the numerical kernels.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), values(r * c, 0.0) {}
    Matrix(std::size_t r, std::size_t c, std::vector<double> v) : rows(r), cols(c), values(std::move(v)) {
        if (values.size() != r * c) {
            fail(ErrorCode::shape, "matrix data length does not match " + std::to_string(r) + "x" +
                                       std::to_string(c));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    static Matrix from_tensor(const Tensor& t) {
        if (t.rank() != 2) fail(ErrorCode::shape, "expected a matrix, got shape " + shape_string(t.shape()));
        return Matrix(t.rows(), t.cols(), to_double(t.data()));
    }

    Tensor to_tensor() const { return Tensor::matrix(rows, cols, to_float(values)); }

    double operator()(std::size_t r, std::size_t c) const noexcept { return values[r * cols + c]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return values[r * cols + c]; }

    std::span<const double> row(std::size_t r) const noexcept { return {values.data() + r * cols, cols}; }
    std::span<double> row(std::size_t r) noexcept { return {values.data() + r * cols, cols}; }

    Matrix transposed() const {
        Matrix t(cols, rows);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) t(c, r) = (*this)(r, c);
        return t;
    }

    /// Leading `k` columns.
    Matrix left_columns(std::size_t k) const {
        Matrix out(rows, k);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < k; ++c) out(r, c) = (*this)(r, c);
        return out;
    }

    double frobenius() const { return frobenius_norm(values); }

    Matrix& operator+=(const Matrix& o) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] += o.values[i];
        return *this;
    }
    Matrix& operator-=(const Matrix& o) {
        for (std::size_t i = 0; i < values.size(); ++i) values[i] -= o.values[i];
        return *this;
    }
    Matrix& operator*=(double s) {
        for (auto& v : values) v *= s;
        return *this;
    }

    friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
    friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
    friend Matrix operator*(Matrix a, double s) { return a *= s; }
    friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        fail(ErrorCode::shape, "matmul dimension mismatch " + std::to_string(a.rows) + "x" +
                                   std::to_string(a.cols) + " * " + std::to_string(b.rows) + "x" +
                                   std::to_string(b.cols));
    }
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aik * b(k, j);
        }
    }
    return c;
}

/// aᵀ·b without materializing the transpose.
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) fail(ErrorCode::shape, "matmul_tn row mismatch");
    Matrix c(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = a(k, i);
            if (aki == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += aki * b(k, j);
        }
    }
    return c;
}

/// a·bᵀ without materializing the transpose.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols) fail(ErrorCode::shape, "matmul_nt column mismatch");
    Matrix c(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) c(i, j) = dot(a.row(i), b.row(j));
    return c;
}

inline Matrix diag(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
}

/// max |aᵢⱼ − bᵢⱼ|.
inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
    return m;
}

}  // namespace consolidate
