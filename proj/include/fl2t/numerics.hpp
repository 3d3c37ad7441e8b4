// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fl2t {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    static Matrix zeros(std::size_t rows, std::size_t cols) { return Matrix(rows, cols); }
    static Matrix identity(std::size_t n);
    static Matrix row_vector(std::span<const double> v);
    static Matrix column_vector(std::span<const double> v);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    Vector row_copy(std::size_t r) const;
    void set_row(std::size_t r, std::span<const double> v);

    std::vector<double>& data() noexcept { return data_; }
    const std::vector<double>& data() const noexcept { return data_; }

    std::string shape_string() const;
    bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool all_finite() const noexcept;

    Matrix transposed() const;

    Matrix& operator+=(const Matrix& o);
    Matrix& operator-=(const Matrix& o);
    Matrix& operator*=(double s);
    /// this += s * o
    Matrix& add_scaled(const Matrix& o, double s);

    friend bool operator==(const Matrix& a, const Matrix& b) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// a * b. Throws ShapeError naming both shapes when a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);
/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

Matrix hadamard(const Matrix& a, const Matrix& b);
Matrix map(const Matrix& m, const std::function<double(double)>& f);

double frobenius_norm(const Matrix& m);
double frobenius_norm_sq(const Matrix& m);
/// Sum of elementwise products, i.e. trace(a^T b).
double frobenius_dot(const Matrix& a, const Matrix& b);

/// Horizontal concatenation [a | b]; rows must agree.
Matrix hconcat(const Matrix& a, const Matrix& b);

double dot(std::span<const double> u, std::span<const double> v);
double norm2(std::span<const double> v);

/// Cosine similarity clamped to [-1, 1]. Throws DomainError on a zero-norm input.
double cosine_sim(std::span<const double> u, std::span<const double> v);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);

/// Central-difference gradient of f at x with step h.
/// Throws DomainError for h <= 0 and EvaluationError (carrying the coordinate)
/// when f is non-finite at a probe point.
Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                        std::span<const double> x, double h = 1e-5);

/// Singular values in descending order (one-sided Jacobi).
Vector singular_values(const Matrix& m);

/// splitmix64 stream with Box-Muller normals.
///
/// The state advances by the golden-gamma increment on each draw and the output is
/// the standard splitmix64 finalizer. Uniforms use the top 53 bits. Normals are
/// produced in pairs; the second of each pair is cached.
class SeededRng {
public:
    explicit SeededRng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1).
    double uniform() noexcept;
    /// Uniform in (0, 1], safe for log().
    double uniform_open() noexcept;
    double normal() noexcept;
    /// Uniform integer in [0, n). n must be > 0.
    std::uint64_t below(std::uint64_t n) noexcept;

    std::uint64_t state() const noexcept { return state_; }

    /// Child generator for an independent stream; does not advance this one.
    SeededRng split(std::uint64_t stream) const noexcept;

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

/// splitmix64 finalizer applied to x.
std::uint64_t mix64(std::uint64_t x) noexcept;

/// Deterministic seed derivation: mixes a base seed with a tag string and indices.
std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t a = 0,
                          std::uint64_t b = 0) noexcept;

/// rows x cols matrix with i.i.d. N(mean, std^2) entries. Throws DomainError if std < 0.
Matrix gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double std);

}  // namespace fl2t
