// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "fl2t/errors.hpp"

namespace fl2t {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) {
            throw ShapeError("ragged initializer list");
        }
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = 1.0;
    }
    return m;
}

Matrix Matrix::row_vector(std::span<const double> v) {
    return Matrix(1, v.size(), std::vector<double>(v.begin(), v.end()));
}

Matrix Matrix::column_vector(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
}

Vector Matrix::row_copy(std::size_t r) const {
    auto s = row(r);
    return Vector(s.begin(), s.end());
}

void Matrix::set_row(std::size_t r, std::span<const double> v) {
    if (v.size() != cols_) {
        throw ShapeError("set_row: length " + std::to_string(v.size()) + " into " +
                         shape_string());
    }
    std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

std::string Matrix::shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
}

bool Matrix::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i) {
        for (std::size_t j = 0; j < cols_; ++j) {
            t(j, i) = (*this)(i, j);
        }
    }
    return t;
}

namespace {
void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
    }
}
}  // namespace

Matrix& Matrix::operator+=(const Matrix& o) {
    require_same_shape(*this, o, "add");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += o.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& o) {
    require_same_shape(*this, o, "sub");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] -= o.data_[i];
    }
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) {
        v *= s;
    }
    return *this;
}

Matrix& Matrix::add_scaled(const Matrix& o, double s) {
    require_same_shape(*this, o, "add_scaled");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += s * o.data_[i];
    }
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul: cannot multiply " + a.shape_string() + " by " +
                         b.shape_string());
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* crow = c.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = a(i, p);
            if (aip == 0.0) {
                continue;
            }
            const double* brow = b.row(p).data();
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("matmul_tn: cannot multiply transpose of " + a.shape_string() +
                         " by " + b.shape_string());
    }
    const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
    Matrix c(n, m);
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.row(p).data();
        const double* brow = b.row(p).data();
        for (std::size_t i = 0; i < n; ++i) {
            const double api = arow[i];
            if (api == 0.0) {
                continue;
            }
            double* crow = c.row(i).data();
            for (std::size_t j = 0; j < m; ++j) {
                crow[j] += api * brow[j];
            }
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) {
        throw ShapeError("matmul_nt: cannot multiply " + a.shape_string() +
                         " by transpose of " + b.shape_string());
    }
    const std::size_t n = a.rows(), m = b.rows(), k = a.cols();
    Matrix c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = a.row(i).data();
        for (std::size_t j = 0; j < m; ++j) {
            const double* brow = b.row(j).data();
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                s += arow[p] * brow[p];
            }
            c(i, j) = s;
        }
    }
    return c;
}

Matrix hadamard(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "hadamard");
    Matrix c = a;
    for (std::size_t i = 0; i < c.size(); ++i) {
        c.data()[i] *= b.data()[i];
    }
    return c;
}

Matrix map(const Matrix& m, const std::function<double(double)>& f) {
    Matrix c = m;
    for (double& v : c.data()) {
        v = f(v);
    }
    return c;
}

double frobenius_norm_sq(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data()) {
        s += v * v;
    }
    return s;
}

double frobenius_norm(const Matrix& m) { return std::sqrt(frobenius_norm_sq(m)); }

double frobenius_dot(const Matrix& a, const Matrix& b) {
    require_same_shape(a, b, "frobenius_dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a.data()[i] * b.data()[i];
    }
    return s;
}

Matrix hconcat(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) {
        throw ShapeError("hconcat: row mismatch " + a.shape_string() + " vs " + b.shape_string());
    }
    Matrix c(a.rows(), a.cols() + b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out = c.row(i);
        std::copy(a.row(i).begin(), a.row(i).end(), out.begin());
        std::copy(b.row(i).begin(), b.row(i).end(),
                  out.begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return c;
}

double dot(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("dot: length mismatch " + std::to_string(u.size()) + " vs " +
                         std::to_string(v.size()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        s += u[i] * v[i];
    }
    return s;
}

double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine_sim(std::span<const double> u, std::span<const double> v) {
    const double nu = norm2(u);
    const double nv = norm2(v);
    if (nu == 0.0 || nv == 0.0) {
        throw DomainError("cosine_sim: zero-norm input");
    }
    return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

Matrix softmax_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto in = m.row(i);
        auto o = out.row(i);
        if (in.empty()) {
            continue;
        }
        const double mx = *std::max_element(in.begin(), in.end());
        double z = 0.0;
        for (std::size_t j = 0; j < in.size(); ++j) {
            o[j] = std::exp(in[j] - mx);
            z += o[j];
        }
        for (double& v : o) {
            v /= z;
        }
    }
    return out;
}

Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                        std::span<const double> x, double h) {
    if (!(h > 0.0)) {
        throw DomainError("finite_diff_grad: step must be positive");
    }
    Vector probe(x.begin(), x.end());
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw EvaluationError(
                "finite_diff_grad: non-finite value at coordinate " + std::to_string(i), i);
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

Vector singular_values(const Matrix& m) {
    // One-sided Jacobi on the columns of the taller orientation.
    const Matrix work = m.rows() >= m.cols() ? m : m.transposed();
    const std::size_t rows = work.rows(), n = work.cols();
    std::vector<Vector> col(n, Vector(rows));
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            col[j][i] = work(i, j);
        }
    }
    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < rows; ++i) {
                    alpha += col[p][i] * col[p][i];
                    beta += col[q][i] * col[q][i];
                    gamma += col[p][i] * col[q][i];
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) {
                    continue;
                }
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < rows; ++i) {
                    const double up = col[p][i], uq = col[q][i];
                    col[p][i] = c * up - s * uq;
                    col[q][i] = s * up + c * uq;
                }
            }
        }
        if (!rotated) {
            break;
        }
    }
    Vector sv(n);
    for (std::size_t j = 0; j < n; ++j) {
        sv[j] = norm2(col[j]);
    }
    std::sort(sv.begin(), sv.end(), std::greater<>());
    return sv;
}

std::uint64_t mix64(std::uint64_t z) noexcept {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t SeededRng::next_u64() noexcept {
    state_ += 0x9e3779b97f4a7c15ULL;
    return mix64(state_);
}

double SeededRng::uniform() noexcept {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double SeededRng::uniform_open() noexcept {
    return static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
}

double SeededRng::normal() noexcept {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    const double u1 = uniform_open();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

std::uint64_t SeededRng::below(std::uint64_t n) noexcept {
    // Rejection keeps the draw unbiased.
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v;
    do {
        v = next_u64();
    } while (v >= limit);
    return v % n;
}

SeededRng SeededRng::split(std::uint64_t stream) const noexcept {
    return SeededRng(mix64(state_ ^ mix64(stream + 0x632be59bd9b4e019ULL)));
}

std::uint64_t derive_seed(std::uint64_t base, std::string_view tag, std::uint64_t a,
                          std::uint64_t b) noexcept {
    // FNV-1a over the tag, then splitmix64 chaining with the indices.
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char ch : tag) {
        h ^= static_cast<unsigned char>(ch);
        h *= 0x100000001b3ULL;
    }
    std::uint64_t s = mix64(base ^ h);
    s = mix64(s + 0x9e3779b97f4a7c15ULL * (a + 1));
    s = mix64(s + 0x9e3779b97f4a7c15ULL * (b + 1));
    return s;
}

Matrix gaussian(SeededRng& rng, std::size_t rows, std::size_t cols, double mean, double std) {
    if (std < 0.0) {
        throw DomainError("gaussian: std must be non-negative");
    }
    Matrix m(rows, cols);
    for (double& v : m.data()) {
        v = mean + std * rng.normal();
    }
    return m;
}

}  // namespace fl2t
