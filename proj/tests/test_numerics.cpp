// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "fl2t/errors.hpp"
#include "fl2t/numerics.hpp"
#include "test_support.hpp"

namespace fl2t {
namespace {

using testing::max_abs_diff;
using testing::naive_matmul;
using testing::random_matrix;

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    const Matrix m = random_matrix(1, 2, 5);
    EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandExample) {
    const Matrix a{{1, 2}, {3, 4}};
    const Matrix b{{0}, {1}};
    EXPECT_EQ(matmul(a, b), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
    const Matrix a = random_matrix(2, 5, 3);
    const Matrix b = random_matrix(3, 3, 7);
    EXPECT_LT(max_abs_diff(matmul(a, b), naive_matmul(a, b)), 1e-12);
}

TEST(Matmul, TransposedVariantsMatchExplicitTranspose) {
    const Matrix a = random_matrix(4, 6, 3);
    const Matrix b = random_matrix(5, 4, 3);
    const Matrix c = random_matrix(6, 6, 2);
    EXPECT_LT(max_abs_diff(matmul_tn(a, c), naive_matmul(a.transposed(), c)), 1e-12);
    EXPECT_LT(max_abs_diff(matmul_nt(a, b), naive_matmul(a, b.transposed())), 1e-12);
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Frobenius, Examples) {
    EXPECT_EQ(frobenius_norm(Matrix(3, 3)), 0.0);
    EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3, 4}}), 5.0);
    const Matrix m = random_matrix(7, 4, 4);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            s += m(i, j) * m(i, j);
        }
    }
    EXPECT_NEAR(frobenius_norm(m), std::sqrt(s), 1e-12);
}

TEST(Cosine, Examples) {
    const Vector u{0.3, -1.2, 2.0};
    EXPECT_NEAR(cosine_sim(u, u), 1.0, 1e-15);
    EXPECT_EQ(cosine_sim(Vector{1, 0}, Vector{0, 1}), 0.0);
    EXPECT_NEAR(cosine_sim(Vector{1, 1}, Vector{1, 0}), 1.0 / std::sqrt(2.0), 1e-15);
    EXPECT_NEAR(cosine_sim(Vector{1, 1}, Vector{1, 0}), 0.70711, 1e-5);
}

TEST(Cosine, ZeroVectorThrows) { EXPECT_THROW(cosine_sim(Vector{0, 0}, Vector{1, 0}), DomainError); }

TEST(Softmax, Examples) {
    const Matrix s = softmax_rows(Matrix{{0, 0}});
    EXPECT_DOUBLE_EQ(s(0, 0), 0.5);
    EXPECT_DOUBLE_EQ(s(0, 1), 0.5);

    const Matrix big = softmax_rows(Matrix{{1000, 0}});
    EXPECT_TRUE(big.all_finite());
    EXPECT_NEAR(big(0, 0), 1.0, 1e-15);
    EXPECT_NEAR(big(0, 1), 0.0, 1e-15);

    const Matrix r = softmax_rows(Matrix{{1, 2, 3}});
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int j = 0; j < 3; ++j) {
        EXPECT_NEAR(r(0, j), std::exp(j + 1.0) / z, 1e-12);
    }
}

TEST(FiniteDiff, Examples) {
    const auto sq = [](std::span<const double> x) { return x[0] * x[0] + x[1] * x[1]; };
    const Vector g = finite_diff_grad(sq, Vector{1, 2});
    EXPECT_NEAR(g[0], 2.0, 1e-8);
    EXPECT_NEAR(g[1], 4.0, 1e-8);

    const Vector c = finite_diff_grad([](std::span<const double>) { return 3.0; }, Vector{1, 2, 3});
    for (double v : c) {
        EXPECT_EQ(v, 0.0);
    }
}

TEST(FiniteDiff, RejectsBadStepAndNonFinite) {
    const auto f = [](std::span<const double> x) { return x[0]; };
    EXPECT_THROW(finite_diff_grad(f, Vector{1}, 0.0), DomainError);
    const auto bad = [](std::span<const double> x) { return x[0] > 0 ? std::nan("") : 0.0; };
    EXPECT_THROW(finite_diff_grad(bad, Vector{0.0}), EvaluationError);
}

TEST(SingularValues, MatchEigen) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Matrix m = random_matrix(100 + seed, 6, 9);
        const Vector ours = singular_values(m);
        const Vector ref = testing::eigen_singular_values(m);
        ASSERT_EQ(ours.size(), ref.size());
        EXPECT_LT(max_abs_diff(ours, ref), 1e-10);
    }
}

TEST(Rng, GaussianExamples) {
    SeededRng a(5);
    const Matrix c = gaussian(a, 3, 3, 1.5, 0.0);
    for (double v : c.data()) {
        EXPECT_EQ(v, 1.5);
    }
    EXPECT_EQ(random_matrix(9, 4, 4), random_matrix(9, 4, 4));
    SeededRng bad(1);
    EXPECT_THROW(gaussian(bad, 1, 1, 0.0, -1.0), DomainError);
}

TEST(Rng, GaussianMoments) {
    const Matrix m = random_matrix(42, 1, 100000);
    double mean = 0.0;
    for (double v : m.data()) {
        mean += v;
    }
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (double v : m.data()) {
        var += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(m.size() - 1));
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(sd, 1.0, 0.02);
}

TEST(Rng, DeriveSeedSeparatesTagsAndIndices) {
    EXPECT_NE(derive_seed(1, "a"), derive_seed(1, "b"));
    EXPECT_NE(derive_seed(1, "a", 0), derive_seed(1, "a", 1));
    EXPECT_NE(derive_seed(1, "a", 0, 1), derive_seed(1, "a", 1, 0));
    EXPECT_EQ(derive_seed(3, "x", 4, 5), derive_seed(3, "x", 4, 5));
}

TEST(Rng, BelowStaysInRange) {
    SeededRng rng(3);
    for (int i = 0; i < 1000; ++i) {
        EXPECT_LT(rng.below(7), 7u);
    }
}

}  // namespace
}  // namespace fl2t
