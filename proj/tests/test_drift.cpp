// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "fl2t/drift.hpp"
#include "fl2t/errors.hpp"
#include "test_support.hpp"

namespace fl2t::drift {
namespace {

using testing::random_vector;

double norm(const Vector& v) {
    double s = 0.0;
    for (double x : v) {
        s += x * x;
    }
    return std::sqrt(s);
}

TEST(Aggregate, Examples) {
    const GradientSet g{{{3, 0}, {0, 4}}};
    EXPECT_EQ(aggregate(g, Vector{0, 0}), (Vector{0, 0}));
    EXPECT_EQ(aggregate(g, Vector{1, 1}), (Vector{3, 4}));
    EXPECT_THROW(aggregate(g, Vector{1.5, 0}), DomainError);
    EXPECT_THROW(aggregate(g, Vector{1}), ShapeError);
}

TEST(Aggregate, MatchesLoopOracleAndIsPermutationInvariant) {
    SeededRng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        const std::size_t dim = 1 + rng.below(32);
        GradientSet g;
        Vector lambda(n);
        for (std::size_t i = 0; i < n; ++i) {
            g.m.push_back(random_vector(rng, dim));
            lambda[i] = -1.0 + 2.0 * rng.uniform();
        }
        Vector ref(dim, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < dim; ++k) {
                ref[k] += lambda[i] * g.m[i][k];
            }
        }
        const Vector out = aggregate(g, lambda);
        EXPECT_LT(testing::max_abs_diff(out, ref), 1e-12);

        GradientSet rev{std::vector<Vector>(g.m.rbegin(), g.m.rend())};
        const Vector rl(lambda.rbegin(), lambda.rend());
        EXPECT_LT(testing::max_abs_diff(aggregate(rev, rl), out), 1e-12);
    }
}

TEST(UpperBound, Examples) {
    const GradientSet g{{{1, 2}, {-3, 0.5}}};
    const DriftReport zero = check_upper_bound(g, Vector{0, 0});
    EXPECT_EQ(zero.norm_fl2t, 0.0);
    EXPECT_EQ(zero.bound_rhs, 0.0);
    EXPECT_GT(zero.bound_uniform, 0.0);

    const GradientSet colinear{{{1, 2}, {2, 4}, {0.5, 1}}};
    const DriftReport tight = check_upper_bound(colinear, Vector{1, 1, 1});
    EXPECT_NEAR(tight.norm_fl2t, tight.bound_rhs, 1e-12);
    EXPECT_NEAR(tight.bound_rhs, tight.bound_uniform, 1e-12);
}

TEST(UpperBound, RandomDrawsSatisfyBothInequalities) {
    SeededRng rng(11);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        const std::size_t dim = 1 + rng.below(32);
        GradientSet g;
        Vector lambda(n);
        for (std::size_t i = 0; i < n; ++i) {
            g.m.push_back(random_vector(rng, dim, std::exp(4.0 * rng.uniform() - 2.0)));
            lambda[i] = -1.0 + 2.0 * rng.uniform();
        }
        const DriftReport r = check_upper_bound(g, lambda);
        EXPECT_GE(r.slack(), -1e-10);
        EXPECT_LE(r.bound_rhs, r.bound_uniform + 1e-12);
        double rhs = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            rhs += std::abs(lambda[i]) * norm(g.m[i]);
        }
        EXPECT_NEAR(r.bound_rhs, rhs, 1e-10 * std::max(1.0, rhs));
    }
}

TEST(Reducing, WorkedExample) {
    const DriftReport r = find_reducing_coefficients(GradientSet{{{3, 0}, {0, 4}}});
    EXPECT_FALSE(r.degenerate);
    EXPECT_DOUBLE_EQ(r.norm_cidm, 5.0);
    ASSERT_TRUE(r.k_star.has_value());
    EXPECT_EQ(*r.k_star, 1u);  // second gradient, zero-based
    EXPECT_DOUBLE_EQ(*r.epsilon, 0.5);
    EXPECT_EQ(r.lambda_used, (Vector{1.0, 0.5}));
    EXPECT_NEAR(r.norm_fl2t, std::sqrt(13.0), 1e-15);
    EXPECT_NEAR(r.norm_fl2t, 3.606, 1e-3);
    EXPECT_NEAR(quadratic_identity_error(Vector{3, 4}, Vector{0, 4}, 0.5), 0.0, 1e-12);
}

TEST(Reducing, DegenerateCancellation) {
    const DriftReport r = find_reducing_coefficients(GradientSet{{{1, 0}, {-1, 0}}});
    EXPECT_TRUE(r.degenerate);
    EXPECT_FALSE(r.k_star.has_value());
    EXPECT_FALSE(r.epsilon.has_value());
    EXPECT_EQ(r.lambda_used, (Vector{1.0, 1.0}));
    EXPECT_EQ(r.norm_cidm, 0.0);
}

TEST(Reducing, SingleGradient) {
    const DriftReport r = find_reducing_coefficients(GradientSet{{{2, 0}}});
    EXPECT_EQ(*r.k_star, 0u);
    EXPECT_LT(r.norm_fl2t, r.norm_cidm);
    EXPECT_LT(r.lambda_used[0], 1.0);
}

TEST(Reducing, TiesPickLowestIndex) {
    const DriftReport r = find_reducing_coefficients(GradientSet{{{1, 0}, {0, 1}}});
    EXPECT_EQ(*r.k_star, 0u);
}

TEST(Reducing, RandomSetsReduceStrictly) {
    SeededRng rng(17);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.below(8);
        const std::size_t dim = 1 + rng.below(32);
        GradientSet g;
        for (std::size_t i = 0; i < n; ++i) {
            g.m.push_back(random_vector(rng, dim));
        }
        const DriftReport r = find_reducing_coefficients(g);
        ASSERT_FALSE(r.degenerate);
        EXPECT_LT(r.norm_fl2t, r.norm_cidm);
        const Vector M = aggregate(g, Vector(n, 1.0));
        EXPECT_LT(quadratic_identity_error(M, g.m[*r.k_star], *r.epsilon), 1e-10);
        // k* is an argmax of <M, m_k>.
        double best = -1e300;
        for (const auto& m : g.m) {
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                s += M[k] * m[k];
            }
            best = std::max(best, s);
        }
        double chosen = 0.0;
        for (std::size_t k = 0; k < dim; ++k) {
            chosen += M[k] * g.m[*r.k_star][k];
        }
        EXPECT_EQ(chosen, best);
        EXPECT_GT(chosen, 0.0);
    }
}

TEST(Validate, RejectsEmptyAndRagged) {
    EXPECT_THROW(validate(GradientSet{}), ShapeError);
    EXPECT_THROW(validate(GradientSet{{{1, 2}, {1}}}), ShapeError);
}

TEST(SimplifiedAttention, Examples) {
    const std::vector<Vector> ortho{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    EXPECT_EQ(simplified_attention_layer(ortho), ortho);

    const Vector x{1, 2};
    const auto twin = simplified_attention_layer({x, x});
    EXPECT_EQ(twin[0], (Vector{6, 12}));  // (1 + |x|^2) x

    EXPECT_THROW(simplified_attention_layer({x}), DomainError);
}

TEST(SimplifiedAttention, FirstLayerMatchesPrintedForm) {
    SeededRng rng(2);
    std::vector<Vector> s;
    for (int i = 0; i < 3; ++i) {
        Vector v = random_vector(rng, 5);
        const double n = norm(v);
        for (double& e : v) {
            e /= n;
        }
        s.push_back(v);
    }
    auto dotp = [](const Vector& a, const Vector& b) {
        double r = 0.0;
        for (std::size_t k = 0; k < a.size(); ++k) {
            r += a[k] * b[k];
        }
        return r;
    };
    const double axy = dotp(s[0], s[1]);
    const double axz = dotp(s[0], s[2]);
    const auto out = simplified_attention_layer(s);
    for (std::size_t k = 0; k < 5; ++k) {
        EXPECT_NEAR(out[0][k], s[0][k] + axy * s[1][k] + axz * s[2][k], 1e-15);
    }
}

TEST(SimplifiedAttention, CommutesWithPermutation) {
    SeededRng rng(3);
    std::vector<Vector> s;
    for (int i = 0; i < 4; ++i) {
        s.push_back(random_vector(rng, 6));
    }
    const auto out = simplified_attention_layer(s);
    const std::vector<std::size_t> perm{2, 0, 3, 1};
    std::vector<Vector> ps;
    for (std::size_t p : perm) {
        ps.push_back(s[p]);
    }
    const auto pout = simplified_attention_layer(ps);
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_LT(testing::max_abs_diff(pout[i], out[perm[i]]), 1e-14);
    }
}

TEST(SimplifiedAttention, TwoLayerCoefficientsMatchDirectApplication) {
    // Unit vectors with chosen cosines, expressed in R^3 through a Cholesky factor.
    const double axy = 0.3;
    const double axz = -0.2;
    const double ayz = 0.5;
    Eigen::Matrix3d gram;
    gram << 1, axy, axz, axy, 1, ayz, axz, ayz, 1;
    const Eigen::Matrix3d Lc = gram.llt().matrixL();
    std::vector<Vector> s;
    for (int i = 0; i < 3; ++i) {
        s.push_back({Lc(i, 0), Lc(i, 1), Lc(i, 2)});
    }
    const auto x2 = simplified_attention_layer(simplified_attention_layer(s))[0];
    // Solve x2 = c0 X + c1 Y + c2 Z.
    const Eigen::Vector3d c = Lc.transpose().colPivHouseholderQr().solve(
        Eigen::Vector3d(x2[0], x2[1], x2[2]));
    const auto coef = two_layer_coefficients(axy, axz, ayz);
    for (int i = 0; i < 3; ++i) {
        EXPECT_NEAR(coef[static_cast<std::size_t>(i)], c(i), 1e-12);
    }
    // The printed closed form is evaluated but not asserted.
    const auto printed = printed_x2_coefficients(axy, axz, ayz);
    for (double v : printed) {
        EXPECT_TRUE(std::isfinite(v));
    }
}

TEST(Interactions, TableValues) {
    EXPECT_EQ(interaction_count(InteractionKind::kAttention, 3, 4, 1), 36u);
    EXPECT_EQ(interaction_count(InteractionKind::kConcatenation, 7, 9, 2), 0u);
    EXPECT_EQ(interaction_count(InteractionKind::kSummation, 2, 5, 3), 30u);
    EXPECT_THROW(interaction_count(InteractionKind::kSummation, 0, 5, 3), DomainError);
    EXPECT_EQ(interaction_kind_from_string("attention"), InteractionKind::kAttention);
    EXPECT_EQ(interaction_kind_from_string("summation"), InteractionKind::kSummation);
    EXPECT_EQ(interaction_kind_from_string("concatenation"), InteractionKind::kConcatenation);
    EXPECT_THROW(interaction_kind_from_string("product"), DomainError);
}

TEST(Trials, SummaryCountsAndDeterminism) {
    const TrialSummary a = run_trials(200, 8, 32, 5);
    const TrialSummary b = run_trials(200, 8, 32, 5);
    EXPECT_EQ(a.rows.size(), 200u);
    EXPECT_EQ(a.bound_held, 200u);
    EXPECT_EQ(a.reduced + a.degenerate, 200u);
    EXPECT_GE(a.min_slack, -1e-10);
    EXPECT_LT(a.max_identity_error, 1e-10);
    ASSERT_EQ(a.rows.size(), b.rows.size());
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        EXPECT_EQ(a.rows[i].norm_fl2t, b.rows[i].norm_fl2t);
    }
}

}  // namespace
}  // namespace fl2t::drift
