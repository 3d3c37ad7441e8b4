// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "fl2t/errors.hpp"
#include "fl2t/regularizers.hpp"
#include "test_support.hpp"

namespace fl2t::reg {
namespace {

using lora::AdapterSet;
using testing::random_matrix;
using testing::rel_error;

std::vector<AdapterSet> random_sets(std::size_t G, std::size_t L, std::size_t a, std::size_t b,
                                    std::size_t r, std::uint64_t seed) {
    std::vector<AdapterSet> sets;
    for (std::size_t i = 0; i < G; ++i) {
        AdapterSet s{static_cast<int>(i), {}};
        for (std::size_t l = 0; l < L; ++l) {
            s.adapters.push_back(
                {l, random_matrix(seed + 100 * i + l, a, r), random_matrix(seed + 100 * i + l + 50, r, b)});
        }
        sets.push_back(std::move(s));
    }
    return sets;
}

// sum_l sum_{p,q} (sum_k A_i[k,p] A_g[k,q])^2, one scalar at a time.
double overlap_oracle(const AdapterSet& ai, const AdapterSet& ag) {
    double total = 0.0;
    for (std::size_t l = 0; l < ai.adapters.size(); ++l) {
        const Matrix& A = ai.adapters[l].A;
        const Matrix& B = ag.adapters[l].A;
        for (std::size_t p = 0; p < A.cols(); ++p) {
            for (std::size_t q = 0; q < B.cols(); ++q) {
                double s = 0.0;
                for (std::size_t k = 0; k < A.rows(); ++k) {
                    s += A(k, p) * B(k, q);
                }
                total += s * s;
            }
        }
    }
    return total;
}

// Gradient check over a list of parameter matrices.
double check_gradient(const std::function<double()>& f, const std::vector<Matrix*>& params,
                      const std::vector<const Matrix*>& analytic, double h = 1e-5) {
    Vector a;
    Vector n;
    for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t k = 0; k < params[p]->size(); ++k) {
            double& x = params[p]->data()[k];
            const double x0 = x;
            x = x0 + h;
            const double fp = f();
            x = x0 - h;
            const double fm = f();
            x = x0;
            n.push_back((fp - fm) / (2 * h));
            a.push_back(analytic[p]->data()[k]);
        }
    }
    return rel_error(a, n);
}

TEST(R1, OrthogonalColumnsGiveZero) {
    // Concept 0 uses basis columns {e0, e1}, concept 1 uses {e2, e3}.
    std::vector<AdapterSet> sets(2);
    Matrix A0(4, 2);
    A0(0, 0) = 1.0;
    A0(1, 1) = 2.0;
    Matrix A1(4, 2);
    A1(2, 0) = -3.0;
    A1(3, 1) = 0.5;
    sets[0] = {0, {{0, A0, Matrix(2, 3)}}};
    sets[1] = {1, {{0, A1, Matrix(2, 3)}}};
    EXPECT_EQ(r1_orthogonality(sets, 0).value, 0.0);
    EXPECT_EQ(r1_orthogonality(sets, 1).value, 0.0);
}

TEST(R1, SelfOverlapIsPositive) {
    auto sets = random_sets(2, 2, 5, 5, 2, 1);
    sets[1].adapters[0].A = sets[0].adapters[0].A;
    const Matrix& A = sets[0].adapters[0].A;
    EXPECT_GT(r1_orthogonality(sets, 0).value, 0.0);
    EXPECT_GE(r1_orthogonality(sets, 0).value, frobenius_norm_sq(matmul_tn(A, A)) - 1e-12);
}

TEST(R1, MatchesLoopOracle) {
    const auto sets = random_sets(3, 2, 6, 5, 3, 7);
    for (std::size_t g = 0; g < 3; ++g) {
        double ref = 0.0;
        for (std::size_t i = 0; i < 3; ++i) {
            if (i != g) {
                ref += overlap_oracle(sets[i], sets[g]);
            }
        }
        EXPECT_NEAR(r1_orthogonality(sets, g).value, ref, 1e-10 * std::max(1.0, ref));
    }
}

TEST(R1, SingleConceptIsDegenerate) {
    const auto sets = random_sets(1, 1, 4, 4, 2, 3);
    const RegularizerValue v = r1_orthogonality(sets, 0);
    EXPECT_EQ(v.value, 0.0);
    EXPECT_TRUE(v.degenerate);
}

TEST(R1Weighted, Reductions) {
    const auto sets = random_sets(4, 2, 5, 5, 2, 11);
    RelevanceWeights ones{{1, 1, 1, 1}, 2};
    EXPECT_EQ(r1_weighted(sets, 2, ones).value, r1_orthogonality(sets, 2).value);
    RelevanceWeights zeros{{0, 0, 0, 0}, 2};
    EXPECT_EQ(r1_weighted(sets, 2, zeros).value, 0.0);
}

TEST(R1Weighted, MatchesWeightedOracle) {
    const auto sets = random_sets(4, 2, 5, 5, 2, 13);
    const RelevanceWeights w{{0.3, -0.7, 0.0, 0.9}, 2};
    double ref = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i != 2) {
            ref += w.lambda[i] * overlap_oracle(sets[i], sets[2]);
        }
    }
    EXPECT_NEAR(r1_weighted(sets, 2, w).value, ref, 1e-10 * std::max(1.0, std::abs(ref)));
}

TEST(R1Weighted, OutOfRangeLambdaThrows) {
    const auto sets = random_sets(2, 1, 4, 4, 2, 1);
    EXPECT_THROW(r1_weighted(sets, 0, RelevanceWeights{{0.0, 1.5}, 0}), DomainError);
    // The active entry is ignored.
    EXPECT_NO_THROW(r1_weighted(sets, 0, RelevanceWeights{{7.0, 0.5}, 0}));
}

TEST(R2, Examples) {
    auto sets = random_sets(2, 2, 4, 5, 2, 21);
    SeededRng rng(1);
    SharedSubspace ss = init_shared_subspace(2, 2, 4, 5, 2, rng);

    // W_star = 0: R2 is the total squared delta norm.
    SharedSubspace zero = ss;
    double total = 0.0;
    for (auto& w : zero.W_star) {
        w = Matrix(w.rows(), w.cols());
    }
    for (const auto& s : sets) {
        for (const auto& ad : s.adapters) {
            total += frobenius_norm_sq(lora::delta_weight(ad));
        }
    }
    EXPECT_NEAR(r2_shared(sets, zero), total, 1e-10 * total);

    // Perfect reconstruction: H_i = A_i, W_star = B with every concept sharing B.
    for (std::size_t l = 0; l < 2; ++l) {
        sets[1].adapters[l].B = sets[0].adapters[l].B;
        ss.W_star[l] = sets[0].adapters[l].B;
        for (std::size_t i = 0; i < 2; ++i) {
            ss.H[i][l] = sets[i].adapters[l].A;
        }
    }
    EXPECT_LT(r2_shared(sets, ss), 1e-24);
    const R2Gradient g = r2_gradient(sets, ss);
    for (const auto& per : g.dsubspace.H) {
        for (const auto& h : per) {
            EXPECT_LT(frobenius_norm(h), 1e-12);
        }
    }
}

TEST(R2, MatchesLoopOracle) {
    const auto sets = random_sets(3, 2, 4, 5, 2, 31);
    SeededRng rng(2);
    SharedSubspace ss = init_shared_subspace(3, 2, 4, 5, 2, rng);
    for (auto& w : ss.W_star) {
        w = w * 50.0;
    }
    double ref = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t l = 0; l < 2; ++l) {
            const Matrix& A = sets[i].adapters[l].A;
            const Matrix& B = sets[i].adapters[l].B;
            const Matrix& H = ss.H[i][l];
            const Matrix& W = ss.W_star[l];
            for (std::size_t r = 0; r < 4; ++r) {
                for (std::size_t c = 0; c < 5; ++c) {
                    double d = 0.0;
                    for (std::size_t k = 0; k < 2; ++k) {
                        d += A(r, k) * B(k, c) - H(r, k) * W(k, c);
                    }
                    ref += d * d;
                }
            }
        }
    }
    EXPECT_NEAR(r2_shared(sets, ss), ref, 1e-10 * ref);
}

TEST(R2, ShapeErrorNamesConceptAndLayer) {
    const auto sets = random_sets(2, 2, 4, 5, 2, 1);
    SeededRng rng(2);
    SharedSubspace ss = init_shared_subspace(2, 2, 4, 5, 2, rng);
    ss.H[1][1] = Matrix(3, 2);
    try {
        r2_shared(sets, ss);
        FAIL();
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find('1'), std::string::npos);
    }
}

TEST(R3, Examples) {
    const Matrix same{{1, 2}, {1, 2}, {1, 2}};
    EXPECT_NEAR(r3_contrastive(same, 0.1), std::log(3.0), 1e-12);

    const Matrix orth{{1, 0}, {0, 1}};
    const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    EXPECT_NEAR(r3_contrastive(orth, 1.0), expected, 1e-12);
    EXPECT_NEAR(r3_contrastive(orth, 1.0), 0.31326, 1e-5);
}

TEST(R3, DecreasesAsRowsSpreadApart) {
    // Two unit rows at angle theta: cosine cos(theta) falls from 1 to -1.
    double prev = std::numeric_limits<double>::infinity();
    for (int k = 0; k <= 20; ++k) {
        const double theta = M_PI * k / 20.0;
        const Matrix S{{1, 0}, {std::cos(theta), std::sin(theta)}};
        const double v = r3_contrastive(S, 0.5);
        EXPECT_LT(v, prev);
        prev = v;
    }
}

TEST(R3, Errors) {
    EXPECT_THROW(r3_contrastive(Matrix{{1, 0}, {0, 0}}, 0.1), DomainError);
    EXPECT_THROW(r3_contrastive(Matrix{{1, 0}, {0, 1}}, 0.0), DomainError);
    EXPECT_THROW(r3_contrastive(Matrix{{1, 0}}, 0.1), DomainError);
}

TEST(R3, PermutationAndScaleInvariance) {
    const Matrix S = random_matrix(3, 5, 7);
    const double base = r3_contrastive(S, 0.3);
    SeededRng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> perm{0, 1, 2, 3, 4};
        for (std::size_t i = perm.size(); i > 1; --i) {
            std::swap(perm[i - 1], perm[rng.below(i)]);
        }
        Matrix P(5, 7);
        for (std::size_t i = 0; i < 5; ++i) {
            P.set_row(i, S.row(perm[i]));
        }
        EXPECT_NEAR(r3_contrastive(P, 0.3), base, 1e-12);
    }
    Matrix scaled = S;
    for (double& x : scaled.row(2)) {
        x *= 17.5;
    }
    EXPECT_NEAR(r3_contrastive(scaled, 0.3), base, 1e-12);
}

TEST(LossId, Parsing) {
    EXPECT_EQ(loss_id_from_string("r1"), LossId::kR1);
    EXPECT_EQ(loss_id_from_string("r1w"), LossId::kR1Weighted);
    EXPECT_EQ(loss_id_from_string("r2"), LossId::kR2);
    EXPECT_EQ(loss_id_from_string("r3"), LossId::kR3);
    EXPECT_THROW(loss_id_from_string("r4"), DomainError);
}

TEST(Gradients, R1MatchesFiniteDifferences) {
    auto sets = random_sets(3, 2, 4, 3, 2, 41);
    const R1Gradient g = r1_gradient(sets, 1, nullptr);
    std::vector<Matrix*> params;
    std::vector<const Matrix*> grads;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t l = 0; l < 2; ++l) {
            params.push_back(&sets[i].adapters[l].A);
            grads.push_back(&g.adapters.dA[i][l]);
        }
    }
    EXPECT_NEAR(g.value, r1_orthogonality(sets, 1).value, 1e-12);
    EXPECT_LT(check_gradient([&] { return r1_orthogonality(sets, 1).value; }, params, grads), 1e-6);
}

TEST(Gradients, R1OrthogonalBanksStillMatchFiniteDifferences) {
    std::vector<AdapterSet> sets(2);
    Matrix A0(4, 2);
    A0(0, 0) = 1.0;
    A0(1, 1) = 1.0;
    Matrix A1(4, 2);
    A1(2, 0) = 1.0;
    A1(3, 1) = 1.0;
    sets[0] = {0, {{0, A0, Matrix(2, 3)}}};
    sets[1] = {1, {{0, A1, Matrix(2, 3)}}};
    const R1Gradient g = r1_gradient(sets, 0, nullptr);
    std::vector<Matrix*> params{&sets[0].adapters[0].A, &sets[1].adapters[0].A};
    std::vector<const Matrix*> grads{&g.adapters.dA[0][0], &g.adapters.dA[1][0]};
    EXPECT_LT(check_gradient([&] { return r1_orthogonality(sets, 0).value; }, params, grads), 1e-6);
}

TEST(Gradients, R1WeightedIncludesLambda) {
    auto sets = random_sets(3, 2, 4, 3, 2, 43);
    RelevanceWeights w{{0.2, 0.0, -0.6}, 1};
    const R1Gradient g = r1_gradient(sets, 1, &w);
    std::vector<Matrix*> params;
    std::vector<const Matrix*> grads;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t l = 0; l < 2; ++l) {
            params.push_back(&sets[i].adapters[l].A);
            grads.push_back(&g.adapters.dA[i][l]);
        }
    }
    const auto f = [&] { return r1_weighted(sets, 1, w).value; };
    EXPECT_LT(check_gradient(f, params, grads), 1e-6);
    Matrix lam = Matrix::row_vector(w.lambda);
    Matrix dlam = Matrix::row_vector(g.dlambda);
    const auto fl = [&] {
        RelevanceWeights ww{Vector(lam.data()), 1};
        return r1_weighted(sets, 1, ww).value;
    };
    EXPECT_LT(check_gradient(fl, {&lam}, {&dlam}), 1e-6);
    EXPECT_EQ(g.dlambda[1], 0.0);
}

TEST(Gradients, R2MatchesFiniteDifferences) {
    auto sets = random_sets(2, 2, 4, 3, 2, 51);
    SeededRng rng(5);
    SharedSubspace ss = init_shared_subspace(2, 2, 4, 3, 2, rng);
    for (auto& per : ss.H) {
        for (auto& h : per) {
            h = h * 100.0;
        }
    }
    for (auto& w : ss.W_star) {
        w = w * 100.0;
    }
    const R2Gradient g = r2_gradient(sets, ss);
    std::vector<Matrix*> params;
    std::vector<const Matrix*> grads;
    for (std::size_t i = 0; i < 2; ++i) {
        for (std::size_t l = 0; l < 2; ++l) {
            params.push_back(&sets[i].adapters[l].A);
            grads.push_back(&g.adapters.dA[i][l]);
            params.push_back(&sets[i].adapters[l].B);
            grads.push_back(&g.adapters.dB[i][l]);
            params.push_back(&ss.H[i][l]);
            grads.push_back(&g.dsubspace.H[i][l]);
        }
    }
    for (std::size_t l = 0; l < 2; ++l) {
        params.push_back(&ss.W_star[l]);
        grads.push_back(&g.dsubspace.W_star[l]);
    }
    EXPECT_LT(check_gradient([&] { return r2_shared(sets, ss); }, params, grads), 1e-6);
}

TEST(Gradients, R3MatchesFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Matrix S = random_matrix(60 + seed, 4, 8);
        const R3Gradient g = r3_gradient(S, 0.5);
        EXPECT_NEAR(g.value, r3_contrastive(S, 0.5), 1e-12);
        const Vector numeric = finite_diff_grad(
            [&](std::span<const double> x) {
                return r3_contrastive(Matrix(4, 8, Vector(x.begin(), x.end())), 0.5);
            },
            S.data());
        for (std::size_t k = 0; k < numeric.size(); ++k) {
            EXPECT_NEAR(g.dS.data()[k], numeric[k], 1e-4 * std::max(1.0, std::abs(numeric[k])));
        }
        EXPECT_LT(rel_error(g.dS.data(), numeric), 1e-4);
    }
}

}  // namespace
}  // namespace fl2t::reg
