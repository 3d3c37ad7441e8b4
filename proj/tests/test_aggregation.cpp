// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "fl2t/aggregation.hpp"
#include "fl2t/errors.hpp"
#include "test_support.hpp"

namespace fl2t::agg {
namespace {

using testing::max_abs_diff;
using testing::naive_matmul;
using testing::random_matrix;

ConceptEmbeddingBank random_bank(std::size_t G, std::size_t d, std::uint64_t seed,
                                 std::vector<int> ids = {}) {
    if (ids.empty()) {
        for (std::size_t i = 0; i < G; ++i) {
            ids.push_back(static_cast<int>(i));
        }
    }
    return {random_matrix(seed, G, d), ids};
}

// Independent re-implementation of one attention block with scalar loops.
Matrix oracle_attention(const Matrix& xq, const Matrix& xkv, const AttentionParams& p) {
    const Matrix q = naive_matmul(xq, p.Wq);
    const Matrix k = naive_matmul(xkv, p.Wk);
    const Matrix v = naive_matmul(xkv, p.Wv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix mixed(q.rows(), v.cols());
    for (std::size_t i = 0; i < q.rows(); ++i) {
        Vector w(k.rows());
        double z = 0.0;
        for (std::size_t j = 0; j < k.rows(); ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) {
                s += q(i, c) * k(j, c);
            }
            w[j] = std::exp(s * scale);
            z += w[j];
        }
        for (std::size_t j = 0; j < k.rows(); ++j) {
            for (std::size_t c = 0; c < v.cols(); ++c) {
                mixed(i, c) += w[j] / z * v(j, c);
            }
        }
    }
    return naive_matmul(mixed, p.Wo);
}

Matrix oracle_decoder(Matrix x, const Matrix& prompt, const DecoderParams& params) {
    for (const auto& layer : params.layers) {
        x = x + oracle_attention(x, x, layer.self_attn);
        x = x + oracle_attention(x, prompt, layer.cross_attn);
        if (params.use_ffn) {
            Matrix h = naive_matmul(x, layer.ffn_in);
            for (double& e : h.data()) {
                e = std::tanh(e);
            }
            x = x + naive_matmul(h, layer.ffn_out);
        }
    }
    return x;
}

Vector oracle_fuse_row(std::span<const double> c, std::span<const double> p, const FusionMlp& m) {
    const std::size_t d = c.size();
    Vector in(c.begin(), c.end());
    in.insert(in.end(), p.begin(), p.end());
    Vector h(2 * d);
    for (std::size_t j = 0; j < 2 * d; ++j) {
        double s = m.b1(0, j);
        for (std::size_t k = 0; k < 2 * d; ++k) {
            s += in[k] * m.W1(k, j);
        }
        h[j] = std::tanh(s);
    }
    Vector out(d);
    for (std::size_t j = 0; j < d; ++j) {
        double s = m.b2(0, j);
        for (std::size_t k = 0; k < 2 * d; ++k) {
            s += h[k] * m.W2(k, j);
        }
        out[j] = s;
    }
    return out;
}

Matrix permute_rows(const Matrix& m, const std::vector<std::size_t>& perm) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t i = 0; i < perm.size(); ++i) {
        out.set_row(i, m.row(perm[i]));
    }
    return out;
}

std::vector<std::size_t> random_perm(std::size_t n, SeededRng& rng) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) {
        p[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        std::swap(p[i - 1], p[rng.below(i)]);
    }
    return p;
}

TEST(Proxies, CopyWithoutAliasing) {
    const ConceptEmbeddingBank bank = random_bank(3, 4, 1);
    ProxyBank p = init_proxies(bank);
    EXPECT_EQ(p.P, bank.C);
    const Matrix before = bank.C;
    p.P(0, 0) += 1.0;
    EXPECT_EQ(bank.C, before);
    EXPECT_EQ(init_proxies(random_bank(1, 4, 2)).P.rows(), 1u);
}

TEST(Bank, ValidateRejectsZeroRowsAndIdMismatch) {
    ConceptEmbeddingBank bank = random_bank(2, 3, 1);
    EXPECT_NO_THROW(validate(bank));
    ConceptEmbeddingBank zero = bank;
    zero.C.set_row(1, Vector{0, 0, 0});
    EXPECT_THROW(validate(zero), ShapeError);
    ConceptEmbeddingBank ids = bank;
    ids.concept_ids.push_back(9);
    EXPECT_THROW(validate(ids), ShapeError);
}

TEST(Decoder, ZeroParamsArePassThrough) {
    SeededRng rng(1);
    const DecoderParams z = zeros_like(init_decoder(6, 2, rng));
    const Matrix P = random_matrix(2, 4, 6);
    EXPECT_EQ(decoder_forward(P, random_matrix(3, 2, 6), z), P);
}

TEST(Decoder, MatchesStraightLineOracle) {
    for (bool ffn : {true, false}) {
        SeededRng rng(3);
        const DecoderParams params = init_decoder(8, 2, rng, ffn);
        const Matrix P = random_matrix(4, 5, 8);
        const Matrix prompt = random_matrix(5, 3, 8);
        EXPECT_LT(max_abs_diff(decoder_forward(P, prompt, params), oracle_decoder(P, prompt, params)),
                  1e-10);
    }
}

TEST(Decoder, PermutationEquivariant) {
    SeededRng rng(5);
    const DecoderParams params = init_decoder(16, 2, rng);
    const Matrix P = random_matrix(6, 6, 16);
    const Matrix prompt = random_matrix(7, 2, 16);
    const Matrix out = decoder_forward(P, prompt, params);
    for (int trial = 0; trial < 10; ++trial) {
        const auto perm = random_perm(6, rng);
        const Matrix permuted = decoder_forward(permute_rows(P, perm), prompt, params);
        EXPECT_LT(max_abs_diff(permuted, permute_rows(out, perm)), 1e-12);
    }
}

TEST(Decoder, ShapeErrors) {
    SeededRng rng(1);
    const DecoderParams params = init_decoder(4, 1, rng);
    EXPECT_THROW(decoder_forward(Matrix(2, 4, 1.0), Matrix(0, 4), params), ShapeError);
    EXPECT_THROW(decoder_forward(Matrix(2, 4, 1.0), Matrix(1, 5, 1.0), params), ShapeError);
    EXPECT_THROW(decoder_forward(Matrix(2, 5, 1.0), Matrix(1, 5, 1.0), params), ShapeError);
}

TEST(Fuse, CanonicalOrderAndOracle) {
    SeededRng rng(7);
    const FusionMlp mlp = init_fusion(5, rng);
    // Bank rows are not sorted by id; fuse() must emit ascending ids.
    const ConceptEmbeddingBank bank = random_bank(4, 5, 9, {30, 10, 40, 20});
    const Matrix Pp = random_matrix(10, 4, 5);
    const Matrix S = fuse(bank, Pp, mlp, 2);
    const std::vector<std::size_t> expected_rows{1, 3, 0};
    EXPECT_EQ(canonical_others(bank, 2), expected_rows);
    ASSERT_EQ(S.rows(), 3u);
    for (std::size_t k = 0; k < 3; ++k) {
        const Vector ref = oracle_fuse_row(bank.C.row(expected_rows[k]), Pp.row(expected_rows[k]), mlp);
        EXPECT_LT(max_abs_diff(S.row_copy(k), ref), 1e-12);
    }
}

TEST(Fuse, IdenticalPairsGiveIdenticalRows) {
    SeededRng rng(7);
    const FusionMlp mlp = init_fusion(4, rng);
    ConceptEmbeddingBank bank = random_bank(3, 4, 1);
    Matrix Pp = random_matrix(2, 3, 4);
    bank.C.set_row(2, bank.C.row(1));
    Pp.set_row(2, Pp.row(1));
    const Matrix S = fuse(bank, Pp, mlp, 0);
    EXPECT_EQ(S.row_copy(0), S.row_copy(1));
}

TEST(Fuse, SetInvariantUnderRelabeling) {
    SeededRng rng(8);
    const FusionMlp mlp = init_fusion(4, rng);
    const ConceptEmbeddingBank bank = random_bank(4, 4, 3);
    const Matrix Pp = random_matrix(4, 4, 4);
    const auto perm = std::vector<std::size_t>{3, 1, 0, 2};
    ConceptEmbeddingBank pb{permute_rows(bank.C, perm), bank.concept_ids};
    const Matrix S = fuse(bank, Pp, mlp, 1);
    // Concept at old row 1 sits at new row 1 (perm[1] == 1).
    const Matrix Sp = fuse(pb, permute_rows(Pp, perm), mlp, 1);
    auto sorted_rows = [](const Matrix& m) {
        std::vector<Vector> rows;
        for (std::size_t i = 0; i < m.rows(); ++i) {
            rows.push_back(m.row_copy(i));
        }
        std::sort(rows.begin(), rows.end());
        return rows;
    };
    EXPECT_EQ(sorted_rows(S), sorted_rows(Sp));
}

TEST(Fuse, SingleConceptIsDegenerate) {
    SeededRng rng(1);
    const FusionMlp mlp = init_fusion(3, rng);
    const ConceptEmbeddingBank bank = random_bank(1, 3, 1);
    EXPECT_THROW(fuse(bank, bank.C, mlp, 0), DegenerateError);
}

TEST(Relevance, Examples) {
    const ConceptEmbeddingBank bank{Matrix{{1, 2, 0}, {5, 5, 5}, {1, 1, 1}}, {0, 1, 2}};
    const Matrix S{{2, 4, 0}, {-2, 1, 7}};
    const auto w = relevance(bank, S, 0);
    EXPECT_NEAR(w.lambda[1], 1.0, 1e-15);
    EXPECT_EQ(w.lambda[2], 0.0);
    EXPECT_EQ(w.active, 0u);

    const Matrix R = random_matrix(4, 2, 3);
    const auto wr = relevance(bank, R, 1);
    for (std::size_t k = 0; k < 2; ++k) {
        const std::size_t i = k == 0 ? 0 : 2;
        const auto c = bank.C.row(1);
        const auto s = R.row(k);
        const double ref = (c[0] * s[0] + c[1] * s[1] + c[2] * s[2]) /
                           std::sqrt((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) *
                                     (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]));
        EXPECT_NEAR(wr.lambda[i], ref, 1e-12);
    }
}

TEST(Relevance, ZeroRowThrows) {
    const ConceptEmbeddingBank bank = random_bank(2, 3, 1);
    EXPECT_THROW(relevance(bank, Matrix(1, 3), 0), DomainError);
}

TEST(Relevance, RawModeIsClipped) {
    const ConceptEmbeddingBank bank{Matrix{{3, 0}, {1, 1}}, {0, 1}};
    const auto w = relevance(bank, Matrix{{5, 0}}, 0, RelevanceMode::kRawInnerProduct);
    EXPECT_EQ(w.lambda[1], 1.0);
    const auto v = relevance(bank, Matrix{{0.1, 7}}, 0, RelevanceMode::kRawInnerProduct);
    EXPECT_NEAR(v.lambda[1], 0.3, 1e-15);
}

TEST(Relevance, AlwaysInRange) {
    SeededRng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const ConceptEmbeddingBank bank = random_bank(5, 6, 100 + trial);
        const Matrix S = gaussian(rng, 4, 6, 0.0, 3.0);
        for (auto mode : {RelevanceMode::kCosine, RelevanceMode::kRawInnerProduct}) {
            for (double v : relevance(bank, S, 2, mode).lambda) {
                EXPECT_GE(v, -1.0);
                EXPECT_LE(v, 1.0);
            }
        }
    }
}

TEST(EffectiveRank, Examples) {
    const Matrix rank1 = naive_matmul(random_matrix(1, 5, 1), random_matrix(2, 1, 7));
    EXPECT_NEAR(effective_rank(rank1), 1.0, 1e-8);
    EXPECT_NEAR(effective_rank(Matrix::identity(6)), 6.0, 1e-8);
    EXPECT_THROW(effective_rank(Matrix(3, 3)), DomainError);
}

TEST(EffectiveRank, BoundedByRowsAndMatchesEigen) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Matrix m = random_matrix(20 + seed, 4, 9);
        const Vector sv = testing::eigen_singular_values(m);
        double total = 0.0;
        for (double s : sv) {
            total += s;
        }
        double h = 0.0;
        for (double s : sv) {
            h -= s / total * std::log(s / total);
        }
        EXPECT_NEAR(effective_rank(m), std::exp(h), 1e-10);
        EXPECT_LE(effective_rank(m), 4.0 + 1e-12);
        EXPECT_GE(effective_rank(m), 1.0);
    }
}

TEST(SetInvariance, FullPathLambdaIsEquivariant) {
    SeededRng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t G = 2 + rng.below(5);
        const std::size_t d = 16;
        const ConceptEmbeddingBank bank = random_bank(G, d, 500 + trial);
        const DecoderParams dec = init_decoder(d, 2, rng);
        const FusionMlp mlp = init_fusion(d, rng);
        const Matrix prompt = gaussian(rng, 2, d, 0.0, 1.0);
        const auto perm = random_perm(G, rng);
        const ConceptEmbeddingBank pb{permute_rows(bank.C, perm), bank.concept_ids};
        const Matrix Pp = decoder_forward(init_proxies(bank).P, prompt, dec);
        const Matrix Ppp = decoder_forward(init_proxies(pb).P, prompt, dec);
        const Matrix Sall = fuse_all(bank.C, Pp, mlp);
        const Matrix Sallp = fuse_all(pb.C, Ppp, mlp);
        EXPECT_LT(max_abs_diff(Sallp, permute_rows(Sall, perm)), 1e-12);
        for (std::size_t g = 0; g < G; ++g) {
            const auto w = relevance_forward(bank.C, init_proxies(bank).P, prompt, dec, mlp,
                                             perm[g], RelevanceMode::kCosine)
                               .lambda;
            const auto wp = relevance_forward(pb.C, init_proxies(pb).P, prompt, dec, mlp, g,
                                              RelevanceMode::kCosine)
                                .lambda;
            for (std::size_t i = 0; i < G; ++i) {
                if (i != g) {
                    EXPECT_NEAR(wp.lambda[i], w.lambda[perm[i]], 1e-12);
                }
            }
        }
    }
}

TEST(RankCollapse, DeeperAttentionStacksLowerEffectiveRank) {
    int fewer = 0;
    for (std::uint64_t trial = 0; trial < 20; ++trial) {
        SeededRng rng(derive_seed(3, "rank", trial));
        const Matrix P = gaussian(rng, 6, 16, 0.0, 1.0);
        const Matrix prompt = gaussian(rng, 2, 16, 0.0, 1.0);
        const DecoderParams four = init_decoder(16, 4, rng, false);
        DecoderParams two = four;
        two.layers.resize(2);
        if (effective_rank(decoder_forward(P, prompt, four)) <
            effective_rank(decoder_forward(P, prompt, two))) {
            ++fewer;
        }
    }
    EXPECT_GE(fewer, 17);
}

}  // namespace
}  // namespace fl2t::agg
