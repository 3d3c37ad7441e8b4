// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "fl2t/lora.hpp"
#include "fl2t/numerics.hpp"

namespace fl2t::reg {

/// Layer-wise shared basis W_star[l] (s x b) and per-concept projections
/// H[i][l] (a x s) such that H[i][l] * W_star[l] approximates concept i's delta.
struct SharedSubspace {
    std::vector<Matrix> W_star;
    std::vector<std::vector<Matrix>> H;

    std::size_t shared_rank() const noexcept { return W_star.empty() ? 0 : W_star.front().rows(); }
};

/// Both factors drawn from N(0, 0.01^2).
SharedSubspace init_shared_subspace(std::size_t num_concepts, std::size_t num_layers,
                                    std::size_t a, std::size_t b, std::size_t s,
                                    SeededRng& rng);

/// lambda[i] for every concept; the entry at `active` is ignored.
struct RelevanceWeights {
    Vector lambda;
    std::size_t active = 0;
};

/// Throws DomainError if any non-active entry lies outside [-1, 1].
void validate(const RelevanceWeights& w);

struct RegularizerValue {
    double value = 0.0;
    /// Set when fewer than two concepts participate.
    bool degenerate = false;
};

/// Per-pair overlap sum_l ||A_i^l^T A_g^l||_F^2.
double pair_overlap(const lora::AdapterSet& a, const lora::AdapterSet& g);

/// sum_{i != g} pair_overlap(i, g).
RegularizerValue r1_orthogonality(const std::vector<lora::AdapterSet>& sets, std::size_t g);

/// sum_{i != g} lambda_i * pair_overlap(i, g).
RegularizerValue r1_weighted(const std::vector<lora::AdapterSet>& sets, std::size_t g,
                             const RelevanceWeights& w);

/// sum_i sum_l ||delta_i^l - H_i^l W_star^l||_F^2.
double r2_shared(const std::vector<lora::AdapterSet>& sets, const SharedSubspace& ss);

/// Temperature-scaled cosine contrastive loss over the rows of S.
/// Throws DomainError for fewer than two rows, a zero row, or tau <= 0.
double r3_contrastive(const Matrix& S, double tau);

enum class LossId { kR1, kR1Weighted, kR2, kR3 };

/// Parses "r1", "r1w", "r2", "r3". Throws DomainError otherwise.
LossId loss_id_from_string(std::string_view name);

/// Gradients with respect to every adapter factor, indexed [concept][layer].
struct AdapterGrads {
    std::vector<std::vector<Matrix>> dA;
    std::vector<std::vector<Matrix>> dB;
};

AdapterGrads zero_adapter_grads(const std::vector<lora::AdapterSet>& sets);

struct R1Gradient {
    double value = 0.0;
    AdapterGrads adapters;
    /// d/d lambda_i (zero at the active index); filled for the weighted form only.
    Vector dlambda;
};

/// Unweighted when `w` is null.
R1Gradient r1_gradient(const std::vector<lora::AdapterSet>& sets, std::size_t g,
                       const RelevanceWeights* w);

struct R2Gradient {
    double value = 0.0;
    /// d/d delta_i^l.
    std::vector<std::vector<Matrix>> ddelta;
    /// Chained through delta = A B.
    AdapterGrads adapters;
    SharedSubspace dsubspace;
};

R2Gradient r2_gradient(const std::vector<lora::AdapterSet>& sets, const SharedSubspace& ss);

struct R3Gradient {
    double value = 0.0;
    Matrix dS;
};

R3Gradient r3_gradient(const Matrix& S, double tau);

}  // namespace fl2t::reg
