// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

#include "fl2t/numerics.hpp"

namespace fl2t::drift {

/// Per-concept gradient vectors m_i, all of one dimension.
struct GradientSet {
    std::vector<Vector> m;

    std::size_t size() const noexcept { return m.size(); }
    std::size_t dim() const noexcept { return m.empty() ? 0 : m.front().size(); }
};

/// Throws ShapeError for an empty set or ragged dimensions.
void validate(const GradientSet& g);

struct DriftReport {
    double norm_cidm = 0.0;
    double norm_fl2t = 0.0;
    std::optional<std::size_t> k_star;
    std::optional<double> epsilon;
    Vector lambda_used;
    /// sum_i |lambda_i| ||m_i||
    double bound_rhs = 0.0;
    /// sum_i ||m_i||
    double bound_uniform = 0.0;
    bool degenerate = false;

    /// bound_rhs - norm_fl2t; non-negative up to rounding.
    double slack() const noexcept { return bound_rhs - norm_fl2t; }
};

/// sum_i lambda_i m_i. Throws DomainError for a coefficient outside [-1, 1] and
/// ShapeError for a length mismatch.
Vector aggregate(const GradientSet& g, std::span<const double> lambda);

/// Evaluates both sides of ||sum lambda_i m_i|| <= sum |lambda_i| ||m_i|| <= sum ||m_i||.
DriftReport check_upper_bound(const GradientSet& g, std::span<const double> lambda);

/// Lowers the coefficient of k* = argmax_k <M, m_k> (lowest index on ties) from 1
/// to 1 - eps with eps = min{1, 2<M, m_k*>/||m_k*||^2} / 2. When M = sum m_i is
/// exactly zero, sets `degenerate` and returns lambda = 1.
DriftReport find_reducing_coefficients(const GradientSet& g);

/// |  ||M - eps m_k||^2 - (||M||^2 - 2 eps <M, m_k> + eps^2 ||m_k||^2)  |
double quadratic_identity_error(const Vector& M, const Vector& mk, double eps);

/// X' = X + sum_{Y != X} <X, Y> Y for every member, using the current vectors.
/// Throws DomainError for fewer than two vectors, ShapeError for ragged input.
std::vector<Vector> simplified_attention_layer(const std::vector<Vector>& set);

enum class InteractionKind { kSummation, kConcatenation, kAttention };

/// Parses "summation", "concatenation", "attention". Throws DomainError otherwise.
InteractionKind interaction_kind_from_string(std::string_view name);

/// Pairwise interactions after `layers` layers over n embeddings of width d.
/// Throws DomainError when any argument is zero.
std::uint64_t interaction_count(InteractionKind kind, std::uint64_t n, std::uint64_t d,
                                std::uint64_t layers);

/// Coefficients of X_2 on (X, Y, Z) after two simplified attention layers applied
/// to unit vectors with pairwise cosines (a_xy, a_xz, a_yz).
std::array<double, 3> two_layer_coefficients(double a_xy, double a_xz, double a_yz);

/// The published closed-form X_2 coefficients, for comparison only.
std::array<double, 3> printed_x2_coefficients(double a_xy, double a_xz, double a_yz);

struct TrialRow {
    std::size_t trial_id = 0;
    std::size_t n = 0;
    std::size_t dim = 0;
    double norm_cidm = 0.0;
    double norm_fl2t = 0.0;
    bool reduced = false;
    bool degenerate = false;
    /// Upper-bound check with random mixed-sign lambda.
    double bound_slack = 0.0;
    double identity_error = 0.0;
};

struct TrialSummary {
    std::vector<TrialRow> rows;
    std::size_t bound_held = 0;
    std::size_t reduced = 0;
    std::size_t degenerate = 0;
    double min_slack = 0.0;
    double max_identity_error = 0.0;
};

/// Random GradientSets with N in [1, max_n], dimension in [1, max_dim]; entries
/// N(0, scale_i^2) with a per-vector scale log-uniform in [0.1, 10].
TrialSummary run_trials(std::size_t trials, std::size_t max_n, std::size_t max_dim,
                        std::uint64_t seed);

}  // namespace fl2t::drift
