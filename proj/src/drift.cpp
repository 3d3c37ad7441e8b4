// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/drift.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::drift {

void validate(const GradientSet& g) {
    if (g.m.empty()) {
        throw ShapeError("gradient set is empty");
    }
    for (std::size_t i = 0; i < g.m.size(); ++i) {
        if (g.m[i].size() != g.dim()) {
            throw ShapeError("gradient " + std::to_string(i) + " has dimension " +
                             std::to_string(g.m[i].size()) + ", expected " +
                             std::to_string(g.dim()));
        }
    }
}

Vector aggregate(const GradientSet& g, std::span<const double> lambda) {
    validate(g);
    if (lambda.size() != g.size()) {
        throw ShapeError("aggregate: " + std::to_string(lambda.size()) + " coefficients for " +
                         std::to_string(g.size()) + " gradients");
    }
    Vector out(g.dim(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double l = lambda[i];
        if (!(l >= -1.0 && l <= 1.0)) {
            throw DomainError("aggregate: coefficient " + std::to_string(i) + " = " +
                              std::to_string(l) + " outside [-1, 1]");
        }
        for (std::size_t k = 0; k < out.size(); ++k) {
            out[k] += l * g.m[i][k];
        }
    }
    return out;
}

DriftReport check_upper_bound(const GradientSet& g, std::span<const double> lambda) {
    DriftReport r;
    const Vector ones(g.size(), 1.0);
    r.norm_cidm = norm2(aggregate(g, ones));
    r.norm_fl2t = norm2(aggregate(g, lambda));
    r.lambda_used.assign(lambda.begin(), lambda.end());
    for (std::size_t i = 0; i < g.size(); ++i) {
        const double n = norm2(g.m[i]);
        r.bound_rhs += std::abs(lambda[i]) * n;
        r.bound_uniform += n;
    }
    return r;
}

double quadratic_identity_error(const Vector& M, const Vector& mk, double eps) {
    Vector diff(M.size());
    for (std::size_t k = 0; k < M.size(); ++k) {
        diff[k] = M[k] - eps * mk[k];
    }
    const double lhs = dot(diff, diff);
    const double rhs = dot(M, M) - 2.0 * eps * dot(M, mk) + eps * eps * dot(mk, mk);
    return std::abs(lhs - rhs);
}

DriftReport find_reducing_coefficients(const GradientSet& g) {
    validate(g);
    const Vector ones(g.size(), 1.0);
    const Vector M = aggregate(g, ones);
    bool all_zero = true;
    for (double v : M) {
        all_zero = all_zero && v == 0.0;
    }
    if (all_zero) {
        DriftReport r = check_upper_bound(g, ones);
        r.degenerate = true;
        return r;
    }
    std::size_t k = 0;
    double best = dot(M, g.m[0]);
    for (std::size_t i = 1; i < g.size(); ++i) {
        const double v = dot(M, g.m[i]);
        if (v > best) {
            best = v;
            k = i;
        }
    }
    const double mk_sq = dot(g.m[k], g.m[k]);
    const double eps = 0.5 * std::min(1.0, 2.0 * best / mk_sq);
    Vector lambda = ones;
    lambda[k] = 1.0 - eps;
    DriftReport r = check_upper_bound(g, lambda);
    r.k_star = k;
    r.epsilon = eps;
    return r;
}

std::vector<Vector> simplified_attention_layer(const std::vector<Vector>& set) {
    if (set.size() < 2) {
        throw DomainError("simplified attention needs at least two vectors");
    }
    for (const auto& v : set) {
        if (v.size() != set.front().size()) {
            throw ShapeError("simplified attention: ragged input");
        }
    }
    std::vector<Vector> out = set;
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (std::size_t j = 0; j < set.size(); ++j) {
            if (i == j) {
                continue;
            }
            const double a = dot(set[i], set[j]);
            for (std::size_t k = 0; k < out[i].size(); ++k) {
                out[i][k] += a * set[j][k];
            }
        }
    }
    return out;
}

InteractionKind interaction_kind_from_string(std::string_view name) {
    if (name == "summation") {
        return InteractionKind::kSummation;
    }
    if (name == "concatenation") {
        return InteractionKind::kConcatenation;
    }
    if (name == "attention") {
        return InteractionKind::kAttention;
    }
    throw DomainError("unknown interaction kind '" + std::string(name) + "'");
}

std::uint64_t interaction_count(InteractionKind kind, std::uint64_t n, std::uint64_t d,
                                std::uint64_t layers) {
    if (n == 0 || d == 0 || layers == 0) {
        throw DomainError("interaction_count: n, d and layers must be positive");
    }
    switch (kind) {
        case InteractionKind::kSummation:
            return layers * n * d;
        case InteractionKind::kConcatenation:
            return 0;
        case InteractionKind::kAttention:
            return layers * n * n * d;
    }
    throw DomainError("interaction_count: bad kind");
}

namespace {

using Coeffs = std::array<double, 3>;

// Vectors are tracked as coefficients on (X, Y, Z); inner products go through the Gram matrix.
double gram_dot(const Coeffs& u, const Coeffs& v, const std::array<Coeffs, 3>& gram) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 3; ++j) {
            s += u[i] * gram[i][j] * v[j];
        }
    }
    return s;
}

}  // namespace

std::array<double, 3> two_layer_coefficients(double a_xy, double a_xz, double a_yz) {
    const std::array<Coeffs, 3> gram{{{1.0, a_xy, a_xz}, {a_xy, 1.0, a_yz}, {a_xz, a_yz, 1.0}}};
    std::array<Coeffs, 3> cur{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
    for (int layer = 0; layer < 2; ++layer) {
        std::array<Coeffs, 3> next = cur;
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                if (i == j) {
                    continue;
                }
                const double a = gram_dot(cur[i], cur[j], gram);
                for (std::size_t k = 0; k < 3; ++k) {
                    next[i][k] += a * cur[j][k];
                }
            }
        }
        cur = next;
    }
    return cur[0];
}

std::array<double, 3> printed_x2_coefficients(double a_xy, double a_xz, double a_yz) {
    const double s = a_xy * a_xy + a_yz * a_yz + a_xz * a_xz;
    return {
        1.0 + (a_xy * a_xy + a_xz * a_xz) * (s + 3.0) + 6.0 * a_xy * a_yz * a_xz,
        a_xy * (3.0 * a_yz * a_yz - 2.0) + (a_xy + a_xz * a_yz) * (s + 6.0),
        a_xz * (3.0 * a_yz * a_yz - 2.0) + (a_xz + a_xy * a_yz) * (s + 6.0),
    };
}

TrialSummary run_trials(std::size_t trials, std::size_t max_n, std::size_t max_dim,
                        std::uint64_t seed) {
    if (max_n == 0 || max_dim == 0) {
        throw DomainError("run_trials: max_n and max_dim must be positive");
    }
    TrialSummary s;
    s.min_slack = std::numeric_limits<double>::infinity();
    SeededRng rng(seed);
    for (std::size_t t = 0; t < trials; ++t) {
        TrialRow row;
        row.trial_id = t;
        row.n = 1 + rng.below(max_n);
        row.dim = 1 + rng.below(max_dim);
        GradientSet g;
        for (std::size_t i = 0; i < row.n; ++i) {
            const double scale = std::pow(10.0, -1.0 + 2.0 * rng.uniform());
            Vector v(row.dim);
            for (double& x : v) {
                x = scale * rng.normal();
            }
            g.m.push_back(std::move(v));
        }
        Vector lambda(row.n);
        for (double& l : lambda) {
            l = -1.0 + 2.0 * rng.uniform();
        }
        const DriftReport bound = check_upper_bound(g, lambda);
        row.bound_slack = std::min(bound.slack(), bound.bound_uniform - bound.bound_rhs);
        if (row.bound_slack >= -1e-10) {
            ++s.bound_held;
        }
        s.min_slack = std::min(s.min_slack, row.bound_slack);

        const DriftReport red = find_reducing_coefficients(g);
        row.norm_cidm = red.norm_cidm;
        row.norm_fl2t = red.norm_fl2t;
        row.degenerate = red.degenerate;
        row.reduced = !red.degenerate && red.norm_fl2t < red.norm_cidm;
        if (!red.degenerate) {
            const Vector ones(row.n, 1.0);
            row.identity_error =
                quadratic_identity_error(aggregate(g, ones), g.m[*red.k_star], *red.epsilon);
        }
        s.reduced += row.reduced ? 1 : 0;
        s.degenerate += row.degenerate ? 1 : 0;
        s.max_identity_error = std::max(s.max_identity_error, row.identity_error);
        s.rows.push_back(row);
    }
    if (trials == 0) {
        s.min_slack = 0.0;
    }
    return s;
}

}  // namespace fl2t::drift
