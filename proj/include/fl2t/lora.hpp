// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "fl2t/numerics.hpp"

namespace fl2t::lora {

/// Low-rank update delta = A * B for one layer (A is a x r, B is r x b).
struct LoraAdapter {
    std::size_t layer_index = 0;
    Matrix A;
    Matrix B;

    std::size_t rank() const noexcept { return A.cols(); }
    std::size_t in_dim() const noexcept { return A.rows(); }
    std::size_t out_dim() const noexcept { return B.cols(); }
};

/// One concept's adapters, exactly one per layer, layer indices 0..L-1.
struct AdapterSet {
    int concept_id = 0;
    std::vector<LoraAdapter> adapters;

    std::size_t num_layers() const noexcept { return adapters.size(); }
    std::size_t rank() const noexcept { return adapters.empty() ? 0 : adapters.front().rank(); }
};

/// Unit-norm, non-negative mixing weights over stored concepts.
struct EwaWeights {
    Vector psi;
};

/// A ~ N(0, 0.01^2), B = 0, so the initial delta is exactly zero.
/// Throws DomainError when r > min(a, b) or r == 0.
LoraAdapter init_adapter(std::size_t a, std::size_t b, std::size_t r, SeededRng& rng,
                         std::size_t layer_index = 0);

AdapterSet init_adapter_set(int concept_id, std::size_t num_layers, std::size_t a,
                            std::size_t b, std::size_t r, SeededRng& rng);

Matrix delta_weight(const LoraAdapter& ad);
std::vector<Matrix> delta_weights(const AdapterSet& set);

/// Checks the AdapterSet invariants (contiguous layers, shared rank, conforming A/B).
void validate(const AdapterSet& set);

/// W_l' = W_l + scale * dW_l per layer. The base is taken by const reference and
/// left untouched. Throws ShapeError naming the layer on mismatch.
std::vector<Matrix> merge(const std::vector<Matrix>& base, const std::vector<Matrix>& deltas,
                          double scale = 1.0);

/// psi = M^2 / ||M^2|| where M_i is the row-wise max over prompt tokens of
/// <token, bank_i>. Throws DegenerateError when every M_i is zero.
EwaWeights ewa_weights(const Matrix& prompt_tokens, const Matrix& concept_bank);

/// Per-layer sum_i psi_i * delta_i over all sets.
std::vector<Matrix> ewa_aggregate(const std::vector<AdapterSet>& sets, const EwaWeights& w);

}  // namespace fl2t::lora
