// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "fl2t/aggregation.hpp"
#include "fl2t/lora.hpp"
#include "fl2t/regularizers.hpp"
#include "fl2t/toy_diffusion.hpp"

namespace fl2t::diffusion {

/// Everything the joint (second-step) objective can train. All per-concept
/// containers are indexed by bank row.
struct ConsolidationState {
    std::vector<lora::AdapterSet> adapters;
    agg::ConceptEmbeddingBank bank;
    agg::ProxyBank proxies;
    agg::DecoderParams decoder;
    agg::FusionMlp fusion;
    reg::SharedSubspace subspace;
};

/// Same shapes, zero values.
ConsolidationState zeros_like(const ConsolidationState& s);

/// Visits every trainable matrix in a fixed order.
void for_each_parameter(ConsolidationState& s,
                        const std::function<void(std::string_view, Matrix&)>& fn);
void for_each_parameter(const ConsolidationState& s,
                        const std::function<void(std::string_view, const Matrix&)>& fn);

Vector flatten(const ConsolidationState& s);
void unflatten(ConsolidationState& s, std::span<const double> values);

struct LossWeights {
    /// Coefficient on the relevance-weighted orthogonality term.
    double r1 = 1.0;
    double gamma1 = 0.1;
    double gamma2 = 0.1;
    double tau = 0.1;
};

struct ConsolidationTerms {
    double denoise = 0.0;
    double r1 = 0.0;
    double r2 = 0.0;
    double r3 = 0.0;
    double total = 0.0;
    reg::RelevanceWeights lambda;
};

struct ConsolidationResult {
    ConsolidationTerms terms;
    ConsolidationState grad;
};

struct ConsolidationOptions {
    LossWeights weights;
    agg::RelevanceMode mode = agg::RelevanceMode::kCosine;
    /// When set, lambda is held fixed and no gradient reaches the aggregation path
    /// through it.
    std::optional<reg::RelevanceWeights> lambda_override;
};

/// denoise + r1 * R'1 + gamma1 * R2 + gamma2 * R3 for active concept g (bank row).
///
/// Only `task` (the active concept's data) is read. The relevance weights come from
/// the proxy decoder and fusion MLP run on the prompt of batch[0]; R3 is applied to
/// the fused rows of every concept. Throws DegenerateError with fewer than two concepts.
ConsolidationResult consolidation_loss(const Denoiser& base, const ConsolidationState& state,
                                       const ConceptTask& task, std::size_t g,
                                       std::span<const std::size_t> batch,
                                       const ConsolidationOptions& options, SeededRng& rng,
                                       const NoiseSchedule& sched);

/// Effective hidden weights theta_0 + delta for one adapter set.
std::vector<Matrix> adapted_weights(const Denoiser& base, const lora::AdapterSet& set);

struct AdapterLossResult {
    double loss = 0.0;
    std::vector<Matrix> dA;
    std::vector<Matrix> dB;
    /// Gradient on the concept bank rows (same shape as bank.C).
    Matrix dC;
};

/// Denoising loss of theta_0 + delta(set) on `examples`, with gradients for the
/// adapter factors and the concept embeddings used in the prompts.
AdapterLossResult adapter_denoise_loss(const Denoiser& base, const lora::AdapterSet& set,
                                       const agg::ConceptEmbeddingBank& bank,
                                       const std::vector<NoisedExample>& examples);

}  // namespace fl2t::diffusion
