// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fl2t/numerics.hpp"

namespace fl2t::diffusion {

/// Linear-beta DDPM schedule; timesteps are 1-based.
struct NoiseSchedule {
    int T = 0;
    Vector betas;
    Vector alphas;
    Vector alpha_bars;

    double beta(int t) const { return betas[static_cast<std::size_t>(t - 1)]; }
    double alpha(int t) const { return alphas[static_cast<std::size_t>(t - 1)]; }
    double alpha_bar(int t) const { return alpha_bars[static_cast<std::size_t>(t - 1)]; }
};

/// Throws DomainError unless 0 < beta_start <= beta_end < 1 and T >= 2.
NoiseSchedule make_schedule(int T, double beta_start, double beta_end);

/// z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps. Throws DomainError for t outside [1, T].
Vector forward_noise(std::span<const double> x0, int t, std::span<const double> eps,
                     const NoiseSchedule& sched);

/// Concept tokens live above this offset: token id = kConceptTokenBase + concept_id.
inline constexpr int kConceptTokenBase = 1'000'000;
inline constexpr int concept_token(int concept_id) { return kConceptTokenBase + concept_id; }
inline constexpr bool is_concept_token(int token) { return token >= kConceptTokenBase; }

/// One concept's training data: samples with their prompts (context + concept token).
struct ConceptTask {
    int concept_id = 0;
    int new_concept_count = 1;
    std::vector<Vector> samples;
    std::vector<std::vector<int>> prompts;

    std::size_t size() const noexcept { return samples.size(); }
};

/// Throws ConfigError when empty, ragged, or a prompt lacks the concept token.
void validate(const ConceptTask& task);

/// Base network theta_0: an input projection, L square tanh layers (the adapted
/// layers), and an output projection. Input is [z_t, time embedding, prompt embedding].
struct Denoiser {
    std::size_t data_dim = 2;
    std::size_t time_dim = 8;
    std::size_t embed_dim = 16;
    std::size_t width = 64;

    Matrix W_in, b_in;
    std::vector<Matrix> W;  // width x width each
    std::vector<Matrix> b;  // 1 x width each
    Matrix W_out, b_out;

    /// Embeddings for non-concept tokens (context words, pretraining classes).
    Matrix token_table;

    std::size_t num_layers() const noexcept { return W.size(); }
    std::size_t input_dim() const noexcept { return data_dim + time_dim + embed_dim; }
};

Denoiser init_denoiser(std::size_t data_dim, std::size_t time_dim, std::size_t embed_dim,
                       std::size_t width, std::size_t num_layers, std::size_t base_vocab,
                       SeededRng& rng);

/// Sinusoidal embedding of timestep t with `dim` (even) entries.
Vector time_embedding(int t, std::size_t dim);

/// Non-owning view resolving token ids to embedding rows.
struct TokenEmbeddings {
    const Matrix* base = nullptr;
    const Matrix* concepts = nullptr;
    std::span<const int> concept_ids;

    /// Throws VocabularyError for an unknown token.
    std::span<const double> row(int token) const;
    /// Bank row for a concept token, or -1 for base tokens.
    long concept_row(int token) const;
    /// Stacked token embeddings (tokens x d).
    Matrix stack(std::span<const int> tokens) const;
    /// Mean of the token embeddings.
    Vector pooled(std::span<const int> tokens) const;
};

/// eps_hat = model(z_t | prompt, t).
class NoisePredictor {
public:
    virtual ~NoisePredictor() = default;
    virtual Vector predict(std::span<const double> z, std::span<const int> tokens,
                           int t) const = 0;
    virtual std::size_t data_dim() const = 0;
};

/// Base network with merged hidden weights and a concept embedding bank.
class AdaptedDenoiser final : public NoisePredictor {
public:
    /// `hidden` holds the effective weights W_l^0 + delta_l (ShapeError on mismatch).
    AdaptedDenoiser(const Denoiser& base, std::vector<Matrix> hidden, Matrix concept_rows,
                    std::vector<int> concept_ids);

    Vector predict(std::span<const double> z, std::span<const int> tokens, int t) const override;
    std::size_t data_dim() const override { return base_->data_dim; }

    const Denoiser& base() const noexcept { return *base_; }
    const std::vector<Matrix>& hidden() const noexcept { return hidden_; }
    TokenEmbeddings tokens() const noexcept { return {&base_->token_table, &concepts_, ids_}; }

private:
    const Denoiser* base_;
    std::vector<Matrix> hidden_;
    Matrix concepts_;
    std::vector<int> ids_;
};

Vector denoise_predict(const NoisePredictor& model, std::span<const double> z,
                       std::span<const int> tokens, int t);

/// Monte-Carlo estimate of E ||eps - eps_hat(z_t | prompt, t)||^2 over the batch.
/// Per sample: t ~ U{1..T}, then eps ~ N(0, I).
double cdm_loss(const NoisePredictor& model, const ConceptTask& task,
                std::span<const std::size_t> batch, SeededRng& rng, const NoiseSchedule& sched);

/// Ancestral DDPM sampling from z_T ~ N(0, I). Throws DomainError for n == 0.
std::vector<Vector> sample(const NoisePredictor& model, std::span<const int> prompt,
                           std::size_t n, SeededRng& rng, const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Batched forward/backward used for training.

/// One noised training example.
struct NoisedExample {
    Vector z;
    Vector eps;
    int t = 1;
    std::span<const int> prompt;
};

/// Draws (t, eps) for each batch entry in the same order as cdm_loss.
std::vector<NoisedExample> draw_examples(const ConceptTask& task,
                                         std::span<const std::size_t> batch, SeededRng& rng,
                                         const NoiseSchedule& sched);

struct DenoiserGrads {
    Matrix W_in, b_in;
    std::vector<Matrix> W, b;  // W holds d/d(effective hidden weight)
    Matrix W_out, b_out;
    /// d/d(prompt embedding) per example (batch x embed_dim).
    Matrix dembedding;
};

struct DenoiseLossResult {
    double loss = 0.0;
    DenoiserGrads grads;
};

/// Mean squared noise-prediction error over `examples` and its gradient with respect
/// to every network weight and each example's pooled prompt embedding.
DenoiseLossResult denoise_loss_and_grad(const Denoiser& base, const std::vector<Matrix>& hidden,
                                        const TokenEmbeddings& tokens,
                                        const std::vector<NoisedExample>& examples);

}  // namespace fl2t::diffusion
