// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "fl2t/numerics.hpp"
#include "fl2t/regularizers.hpp"

namespace fl2t::agg {

/// Stable concept embeddings C (row i belongs to concept_ids[i]).
struct ConceptEmbeddingBank {
    Matrix C;
    std::vector<int> concept_ids;

    std::size_t size() const noexcept { return C.rows(); }
};

/// Learnable per-concept proxies, same shape as the embedding bank.
struct ProxyBank {
    Matrix P;
};

/// Single-head scaled dot-product attention projections (each d x d).
struct AttentionParams {
    Matrix Wq, Wk, Wv, Wo;
};

struct DecoderLayer {
    AttentionParams self_attn;
    AttentionParams cross_attn;
    Matrix ffn_in;   // d x 4d
    Matrix ffn_out;  // 4d x d
};

/// Residual blocks per layer: self-attention, cross-attention with the prompt,
/// tanh feed-forward. Optional parameter-free pre-block layer normalization.
struct DecoderParams {
    std::vector<DecoderLayer> layers;
    bool use_ffn = true;
    bool layer_norm = false;

    std::size_t width() const noexcept {
        return layers.empty() ? 0 : layers.front().self_attn.Wq.rows();
    }
};

/// f(C_i | P'_i): [C_i, P'_i] (2d) -> tanh hidden (2d) -> d.
struct FusionMlp {
    Matrix W1;  // 2d x 2d
    Matrix b1;  // 1 x 2d
    Matrix W2;  // 2d x d
    Matrix b2;  // 1 x d
};

enum class RelevanceMode {
    kCosine,
    /// C_g . S_i clipped to [-1, 1] (zero gradient outside).
    kRawInnerProduct,
};

/// Throws ShapeError for an empty bank, mismatched ids, or a zero row.
void validate(const ConceptEmbeddingBank& bank);

ProxyBank init_proxies(const ConceptEmbeddingBank& bank);

DecoderParams init_decoder(std::size_t d, std::size_t num_layers, SeededRng& rng,
                           bool use_ffn = true, bool layer_norm = false);
/// Same shapes as `like`, all zeros.
DecoderParams zeros_like(const DecoderParams& like);

FusionMlp init_fusion(std::size_t d, SeededRng& rng);
FusionMlp zeros_like(const FusionMlp& like);

/// Runs every decoder layer over the proxies, cross-attending to `prompt` (tokens x d).
Matrix decoder_forward(const Matrix& P, const Matrix& prompt, const DecoderParams& params);

/// S rows for every concept, in bank order.
Matrix fuse_all(const Matrix& C, const Matrix& Pprime, const FusionMlp& mlp);

/// Bank row indices other than g, ordered by ascending concept id.
std::vector<std::size_t> canonical_others(const ConceptEmbeddingBank& bank, std::size_t g);

/// S_i = mlp([C_i, P'_i]) for all i != g, rows ordered by ascending concept id.
/// Throws DegenerateError when the bank has fewer than two concepts.
Matrix fuse(const ConceptEmbeddingBank& bank, const Matrix& Pprime, const FusionMlp& mlp,
            std::size_t g);

/// lambda_i = sim(C_g, S_i) for i != g; S rows as produced by fuse().
reg::RelevanceWeights relevance(const ConceptEmbeddingBank& bank, const Matrix& S, std::size_t g,
                                RelevanceMode mode = RelevanceMode::kCosine);

/// exp of the Shannon entropy of the normalized singular-value distribution.
/// Throws DomainError for the zero matrix.
double effective_rank(const Matrix& m);

// ---------------------------------------------------------------------------
// Differentiable path used by the consolidation objective.

struct AttentionTape {
    Matrix xq, xkv, q, k, v, attn, mixed;
};

struct LayerNormTape {
    Matrix normalized;
    Vector inv_std;
};

struct DecoderLayerTape {
    LayerNormTape ln_self, ln_cross, ln_ffn;
    AttentionTape self_attn, cross_attn;
    Matrix ffn_input, ffn_hidden;
};

struct DecoderTape {
    Matrix prompt;
    std::vector<DecoderLayerTape> layers;
    Matrix output;
};

DecoderTape decoder_forward_tape(const Matrix& P, const Matrix& prompt,
                                 const DecoderParams& params);

struct DecoderGrads {
    Matrix dP;
    Matrix dprompt;
    DecoderParams dparams;
};

DecoderGrads decoder_backward(const DecoderTape& tape, const DecoderParams& params,
                              const Matrix& dout);

struct FusionTape {
    Matrix input;   // G x 2d
    Matrix hidden;  // G x 2d, post-tanh
    Matrix output;  // G x d
};

FusionTape fuse_all_tape(const Matrix& C, const Matrix& Pprime, const FusionMlp& mlp);

struct FusionGrads {
    Matrix dC;
    Matrix dPprime;
    FusionMlp dmlp;
};

FusionGrads fuse_backward(const FusionTape& tape, const FusionMlp& mlp, const Matrix& dS);

/// Forward state of the full proxy -> relevance computation for active concept g.
struct RelevancePath {
    DecoderTape decoder;
    FusionTape fusion;
    /// All G fused rows in bank order.
    Matrix S_all;
    reg::RelevanceWeights lambda;
};

RelevancePath relevance_forward(const Matrix& C, const Matrix& P, const Matrix& prompt,
                                const DecoderParams& decoder, const FusionMlp& fusion,
                                std::size_t g, RelevanceMode mode);

struct RelevancePathGrads {
    Matrix dC;
    Matrix dP;
    Matrix dprompt;
    DecoderParams ddecoder;
    FusionMlp dfusion;
};

/// Back-propagates d/d lambda (length G, active entry ignored) and an extra
/// upstream gradient on S_all (may be empty).
RelevancePathGrads relevance_backward(const RelevancePath& path, const Matrix& C,
                                      const DecoderParams& decoder, const FusionMlp& fusion,
                                      std::span<const double> dlambda, const Matrix& dS_all,
                                      RelevanceMode mode);

}  // namespace fl2t::agg
