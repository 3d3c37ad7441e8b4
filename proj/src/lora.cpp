// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/lora.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::lora {

namespace {
constexpr double kInitStd = 0.01;
}

LoraAdapter init_adapter(std::size_t a, std::size_t b, std::size_t r, SeededRng& rng,
                         std::size_t layer_index) {
    if (r == 0 || r > std::min(a, b)) {
        throw DomainError("init_adapter: rank " + std::to_string(r) + " invalid for " +
                          std::to_string(a) + "x" + std::to_string(b));
    }
    return LoraAdapter{layer_index, gaussian(rng, a, r, 0.0, kInitStd), Matrix(r, b)};
}

AdapterSet init_adapter_set(int concept_id, std::size_t num_layers, std::size_t a,
                            std::size_t b, std::size_t r, SeededRng& rng) {
    AdapterSet set{concept_id, {}};
    set.adapters.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        set.adapters.push_back(init_adapter(a, b, r, rng, l));
    }
    return set;
}

Matrix delta_weight(const LoraAdapter& ad) { return matmul(ad.A, ad.B); }

std::vector<Matrix> delta_weights(const AdapterSet& set) {
    std::vector<Matrix> out;
    out.reserve(set.adapters.size());
    for (const auto& ad : set.adapters) {
        out.push_back(delta_weight(ad));
    }
    return out;
}

void validate(const AdapterSet& set) {
    const std::size_t r = set.rank();
    for (std::size_t l = 0; l < set.adapters.size(); ++l) {
        const auto& ad = set.adapters[l];
        if (ad.layer_index != l) {
            throw ShapeError("adapter set " + std::to_string(set.concept_id) +
                             ": layer index gap at position " + std::to_string(l));
        }
        if (ad.A.cols() != r || ad.B.rows() != r) {
            throw ShapeError("adapter set " + std::to_string(set.concept_id) +
                             ": inconsistent rank at layer " + std::to_string(l));
        }
        if (r > std::min(ad.A.rows(), ad.B.cols())) {
            throw DomainError("adapter set " + std::to_string(set.concept_id) +
                              ": rank exceeds layer dimensions at layer " + std::to_string(l));
        }
    }
}

std::vector<Matrix> merge(const std::vector<Matrix>& base, const std::vector<Matrix>& deltas,
                          double scale) {
    if (base.size() != deltas.size()) {
        throw ShapeError("merge: " + std::to_string(base.size()) + " base layers vs " +
                         std::to_string(deltas.size()) + " deltas");
    }
    std::vector<Matrix> out;
    out.reserve(base.size());
    for (std::size_t l = 0; l < base.size(); ++l) {
        if (!base[l].same_shape(deltas[l])) {
            throw ShapeError("merge: layer " + std::to_string(l) + " base " +
                             base[l].shape_string() + " vs delta " + deltas[l].shape_string());
        }
        out.push_back(base[l]);
        if (scale != 0.0) {
            out.back().add_scaled(deltas[l], scale);
        }
    }
    return out;
}

EwaWeights ewa_weights(const Matrix& prompt_tokens, const Matrix& concept_bank) {
    if (prompt_tokens.cols() != concept_bank.cols()) {
        throw ShapeError("ewa_weights: prompt " + prompt_tokens.shape_string() + " vs bank " +
                         concept_bank.shape_string());
    }
    if (prompt_tokens.rows() == 0 || concept_bank.rows() == 0) {
        throw ShapeError("ewa_weights: need at least one prompt token and one stored concept");
    }
    const Matrix sims = matmul_nt(concept_bank, prompt_tokens);  // g x tokens
    Vector sq(concept_bank.rows());
    double total = 0.0;
    for (std::size_t i = 0; i < sims.rows(); ++i) {
        auto r = sims.row(i);
        const double m = *std::max_element(r.begin(), r.end());
        sq[i] = m * m;
        total += sq[i] * sq[i];
    }
    if (total == 0.0) {
        throw DegenerateError("ewa_weights: all relations are zero, normalization undefined");
    }
    const double norm = std::sqrt(total);
    for (double& v : sq) {
        v /= norm;
    }
    return EwaWeights{std::move(sq)};
}

std::vector<Matrix> ewa_aggregate(const std::vector<AdapterSet>& sets, const EwaWeights& w) {
    if (sets.empty()) {
        throw ShapeError("ewa_aggregate: no adapter sets");
    }
    if (w.psi.size() != sets.size()) {
        throw ShapeError("ewa_aggregate: " + std::to_string(w.psi.size()) + " weights for " +
                         std::to_string(sets.size()) + " adapter sets");
    }
    const std::size_t num_layers = sets.front().num_layers();
    std::vector<Matrix> out;
    out.reserve(num_layers);
    for (std::size_t l = 0; l < num_layers; ++l) {
        const auto& first = sets.front().adapters[l];
        Matrix acc(first.in_dim(), first.out_dim());
        for (std::size_t i = 0; i < sets.size(); ++i) {
            if (sets[i].num_layers() != num_layers) {
                throw ShapeError("ewa_aggregate: set " + std::to_string(i) + " has " +
                                 std::to_string(sets[i].num_layers()) + " layers, expected " +
                                 std::to_string(num_layers));
            }
            const Matrix d = delta_weight(sets[i].adapters[l]);
            if (!d.same_shape(acc)) {
                throw ShapeError("ewa_aggregate: set " + std::to_string(i) + " layer " +
                                 std::to_string(l) + " delta " + d.shape_string());
            }
            if (w.psi[i] == 1.0) {
                acc += d;
            } else if (w.psi[i] != 0.0) {
                acc.add_scaled(d, w.psi[i]);
            }
        }
        out.push_back(std::move(acc));
    }
    return out;
}

}  // namespace fl2t::lora
