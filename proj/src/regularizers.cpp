// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::reg {

SharedSubspace init_shared_subspace(std::size_t num_concepts, std::size_t num_layers,
                                    std::size_t a, std::size_t b, std::size_t s,
                                    SeededRng& rng) {
    if (s == 0 || s > std::min(a, b)) {
        throw DomainError("shared rank " + std::to_string(s) + " invalid for " +
                          std::to_string(a) + "x" + std::to_string(b));
    }
    SharedSubspace ss;
    for (std::size_t l = 0; l < num_layers; ++l) {
        ss.W_star.push_back(gaussian(rng, s, b, 0.0, 0.01));
    }
    ss.H.resize(num_concepts);
    for (auto& per_layer : ss.H) {
        for (std::size_t l = 0; l < num_layers; ++l) {
            per_layer.push_back(gaussian(rng, a, s, 0.0, 0.01));
        }
    }
    return ss;
}

void validate(const RelevanceWeights& w) {
    for (std::size_t i = 0; i < w.lambda.size(); ++i) {
        if (i == w.active) {
            continue;
        }
        const double v = w.lambda[i];
        if (!(v >= -1.0 && v <= 1.0)) {
            throw DomainError("relevance weight " + std::to_string(i) + " = " +
                              std::to_string(v) + " outside [-1, 1]");
        }
    }
}

namespace {

void require_pairable(const std::vector<lora::AdapterSet>& sets, std::size_t g) {
    if (g >= sets.size()) {
        throw DomainError("active concept index " + std::to_string(g) + " out of range");
    }
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (sets[i].num_layers() != sets[g].num_layers()) {
            throw ShapeError("adapter set " + std::to_string(i) + " has " +
                             std::to_string(sets[i].num_layers()) + " layers, active set has " +
                             std::to_string(sets[g].num_layers()));
        }
    }
}

}  // namespace

double pair_overlap(const lora::AdapterSet& a, const lora::AdapterSet& g) {
    double total = 0.0;
    for (std::size_t l = 0; l < g.num_layers(); ++l) {
        total += frobenius_norm_sq(matmul_tn(a.adapters[l].A, g.adapters[l].A));
    }
    return total;
}

RegularizerValue r1_orthogonality(const std::vector<lora::AdapterSet>& sets, std::size_t g) {
    require_pairable(sets, g);
    if (sets.size() < 2) {
        return {0.0, true};
    }
    double total = 0.0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (i != g) {
            total += pair_overlap(sets[i], sets[g]);
        }
    }
    return {total, false};
}

RegularizerValue r1_weighted(const std::vector<lora::AdapterSet>& sets, std::size_t g,
                             const RelevanceWeights& w) {
    require_pairable(sets, g);
    if (w.lambda.size() != sets.size()) {
        throw ShapeError("r1_weighted: " + std::to_string(w.lambda.size()) +
                         " relevance weights for " + std::to_string(sets.size()) + " concepts");
    }
    validate(w);
    if (sets.size() < 2) {
        return {0.0, true};
    }
    double total = 0.0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (i != g) {
            total += w.lambda[i] * pair_overlap(sets[i], sets[g]);
        }
    }
    return {total, false};
}

double r2_shared(const std::vector<lora::AdapterSet>& sets, const SharedSubspace& ss) {
    return r2_gradient(sets, ss).value;
}

double r3_contrastive(const Matrix& S, double tau) { return r3_gradient(S, tau).value; }

LossId loss_id_from_string(std::string_view name) {
    if (name == "r1") return LossId::kR1;
    if (name == "r1w") return LossId::kR1Weighted;
    if (name == "r2") return LossId::kR2;
    if (name == "r3") return LossId::kR3;
    throw DomainError("unknown loss id '" + std::string(name) + "'");
}

AdapterGrads zero_adapter_grads(const std::vector<lora::AdapterSet>& sets) {
    AdapterGrads g;
    g.dA.resize(sets.size());
    g.dB.resize(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        for (const auto& ad : sets[i].adapters) {
            g.dA[i].emplace_back(ad.A.rows(), ad.A.cols());
            g.dB[i].emplace_back(ad.B.rows(), ad.B.cols());
        }
    }
    return g;
}

R1Gradient r1_gradient(const std::vector<lora::AdapterSet>& sets, std::size_t g,
                       const RelevanceWeights* w) {
    require_pairable(sets, g);
    if (w != nullptr) {
        if (w->lambda.size() != sets.size()) {
            throw ShapeError("r1_gradient: relevance weight count mismatch");
        }
        validate(*w);
    }
    R1Gradient out;
    out.adapters = zero_adapter_grads(sets);
    out.dlambda.assign(sets.size(), 0.0);
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (i == g) {
            continue;
        }
        const double weight = w != nullptr ? w->lambda[i] : 1.0;
        double overlap = 0.0;
        for (std::size_t l = 0; l < sets[g].num_layers(); ++l) {
            const Matrix& Ai = sets[i].adapters[l].A;
            const Matrix& Ag = sets[g].adapters[l].A;
            const Matrix X = matmul_tn(Ai, Ag);  // r x r
            const double term = frobenius_norm_sq(X);
            overlap += term;
            // d||Ai^T Ag||^2 / dAg = 2 Ai X,  / dAi = 2 Ag X^T
            out.adapters.dA[g][l].add_scaled(matmul(Ai, X), 2.0 * weight);
            out.adapters.dA[i][l].add_scaled(matmul_nt(Ag, X), 2.0 * weight);
        }
        out.value += weight * overlap;
        if (w != nullptr) {
            out.dlambda[i] = overlap;
        }
    }
    return out;
}

R2Gradient r2_gradient(const std::vector<lora::AdapterSet>& sets, const SharedSubspace& ss) {
    if (ss.H.size() != sets.size()) {
        throw ShapeError("r2: subspace has " + std::to_string(ss.H.size()) +
                         " projection sets for " + std::to_string(sets.size()) + " concepts");
    }
    R2Gradient out;
    out.adapters = zero_adapter_grads(sets);
    out.ddelta.resize(sets.size());
    out.dsubspace.W_star.reserve(ss.W_star.size());
    for (const auto& w : ss.W_star) {
        out.dsubspace.W_star.emplace_back(w.rows(), w.cols());
    }
    out.dsubspace.H.resize(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) {
        if (sets[i].num_layers() != ss.W_star.size() || ss.H[i].size() != ss.W_star.size()) {
            throw ShapeError("r2: layer count mismatch for concept " + std::to_string(i));
        }
        for (std::size_t l = 0; l < sets[i].num_layers(); ++l) {
            const auto& ad = sets[i].adapters[l];
            const Matrix& H = ss.H[i][l];
            const Matrix& Ws = ss.W_star[l];
            const std::string where = "(" + std::to_string(i) + ", " + std::to_string(l) + ")";
            if (H.cols() != Ws.rows()) {
                throw ShapeError("r2: H " + H.shape_string() + " vs W_star " +
                                 Ws.shape_string() + " at " + where);
            }
            Matrix E = delta_weight(ad);
            const Matrix recon = matmul(H, Ws);
            if (!recon.same_shape(E)) {
                throw ShapeError("r2: reconstruction " + recon.shape_string() + " vs delta " +
                                 E.shape_string() + " at " + where);
            }
            E -= recon;
            out.value += frobenius_norm_sq(E);
            Matrix dDelta = E * 2.0;
            out.dsubspace.H[i].push_back(matmul_nt(E, Ws) * -2.0);
            out.dsubspace.W_star[l].add_scaled(matmul_tn(H, E), -2.0);
            out.adapters.dA[i][l] = matmul_nt(dDelta, ad.B);
            out.adapters.dB[i][l] = matmul_tn(ad.A, dDelta);
            out.ddelta[i].push_back(std::move(dDelta));
        }
    }
    return out;
}

R3Gradient r3_gradient(const Matrix& S, double tau) {
    if (!(tau > 0.0)) {
        throw DomainError("r3: temperature must be positive");
    }
    const std::size_t n = S.rows();
    if (n < 2) {
        throw DomainError("r3: need at least two embeddings");
    }
    Vector norms(n);
    Matrix unit = S;
    for (std::size_t i = 0; i < n; ++i) {
        norms[i] = norm2(S.row(i));
        if (norms[i] == 0.0) {
            throw DomainError("r3: zero embedding at row " + std::to_string(i));
        }
        for (double& v : unit.row(i)) {
            v /= norms[i];
        }
    }
    Matrix cos = matmul_nt(unit, unit);
    for (std::size_t i = 0; i < n; ++i) {
        cos(i, i) = 1.0;
    }
    Matrix logits = cos * (1.0 / tau);
    const Matrix p = softmax_rows(logits);

    R3Gradient out;
    out.dS = Matrix(n, S.cols());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.row(i);
        const double mx = *std::max_element(row.begin(), row.end());
        const double self = logits(i, i);
        double off = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                off += std::exp(row[j] - mx);
            }
        }
        // log1p keeps relative precision when the off-diagonal mass is tiny.
        total += (mx - self) + std::log1p(std::expm1(self - mx) + off);
    }
    out.value = total / static_cast<double>(n);

    const double scale = 1.0 / (static_cast<double>(n) * tau);
    for (std::size_t i = 0; i < n; ++i) {
        Vector dn(S.cols(), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) {
                continue;
            }
            const double c = scale * (p(i, j) + p(j, i));
            auto uj = unit.row(j);
            for (std::size_t k = 0; k < dn.size(); ++k) {
                dn[k] += c * uj[k];
            }
        }
        auto ui = unit.row(i);
        const double radial = dot(ui, dn);
        auto out_row = out.dS.row(i);
        for (std::size_t k = 0; k < dn.size(); ++k) {
            out_row[k] = (dn[k] - radial * ui[k]) / norms[i];
        }
    }
    return out;
}

}  // namespace fl2t::reg
