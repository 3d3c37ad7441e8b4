// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/consolidation.hpp"

#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::diffusion {

namespace {

void zero(Matrix& m) { m = Matrix(m.rows(), m.cols()); }

template <typename State, typename Fn>
void visit(State& s, Fn&& fn) {
    for (std::size_t i = 0; i < s.adapters.size(); ++i) {
        auto& set = s.adapters[i];
        for (std::size_t l = 0; l < set.adapters.size(); ++l) {
            const std::string tag = "adapter[" + std::to_string(i) + "][" + std::to_string(l) + "]";
            fn(tag + ".A", set.adapters[l].A);
            fn(tag + ".B", set.adapters[l].B);
        }
    }
    fn("bank.C", s.bank.C);
    fn("proxies.P", s.proxies.P);
    for (std::size_t l = 0; l < s.decoder.layers.size(); ++l) {
        auto& layer = s.decoder.layers[l];
        const std::string tag = "decoder[" + std::to_string(l) + "]";
        fn(tag + ".self.Wq", layer.self_attn.Wq);
        fn(tag + ".self.Wk", layer.self_attn.Wk);
        fn(tag + ".self.Wv", layer.self_attn.Wv);
        fn(tag + ".self.Wo", layer.self_attn.Wo);
        fn(tag + ".cross.Wq", layer.cross_attn.Wq);
        fn(tag + ".cross.Wk", layer.cross_attn.Wk);
        fn(tag + ".cross.Wv", layer.cross_attn.Wv);
        fn(tag + ".cross.Wo", layer.cross_attn.Wo);
        if (s.decoder.use_ffn) {
            fn(tag + ".ffn_in", layer.ffn_in);
            fn(tag + ".ffn_out", layer.ffn_out);
        }
    }
    fn("fusion.W1", s.fusion.W1);
    fn("fusion.b1", s.fusion.b1);
    fn("fusion.W2", s.fusion.W2);
    fn("fusion.b2", s.fusion.b2);
    for (std::size_t l = 0; l < s.subspace.W_star.size(); ++l) {
        fn("subspace.W_star[" + std::to_string(l) + "]", s.subspace.W_star[l]);
    }
    for (std::size_t i = 0; i < s.subspace.H.size(); ++i) {
        for (std::size_t l = 0; l < s.subspace.H[i].size(); ++l) {
            fn("subspace.H[" + std::to_string(i) + "][" + std::to_string(l) + "]",
               s.subspace.H[i][l]);
        }
    }
}

}  // namespace

ConsolidationState zeros_like(const ConsolidationState& s) {
    ConsolidationState z = s;
    visit(z, [](const std::string&, Matrix& m) { zero(m); });
    if (!z.decoder.use_ffn) {
        for (auto& layer : z.decoder.layers) {
            zero(layer.ffn_in);
            zero(layer.ffn_out);
        }
    }
    return z;
}

void for_each_parameter(ConsolidationState& s,
                        const std::function<void(std::string_view, Matrix&)>& fn) {
    visit(s, [&](const std::string& name, Matrix& m) { fn(name, m); });
}

void for_each_parameter(const ConsolidationState& s,
                        const std::function<void(std::string_view, const Matrix&)>& fn) {
    visit(s, [&](const std::string& name, const Matrix& m) { fn(name, m); });
}

Vector flatten(const ConsolidationState& s) {
    Vector out;
    for_each_parameter(s, [&](std::string_view, const Matrix& m) {
        out.insert(out.end(), m.data().begin(), m.data().end());
    });
    return out;
}

void unflatten(ConsolidationState& s, std::span<const double> values) {
    std::size_t pos = 0;
    for_each_parameter(s, [&](std::string_view name, Matrix& m) {
        if (pos + m.size() > values.size()) {
            throw ShapeError("unflatten: too few values at " + std::string(name));
        }
        std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
                  values.begin() + static_cast<std::ptrdiff_t>(pos + m.size()),
                  m.data().begin());
        pos += m.size();
    });
    if (pos != values.size()) {
        throw ShapeError("unflatten: " + std::to_string(values.size() - pos) + " values left over");
    }
}

std::vector<Matrix> adapted_weights(const Denoiser& base, const lora::AdapterSet& set) {
    return lora::merge(base.W, lora::delta_weights(set));
}

AdapterLossResult adapter_denoise_loss(const Denoiser& base, const lora::AdapterSet& set,
                                       const agg::ConceptEmbeddingBank& bank,
                                       const std::vector<NoisedExample>& examples) {
    const TokenEmbeddings tokens{&base.token_table, &bank.C, bank.concept_ids};
    const DenoiseLossResult r = denoise_loss_and_grad(base, adapted_weights(base, set), tokens,
                                                      examples);
    AdapterLossResult out;
    out.loss = r.loss;
    for (std::size_t l = 0; l < set.adapters.size(); ++l) {
        const auto& ad = set.adapters[l];
        out.dA.push_back(matmul_nt(r.grads.W[l], ad.B));
        out.dB.push_back(matmul_tn(ad.A, r.grads.W[l]));
    }
    out.dC = Matrix(bank.C.rows(), bank.C.cols());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& prompt = examples[i].prompt;
        const double inv = 1.0 / static_cast<double>(prompt.size());
        for (int tok : prompt) {
            const long row = tokens.concept_row(tok);
            if (row < 0) {
                continue;
            }
            auto dst = out.dC.row(static_cast<std::size_t>(row));
            const auto src = r.grads.dembedding.row(i);
            for (std::size_t k = 0; k < dst.size(); ++k) {
                dst[k] += src[k] * inv;
            }
        }
    }
    return out;
}

ConsolidationResult consolidation_loss(const Denoiser& base, const ConsolidationState& state,
                                       const ConceptTask& task, std::size_t g,
                                       std::span<const std::size_t> batch,
                                       const ConsolidationOptions& options, SeededRng& rng,
                                       const NoiseSchedule& sched) {
    const auto& w = options.weights;
    const std::size_t G = state.bank.size();
    if (G < 2) {
        throw DegenerateError("consolidation needs at least two concepts");
    }
    if (g >= G || state.adapters.size() != G) {
        throw ShapeError("consolidation: active row " + std::to_string(g) + " of " +
                         std::to_string(G) + " concepts, " +
                         std::to_string(state.adapters.size()) + " adapter sets");
    }
    if (task.concept_id != state.bank.concept_ids[g]) {
        throw DomainError("consolidation: task is concept " + std::to_string(task.concept_id) +
                          " but active row holds concept " +
                          std::to_string(state.bank.concept_ids[g]));
    }
    if (batch.empty()) {
        throw DomainError("consolidation: empty batch");
    }
    if (w.gamma1 < 0.0 || w.gamma2 < 0.0 || w.r1 < 0.0) {
        throw DomainError("consolidation: negative loss weight");
    }

    ConsolidationResult res;
    res.grad = zeros_like(state);
    auto& terms = res.terms;

    const auto examples = draw_examples(task, batch, rng, sched);
    const AdapterLossResult den = adapter_denoise_loss(base, state.adapters[g], state.bank,
                                                       examples);
    terms.denoise = den.loss;
    for (std::size_t l = 0; l < den.dA.size(); ++l) {
        res.grad.adapters[g].adapters[l].A += den.dA[l];
        res.grad.adapters[g].adapters[l].B += den.dB[l];
    }
    res.grad.bank.C += den.dC;

    const TokenEmbeddings tokens{&base.token_table, &state.bank.C, state.bank.concept_ids};
    const auto& anchor = task.prompts[batch.front()];
    const Matrix prompt = tokens.stack(anchor);
    const agg::RelevancePath path =
        agg::relevance_forward(state.bank.C, state.proxies.P, prompt, state.decoder, state.fusion,
                               g, options.mode);
    terms.lambda = options.lambda_override ? *options.lambda_override : path.lambda;
    terms.lambda.active = g;
    reg::validate(terms.lambda);

    const reg::R1Gradient r1 = reg::r1_gradient(state.adapters, g, &terms.lambda);
    terms.r1 = r1.value;
    const reg::R2Gradient r2 = reg::r2_gradient(state.adapters, state.subspace);
    terms.r2 = r2.value;
    const reg::R3Gradient r3 = reg::r3_gradient(path.S_all, w.tau);
    terms.r3 = r3.value;

    terms.total = terms.denoise;
    if (w.r1 != 0.0) {
        terms.total += w.r1 * terms.r1;
    }
    if (w.gamma1 != 0.0) {
        terms.total += w.gamma1 * terms.r2;
    }
    if (w.gamma2 != 0.0) {
        terms.total += w.gamma2 * terms.r3;
    }

    for (std::size_t i = 0; i < G; ++i) {
        for (std::size_t l = 0; l < state.adapters[i].adapters.size(); ++l) {
            auto& dst = res.grad.adapters[i].adapters[l];
            dst.A.add_scaled(r1.adapters.dA[i][l], w.r1);
            dst.B.add_scaled(r1.adapters.dB[i][l], w.r1);
            dst.A.add_scaled(r2.adapters.dA[i][l], w.gamma1);
            dst.B.add_scaled(r2.adapters.dB[i][l], w.gamma1);
        }
    }
    for (std::size_t l = 0; l < state.subspace.W_star.size(); ++l) {
        res.grad.subspace.W_star[l].add_scaled(r2.dsubspace.W_star[l], w.gamma1);
    }
    for (std::size_t i = 0; i < state.subspace.H.size(); ++i) {
        for (std::size_t l = 0; l < state.subspace.H[i].size(); ++l) {
            res.grad.subspace.H[i][l].add_scaled(r2.dsubspace.H[i][l], w.gamma1);
        }
    }

    Vector dlambda(G, 0.0);
    if (!options.lambda_override) {
        for (std::size_t i = 0; i < G; ++i) {
            dlambda[i] = w.r1 * r1.dlambda[i];
        }
    }
    const Matrix dS = r3.dS * w.gamma2;
    const agg::RelevancePathGrads pg = agg::relevance_backward(
        path, state.bank.C, state.decoder, state.fusion, dlambda, dS, options.mode);
    res.grad.bank.C += pg.dC;
    res.grad.proxies.P += pg.dP;
    for (std::size_t k = 0; k < anchor.size(); ++k) {
        const long row = tokens.concept_row(anchor[k]);
        if (row < 0) {
            continue;
        }
        auto dst = res.grad.bank.C.row(static_cast<std::size_t>(row));
        const auto src = pg.dprompt.row(k);
        for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] += src[c];
        }
    }
    res.grad.decoder = pg.ddecoder;
    res.grad.fusion = pg.dfusion;
    return res;
}

}  // namespace fl2t::diffusion
