// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>

#include "fl2t/errors.hpp"
#include "fl2t/pipeline.hpp"

namespace fl2t::pipeline {

namespace {

double rel_error(const Vector& a, const Vector& b) {
    double diff = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double scale = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
    return std::sqrt(diff) / scale;
}

void append(Vector& out, const Matrix& m) { out.insert(out.end(), m.data().begin(), m.data().end()); }

Vector flat_adapters(const std::vector<lora::AdapterSet>& sets) {
    Vector out;
    for (const auto& s : sets) {
        for (const auto& ad : s.adapters) {
            append(out, ad.A);
            append(out, ad.B);
        }
    }
    return out;
}

std::size_t load_adapters(std::vector<lora::AdapterSet>& sets, std::span<const double> x) {
    std::size_t pos = 0;
    for (auto& s : sets) {
        for (auto& ad : s.adapters) {
            for (Matrix* m : {&ad.A, &ad.B}) {
                std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(pos), m->size(),
                            m->data().begin());
                pos += m->size();
            }
        }
    }
    return pos;
}

Vector flat_adapter_grads(const reg::AdapterGrads& g) {
    Vector out;
    for (std::size_t i = 0; i < g.dA.size(); ++i) {
        for (std::size_t l = 0; l < g.dA[i].size(); ++l) {
            append(out, g.dA[i][l]);
            append(out, g.dB[i][l]);
        }
    }
    return out;
}

struct Tiny {
    diffusion::Denoiser base;
    std::vector<diffusion::ConceptTask> tasks;
    diffusion::ConsolidationState state;
    diffusion::NoiseSchedule sched;
};

Tiny make_tiny(SeededRng& rng) {
    constexpr std::size_t d = 4;
    constexpr std::size_t width = 6;
    constexpr std::size_t L = 2;
    constexpr std::size_t r = 2;
    constexpr std::size_t G = 2;
    Tiny t;
    t.base = diffusion::init_denoiser(2, 4, d, width, L, 3, rng);
    t.sched = diffusion::make_schedule(10, 1e-3, 0.05);
    for (std::size_t i = 0; i < G; ++i) {
        diffusion::ConceptTask task;
        task.concept_id = static_cast<int>(i);
        for (std::size_t k = 0; k < 3; ++k) {
            task.samples.push_back({rng.normal(), rng.normal()});
            task.prompts.push_back({static_cast<int>(k % 3), diffusion::concept_token(task.concept_id)});
        }
        t.tasks.push_back(task);
        lora::AdapterSet set = lora::init_adapter_set(task.concept_id, L, width, width, r, rng);
        for (auto& ad : set.adapters) {
            ad.A = gaussian(rng, width, r, 0.0, 0.5);
            ad.B = gaussian(rng, r, width, 0.0, 0.5);
        }
        t.state.adapters.push_back(set);
    }
    t.state.bank.C = gaussian(rng, G, d, 0.0, 1.0);
    t.state.bank.concept_ids = {0, 1};
    t.state.proxies.P = gaussian(rng, G, d, 0.0, 1.0);
    t.state.decoder = agg::init_decoder(d, 2, rng);
    t.state.fusion = agg::init_fusion(d, rng);
    t.state.subspace = reg::init_shared_subspace(G, L, width, width, r, rng);
    for (auto& w : t.state.subspace.W_star) {
        w = gaussian(rng, w.rows(), w.cols(), 0.0, 0.5);
    }
    for (auto& hs : t.state.subspace.H) {
        for (auto& h : hs) {
            h = gaussian(rng, h.rows(), h.cols(), 0.0, 0.5);
        }
    }
    return t;
}

}  // namespace

std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed, std::size_t points, double h) {
    std::vector<GradcheckEntry> out;
    for (const char* name : {"r1", "r1w", "r2", "r3", "cdm", "eq6"}) {
        out.push_back({name, 0.0, points});
    }
    for (std::size_t p = 0; p < points; ++p) {
        SeededRng rng(derive_seed(seed, "gradcheck", p));
        Tiny t = make_tiny(rng);
        const std::size_t g = p % 2;
        auto sets = t.state.adapters;
        const Vector x0 = flat_adapters(sets);

        {  // r1
            const auto f = [&](std::span<const double> x) {
                auto s = sets;
                load_adapters(s, x);
                return reg::r1_orthogonality(s, g).value;
            };
            const Vector fd = finite_diff_grad(f, x0, h);
            const Vector an = flat_adapter_grads(reg::r1_gradient(sets, g, nullptr).adapters);
            out[0].max_rel_error = std::max(out[0].max_rel_error, rel_error(an, fd));
        }
        {  // r1w, with lambda as a parameter too
            reg::RelevanceWeights w{{-1.0 + 2.0 * rng.uniform(), -1.0 + 2.0 * rng.uniform()}, g};
            Vector x = x0;
            x.insert(x.end(), w.lambda.begin(), w.lambda.end());
            const auto f = [&](std::span<const double> v) {
                auto s = sets;
                const std::size_t n = load_adapters(s, v);
                reg::RelevanceWeights ww{{v[n], v[n + 1]}, g};
                return reg::r1_weighted(s, g, ww).value;
            };
            const Vector fd = finite_diff_grad(f, x, h);
            const auto grad = reg::r1_gradient(sets, g, &w);
            Vector an = flat_adapter_grads(grad.adapters);
            an.insert(an.end(), grad.dlambda.begin(), grad.dlambda.end());
            out[1].max_rel_error = std::max(out[1].max_rel_error, rel_error(an, fd));
        }
        {  // r2 over adapters and the shared subspace
            Vector x = x0;
            for (const auto& w : t.state.subspace.W_star) {
                append(x, w);
            }
            for (const auto& hs : t.state.subspace.H) {
                for (const auto& m : hs) {
                    append(x, m);
                }
            }
            const auto f = [&](std::span<const double> v) {
                auto s = sets;
                std::size_t pos = load_adapters(s, v);
                auto ss = t.state.subspace;
                for (auto& w : ss.W_star) {
                    std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), w.size(), w.data().begin());
                    pos += w.size();
                }
                for (auto& hs : ss.H) {
                    for (auto& m : hs) {
                        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), m.size(),
                                    m.data().begin());
                        pos += m.size();
                    }
                }
                return reg::r2_shared(s, ss);
            };
            const Vector fd = finite_diff_grad(f, x, h);
            const auto grad = reg::r2_gradient(sets, t.state.subspace);
            Vector an = flat_adapter_grads(grad.adapters);
            for (const auto& w : grad.dsubspace.W_star) {
                append(an, w);
            }
            for (const auto& hs : grad.dsubspace.H) {
                for (const auto& m : hs) {
                    append(an, m);
                }
            }
            out[2].max_rel_error = std::max(out[2].max_rel_error, rel_error(an, fd));
        }
        {  // r3 on a 4 x 8 bank
            const Matrix S = gaussian(rng, 4, 8, 0.0, 1.0);
            const auto f = [&](std::span<const double> v) {
                return reg::r3_contrastive(Matrix(4, 8, Vector(v.begin(), v.end())), 0.5);
            };
            const Vector fd = finite_diff_grad(f, S.data(), h);
            out[3].max_rel_error =
                std::max(out[3].max_rel_error, rel_error(reg::r3_gradient(S, 0.5).dS.data(), fd));
        }
        const std::vector<std::size_t> batch{0, 1, 2};
        {  // denoising loss over the active adapter and the concept bank
            const auto& task = t.tasks[g];
            Vector x;
            for (const auto& ad : sets[g].adapters) {
                append(x, ad.A);
                append(x, ad.B);
            }
            append(x, t.state.bank.C);
            const auto f = [&](std::span<const double> v) {
                lora::AdapterSet s = sets[g];
                std::size_t pos = 0;
                for (auto& ad : s.adapters) {
                    for (Matrix* m : {&ad.A, &ad.B}) {
                        std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), m->size(),
                                    m->data().begin());
                        pos += m->size();
                    }
                }
                agg::ConceptEmbeddingBank bank = t.state.bank;
                std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(pos), bank.C.size(),
                            bank.C.data().begin());
                const diffusion::AdaptedDenoiser model(t.base, diffusion::adapted_weights(t.base, s),
                                                       bank.C, bank.concept_ids);
                SeededRng r(seed + p);
                return diffusion::cdm_loss(model, task, batch, r, t.sched);
            };
            const Vector fd = finite_diff_grad(f, x, h);
            SeededRng r(seed + p);
            const auto examples = diffusion::draw_examples(task, batch, r, t.sched);
            const auto res = diffusion::adapter_denoise_loss(t.base, sets[g], t.state.bank, examples);
            Vector an;
            for (std::size_t l = 0; l < res.dA.size(); ++l) {
                append(an, res.dA[l]);
                append(an, res.dB[l]);
            }
            append(an, res.dC);
            out[4].max_rel_error = std::max(out[4].max_rel_error, rel_error(an, fd));
        }
        {  // full objective over every trainable parameter
            diffusion::ConsolidationOptions opt;
            const auto f = [&](std::span<const double> v) {
                auto s = t.state;
                diffusion::unflatten(s, v);
                SeededRng r(seed + p);
                return diffusion::consolidation_loss(t.base, s, t.tasks[g], g, batch, opt, r,
                                                     t.sched)
                    .terms.total;
            };
            const Vector fd = finite_diff_grad(f, diffusion::flatten(t.state), h);
            SeededRng r(seed + p);
            const auto res =
                diffusion::consolidation_loss(t.base, t.state, t.tasks[g], g, batch, opt, r, t.sched);
            out[5].max_rel_error =
                std::max(out[5].max_rel_error, rel_error(diffusion::flatten(res.grad), fd));
        }
    }
    return out;
}

}  // namespace fl2t::pipeline
