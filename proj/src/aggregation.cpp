// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/aggregation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::agg {

namespace {

constexpr double kLayerNormEps = 1e-5;

Matrix tanh_of(const Matrix& m) {
    Matrix out = m;
    for (double& v : out.data()) {
        v = std::tanh(v);
    }
    return out;
}

/// dpre = dpost * (1 - post^2)
Matrix tanh_backward(const Matrix& post, const Matrix& dpost) {
    Matrix out = dpost;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double y = post.data()[i];
        out.data()[i] *= 1.0 - y * y;
    }
    return out;
}

void add_bias(Matrix& m, const Matrix& bias) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            r[j] += bias(0, j);
        }
    }
}

Matrix column_sums(const Matrix& m) {
    Matrix s(1, m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto r = m.row(i);
        for (std::size_t j = 0; j < r.size(); ++j) {
            s(0, j) += r[j];
        }
    }
    return s;
}

AttentionParams init_attention(std::size_t d, SeededRng& rng, double std) {
    return AttentionParams{gaussian(rng, d, d, 0.0, std), gaussian(rng, d, d, 0.0, std),
                           gaussian(rng, d, d, 0.0, std), gaussian(rng, d, d, 0.0, std)};
}

AttentionParams zeros_like(const AttentionParams& p) {
    return AttentionParams{Matrix(p.Wq.rows(), p.Wq.cols()), Matrix(p.Wk.rows(), p.Wk.cols()),
                           Matrix(p.Wv.rows(), p.Wv.cols()), Matrix(p.Wo.rows(), p.Wo.cols())};
}

Matrix attention_forward(const Matrix& xq, const Matrix& xkv, const AttentionParams& p,
                         AttentionTape* tape) {
    Matrix q = matmul(xq, p.Wq);
    Matrix k = matmul(xkv, p.Wk);
    Matrix v = matmul(xkv, p.Wv);
    Matrix scores = matmul_nt(q, k);
    scores *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
    Matrix attn = softmax_rows(scores);
    Matrix mixed = matmul(attn, v);
    Matrix out = matmul(mixed, p.Wo);
    if (tape != nullptr) {
        *tape = AttentionTape{xq, xkv, std::move(q), std::move(k), std::move(v), std::move(attn),
                              std::move(mixed)};
    }
    return out;
}

struct AttentionBackward {
    Matrix dxq, dxkv;
};

AttentionBackward attention_backward(const AttentionTape& t, const AttentionParams& p,
                                     const Matrix& dout, AttentionParams& grads) {
    grads.Wo += matmul_tn(t.mixed, dout);
    const Matrix dmixed = matmul_nt(dout, p.Wo);
    const Matrix dattn = matmul_nt(dmixed, t.v);
    const Matrix dv = matmul_tn(t.attn, dmixed);
    Matrix dscores(t.attn.rows(), t.attn.cols());
    for (std::size_t i = 0; i < dscores.rows(); ++i) {
        const double inner = dot(dattn.row(i), t.attn.row(i));
        for (std::size_t j = 0; j < dscores.cols(); ++j) {
            dscores(i, j) = t.attn(i, j) * (dattn(i, j) - inner);
        }
    }
    dscores *= 1.0 / std::sqrt(static_cast<double>(t.q.cols()));
    const Matrix dq = matmul(dscores, t.k);
    const Matrix dk = matmul_tn(dscores, t.q);
    grads.Wq += matmul_tn(t.xq, dq);
    grads.Wk += matmul_tn(t.xkv, dk);
    grads.Wv += matmul_tn(t.xkv, dv);
    AttentionBackward out{matmul_nt(dq, p.Wq), matmul_nt(dk, p.Wk)};
    out.dxkv += matmul_nt(dv, p.Wv);
    return out;
}

Matrix layer_norm_forward(const Matrix& x, LayerNormTape& tape) {
    Matrix y = x;
    tape.inv_std.assign(x.rows(), 0.0);
    const double n = static_cast<double>(x.cols());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        auto r = y.row(i);
        const double mean = std::accumulate(r.begin(), r.end(), 0.0) / n;
        double var = 0.0;
        for (double v : r) {
            var += (v - mean) * (v - mean);
        }
        var /= n;
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        for (double& v : r) {
            v = (v - mean) * inv;
        }
        tape.inv_std[i] = inv;
    }
    tape.normalized = y;
    return y;
}

Matrix layer_norm_backward(const LayerNormTape& tape, const Matrix& dy) {
    Matrix dx(dy.rows(), dy.cols());
    const double n = static_cast<double>(dy.cols());
    for (std::size_t i = 0; i < dy.rows(); ++i) {
        auto g = dy.row(i);
        auto y = tape.normalized.row(i);
        const double mean_g = std::accumulate(g.begin(), g.end(), 0.0) / n;
        const double mean_gy = dot(g, y) / n;
        auto out = dx.row(i);
        for (std::size_t j = 0; j < g.size(); ++j) {
            out[j] = tape.inv_std[i] * (g[j] - mean_g - y[j] * mean_gy);
        }
    }
    return dx;
}

Matrix maybe_norm(const Matrix& x, bool enabled, LayerNormTape& tape) {
    return enabled ? layer_norm_forward(x, tape) : x;
}

Matrix maybe_norm_backward(const LayerNormTape& tape, bool enabled, const Matrix& dy) {
    return enabled ? layer_norm_backward(tape, dy) : dy;
}

}  // namespace

void validate(const ConceptEmbeddingBank& bank) {
    if (bank.C.rows() == 0) {
        throw ShapeError("concept bank is empty");
    }
    if (bank.concept_ids.size() != bank.C.rows()) {
        throw ShapeError("concept bank: " + std::to_string(bank.concept_ids.size()) +
                         " ids for " + std::to_string(bank.C.rows()) + " rows");
    }
    for (std::size_t i = 0; i < bank.C.rows(); ++i) {
        if (norm2(bank.C.row(i)) == 0.0) {
            throw ShapeError("concept bank: zero embedding for concept " +
                             std::to_string(bank.concept_ids[i]));
        }
    }
}

ProxyBank init_proxies(const ConceptEmbeddingBank& bank) {
    validate(bank);
    return ProxyBank{bank.C};
}

DecoderParams init_decoder(std::size_t d, std::size_t num_layers, SeededRng& rng, bool use_ffn,
                           bool layer_norm) {
    const double std = 1.0 / std::sqrt(static_cast<double>(d));
    DecoderParams params;
    params.use_ffn = use_ffn;
    params.layer_norm = layer_norm;
    for (std::size_t l = 0; l < num_layers; ++l) {
        DecoderLayer layer;
        layer.self_attn = init_attention(d, rng, std);
        layer.cross_attn = init_attention(d, rng, std);
        layer.ffn_in = gaussian(rng, d, 4 * d, 0.0, std);
        layer.ffn_out = gaussian(rng, 4 * d, d, 0.0, 1.0 / std::sqrt(4.0 * static_cast<double>(d)));
        params.layers.push_back(std::move(layer));
    }
    return params;
}

DecoderParams zeros_like(const DecoderParams& like) {
    DecoderParams z;
    z.use_ffn = like.use_ffn;
    z.layer_norm = like.layer_norm;
    for (const auto& layer : like.layers) {
        z.layers.push_back(DecoderLayer{zeros_like(layer.self_attn), zeros_like(layer.cross_attn),
                                        Matrix(layer.ffn_in.rows(), layer.ffn_in.cols()),
                                        Matrix(layer.ffn_out.rows(), layer.ffn_out.cols())});
    }
    return z;
}

FusionMlp init_fusion(std::size_t d, SeededRng& rng) {
    const double std = 1.0 / std::sqrt(2.0 * static_cast<double>(d));
    return FusionMlp{gaussian(rng, 2 * d, 2 * d, 0.0, std), Matrix(1, 2 * d),
                     gaussian(rng, 2 * d, d, 0.0, std), Matrix(1, d)};
}

FusionMlp zeros_like(const FusionMlp& like) {
    return FusionMlp{Matrix(like.W1.rows(), like.W1.cols()), Matrix(1, like.b1.cols()),
                     Matrix(like.W2.rows(), like.W2.cols()), Matrix(1, like.b2.cols())};
}

DecoderTape decoder_forward_tape(const Matrix& P, const Matrix& prompt,
                                 const DecoderParams& params) {
    const std::size_t d = P.cols();
    if (prompt.rows() == 0) {
        throw ShapeError("decoder: prompt has no tokens");
    }
    if (prompt.cols() != d) {
        throw ShapeError("decoder: proxies " + P.shape_string() + " vs prompt " +
                         prompt.shape_string());
    }
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        const auto& layer = params.layers[l];
        if (layer.self_attn.Wq.rows() != d || layer.cross_attn.Wq.rows() != d ||
            layer.ffn_in.rows() != d || layer.ffn_out.cols() != d) {
            throw ShapeError("decoder layer " + std::to_string(l) + " does not match width " +
                             std::to_string(d));
        }
    }
    DecoderTape tape;
    tape.prompt = prompt;
    Matrix x = P;
    for (const auto& layer : params.layers) {
        DecoderLayerTape lt;
        Matrix n1 = maybe_norm(x, params.layer_norm, lt.ln_self);
        x += attention_forward(n1, n1, layer.self_attn, &lt.self_attn);
        Matrix n2 = maybe_norm(x, params.layer_norm, lt.ln_cross);
        x += attention_forward(n2, prompt, layer.cross_attn, &lt.cross_attn);
        if (params.use_ffn) {
            lt.ffn_input = maybe_norm(x, params.layer_norm, lt.ln_ffn);
            lt.ffn_hidden = tanh_of(matmul(lt.ffn_input, layer.ffn_in));
            x += matmul(lt.ffn_hidden, layer.ffn_out);
        }
        tape.layers.push_back(std::move(lt));
    }
    tape.output = x;
    return tape;
}

Matrix decoder_forward(const Matrix& P, const Matrix& prompt, const DecoderParams& params) {
    return decoder_forward_tape(P, prompt, params).output;
}

DecoderGrads decoder_backward(const DecoderTape& tape, const DecoderParams& params,
                              const Matrix& dout) {
    DecoderGrads g;
    g.dparams = zeros_like(params);
    g.dprompt = Matrix(tape.prompt.rows(), tape.prompt.cols());
    Matrix dx = dout;
    for (std::size_t l = params.layers.size(); l-- > 0;) {
        const auto& layer = params.layers[l];
        const auto& lt = tape.layers[l];
        auto& gl = g.dparams.layers[l];
        if (params.use_ffn) {
            gl.ffn_out += matmul_tn(lt.ffn_hidden, dx);
            const Matrix dh = tanh_backward(lt.ffn_hidden, matmul_nt(dx, layer.ffn_out));
            gl.ffn_in += matmul_tn(lt.ffn_input, dh);
            dx += maybe_norm_backward(lt.ln_ffn, params.layer_norm, matmul_nt(dh, layer.ffn_in));
        }
        {
            auto back = attention_backward(lt.cross_attn, layer.cross_attn, dx, gl.cross_attn);
            g.dprompt += back.dxkv;
            dx += maybe_norm_backward(lt.ln_cross, params.layer_norm, back.dxq);
        }
        {
            auto back = attention_backward(lt.self_attn, layer.self_attn, dx, gl.self_attn);
            back.dxq += back.dxkv;
            dx += maybe_norm_backward(lt.ln_self, params.layer_norm, back.dxq);
        }
    }
    g.dP = std::move(dx);
    return g;
}

FusionTape fuse_all_tape(const Matrix& C, const Matrix& Pprime, const FusionMlp& mlp) {
    if (!C.same_shape(Pprime)) {
        throw ShapeError("fuse: embeddings " + C.shape_string() + " vs proxies " +
                         Pprime.shape_string());
    }
    FusionTape t;
    t.input = hconcat(C, Pprime);
    Matrix pre = matmul(t.input, mlp.W1);
    add_bias(pre, mlp.b1);
    t.hidden = tanh_of(pre);
    t.output = matmul(t.hidden, mlp.W2);
    add_bias(t.output, mlp.b2);
    return t;
}

Matrix fuse_all(const Matrix& C, const Matrix& Pprime, const FusionMlp& mlp) {
    return fuse_all_tape(C, Pprime, mlp).output;
}

FusionGrads fuse_backward(const FusionTape& tape, const FusionMlp& mlp, const Matrix& dS) {
    FusionGrads g;
    g.dmlp.W2 = matmul_tn(tape.hidden, dS);
    g.dmlp.b2 = column_sums(dS);
    const Matrix dpre = tanh_backward(tape.hidden, matmul_nt(dS, mlp.W2));
    g.dmlp.W1 = matmul_tn(tape.input, dpre);
    g.dmlp.b1 = column_sums(dpre);
    const Matrix dinput = matmul_nt(dpre, mlp.W1);
    const std::size_t d = dS.cols();
    g.dC = Matrix(dS.rows(), d);
    g.dPprime = Matrix(dS.rows(), d);
    for (std::size_t i = 0; i < dS.rows(); ++i) {
        auto r = dinput.row(i);
        std::copy(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(d), g.dC.row(i).begin());
        std::copy(r.begin() + static_cast<std::ptrdiff_t>(d), r.end(), g.dPprime.row(i).begin());
    }
    return g;
}

std::vector<std::size_t> canonical_others(const ConceptEmbeddingBank& bank, std::size_t g) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < bank.size(); ++i) {
        if (i != g) {
            idx.push_back(i);
        }
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return bank.concept_ids[a] < bank.concept_ids[b];
    });
    return idx;
}

Matrix fuse(const ConceptEmbeddingBank& bank, const Matrix& Pprime, const FusionMlp& mlp,
            std::size_t g) {
    if (bank.size() < 2) {
        throw DegenerateError("fuse: need at least two concepts");
    }
    if (g >= bank.size()) {
        throw DomainError("fuse: active concept index out of range");
    }
    const Matrix all = fuse_all(bank.C, Pprime, mlp);
    const auto order = canonical_others(bank, g);
    Matrix S(order.size(), all.cols());
    for (std::size_t k = 0; k < order.size(); ++k) {
        S.set_row(k, all.row(order[k]));
    }
    return S;
}

namespace {

double relevance_value(std::span<const double> cg, std::span<const double> s,
                       RelevanceMode mode) {
    if (mode == RelevanceMode::kCosine) {
        return cosine_sim(cg, s);
    }
    return std::clamp(dot(cg, s), -1.0, 1.0);
}

}  // namespace

reg::RelevanceWeights relevance(const ConceptEmbeddingBank& bank, const Matrix& S, std::size_t g,
                                RelevanceMode mode) {
    if (g >= bank.size()) {
        throw DomainError("relevance: active concept index out of range");
    }
    const auto order = canonical_others(bank, g);
    if (S.rows() != order.size() || S.cols() != bank.C.cols()) {
        throw ShapeError("relevance: S " + S.shape_string() + " for bank " +
                         bank.C.shape_string());
    }
    reg::RelevanceWeights w{Vector(bank.size(), 0.0), g};
    for (std::size_t k = 0; k < order.size(); ++k) {
        w.lambda[order[k]] = relevance_value(bank.C.row(g), S.row(k), mode);
    }
    return w;
}

double effective_rank(const Matrix& m) {
    const Vector sv = singular_values(m);
    const double total = std::accumulate(sv.begin(), sv.end(), 0.0);
    if (total == 0.0) {
        throw DomainError("effective_rank: zero matrix");
    }
    double entropy = 0.0;
    for (double s : sv) {
        const double p = s / total;
        if (p > 0.0) {
            entropy -= p * std::log(p);
        }
    }
    return std::exp(entropy);
}

RelevancePath relevance_forward(const Matrix& C, const Matrix& P, const Matrix& prompt,
                                const DecoderParams& decoder, const FusionMlp& fusion,
                                std::size_t g, RelevanceMode mode) {
    if (g >= C.rows()) {
        throw DomainError("relevance: active concept index out of range");
    }
    RelevancePath path;
    path.decoder = decoder_forward_tape(P, prompt, decoder);
    path.fusion = fuse_all_tape(C, path.decoder.output, fusion);
    path.S_all = path.fusion.output;
    path.lambda = reg::RelevanceWeights{Vector(C.rows(), 0.0), g};
    for (std::size_t i = 0; i < C.rows(); ++i) {
        if (i != g) {
            path.lambda.lambda[i] = relevance_value(C.row(g), path.S_all.row(i), mode);
        }
    }
    return path;
}

RelevancePathGrads relevance_backward(const RelevancePath& path, const Matrix& C,
                                      const DecoderParams& decoder, const FusionMlp& fusion,
                                      std::span<const double> dlambda, const Matrix& dS_all,
                                      RelevanceMode mode) {
    const std::size_t g = path.lambda.active;
    const std::size_t n = C.rows();
    Matrix dS = dS_all.empty() ? Matrix(n, C.cols()) : dS_all;
    Matrix dC(n, C.cols());
    auto cg = C.row(g);
    for (std::size_t i = 0; i < n; ++i) {
        if (i == g || dlambda[i] == 0.0) {
            continue;
        }
        auto s = path.S_all.row(i);
        auto dcg = dC.row(g);
        auto ds = dS.row(i);
        if (mode == RelevanceMode::kCosine) {
            const double nu = norm2(cg), nv = norm2(s);
            const double c = dot(cg, s) / (nu * nv);
            for (std::size_t k = 0; k < cg.size(); ++k) {
                dcg[k] += dlambda[i] * (s[k] / (nu * nv) - c * cg[k] / (nu * nu));
                ds[k] += dlambda[i] * (cg[k] / (nu * nv) - c * s[k] / (nv * nv));
            }
        } else {
            const double raw = dot(cg, s);
            if (raw > -1.0 && raw < 1.0) {
                for (std::size_t k = 0; k < cg.size(); ++k) {
                    dcg[k] += dlambda[i] * s[k];
                    ds[k] += dlambda[i] * cg[k];
                }
            }
        }
    }
    FusionGrads fg = fuse_backward(path.fusion, fusion, dS);
    DecoderGrads dg = decoder_backward(path.decoder, decoder, fg.dPprime);
    dC += fg.dC;
    return RelevancePathGrads{std::move(dC), std::move(dg.dP), std::move(dg.dprompt),
                              std::move(dg.dparams), std::move(fg.dmlp)};
}

}  // namespace fl2t::agg
