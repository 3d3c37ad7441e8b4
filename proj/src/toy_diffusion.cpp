// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/toy_diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fl2t/errors.hpp"

namespace fl2t::diffusion {

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
    if (T < 2) {
        throw DomainError("schedule: T must be at least 2");
    }
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
        throw DomainError("schedule: need 0 < beta_start <= beta_end < 1");
    }
    NoiseSchedule s;
    s.T = T;
    double running = 1.0;
    for (int i = 0; i < T; ++i) {
        const double frac = static_cast<double>(i) / static_cast<double>(T - 1);
        const double beta = beta_start + (beta_end - beta_start) * frac;
        s.betas.push_back(beta);
        s.alphas.push_back(1.0 - beta);
        running *= 1.0 - beta;
        s.alpha_bars.push_back(running);
    }
    return s;
}

Vector forward_noise(std::span<const double> x0, int t, std::span<const double> eps,
                     const NoiseSchedule& sched) {
    if (t < 1 || t > sched.T) {
        throw DomainError("forward_noise: timestep " + std::to_string(t) + " outside [1, " +
                          std::to_string(sched.T) + "]");
    }
    if (x0.size() != eps.size()) {
        throw ShapeError("forward_noise: x0 has " + std::to_string(x0.size()) +
                         " entries, eps has " + std::to_string(eps.size()));
    }
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    Vector z(x0.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        z[i] = a * x0[i] + s * eps[i];
    }
    return z;
}

void validate(const ConceptTask& task) {
    const std::string where = "task " + std::to_string(task.concept_id);
    if (task.samples.empty()) {
        throw ConfigError(where + ": no samples");
    }
    if (task.prompts.size() != task.samples.size()) {
        throw ConfigError(where + ": prompt count differs from sample count");
    }
    const int token = concept_token(task.concept_id);
    for (std::size_t k = 0; k < task.prompts.size(); ++k) {
        const auto& p = task.prompts[k];
        if (std::find(p.begin(), p.end(), token) == p.end()) {
            throw ConfigError(where + ": prompt " + std::to_string(k) + " lacks the concept token");
        }
        if (task.samples[k].size() != task.samples.front().size()) {
            throw ConfigError(where + ": ragged sample " + std::to_string(k));
        }
    }
}

Denoiser init_denoiser(std::size_t data_dim, std::size_t time_dim, std::size_t embed_dim,
                       std::size_t width, std::size_t num_layers, std::size_t base_vocab,
                       SeededRng& rng) {
    Denoiser m;
    m.data_dim = data_dim;
    m.time_dim = time_dim;
    m.embed_dim = embed_dim;
    m.width = width;
    const auto fan = [](std::size_t n) { return 1.0 / std::sqrt(static_cast<double>(n)); };
    m.W_in = gaussian(rng, m.input_dim(), width, 0.0, fan(m.input_dim()));
    m.b_in = Matrix(1, width);
    for (std::size_t l = 0; l < num_layers; ++l) {
        m.W.push_back(gaussian(rng, width, width, 0.0, fan(width)));
        m.b.emplace_back(1, width);
    }
    m.W_out = gaussian(rng, width, data_dim, 0.0, fan(width));
    m.b_out = Matrix(1, data_dim);
    m.token_table = gaussian(rng, base_vocab, embed_dim, 0.0, fan(embed_dim));
    return m;
}

Vector time_embedding(int t, std::size_t dim) {
    const std::size_t half = dim / 2;
    Vector e(dim, 0.0);
    for (std::size_t k = 0; k < half; ++k) {
        const double freq =
            std::pow(1000.0, -static_cast<double>(k) / static_cast<double>(half));
        e[k] = std::sin(static_cast<double>(t) * freq);
        e[half + k] = std::cos(static_cast<double>(t) * freq);
    }
    return e;
}

std::span<const double> TokenEmbeddings::row(int token) const {
    const long r = concept_row(token);
    if (r >= 0) {
        return concepts->row(static_cast<std::size_t>(r));
    }
    if (token < 0 || base == nullptr || static_cast<std::size_t>(token) >= base->rows()) {
        throw VocabularyError("unknown token id " + std::to_string(token));
    }
    return base->row(static_cast<std::size_t>(token));
}

long TokenEmbeddings::concept_row(int token) const {
    if (!is_concept_token(token)) {
        return -1;
    }
    const int id = token - kConceptTokenBase;
    for (std::size_t i = 0; i < concept_ids.size(); ++i) {
        if (concept_ids[i] == id) {
            return static_cast<long>(i);
        }
    }
    throw VocabularyError("unknown concept token for concept " + std::to_string(id));
}

Matrix TokenEmbeddings::stack(std::span<const int> tokens) const {
    if (tokens.empty()) {
        throw VocabularyError("empty prompt");
    }
    const auto first = row(tokens.front());
    Matrix out(tokens.size(), first.size());
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        out.set_row(i, row(tokens[i]));
    }
    return out;
}

Vector TokenEmbeddings::pooled(std::span<const int> tokens) const {
    if (tokens.empty()) {
        throw VocabularyError("empty prompt");
    }
    Vector acc;
    for (int tok : tokens) {
        auto r = row(tok);
        if (acc.empty()) {
            acc.assign(r.size(), 0.0);
        }
        for (std::size_t k = 0; k < r.size(); ++k) {
            acc[k] += r[k];
        }
    }
    const double inv = 1.0 / static_cast<double>(tokens.size());
    for (double& v : acc) {
        v *= inv;
    }
    return acc;
}

AdaptedDenoiser::AdaptedDenoiser(const Denoiser& base, std::vector<Matrix> hidden,
                                 Matrix concept_rows, std::vector<int> concept_ids)
    : base_(&base), hidden_(std::move(hidden)), concepts_(std::move(concept_rows)),
      ids_(std::move(concept_ids)) {
    if (hidden_.size() != base.num_layers()) {
        throw ShapeError("adapted denoiser: " + std::to_string(hidden_.size()) +
                         " hidden weights for " + std::to_string(base.num_layers()) + " layers");
    }
    for (std::size_t l = 0; l < hidden_.size(); ++l) {
        if (!hidden_[l].same_shape(base.W[l])) {
            throw ShapeError("adapted denoiser: layer " + std::to_string(l) + " weight " +
                             hidden_[l].shape_string() + " vs base " + base.W[l].shape_string());
        }
    }
    if (concepts_.rows() != ids_.size()) {
        throw ShapeError("adapted denoiser: concept rows and ids disagree");
    }
    if (concepts_.rows() > 0 && concepts_.cols() != base.embed_dim) {
        throw ShapeError("adapted denoiser: concept embedding width " +
                         std::to_string(concepts_.cols()));
    }
}

namespace {

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

void tanh_inplace(Matrix& m) {
    for (double& v : m.data()) {
        v = std::tanh(v);
    }
}

struct ForwardTape {
    Matrix input;
    std::vector<Matrix> acts;  // acts[0] after input projection, acts[l+1] after hidden layer l
    Matrix output;
};

Matrix build_inputs(const Denoiser& base, const TokenEmbeddings& tokens,
                    const std::vector<NoisedExample>& examples) {
    Matrix X(examples.size(), base.input_dim());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& ex = examples[i];
        if (ex.z.size() != base.data_dim) {
            throw ShapeError("denoiser: input of length " + std::to_string(ex.z.size()) +
                             ", expected " + std::to_string(base.data_dim));
        }
        auto row = X.row(i);
        std::copy(ex.z.begin(), ex.z.end(), row.begin());
        const Vector te = time_embedding(ex.t, base.time_dim);
        std::copy(te.begin(), te.end(), row.begin() + static_cast<std::ptrdiff_t>(base.data_dim));
        const Vector pe = tokens.pooled(ex.prompt);
        if (pe.size() != base.embed_dim) {
            throw ShapeError("denoiser: prompt embedding width " + std::to_string(pe.size()));
        }
        std::copy(pe.begin(), pe.end(),
                  row.begin() + static_cast<std::ptrdiff_t>(base.data_dim + base.time_dim));
    }
    return X;
}

ForwardTape forward(const Denoiser& base, const std::vector<Matrix>& hidden, Matrix X) {
    ForwardTape tape;
    tape.input = std::move(X);
    Matrix h = matmul(tape.input, base.W_in);
    add_bias(h, base.b_in);
    tanh_inplace(h);
    tape.acts.push_back(h);
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        h = matmul(h, hidden[l]);
        add_bias(h, base.b[l]);
        tanh_inplace(h);
        tape.acts.push_back(h);
    }
    tape.output = matmul(h, base.W_out);
    add_bias(tape.output, base.b_out);
    return tape;
}

}  // namespace

Vector AdaptedDenoiser::predict(std::span<const double> z, std::span<const int> tokens,
                                int t) const {
    std::vector<NoisedExample> one(1);
    one[0].z.assign(z.begin(), z.end());
    one[0].t = t;
    one[0].prompt = tokens;
    const ForwardTape tape = forward(*base_, hidden_, build_inputs(*base_, this->tokens(), one));
    return tape.output.row_copy(0);
}

Vector denoise_predict(const NoisePredictor& model, std::span<const double> z,
                       std::span<const int> tokens, int t) {
    return model.predict(z, tokens, t);
}

std::vector<NoisedExample> draw_examples(const ConceptTask& task,
                                         std::span<const std::size_t> batch, SeededRng& rng,
                                         const NoiseSchedule& sched) {
    std::vector<NoisedExample> out;
    out.reserve(batch.size());
    for (std::size_t k : batch) {
        if (k >= task.size()) {
            throw DomainError("batch index " + std::to_string(k) + " out of range for task " +
                              std::to_string(task.concept_id));
        }
        NoisedExample ex;
        ex.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T)));
        const Vector& x0 = task.samples[k];
        ex.eps.resize(x0.size());
        for (double& e : ex.eps) {
            e = rng.normal();
        }
        ex.z = forward_noise(x0, ex.t, ex.eps, sched);
        ex.prompt = task.prompts[k];
        out.push_back(std::move(ex));
    }
    return out;
}

double cdm_loss(const NoisePredictor& model, const ConceptTask& task,
                std::span<const std::size_t> batch, SeededRng& rng, const NoiseSchedule& sched) {
    if (batch.empty()) {
        throw DomainError("cdm_loss: empty batch");
    }
    const auto examples = draw_examples(task, batch, rng, sched);
    double total = 0.0;
    for (const auto& ex : examples) {
        const Vector pred = model.predict(ex.z, ex.prompt, ex.t);
        double err = 0.0;
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = ex.eps[i] - pred[i];
            err += d * d;
        }
        total += err;
    }
    return total / static_cast<double>(examples.size());
}

std::vector<Vector> sample(const NoisePredictor& model, std::span<const int> prompt,
                           std::size_t n, SeededRng& rng, const NoiseSchedule& sched) {
    if (n == 0) {
        throw DomainError("sample: n must be at least 1");
    }
    std::vector<Vector> out;
    out.reserve(n);
    const std::size_t dim = model.data_dim();
    for (std::size_t s = 0; s < n; ++s) {
        Vector z(dim);
        for (double& v : z) {
            v = rng.normal();
        }
        for (int t = sched.T; t >= 1; --t) {
            const Vector eps_hat = model.predict(z, prompt, t);
            const double beta = sched.beta(t);
            const double alpha = sched.alpha(t);
            const double ab = sched.alpha_bar(t);
            const double coef = beta / std::sqrt(1.0 - ab);
            const double inv_sqrt_alpha = 1.0 / std::sqrt(alpha);
            for (std::size_t i = 0; i < z.size(); ++i) {
                z[i] = inv_sqrt_alpha * (z[i] - coef * eps_hat[i]);
            }
            if (t > 1) {
                const double ab_prev = sched.alpha_bar(t - 1);
                const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
                for (double& v : z) {
                    v += sigma * rng.normal();
                }
            }
        }
        out.push_back(std::move(z));
    }
    return out;
}

DenoiseLossResult denoise_loss_and_grad(const Denoiser& base, const std::vector<Matrix>& hidden,
                                        const TokenEmbeddings& tokens,
                                        const std::vector<NoisedExample>& examples) {
    if (examples.empty()) {
        throw DomainError("denoise loss: empty batch");
    }
    if (hidden.size() != base.num_layers()) {
        throw ShapeError("denoise loss: hidden layer count mismatch");
    }
    const ForwardTape tape = forward(base, hidden, build_inputs(base, tokens, examples));
    const double inv_n = 1.0 / static_cast<double>(examples.size());

    DenoiseLossResult res;
    Matrix dout(examples.size(), base.data_dim);
    double total = 0.0;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        double err = 0.0;
        for (std::size_t j = 0; j < base.data_dim; ++j) {
            const double d = examples[i].eps[j] - tape.output(i, j);
            err += d * d;
            dout(i, j) = -2.0 * d * inv_n;
        }
        total += err;
    }
    res.loss = total / static_cast<double>(examples.size());

    auto& g = res.grads;
    g.W_out = matmul_tn(tape.acts.back(), dout);
    g.b_out = column_sums(dout);
    Matrix dh = matmul_nt(dout, base.W_out);
    g.W.resize(hidden.size());
    g.b.resize(hidden.size());
    for (std::size_t l = hidden.size(); l-- > 0;) {
        const Matrix& post = tape.acts[l + 1];
        for (std::size_t i = 0; i < dh.size(); ++i) {
            const double y = post.data()[i];
            dh.data()[i] *= 1.0 - y * y;
        }
        g.W[l] = matmul_tn(tape.acts[l], dh);
        g.b[l] = column_sums(dh);
        dh = matmul_nt(dh, hidden[l]);
    }
    {
        const Matrix& post = tape.acts.front();
        for (std::size_t i = 0; i < dh.size(); ++i) {
            const double y = post.data()[i];
            dh.data()[i] *= 1.0 - y * y;
        }
    }
    g.W_in = matmul_tn(tape.input, dh);
    g.b_in = column_sums(dh);
    const Matrix dx = matmul_nt(dh, base.W_in);
    g.dembedding = Matrix(examples.size(), base.embed_dim);
    const std::size_t offset = base.data_dim + base.time_dim;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        for (std::size_t k = 0; k < base.embed_dim; ++k) {
            g.dembedding(i, k) = dx(i, offset + k);
        }
    }
    return res;
}

}  // namespace fl2t::diffusion
