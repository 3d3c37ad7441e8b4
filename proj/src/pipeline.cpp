// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <mutex>
#include <numbers>
#include <set>
#include <string_view>
#include <thread>

#include "fl2t/errors.hpp"
#include "fl2t/regularizers.hpp"

namespace fl2t::pipeline {

using diffusion::ConceptTask;
using diffusion::ConsolidationState;
using diffusion::Denoiser;
using diffusion::NoiseSchedule;

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
    if (!ok) {
        throw ConfigError(field + ": " + what);
    }
}

// Runs fn(i) for i in [0, n) on up to worker_count() threads; rethrows the first error.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            fn(i);
        }
        return;
    }
    std::mutex mu;
    std::exception_ptr err;
    std::size_t next = 0;
    auto body = [&] {
        for (;;) {
            std::size_t i = 0;
            {
                std::lock_guard<std::mutex> lock(mu);
                if (next >= n || err) {
                    return;
                }
                i = next++;
            }
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!err) {
                    err = std::current_exception();
                }
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back(body);
    }
    for (auto& t : pool) {
        t.join();
    }
    if (err) {
        std::rethrow_exception(err);
    }
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                    SeededRng& rng) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) {
        idx[i] = i;
    }
    for (std::size_t i = n; i > 1; --i) {
        std::swap(idx[i - 1], idx[rng.below(i)]);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch_size) {
        out.emplace_back(idx.begin() + static_cast<std::ptrdiff_t>(s),
                         idx.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
    }
    return out;
}

std::size_t bank_row(const agg::ConceptEmbeddingBank& bank, int concept_id) {
    for (std::size_t i = 0; i < bank.concept_ids.size(); ++i) {
        if (bank.concept_ids[i] == concept_id) {
            return i;
        }
    }
    throw VocabularyError("concept " + std::to_string(concept_id) + " is not in the bank");
}

const ConceptTask& task_for(const std::vector<ConceptTask>& tasks, int concept_id) {
    for (const auto& t : tasks) {
        if (t.concept_id == concept_id) {
            return t;
        }
    }
    throw ConfigError("order: unknown concept " + std::to_string(concept_id));
}

std::size_t base_vocab(const ExperimentConfig& cfg) { return cfg.base_classes + cfg.context_words; }

std::vector<int> make_prompt(const ExperimentConfig& cfg, std::size_t k, int token) {
    return {static_cast<int>(cfg.base_classes + k % cfg.context_words), token};
}

Vector draw_from(const ConceptSpec& spec, SeededRng& rng) {
    const auto& mean = spec.means[rng.below(spec.means.size())];
    const std::size_t comp = static_cast<std::size_t>(&mean - spec.means.data());
    Vector x(mean.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = mean[i] + spec.stds[comp] * rng.normal();
    }
    return x;
}

ConceptSpec ring_mixture(int id, double angle, double radius, double offset, double std,
                         SeededRng& rng) {
    const double phi = 2.0 * std::numbers::pi * rng.uniform();
    const double cx = radius * std::cos(angle);
    const double cy = radius * std::sin(angle);
    const double dx = offset * std::cos(phi);
    const double dy = offset * std::sin(phi);
    return ConceptSpec{id, {{cx + dx, cy + dy}, {cx - dx, cy - dy}}, {std, std}};
}

// Gradient of the pooled prompt embedding pushed back onto each token row.
void scatter_prompt_grads(const diffusion::DenoiserGrads& g,
                          const std::vector<diffusion::NoisedExample>& examples, Matrix& table) {
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const double inv = 1.0 / static_cast<double>(examples[i].prompt.size());
        for (int tok : examples[i].prompt) {
            auto dst = table.row(static_cast<std::size_t>(tok));
            const auto src = g.dembedding.row(i);
            for (std::size_t k = 0; k < dst.size(); ++k) {
                dst[k] += src[k] * inv;
            }
        }
    }
}

void check_finite(double loss, std::size_t step, const std::string& where) {
    if (!std::isfinite(loss)) {
        throw TrainingError(where + ": non-finite loss", step);
    }
}

// Trains one adapter set and one concept row on a task with the denoising loss only.
void train_denoise(const Denoiser& base, lora::AdapterSet& set, Matrix& crow,
                   const ConceptTask& task, const ExperimentConfig& cfg, std::size_t epochs,
                   std::string_view tag, std::uint64_t tag_index,
                   const DataAccessObserver& observer) {
    const NoiseSchedule sched = schedule_for(cfg);
    ParamOptimizer opt(cfg.optimizer);
    agg::ConceptEmbeddingBank bank{crow, {task.concept_id}};
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        SeededRng rng(derive_seed(cfg.seed, tag, static_cast<std::uint64_t>(task.concept_id) ^
                                                     (tag_index << 32),
                                  epoch));
        for (const auto& batch : epoch_batches(task.size(), cfg.batch_size, rng)) {
            if (observer) {
                observer(task.concept_id);
            }
            const auto examples = diffusion::draw_examples(task, batch, rng, sched);
            bank.C = crow;
            const auto res = diffusion::adapter_denoise_loss(base, set, bank, examples);
            check_finite(res.loss, step, std::string(tag) + " concept " +
                                             std::to_string(task.concept_id));
            std::vector<Matrix*> params;
            std::vector<const Matrix*> grads;
            std::vector<double> lrs;
            for (std::size_t l = 0; l < set.adapters.size(); ++l) {
                params.push_back(&set.adapters[l].A);
                grads.push_back(&res.dA[l]);
                params.push_back(&set.adapters[l].B);
                grads.push_back(&res.dB[l]);
                lrs.push_back(cfg.lr_network);
                lrs.push_back(cfg.lr_network);
            }
            params.push_back(&crow);
            grads.push_back(&res.dC);
            lrs.push_back(cfg.lr_token);
            opt.step(params, grads, lrs);
            ++step;
        }
    }
}

std::vector<Matrix> single_adapter_hidden(const Denoiser& base, const lora::AdapterSet& set) {
    return diffusion::adapted_weights(base, set);
}

// Caches one AdaptedDenoiser per distinct prompt.
class PromptModels {
public:
    PromptModels(const Denoiser& base, const HiddenForPrompt& hidden,
                 const agg::ConceptEmbeddingBank& bank)
        : base_(base), hidden_(hidden), bank_(bank) {}

    const diffusion::AdaptedDenoiser& get(std::span<const int> prompt) {
        std::vector<int> key(prompt.begin(), prompt.end());
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            it = cache_
                     .emplace(key, std::make_unique<diffusion::AdaptedDenoiser>(
                                       base_, hidden_(prompt), bank_.C, bank_.concept_ids))
                     .first;
        }
        return *it->second;
    }

private:
    const Denoiser& base_;
    const HiddenForPrompt& hidden_;
    const agg::ConceptEmbeddingBank& bank_;
    std::map<std::vector<int>, std::unique_ptr<diffusion::AdaptedDenoiser>> cache_;
};

std::vector<Matrix*> collect(ConsolidationState& s, std::string_view prefix) {
    std::vector<Matrix*> out;
    diffusion::for_each_parameter(s, [&](std::string_view name, Matrix& m) {
        if (name.substr(0, prefix.size()) == prefix) {
            out.push_back(&m);
        }
    });
    return out;
}

ConsolidationState permuted(const ConsolidationState& s, const std::vector<std::size_t>& perm) {
    ConsolidationState p = s;
    for (std::size_t i = 0; i < perm.size(); ++i) {
        p.bank.C.set_row(i, s.bank.C.row(perm[i]));
        p.bank.concept_ids[i] = s.bank.concept_ids[perm[i]];
        p.proxies.P.set_row(i, s.proxies.P.row(perm[i]));
        p.adapters[i] = s.adapters[perm[i]];
    }
    return p;
}

}  // namespace

std::size_t worker_count() {
    if (const char* env = std::getenv("FL2T_THREADS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v >= 1) {
            return static_cast<std::size_t>(v);
        }
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void validate(const ExperimentConfig& cfg) {
    require(cfg.G >= 1, "G", "must be at least 1");
    require(cfg.suite == "default" || cfg.suite == "explicit", "suite",
            "must be \"default\" or \"explicit\"");
    require(cfg.samples_per_concept >= 1, "samples_per_concept", "must be at least 1");
    require(cfg.context_words >= 1, "context_words", "must be at least 1");
    require(cfg.d >= 1, "d", "must be at least 1");
    require(cfg.L >= 1, "L", "must be at least 1");
    require(cfg.width >= 1, "width", "must be at least 1");
    require(cfg.r >= 1 && cfg.r <= cfg.width, "r", "must lie in [1, width]");
    require(cfg.shared_rank <= cfg.width, "shared_rank", "must not exceed width");
    require(cfg.time_dim >= 2 && cfg.time_dim % 2 == 0, "time_dim", "must be even and >= 2");
    require(cfg.T >= 2, "T", "must be at least 2");
    require(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end, "beta_start",
            "must satisfy 0 < beta_start <= beta_end");
    require(cfg.beta_end < 1.0, "beta_end", "must be below 1");
    require(cfg.base_classes >= 1, "base_classes", "must be at least 1");
    require(cfg.pretrain_lr > 0.0, "pretrain_lr", "must be positive");
    require(cfg.batch_size >= 1, "batch_size", "must be at least 1");
    require(cfg.lr_token >= 0.0, "lr_token", "must be non-negative");
    require(cfg.lr_network >= 0.0, "lr_network", "must be non-negative");
    require(cfg.r1_weight >= 0.0, "r1_weight", "must be non-negative");
    require(cfg.gamma1 >= 0.0, "gamma1", "must be non-negative");
    require(cfg.gamma2 >= 0.0, "gamma2", "must be non-negative");
    require(cfg.tau > 0.0, "tau", "must be positive");
    require(cfg.decoder_layers >= 1 && cfg.decoder_layers <= 4, "decoder_layers",
            "must lie in [1, 4]");
    require(cfg.eval_samples >= 1, "eval_samples", "must be at least 1");
    require(cfg.eval_loss_repeats >= 1, "eval_loss_repeats", "must be at least 1");
    if (!cfg.order_spec.empty()) {
        const std::string_view prefix = "shuffled:";
        const bool ok = cfg.order_spec.rfind(prefix, 0) == 0 &&
                        cfg.order_spec.size() > prefix.size() &&
                        cfg.order_spec.find_first_not_of("0123456789", prefix.size()) ==
                            std::string::npos;
        require(ok, "order", "must be a permutation or \"shuffled:<seed>\"");
        require(cfg.order.empty(), "order", "give either a permutation or a shuffle spec");
    }
    if (!cfg.order.empty()) {
        require(cfg.order.size() == cfg.G, "order", "must list exactly G concept ids");
        const std::set<int> distinct(cfg.order.begin(), cfg.order.end());
        require(distinct.size() == cfg.order.size(), "order", "repeats a concept id");
    }
    if (cfg.suite == "explicit") {
        require(cfg.concepts.size() == cfg.G, "concepts", "must list exactly G concepts");
        std::set<int> ids;
        for (std::size_t i = 0; i < cfg.concepts.size(); ++i) {
            const auto& c = cfg.concepts[i];
            const std::string field = "concepts[" + std::to_string(i) + "]";
            require(c.concept_id >= 0, field + ".concept_id", "must be non-negative");
            require(ids.insert(c.concept_id).second, field + ".concept_id",
                    "duplicate concept id " + std::to_string(c.concept_id));
            require(!c.means.empty(), field + ".means", "must not be empty");
            require(c.stds.size() == c.means.size(), field + ".stds",
                    "must have one entry per mean");
            for (std::size_t k = 0; k < c.means.size(); ++k) {
                require(c.means[k].size() == 2, field + ".means[" + std::to_string(k) + "]",
                        "must have 2 coordinates");
                require(c.stds[k] > 0.0, field + ".stds[" + std::to_string(k) + "]",
                        "must be positive");
            }
        }
        for (std::size_t i = 0; i < cfg.concepts.size(); ++i) {
            for (std::size_t j = i + 1; j < cfg.concepts.size(); ++j) {
                require(cfg.concepts[i].means != cfg.concepts[j].means,
                        "concepts[" + std::to_string(j) + "].means",
                        "duplicates the mixture of concepts[" + std::to_string(i) + "]");
            }
        }
    }
}

std::size_t effective_shared_rank(const ExperimentConfig& cfg) {
    return cfg.shared_rank == 0 ? cfg.r : cfg.shared_rank;
}

std::vector<int> resolve_order(const ExperimentConfig& cfg, const std::vector<int>& concept_ids) {
    std::vector<int> sorted = concept_ids;
    std::sort(sorted.begin(), sorted.end());
    if (!cfg.order.empty()) {
        std::vector<int> check = cfg.order;
        std::sort(check.begin(), check.end());
        require(check == sorted, "order", "must be a permutation of the concept ids");
        return cfg.order;
    }
    if (!cfg.order_spec.empty()) {
        const auto seed = std::stoull(cfg.order_spec.substr(std::strlen("shuffled:")));
        SeededRng rng(derive_seed(seed, "order"));
        for (std::size_t i = sorted.size(); i > 1; --i) {
            std::swap(sorted[i - 1], sorted[rng.below(i)]);
        }
    }
    return sorted;
}

NoiseSchedule schedule_for(const ExperimentConfig& cfg) {
    return diffusion::make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
}

std::vector<ConceptSpec> concept_specs(const ExperimentConfig& cfg) {
    validate(cfg);
    std::vector<ConceptSpec> specs;
    if (cfg.suite == "explicit") {
        specs = cfg.concepts;
    } else {
        SeededRng rng(derive_seed(cfg.seed, "suite"));
        const double G = static_cast<double>(cfg.G);
        for (std::size_t k = 0; k < cfg.G; ++k) {
            const double angle = 2.0 * std::numbers::pi * (static_cast<double>(k) + 0.25) / G;
            specs.push_back(ring_mixture(static_cast<int>(k), angle, 1.6, 0.35, 0.08, rng));
        }
    }
    std::sort(specs.begin(), specs.end(),
              [](const ConceptSpec& a, const ConceptSpec& b) { return a.concept_id < b.concept_id; });
    return specs;
}

std::vector<ConceptTask> build_tasks(const ExperimentConfig& cfg) {
    std::vector<ConceptTask> tasks;
    for (const auto& spec : concept_specs(cfg)) {
        ConceptTask task;
        task.concept_id = spec.concept_id;
        SeededRng rng(derive_seed(cfg.seed, "data", static_cast<std::uint64_t>(spec.concept_id)));
        for (std::size_t k = 0; k < cfg.samples_per_concept; ++k) {
            task.samples.push_back(draw_from(spec, rng));
            task.prompts.push_back(make_prompt(cfg, k, diffusion::concept_token(spec.concept_id)));
        }
        diffusion::validate(task);
        tasks.push_back(std::move(task));
    }
    return tasks;
}

Denoiser pretrain_base(const ExperimentConfig& cfg) {
    validate(cfg);
    SeededRng init_rng(derive_seed(cfg.seed, "base-init"));
    Denoiser base = diffusion::init_denoiser(2, cfg.time_dim, cfg.d, cfg.width, cfg.L,
                                             base_vocab(cfg), init_rng);
    SeededRng spec_rng(derive_seed(cfg.seed, "base-classes"));
    std::vector<ConceptSpec> classes;
    for (std::size_t k = 0; k < cfg.base_classes; ++k) {
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(k) /
                             static_cast<double>(cfg.base_classes);
        classes.push_back(ring_mixture(static_cast<int>(k), angle, 1.6, 0.25, 0.08, spec_rng));
    }
    const NoiseSchedule sched = schedule_for(cfg);
    SeededRng rng(derive_seed(cfg.seed, "pretrain"));
    ParamOptimizer opt(OptimizerKind::kAdam);
    const std::size_t batch = 64;
    const agg::ConceptEmbeddingBank none{Matrix(0, cfg.d), {}};
    for (std::size_t step = 0; step < cfg.pretrain_steps; ++step) {
        std::vector<std::vector<int>> prompts(batch);
        std::vector<diffusion::NoisedExample> examples(batch);
        for (std::size_t i = 0; i < batch; ++i) {
            const std::size_t cls = rng.below(cfg.base_classes);
            prompts[i] = {static_cast<int>(cfg.base_classes + rng.below(cfg.context_words)),
                          static_cast<int>(cls)};
            const Vector x0 = draw_from(classes[cls], rng);
            auto& ex = examples[i];
            ex.t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.T)));
            ex.eps = {rng.normal(), rng.normal()};
            ex.z = diffusion::forward_noise(x0, ex.t, ex.eps, sched);
            ex.prompt = prompts[i];
        }
        const diffusion::TokenEmbeddings tokens{&base.token_table, &none.C, none.concept_ids};
        const auto res = diffusion::denoise_loss_and_grad(base, base.W, tokens, examples);
        check_finite(res.loss, step, "pretraining");
        Matrix dtable(base.token_table.rows(), base.token_table.cols());
        scatter_prompt_grads(res.grads, examples, dtable);

        std::vector<Matrix*> params{&base.W_in, &base.b_in, &base.W_out, &base.b_out,
                                    &base.token_table};
        std::vector<const Matrix*> grads{&res.grads.W_in, &res.grads.b_in, &res.grads.W_out,
                                         &res.grads.b_out, &dtable};
        for (std::size_t l = 0; l < base.W.size(); ++l) {
            params.push_back(&base.W[l]);
            grads.push_back(&res.grads.W[l]);
            params.push_back(&base.b[l]);
            grads.push_back(&res.grads.b[l]);
        }
        // Linear decay to 10% of the initial rate.
        const double frac = static_cast<double>(step) / static_cast<double>(cfg.pretrain_steps);
        const std::vector<double> lrs(params.size(), cfg.pretrain_lr * (1.0 - 0.9 * frac));
        opt.step(params, grads, lrs);
    }
    return base;
}

void ParamOptimizer::step(const std::vector<Matrix*>& params,
                          const std::vector<const Matrix*>& grads, const std::vector<double>& lrs) {
    if (params.size() != grads.size() || params.size() != lrs.size()) {
        throw ShapeError("optimizer: parameter, gradient and rate lists differ in length");
    }
    if (kind_ == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i]->add_scaled(*grads[i], -lrs[i]);
        }
        return;
    }
    constexpr double b1 = 0.9;
    constexpr double b2 = 0.999;
    constexpr double eps = 1e-8;
    if (m_.empty()) {
        for (const Matrix* p : params) {
            m_.emplace_back(p->rows(), p->cols());
            v_.emplace_back(p->rows(), p->cols());
        }
    }
    if (m_.size() != params.size()) {
        throw ShapeError("optimizer: parameter list changed between steps");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->data();
        const auto& g = grads[i]->data();
        auto& m = m_[i].data();
        auto& v = v_[i].data();
        if (g.size() != p.size() || m.size() != p.size()) {
            throw ShapeError("optimizer: shape mismatch at parameter " + std::to_string(i));
        }
        for (std::size_t k = 0; k < p.size(); ++k) {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            p[k] -= lrs[i] * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps);
        }
    }
}

Vector initial_concept_embedding(const ExperimentConfig& cfg, int concept_id) {
    SeededRng rng(derive_seed(cfg.seed, "token-init", static_cast<std::uint64_t>(concept_id)));
    const Matrix row = gaussian(rng, 1, cfg.d, 0.0, 1.0 / std::sqrt(static_cast<double>(cfg.d)));
    return row.data();
}

Step1Result train_step1(const Denoiser& base, const std::vector<ConceptTask>& tasks,
                        const ExperimentConfig& cfg, const DataAccessObserver& observer) {
    validate(cfg);
    std::vector<const ConceptTask*> sorted;
    for (const auto& t : tasks) {
        diffusion::validate(t);
        sorted.push_back(&t);
    }
    std::sort(sorted.begin(), sorted.end(),
              [](const ConceptTask* a, const ConceptTask* b) { return a->concept_id < b->concept_id; });
    const std::size_t G = sorted.size();
    Step1Result out;
    out.adapters.resize(G);
    out.bank.C = Matrix(G, cfg.d);
    out.loss_init.assign(G, 0.0);
    out.loss_trained.assign(G, 0.0);
    for (std::size_t i = 0; i < G; ++i) {
        out.bank.concept_ids.push_back(sorted[i]->concept_id);
    }
    std::mutex observer_mu;
    const DataAccessObserver guarded = [&](int id) {
        if (observer) {
            std::lock_guard<std::mutex> lock(observer_mu);
            observer(id);
        }
    };
    parallel_for(G, [&](std::size_t i) {
        const ConceptTask& task = *sorted[i];
        const auto id = static_cast<std::uint64_t>(task.concept_id);
        SeededRng rng(derive_seed(cfg.seed, "adapter-init", id));
        lora::AdapterSet set =
            lora::init_adapter_set(task.concept_id, cfg.L, cfg.width, cfg.width, cfg.r, rng);
        Matrix crow = Matrix::row_vector(initial_concept_embedding(cfg, task.concept_id));

        const auto loss_of = [&] {
            const agg::ConceptEmbeddingBank bank{crow, {task.concept_id}};
            const HiddenForPrompt hidden = [&](std::span<const int>) {
                return single_adapter_hidden(base, set);
            };
            return evaluation_loss(base, hidden, bank, task, cfg);
        };
        out.loss_init[i] = loss_of();
        train_denoise(base, set, crow, task, cfg, cfg.epochs_step1, "step1", 0, guarded);
        out.loss_trained[i] = loss_of();
        out.adapters[i] = std::move(set);
        out.bank.C.set_row(i, crow.row(0));
    });
    return out;
}

Matrix anchor_prompt(const Denoiser& base, const agg::ConceptEmbeddingBank& bank,
                     const ConceptTask& task) {
    const diffusion::TokenEmbeddings tokens{&base.token_table, &bank.C, bank.concept_ids};
    return tokens.stack(task.prompts.front());
}

std::vector<reg::RelevanceWeights> relevance_snapshot(const Denoiser& base,
                                                      const ConsolidationState& s,
                                                      const std::vector<ConceptTask>& tasks,
                                                      agg::RelevanceMode mode) {
    std::vector<reg::RelevanceWeights> out;
    for (std::size_t g = 0; g < s.bank.size(); ++g) {
        const ConceptTask& task = task_for(tasks, s.bank.concept_ids[g]);
        const auto path = agg::relevance_forward(s.bank.C, s.proxies.P,
                                                 anchor_prompt(base, s.bank, task), s.decoder,
                                                 s.fusion, g, mode);
        out.push_back(path.lambda);
    }
    return out;
}

double total_r1_weighted(const Denoiser& base, const ConsolidationState& s,
                         const std::vector<ConceptTask>& tasks, agg::RelevanceMode mode) {
    const auto lambdas = relevance_snapshot(base, s, tasks, mode);
    double total = 0.0;
    for (std::size_t g = 0; g < lambdas.size(); ++g) {
        total += reg::r1_weighted(s.adapters, g, lambdas[g]).value;
    }
    return total;
}

double permutation_deviation(const Denoiser& base, const ConsolidationState& s,
                             const std::vector<ConceptTask>& tasks,
                             const std::vector<std::size_t>& perm, agg::RelevanceMode mode) {
    if (perm.size() != s.bank.size()) {
        throw ShapeError("permutation length differs from the bank size");
    }
    const auto ref = relevance_snapshot(base, s, tasks, mode);
    const auto moved = relevance_snapshot(base, permuted(s, perm), tasks, mode);
    double dev = 0.0;
    for (std::size_t gp = 0; gp < perm.size(); ++gp) {
        const std::size_t g = perm[gp];
        for (std::size_t ip = 0; ip < perm.size(); ++ip) {
            if (ip == gp) {
                continue;
            }
            dev = std::max(dev, std::abs(moved[gp].lambda[ip] - ref[g].lambda[perm[ip]]));
        }
    }
    return dev;
}

Step2Result train_step2(const Denoiser& base, const std::vector<ConceptTask>& tasks,
                        const Step1Result& s1, const ExperimentConfig& cfg,
                        const DataAccessObserver& observer) {
    validate(cfg);
    const std::size_t G = s1.bank.size();
    if (G < 2) {
        throw DegenerateError("step 2 needs at least two concepts");
    }
    if (s1.adapters.size() != G) {
        throw ShapeError("step 2: adapter count differs from the bank size");
    }
    Step2Result out;
    ConsolidationState& s = out.state;
    s.adapters = s1.adapters;
    s.bank = s1.bank;
    s.proxies = agg::init_proxies(s.bank);
    SeededRng dec_rng(derive_seed(cfg.seed, "decoder-init"));
    s.decoder = agg::init_decoder(cfg.d, cfg.decoder_layers, dec_rng, cfg.decoder_ffn,
                                  cfg.layer_norm);
    SeededRng fus_rng(derive_seed(cfg.seed, "fusion-init"));
    s.fusion = agg::init_fusion(cfg.d, fus_rng);
    SeededRng sub_rng(derive_seed(cfg.seed, "subspace-init"));
    s.subspace = reg::init_shared_subspace(G, cfg.L, cfg.width, cfg.width,
                                           effective_shared_rank(cfg), sub_rng);

    out.order = resolve_order(cfg, s.bank.concept_ids);
    out.entry_lambda = relevance_snapshot(base, s, tasks, cfg.lambda_mode);
    out.lambda_trace.resize(G);
    out.r1_start = total_r1_weighted(base, s, tasks, cfg.lambda_mode);

    diffusion::ConsolidationOptions options;
    options.weights = {cfg.r1_weight, cfg.gamma1, cfg.gamma2, cfg.tau};
    options.mode = cfg.lambda_mode;
    const NoiseSchedule sched = schedule_for(cfg);

    std::vector<ParamOptimizer> concept_opt(G, ParamOptimizer(cfg.optimizer));
    ParamOptimizer shared_opt(cfg.optimizer);
    std::vector<Matrix> crows;
    for (std::size_t g = 0; g < G; ++g) {
        crows.push_back(Matrix::row_vector(s.bank.C.row(g)));
    }

    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs_step2; ++epoch) {
        for (int cid : out.order) {
            const std::size_t g = bank_row(s.bank, cid);
            const ConceptTask& task = task_for(tasks, cid);
            SeededRng rng(derive_seed(cfg.seed, "step2", static_cast<std::uint64_t>(cid), epoch));
            for (const auto& batch : epoch_batches(task.size(), cfg.batch_size, rng)) {
                if (observer) {
                    observer(cid);
                }
                auto res = diffusion::consolidation_loss(base, s, task, g, batch, options, rng,
                                                         sched);
                check_finite(res.terms.total, step, "step 2 concept " + std::to_string(cid));
                out.loss_trace.push_back(res.terms.total);
                out.lambda_trace[g].push_back(res.terms.lambda.lambda);

                std::vector<Matrix*> params;
                std::vector<const Matrix*> grads;
                std::vector<double> lrs;
                for (std::size_t l = 0; l < s.adapters[g].adapters.size(); ++l) {
                    params.push_back(&s.adapters[g].adapters[l].A);
                    grads.push_back(&res.grad.adapters[g].adapters[l].A);
                    params.push_back(&s.adapters[g].adapters[l].B);
                    grads.push_back(&res.grad.adapters[g].adapters[l].B);
                    lrs.insert(lrs.end(), 2, cfg.lr_network);
                }
                const Matrix dcrow = Matrix::row_vector(res.grad.bank.C.row(g));
                params.push_back(&crows[g]);
                grads.push_back(&dcrow);
                lrs.push_back(cfg.lr_token);
                concept_opt[g].step(params, grads, lrs);
                s.bank.C.set_row(g, crows[g].row(0));

                std::vector<Matrix*> sp;
                std::vector<Matrix*> sg;
                std::vector<double> slr;
                for (const char* prefix : {"proxies", "decoder", "fusion", "subspace"}) {
                    const auto p = collect(s, prefix);
                    const auto q = collect(res.grad, prefix);
                    sp.insert(sp.end(), p.begin(), p.end());
                    sg.insert(sg.end(), q.begin(), q.end());
                    const double lr =
                        std::string_view(prefix) == "proxies" ? cfg.lr_token : cfg.lr_network;
                    slr.insert(slr.end(), p.size(), lr);
                }
                shared_opt.step(sp, std::vector<const Matrix*>(sg.begin(), sg.end()), slr);
                ++step;
            }
        }
    }
    out.r1_end = total_r1_weighted(base, s, tasks, cfg.lambda_mode);
    return out;
}

std::vector<Matrix> ewa_hidden(const Denoiser& base, const std::vector<lora::AdapterSet>& adapters,
                               const agg::ConceptEmbeddingBank& bank,
                               std::span<const int> prompt) {
    const diffusion::TokenEmbeddings tokens{&base.token_table, &bank.C, bank.concept_ids};
    const lora::EwaWeights psi = lora::ewa_weights(tokens.stack(prompt), bank.C);
    return lora::merge(base.W, lora::ewa_aggregate(adapters, psi));
}

std::vector<Vector> consolidate_and_generate(const Denoiser& base,
                                             const std::vector<lora::AdapterSet>& adapters,
                                             const agg::ConceptEmbeddingBank& bank,
                                             std::span<const int> prompt, std::size_t n,
                                             SeededRng& rng, const NoiseSchedule& sched) {
    const diffusion::AdaptedDenoiser model(base, ewa_hidden(base, adapters, bank, prompt), bank.C,
                                           bank.concept_ids);
    return diffusion::sample(model, prompt, n, rng, sched);
}

double evaluation_loss(const Denoiser& base, const HiddenForPrompt& hidden,
                       const agg::ConceptEmbeddingBank& bank, const ConceptTask& task,
                       const ExperimentConfig& cfg) {
    const NoiseSchedule sched = schedule_for(cfg);
    SeededRng rng(derive_seed(cfg.seed, "eval-loss", static_cast<std::uint64_t>(task.concept_id)));
    std::vector<std::size_t> batch;
    for (std::size_t r = 0; r < cfg.eval_loss_repeats; ++r) {
        for (std::size_t k = 0; k < task.size(); ++k) {
            batch.push_back(k);
        }
    }
    const auto examples = diffusion::draw_examples(task, batch, rng, sched);
    PromptModels models(base, hidden, bank);
    double total = 0.0;
    for (const auto& ex : examples) {
        const Vector pred = models.get(ex.prompt).predict(ex.z, ex.prompt, ex.t);
        for (std::size_t i = 0; i < pred.size(); ++i) {
            const double d = ex.eps[i] - pred[i];
            total += d * d;
        }
    }
    return total / static_cast<double>(examples.size());
}

SampleEmbedder::SampleEmbedder(std::uint64_t seed, std::size_t data_dim, std::size_t out) {
    SeededRng rng(seed);
    R_ = gaussian(rng, out, data_dim, 0.0, 1.0);
    b_ = gaussian(rng, 1, out, 0.0, 0.5).data();
}

Vector SampleEmbedder::operator()(std::span<const double> x) const {
    if (x.size() != R_.cols()) {
        throw ShapeError("embedder: sample of length " + std::to_string(x.size()));
    }
    Vector e(R_.rows());
    for (std::size_t i = 0; i < e.size(); ++i) {
        e[i] = std::tanh(dot(R_.row(i), x) + b_[i]);
    }
    return e;
}

SampleScores score_samples(const SampleEmbedder& embed, const std::vector<Vector>& generated,
                           const std::vector<Vector>& reference) {
    if (generated.empty() || reference.empty()) {
        throw DomainError("score_samples: empty sample set");
    }
    const auto mean_embedding = [&](const std::vector<Vector>& xs) {
        Vector acc;
        for (const auto& x : xs) {
            const Vector e = embed(x);
            acc.resize(e.size(), 0.0);
            for (std::size_t i = 0; i < e.size(); ++i) {
                acc[i] += e[i];
            }
        }
        for (double& v : acc) {
            v /= static_cast<double>(xs.size());
        }
        return acc;
    };
    const Vector ref = mean_embedding(reference);
    SampleScores s;
    for (const auto& x : generated) {
        s.ia += cosine_sim(embed(x), ref);
    }
    s.ia /= static_cast<double>(generated.size());
    s.ims = cosine_sim(mean_embedding(generated), ref);
    return s;
}

double MetricsReport::mean_forgetting() const {
    if (concepts.empty()) {
        return 0.0;
    }
    double s = 0.0;
    for (const auto& c : concepts) {
        s += c.forgetting;
    }
    return s / static_cast<double>(concepts.size());
}

std::map<int, std::vector<Vector>> generate_all(const Denoiser& base, const HiddenForPrompt& hidden,
                                                const agg::ConceptEmbeddingBank& bank,
                                                const std::vector<ConceptTask>& tasks,
                                                const ExperimentConfig& cfg) {
    const NoiseSchedule sched = schedule_for(cfg);
    std::vector<std::vector<Vector>> out(tasks.size());
    parallel_for(tasks.size(), [&](std::size_t i) {
        const ConceptTask& task = tasks[i];
        PromptModels models(base, hidden, bank);
        SeededRng rng(derive_seed(cfg.seed, "generate", static_cast<std::uint64_t>(task.concept_id)));
        for (std::size_t s = 0; s < cfg.eval_samples; ++s) {
            const auto& prompt = task.prompts[s % task.size()];
            auto one = diffusion::sample(models.get(prompt), prompt, 1, rng, sched);
            out[i].push_back(std::move(one.front()));
        }
    });
    std::map<int, std::vector<Vector>> result;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        result[tasks[i].concept_id] = std::move(out[i]);
    }
    return result;
}

MetricsReport evaluate(const Denoiser& base, const HiddenForPrompt& hidden,
                       const agg::ConceptEmbeddingBank& bank, const std::vector<ConceptTask>& tasks,
                       const Vector& loss_before, const ExperimentConfig& cfg) {
    if (loss_before.size() != tasks.size()) {
        throw ShapeError("evaluate: one baseline loss per task is required");
    }
    const SampleEmbedder embed(derive_seed(cfg.seed, "ims-projection"));
    const auto generated = generate_all(base, hidden, bank, tasks, cfg);
    MetricsReport report;
    for (std::size_t i = 0; i < tasks.size(); ++i) {
        const ConceptTask& task = tasks[i];
        ConceptMetrics m;
        m.concept_id = task.concept_id;
        const SampleScores sc = score_samples(embed, generated.at(task.concept_id), task.samples);
        m.ia_analog = sc.ia;
        m.ims_analog = sc.ims;
        m.loss_before = loss_before[i];
        m.loss_after = evaluation_loss(base, hidden, bank, task, cfg);
        m.forgetting = m.loss_after - m.loss_before;
        report.concepts.push_back(m);
    }
    return report;
}

PipelineRun run_pipeline(const Denoiser& base, const std::vector<ConceptTask>& tasks,
                         const ExperimentConfig& cfg) {
    PipelineRun run;
    run.step1 = train_step1(base, tasks, cfg);
    run.step2 = train_step2(base, tasks, run.step1, cfg);
    const auto& st = run.step2.state;
    const HiddenForPrompt hidden = [&](std::span<const int> prompt) {
        return ewa_hidden(base, st.adapters, st.bank, prompt);
    };
    run.metrics = evaluate(base, hidden, st.bank, tasks, run.step1.loss_trained, cfg);
    return run;
}

BaselineRun run_baseline_sequential(const Denoiser& base, const std::vector<ConceptTask>& tasks,
                                    const ExperimentConfig& cfg) {
    validate(cfg);
    BaselineRun run;
    std::vector<int> ids;
    for (const auto& t : tasks) {
        diffusion::validate(t);
        ids.push_back(t.concept_id);
    }
    std::sort(ids.begin(), ids.end());
    const std::vector<int> order = resolve_order(cfg, ids);
    // Same initialization and batch stream as Step 1 for the first task, so a
    // single-task baseline is exactly Step-1 training.
    SeededRng rng(derive_seed(cfg.seed, "adapter-init", static_cast<std::uint64_t>(order.front())));
    run.shared = lora::init_adapter_set(-1, cfg.L, cfg.width, cfg.width, cfg.r, rng);
    run.bank.concept_ids = ids;
    run.bank.C = Matrix(ids.size(), cfg.d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        run.bank.C.set_row(i, initial_concept_embedding(cfg, ids[i]));
    }
    const HiddenForPrompt hidden = [&](std::span<const int>) {
        return single_adapter_hidden(base, run.shared);
    };
    std::map<int, double> own;
    std::uint64_t position = 0;
    for (int cid : order) {
        const ConceptTask& task = task_for(tasks, cid);
        const std::size_t row = bank_row(run.bank, cid);
        Matrix crow = Matrix::row_vector(run.bank.C.row(row));
        train_denoise(base, run.shared, crow, task, cfg, cfg.epochs_step1 + cfg.epochs_step2,
                      "step1", position++, {});
        run.bank.C.set_row(row, crow.row(0));
        own[cid] = evaluation_loss(base, hidden, run.bank, task, cfg);
    }
    std::vector<ConceptTask> sorted = tasks;
    std::sort(sorted.begin(), sorted.end(),
              [](const ConceptTask& a, const ConceptTask& b) { return a.concept_id < b.concept_id; });
    Vector before;
    for (const auto& t : sorted) {
        before.push_back(own.at(t.concept_id));
    }
    run.metrics = evaluate(base, hidden, run.bank, sorted, before, cfg);
    return run;
}

std::uint64_t fingerprint(const ConsolidationState& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (double v : diffusion::flatten(s)) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &v, sizeof bits);
        for (int b = 0; b < 8; ++b) {
            h ^= (bits >> (8 * b)) & 0xffu;
            h *= 1099511628211ull;
        }
    }
    return h;
}

OrderReport run_order_experiment(const Denoiser& base, const std::vector<ConceptTask>& tasks,
                                 const ExperimentConfig& cfg,
                                 const std::vector<std::vector<int>>& orders) {
    if (orders.size() < 2) {
        throw ConfigError("orders: at least two orders are required");
    }
    std::vector<int> ids;
    for (const auto& t : tasks) {
        ids.push_back(t.concept_id);
    }
    std::sort(ids.begin(), ids.end());
    for (std::size_t k = 0; k < orders.size(); ++k) {
        std::vector<int> o = orders[k];
        std::sort(o.begin(), o.end());
        if (o != ids) {
            throw ConfigError("orders[" + std::to_string(k) +
                              "]: not a permutation of the task concept ids");
        }
    }
    OrderReport report;
    for (const auto& order : orders) {
        ExperimentConfig c = cfg;
        c.order = order;
        c.order_spec.clear();
        const PipelineRun run = run_pipeline(base, tasks, c);
        OrderRun r;
        r.order = order;
        r.metrics = run.metrics;
        r.entry_lambda = run.step2.entry_lambda;
        r.state_fingerprint = fingerprint(run.step2.state);
        const std::size_t G = run.step2.state.bank.size();
        std::vector<std::size_t> reversed(G);
        std::vector<std::size_t> rotated(G);
        for (std::size_t i = 0; i < G; ++i) {
            reversed[i] = G - 1 - i;
            rotated[i] = (i + 1) % G;
        }
        r.permutation_deviation =
            std::max(permutation_deviation(base, run.step2.state, tasks, reversed, c.lambda_mode),
                     permutation_deviation(base, run.step2.state, tasks, rotated, c.lambda_mode));
        report.max_permutation_deviation =
            std::max(report.max_permutation_deviation, r.permutation_deviation);
        report.runs.push_back(std::move(r));
    }
    const auto multiset = [](const reg::RelevanceWeights& w) {
        Vector v;
        for (std::size_t i = 0; i < w.lambda.size(); ++i) {
            if (i != w.active) {
                v.push_back(w.lambda[i]);
            }
        }
        std::sort(v.begin(), v.end());
        return v;
    };
    for (std::size_t a = 0; a < report.runs.size(); ++a) {
        for (std::size_t b = a + 1; b < report.runs.size(); ++b) {
            const auto& ra = report.runs[a];
            const auto& rb = report.runs[b];
            for (std::size_t g = 0; g < ra.entry_lambda.size(); ++g) {
                const Vector x = multiset(ra.entry_lambda[g]);
                const Vector y = multiset(rb.entry_lambda[g]);
                for (std::size_t i = 0; i < x.size(); ++i) {
                    report.lambda_multiset_max_diff =
                        std::max(report.lambda_multiset_max_diff, std::abs(x[i] - y[i]));
                }
            }
            for (std::size_t i = 0; i < ra.metrics.concepts.size(); ++i) {
                report.max_pairwise_ims_diff =
                    std::max(report.max_pairwise_ims_diff,
                             std::abs(ra.metrics.concepts[i].ims_analog -
                                      rb.metrics.concepts[i].ims_analog));
            }
        }
    }
    return report;
}

}  // namespace fl2t::pipeline
