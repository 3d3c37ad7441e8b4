// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fl2t/aggregation.hpp"
#include "fl2t/consolidation.hpp"
#include "fl2t/lora.hpp"
#include "fl2t/toy_diffusion.hpp"

namespace fl2t::pipeline {

/// One concept's data distribution: an equal-weight Gaussian mixture in the plane.
struct ConceptSpec {
    int concept_id = 0;
    std::vector<Vector> means;
    /// Isotropic standard deviation per component.
    Vector stds;

    friend bool operator==(const ConceptSpec&, const ConceptSpec&) = default;
};

enum class OptimizerKind { kSgd, kAdam };

struct ExperimentConfig {
    std::uint64_t seed = 7;
    std::size_t G = 4;
    /// "default" generates G concepts; "explicit" uses `concepts`.
    std::string suite = "default";
    std::vector<ConceptSpec> concepts;
    std::size_t samples_per_concept = 64;
    std::size_t context_words = 4;

    std::size_t d = 16;
    std::size_t L = 4;
    std::size_t width = 64;
    std::size_t r = 4;
    /// 0 means "same as r".
    std::size_t shared_rank = 0;
    std::size_t time_dim = 8;

    int T = 100;
    double beta_start = 1e-4;
    double beta_end = 0.02;

    std::size_t base_classes = 8;
    std::size_t pretrain_steps = 3000;
    double pretrain_lr = 2e-3;

    std::size_t epochs_step1 = 50;
    std::size_t epochs_step2 = 50;
    std::size_t batch_size = 16;
    double lr_token = 1e-3;
    double lr_network = 1e-4;
    OptimizerKind optimizer = OptimizerKind::kAdam;

    double r1_weight = 1.0;
    double gamma1 = 0.1;
    double gamma2 = 0.1;
    double tau = 0.1;
    std::size_t decoder_layers = 2;
    bool decoder_ffn = true;
    bool layer_norm = false;
    agg::RelevanceMode lambda_mode = agg::RelevanceMode::kCosine;

    /// Explicit concept-id permutation, "shuffled:<seed>", or empty for ascending ids.
    std::vector<int> order;
    std::string order_spec;

    std::size_t eval_samples = 128;
    std::size_t eval_loss_repeats = 8;

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Throws ConfigError naming the offending field.
void validate(const ExperimentConfig& cfg);

std::size_t effective_shared_rank(const ExperimentConfig& cfg);

/// Concept ids in training order for the configured order (or `order_spec`).
std::vector<int> resolve_order(const ExperimentConfig& cfg, const std::vector<int>& concept_ids);

diffusion::NoiseSchedule schedule_for(const ExperimentConfig& cfg);

/// Concept specs for the configured suite, sorted by concept id.
std::vector<ConceptSpec> concept_specs(const ExperimentConfig& cfg);

/// Tasks sorted by concept id. Prompts are [context word, concept token] with
/// context words drawn from the base vocabulary.
std::vector<diffusion::ConceptTask> build_tasks(const ExperimentConfig& cfg);

/// theta_0: trained on `base_classes` generic mixtures (never the concepts).
diffusion::Denoiser pretrain_base(const ExperimentConfig& cfg);

/// SGD or Adam over a fixed list of parameter matrices. The list order must be
/// stable between calls.
class ParamOptimizer {
public:
    explicit ParamOptimizer(OptimizerKind kind) : kind_(kind) {}

    void step(const std::vector<Matrix*>& params, const std::vector<const Matrix*>& grads,
              const std::vector<double>& lrs);

private:
    OptimizerKind kind_;
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

/// Called with the concept id whenever a task's samples are read.
using DataAccessObserver = std::function<void(int concept_id)>;

struct Step1Result {
    std::vector<lora::AdapterSet> adapters;  // bank order
    agg::ConceptEmbeddingBank bank;           // ascending concept id
    Vector loss_init;
    Vector loss_trained;
};

/// Initial token embedding of a concept (seeded by its id).
Vector initial_concept_embedding(const ExperimentConfig& cfg, int concept_id);

Step1Result train_step1(const diffusion::Denoiser& base,
                        const std::vector<diffusion::ConceptTask>& tasks,
                        const ExperimentConfig& cfg, const DataAccessObserver& observer = {});

struct Step2Result {
    diffusion::ConsolidationState state;
    std::vector<int> order;
    /// Relevance weights per bank row, computed when Step 2 starts.
    std::vector<reg::RelevanceWeights> entry_lambda;
    /// Every lambda used during Step 2, per bank row.
    std::vector<std::vector<Vector>> lambda_trace;
    double r1_start = 0.0;
    double r1_end = 0.0;
    std::vector<double> loss_trace;
};

/// Anchor prompt embedding stack for relevance scoring of a task.
Matrix anchor_prompt(const diffusion::Denoiser& base, const agg::ConceptEmbeddingBank& bank,
                     const diffusion::ConceptTask& task);

/// sum over tasks of the relevance-weighted orthogonality term at the current state.
double total_r1_weighted(const diffusion::Denoiser& base, const diffusion::ConsolidationState& s,
                         const std::vector<diffusion::ConceptTask>& tasks,
                         agg::RelevanceMode mode);

/// Relevance weights for every bank row at the current state.
std::vector<reg::RelevanceWeights> relevance_snapshot(
    const diffusion::Denoiser& base, const diffusion::ConsolidationState& s,
    const std::vector<diffusion::ConceptTask>& tasks, agg::RelevanceMode mode);

/// Largest deviation from exact equivariance of the relevance path under a bank
/// permutation (every row permuted consistently).
double permutation_deviation(const diffusion::Denoiser& base,
                             const diffusion::ConsolidationState& s,
                             const std::vector<diffusion::ConceptTask>& tasks,
                             const std::vector<std::size_t>& perm, agg::RelevanceMode mode);

Step2Result train_step2(const diffusion::Denoiser& base,
                        const std::vector<diffusion::ConceptTask>& tasks, const Step1Result& s1,
                        const ExperimentConfig& cfg, const DataAccessObserver& observer = {});

/// Provides the effective hidden weights for a prompt.
using HiddenForPrompt = std::function<std::vector<Matrix>(std::span<const int> prompt)>;

/// EWA: psi from the prompt against the stored bank, summed deltas merged into theta_0.
std::vector<Matrix> ewa_hidden(const diffusion::Denoiser& base,
                               const std::vector<lora::AdapterSet>& adapters,
                               const agg::ConceptEmbeddingBank& bank,
                               std::span<const int> prompt);

std::vector<Vector> consolidate_and_generate(const diffusion::Denoiser& base,
                                             const std::vector<lora::AdapterSet>& adapters,
                                             const agg::ConceptEmbeddingBank& bank,
                                             std::span<const int> prompt, std::size_t n,
                                             SeededRng& rng,
                                             const diffusion::NoiseSchedule& sched);

/// Fixed-seed Monte-Carlo denoising loss over every sample of the task
/// (`repeats` noise draws per sample).
double evaluation_loss(const diffusion::Denoiser& base, const HiddenForPrompt& hidden,
                       const agg::ConceptEmbeddingBank& bank, const diffusion::ConceptTask& task,
                       const ExperimentConfig& cfg);

/// tanh(R x + b) with a seeded R^2 -> R^16 projection.
class SampleEmbedder {
public:
    explicit SampleEmbedder(std::uint64_t seed, std::size_t data_dim = 2, std::size_t out = 16);
    Vector operator()(std::span<const double> x) const;

private:
    Matrix R_;
    Vector b_;
};

struct SampleScores {
    double ia = 0.0;
    double ims = 0.0;
};

SampleScores score_samples(const SampleEmbedder& embed, const std::vector<Vector>& generated,
                           const std::vector<Vector>& reference);

struct ConceptMetrics {
    int concept_id = 0;
    double ia_analog = 0.0;
    double ims_analog = 0.0;
    double loss_before = 0.0;
    double loss_after = 0.0;
    double forgetting = 0.0;
};

struct MetricsReport {
    std::vector<ConceptMetrics> concepts;

    double mean_forgetting() const;
};

/// Generated samples per concept, cycling through the task's prompts.
std::map<int, std::vector<Vector>> generate_all(const diffusion::Denoiser& base,
                                                const HiddenForPrompt& hidden,
                                                const agg::ConceptEmbeddingBank& bank,
                                                const std::vector<diffusion::ConceptTask>& tasks,
                                                const ExperimentConfig& cfg);

/// Scores `hidden` on every task; loss_before comes from `before` (per task, bank order).
MetricsReport evaluate(const diffusion::Denoiser& base, const HiddenForPrompt& hidden,
                       const agg::ConceptEmbeddingBank& bank,
                       const std::vector<diffusion::ConceptTask>& tasks,
                       const Vector& loss_before, const ExperimentConfig& cfg);

struct PipelineRun {
    Step1Result step1;
    Step2Result step2;
    MetricsReport metrics;
};

/// Step 1, Step 2 and EWA evaluation on a pretrained base.
PipelineRun run_pipeline(const diffusion::Denoiser& base,
                         const std::vector<diffusion::ConceptTask>& tasks,
                         const ExperimentConfig& cfg);

struct BaselineRun {
    lora::AdapterSet shared;
    agg::ConceptEmbeddingBank bank;
    MetricsReport metrics;
};

/// One shared adapter set trained on the tasks strictly in order (cdm loss only),
/// epochs_step1 + epochs_step2 epochs per task.
BaselineRun run_baseline_sequential(const diffusion::Denoiser& base,
                                    const std::vector<diffusion::ConceptTask>& tasks,
                                    const ExperimentConfig& cfg);

struct OrderRun {
    std::vector<int> order;
    MetricsReport metrics;
    std::vector<reg::RelevanceWeights> entry_lambda;
    double permutation_deviation = 0.0;
    std::uint64_t state_fingerprint = 0;
};

struct OrderReport {
    std::vector<OrderRun> runs;
    /// Largest entry-wise difference of the sorted entry lambda multisets per task.
    double lambda_multiset_max_diff = 0.0;
    double max_permutation_deviation = 0.0;
    double max_pairwise_ims_diff = 0.0;
};

/// Throws ConfigError if an order is not a permutation of the task ids.
OrderReport run_order_experiment(const diffusion::Denoiser& base,
                                 const std::vector<diffusion::ConceptTask>& tasks,
                                 const ExperimentConfig& cfg,
                                 const std::vector<std::vector<int>>& orders);

/// FNV-1a over the bit patterns of every parameter.
std::uint64_t fingerprint(const diffusion::ConsolidationState& s);

struct GradcheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t points = 0;
};

/// Analytic vs central-difference gradients on a tiny instance (G=2, d=4, L=2, r=2).
std::vector<GradcheckEntry> run_gradcheck(std::uint64_t seed, std::size_t points, double h = 1e-5);

/// Number of worker threads: FL2T_THREADS if set (>= 1), else hardware concurrency.
std::size_t worker_count();

}  // namespace fl2t::pipeline
