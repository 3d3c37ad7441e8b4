// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fl2t/drift.hpp"
#include "fl2t/errors.hpp"
#include "fl2t/pipeline.hpp"

namespace fl2t::cli {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr std::string_view kSchemaVersion = "1.0";

enum ExitCode : int {
    kExitOk = 0,
    kExitUsage = 2,
    kExitNumerical = 3,
    kExitIo = 4,
};

struct Command {
    std::string name;
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string in;

    // drift-analyze
    std::size_t trials = 1000;
    std::size_t dim = 32;
    std::size_t max_n = 8;

    // generate
    int concept_id = 0;
    std::size_t context = 0;
    std::size_t n = 64;

    // order-experiment
    std::string orders;
    std::size_t shuffles = 3;

    // gradcheck
    std::size_t points = 20;
};

/// Thrown for malformed command lines; carries the message and the exit code
/// CLI11 asked for (0 for --help).
class UsageError : public Error {
public:
    UsageError(const std::string& what, int code) : Error(what), code_(code) {}
    int code() const noexcept { return code_; }

private:
    int code_;
};

Command parse_args(int argc, const char* const* argv);

/// JSON text to config with defaults applied. Throws ConfigError with the field path
/// (or line/column for syntax errors).
pipeline::ExperimentConfig parse_config(std::string_view text);
pipeline::ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const pipeline::ExperimentConfig& cfg);

/// FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_hash(const pipeline::ExperimentConfig& cfg);

std::string adapter_to_json(const lora::AdapterSet& set);
/// Rejects unknown schema majors and malformed shapes with ConfigError.
lora::AdapterSet adapter_from_json(std::string_view text);

std::string denoiser_to_json(const diffusion::Denoiser& base);
diffusion::Denoiser denoiser_from_json(std::string_view text);

/// Everything Step 2 produces beyond the adapters.
struct Step2Checkpoint {
    diffusion::ConsolidationState state;
    Vector loss_before;
    std::vector<int> order;
    std::vector<reg::RelevanceWeights> entry_lambda;
};

std::string state_to_json(const Step2Checkpoint& ck);
/// Adapters are not part of the state file; `adapters` stays empty.
Step2Checkpoint state_from_json(std::string_view text);

std::string metrics_csv(const std::vector<std::pair<int, pipeline::MetricsReport>>& reports);
std::string samples_csv(int concept_id, std::size_t prompt_id, const std::vector<Vector>& xs);
std::string drift_json(const drift::TrialSummary& s, const drift::DriftReport& example);
std::string drift_csv(const drift::TrialSummary& s);

/// Shortest round-trip decimal form.
std::string format_double(double v);

/// Writes through a temporary file and renames it into place. Throws IoError.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);
/// Throws IoError.
std::string read_file(const std::filesystem::path& path);

/// Runs a command; returns the process exit code. Errors are reported on stderr.
int run(const Command& cmd);

/// parse_args + run with exit-code mapping.
int main_entry(int argc, const char* const* argv);

}  // namespace fl2t::cli
