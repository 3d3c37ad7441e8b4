// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include "fl2t/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "fl2t/errors.hpp"

namespace fl2t::cli {

using json = nlohmann::json;
using pipeline::ExperimentConfig;

namespace {

// ---------------------------------------------------------------------------
// JSON helpers

[[noreturn]] void bad(const std::string& field, const std::string& what) {
    throw ConfigError(field + ": " + what);
}

std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
}

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& path) {
    if (!j.is_object()) {
        bad(path.empty() ? "<root>" : path, "expected an object");
    }
    for (const auto& item : j.items()) {
        if (!allowed.count(item.key())) {
            bad(join(path, item.key()), "unknown key");
        }
    }
}

template <typename T>
void read_uint(const json& j, const char* key, T& out, const std::string& path = "") {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if (!v.is_number_integer() || (v.is_number_integer() && v.get<std::int64_t>() < 0 &&
                                   !v.is_number_unsigned())) {
        bad(join(path, key), "expected a non-negative integer");
    }
    out = static_cast<T>(v.get<std::uint64_t>());
}

void read_int(const json& j, const char* key, int& out, const std::string& path = "") {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if (!v.is_number_integer()) {
        bad(join(path, key), "expected an integer");
    }
    out = v.get<int>();
}

void read_double(const json& j, const char* key, double& out) {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if (!v.is_number()) {
        bad(key, "expected a number");
    }
    out = v.get<double>();
}

void read_bool(const json& j, const char* key, bool& out) {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if (!v.is_boolean()) {
        bad(key, "expected true or false");
    }
    out = v.get<bool>();
}

void read_string(const json& j, const char* key, std::string& out) {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if (!v.is_string()) {
        bad(key, "expected a string");
    }
    out = v.get<std::string>();
}

Vector read_vector(const json& v, const std::string& field) {
    if (!v.is_array()) {
        bad(field, "expected an array of numbers");
    }
    Vector out;
    for (const auto& x : v) {
        if (!x.is_number()) {
            bad(field, "expected an array of numbers");
        }
        out.push_back(x.get<double>());
    }
    return out;
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        rows.push_back(m.row_copy(r));
    }
    return rows;
}

Matrix read_matrix(const json& v, const std::string& field, std::size_t cols_if_empty = 0) {
    if (!v.is_array()) {
        bad(field, "expected a matrix (array of rows)");
    }
    if (v.empty()) {
        return Matrix(0, cols_if_empty);
    }
    std::vector<double> data;
    std::size_t cols = 0;
    for (std::size_t r = 0; r < v.size(); ++r) {
        const Vector row = read_vector(v[r], field + "[" + std::to_string(r) + "]");
        if (r == 0) {
            cols = row.size();
        } else if (row.size() != cols) {
            bad(field, "ragged matrix at row " + std::to_string(r));
        }
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(v.size(), cols, std::move(data));
}

const json& need(const json& j, const char* key, const std::string& path) {
    if (!j.is_object() || !j.contains(key)) {
        bad(join(path, key), "missing");
    }
    return j.at(key);
}

void check_schema(const json& j, const std::string& what) {
    const json& v = need(j, "schema_version", what);
    if (!v.is_string()) {
        bad(what + ".schema_version", "expected a string");
    }
    const std::string s = v.get<std::string>();
    if (s.substr(0, s.find('.')) != kSchemaVersion.substr(0, kSchemaVersion.find('.'))) {
        bad(what + ".schema_version", "unsupported major version '" + s + "'");
    }
}

json parse_json(std::string_view text, const std::string& what) {
    try {
        return json::parse(text.begin(), text.end());
    } catch (const json::parse_error& e) {
        std::size_t line = 1;
        std::size_t col = 1;
        for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(what + ": JSON syntax error at line " + std::to_string(line) +
                          ", column " + std::to_string(col));
    }
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string mode_name(agg::RelevanceMode m) {
    return m == agg::RelevanceMode::kCosine ? "cosine" : "raw-inner-product";
}

json attention_json(const agg::AttentionParams& a) {
    return {{"Wq", matrix_json(a.Wq)}, {"Wk", matrix_json(a.Wk)}, {"Wv", matrix_json(a.Wv)},
            {"Wo", matrix_json(a.Wo)}};
}

agg::AttentionParams read_attention(const json& j, const std::string& path) {
    return {read_matrix(need(j, "Wq", path), path + ".Wq"),
            read_matrix(need(j, "Wk", path), path + ".Wk"),
            read_matrix(need(j, "Wv", path), path + ".Wv"),
            read_matrix(need(j, "Wo", path), path + ".Wo")};
}

// ---------------------------------------------------------------------------
// Files

std::filesystem::path adapter_path(const std::filesystem::path& dir, int concept_id) {
    return dir / "adapters" / ("concept_" + std::to_string(concept_id) + ".json");
}

void log(const std::string& line) { std::cerr << "fl2t: " << line << '\n'; }

std::string manifest(const Command& cmd, const ExperimentConfig* cfg) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["tool"] = "fl2t";
    j["version"] = kVersion;
    j["command"] = cmd.name;
    if (cfg != nullptr) {
        j["config_hash"] = config_hash(*cfg);
        j["seed"] = cfg->seed;
    } else if (cmd.seed) {
        j["seed"] = *cmd.seed;
    }
    j["versions"] = {
        {"fl2t", kVersion},
        {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                              std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
        {"cli11", CLI11_VERSION},
        {"compiler", __VERSION__},
    };
    return j.dump(2) + "\n";
}

struct Step1Files {
    diffusion::Denoiser base;
    pipeline::Step1Result s1;
};

std::string bank_json(const pipeline::Step1Result& s1) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["concept_ids"] = s1.bank.concept_ids;
    j["C"] = matrix_json(s1.bank.C);
    j["loss_init"] = s1.loss_init;
    j["loss_trained"] = s1.loss_trained;
    return j.dump(2) + "\n";
}

Step1Files load_step1(const std::filesystem::path& dir) {
    Step1Files f;
    f.base = denoiser_from_json(read_file(dir / "base.json"));
    const json j = parse_json(read_file(dir / "bank.json"), "bank.json");
    check_schema(j, "bank");
    f.s1.bank.concept_ids = need(j, "concept_ids", "bank").get<std::vector<int>>();
    f.s1.bank.C = read_matrix(need(j, "C", "bank"), "bank.C");
    f.s1.loss_init = read_vector(need(j, "loss_init", "bank"), "bank.loss_init");
    f.s1.loss_trained = read_vector(need(j, "loss_trained", "bank"), "bank.loss_trained");
    for (int id : f.s1.bank.concept_ids) {
        f.s1.adapters.push_back(adapter_from_json(read_file(adapter_path(dir, id))));
    }
    return f;
}

struct Step2Files {
    diffusion::Denoiser base;
    Step2Checkpoint ck;
};

Step2Files load_step2(const std::filesystem::path& dir) {
    Step2Files f;
    f.base = denoiser_from_json(read_file(dir / "base.json"));
    f.ck = state_from_json(read_file(dir / "state.json"));
    for (int id : f.ck.state.bank.concept_ids) {
        f.ck.state.adapters.push_back(adapter_from_json(read_file(adapter_path(dir, id))));
    }
    return f;
}

void write_adapters(const std::filesystem::path& dir, const std::vector<lora::AdapterSet>& sets) {
    for (const auto& s : sets) {
        write_file_atomic(adapter_path(dir, s.concept_id), adapter_to_json(s));
    }
}

std::vector<std::vector<int>> parse_orders(const std::string& text) {
    std::vector<std::vector<int>> out;
    std::stringstream all(text);
    std::string part;
    while (std::getline(all, part, ';')) {
        std::vector<int> order;
        std::stringstream ps(part);
        std::string tok;
        while (std::getline(ps, tok, ',')) {
            int v = 0;
            const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), v);
            if (r.ec != std::errc() || r.ptr != tok.data() + tok.size()) {
                throw ConfigError("--orders: bad concept id '" + tok + "'");
            }
            order.push_back(v);
        }
        out.push_back(order);
    }
    return out;
}

// Ascending, reversed, then seeded shuffles until `count` distinct orders exist.
std::vector<std::vector<int>> default_orders(const std::vector<int>& ids, std::size_t count,
                                             std::uint64_t seed) {
    std::vector<std::vector<int>> out{ids};
    std::vector<int> rev(ids.rbegin(), ids.rend());
    if (rev != ids) {
        out.push_back(rev);
    }
    SeededRng rng(derive_seed(seed, "orders"));
    for (std::size_t attempt = 0; out.size() < count && attempt < 1000; ++attempt) {
        std::vector<int> o = ids;
        for (std::size_t i = o.size(); i > 1; --i) {
            std::swap(o[i - 1], o[rng.below(i)]);
        }
        if (std::find(out.begin(), out.end(), o) == out.end()) {
            out.push_back(o);
        }
    }
    out.resize(std::min(out.size(), count));
    return out;
}

std::filesystem::path require_out(const Command& cmd) {
    if (cmd.out.empty()) {
        throw UsageError(cmd.name + ": --out is required", kExitUsage);
    }
    return cmd.out;
}

std::filesystem::path require_in(const Command& cmd) {
    if (cmd.in.empty()) {
        throw UsageError(cmd.name + ": --in is required", kExitUsage);
    }
    return cmd.in;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string format_double(double v) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

ExperimentConfig parse_config(std::string_view text) {
    const json j = parse_json(text, "config");
    reject_unknown(j,
                   {"seed", "G", "suite", "concepts", "samples_per_concept", "context_words", "d",
                    "L", "width", "r", "shared_rank", "time_dim", "T", "beta_start", "beta_end",
                    "base_classes", "pretrain_steps", "pretrain_lr", "epochs_step1",
                    "epochs_step2", "batch_size", "lr_token", "lr_network", "optimizer",
                    "r1_weight", "gamma1", "gamma2", "tau", "decoder_layers", "decoder_ffn",
                    "layer_norm", "lambda_mode", "order", "eval_samples", "eval_loss_repeats"},
                   "");
    ExperimentConfig c;
    read_uint(j, "seed", c.seed);
    read_uint(j, "G", c.G);
    read_string(j, "suite", c.suite);
    read_uint(j, "samples_per_concept", c.samples_per_concept);
    read_uint(j, "context_words", c.context_words);
    read_uint(j, "d", c.d);
    read_uint(j, "L", c.L);
    read_uint(j, "width", c.width);
    read_uint(j, "r", c.r);
    read_uint(j, "shared_rank", c.shared_rank);
    read_uint(j, "time_dim", c.time_dim);
    read_int(j, "T", c.T);
    read_double(j, "beta_start", c.beta_start);
    read_double(j, "beta_end", c.beta_end);
    read_uint(j, "base_classes", c.base_classes);
    read_uint(j, "pretrain_steps", c.pretrain_steps);
    read_double(j, "pretrain_lr", c.pretrain_lr);
    read_uint(j, "epochs_step1", c.epochs_step1);
    read_uint(j, "epochs_step2", c.epochs_step2);
    read_uint(j, "batch_size", c.batch_size);
    read_double(j, "lr_token", c.lr_token);
    read_double(j, "lr_network", c.lr_network);
    read_double(j, "r1_weight", c.r1_weight);
    read_double(j, "gamma1", c.gamma1);
    read_double(j, "gamma2", c.gamma2);
    read_double(j, "tau", c.tau);
    read_uint(j, "decoder_layers", c.decoder_layers);
    read_bool(j, "decoder_ffn", c.decoder_ffn);
    read_bool(j, "layer_norm", c.layer_norm);
    read_uint(j, "eval_samples", c.eval_samples);
    read_uint(j, "eval_loss_repeats", c.eval_loss_repeats);

    std::string opt = "adam";
    read_string(j, "optimizer", opt);
    if (opt == "adam") {
        c.optimizer = pipeline::OptimizerKind::kAdam;
    } else if (opt == "sgd") {
        c.optimizer = pipeline::OptimizerKind::kSgd;
    } else {
        bad("optimizer", "must be \"adam\" or \"sgd\"");
    }
    std::string mode = "cosine";
    read_string(j, "lambda_mode", mode);
    if (mode == "cosine") {
        c.lambda_mode = agg::RelevanceMode::kCosine;
    } else if (mode == "raw-inner-product") {
        c.lambda_mode = agg::RelevanceMode::kRawInnerProduct;
    } else {
        bad("lambda_mode", "must be \"cosine\" or \"raw-inner-product\"");
    }
    if (j.contains("order")) {
        const json& o = j.at("order");
        if (o.is_string()) {
            c.order_spec = o.get<std::string>();
        } else if (o.is_array()) {
            for (std::size_t i = 0; i < o.size(); ++i) {
                if (!o[i].is_number_integer()) {
                    bad("order[" + std::to_string(i) + "]", "expected a concept id");
                }
                c.order.push_back(o[i].get<int>());
            }
        } else {
            bad("order", "expected a permutation array or \"shuffled:<seed>\"");
        }
    }
    if (j.contains("concepts")) {
        const json& arr = j.at("concepts");
        if (!arr.is_array()) {
            bad("concepts", "expected an array");
        }
        for (std::size_t i = 0; i < arr.size(); ++i) {
            const std::string path = "concepts[" + std::to_string(i) + "]";
            reject_unknown(arr[i], {"concept_id", "means", "stds"}, path);
            pipeline::ConceptSpec spec;
            read_int(arr[i], "concept_id", spec.concept_id, path);
            const json& means = need(arr[i], "means", path);
            if (!means.is_array()) {
                bad(path + ".means", "expected an array of points");
            }
            for (std::size_t k = 0; k < means.size(); ++k) {
                spec.means.push_back(
                    read_vector(means[k], path + ".means[" + std::to_string(k) + "]"));
            }
            spec.stds = read_vector(need(arr[i], "stds", path), path + ".stds");
            c.concepts.push_back(spec);
        }
    }
    pipeline::validate(c);
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    return parse_config(read_file(path));
}

std::string dump_config(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["G"] = c.G;
    j["suite"] = c.suite;
    j["samples_per_concept"] = c.samples_per_concept;
    j["context_words"] = c.context_words;
    j["d"] = c.d;
    j["L"] = c.L;
    j["width"] = c.width;
    j["r"] = c.r;
    j["shared_rank"] = c.shared_rank;
    j["time_dim"] = c.time_dim;
    j["T"] = c.T;
    j["beta_start"] = c.beta_start;
    j["beta_end"] = c.beta_end;
    j["base_classes"] = c.base_classes;
    j["pretrain_steps"] = c.pretrain_steps;
    j["pretrain_lr"] = c.pretrain_lr;
    j["epochs_step1"] = c.epochs_step1;
    j["epochs_step2"] = c.epochs_step2;
    j["batch_size"] = c.batch_size;
    j["lr_token"] = c.lr_token;
    j["lr_network"] = c.lr_network;
    j["optimizer"] = c.optimizer == pipeline::OptimizerKind::kAdam ? "adam" : "sgd";
    j["r1_weight"] = c.r1_weight;
    j["gamma1"] = c.gamma1;
    j["gamma2"] = c.gamma2;
    j["tau"] = c.tau;
    j["decoder_layers"] = c.decoder_layers;
    j["decoder_ffn"] = c.decoder_ffn;
    j["layer_norm"] = c.layer_norm;
    j["lambda_mode"] = mode_name(c.lambda_mode);
    j["eval_samples"] = c.eval_samples;
    j["eval_loss_repeats"] = c.eval_loss_repeats;
    if (!c.order.empty()) {
        j["order"] = c.order;
    } else if (!c.order_spec.empty()) {
        j["order"] = c.order_spec;
    }
    if (!c.concepts.empty()) {
        json arr = json::array();
        for (const auto& s : c.concepts) {
            arr.push_back({{"concept_id", s.concept_id}, {"means", s.means}, {"stds", s.stds}});
        }
        j["concepts"] = arr;
    }
    return j.dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& cfg) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : dump_config(cfg)) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return hex64(h);
}

std::string adapter_to_json(const lora::AdapterSet& set) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["concept_id"] = set.concept_id;
    j["rank"] = set.rank();
    json layers = json::array();
    for (const auto& ad : set.adapters) {
        layers.push_back(
            {{"layer_index", ad.layer_index}, {"A", matrix_json(ad.A)}, {"B", matrix_json(ad.B)}});
    }
    j["layers"] = layers;
    return j.dump() + "\n";
}

lora::AdapterSet adapter_from_json(std::string_view text) {
    const json j = parse_json(text, "adapter");
    check_schema(j, "adapter");
    lora::AdapterSet set;
    const json& id = need(j, "concept_id", "adapter");
    if (!id.is_number_integer()) {
        bad("adapter.concept_id", "expected an integer");
    }
    set.concept_id = id.get<int>();
    const json& layers = need(j, "layers", "adapter");
    if (!layers.is_array()) {
        bad("adapter.layers", "expected an array");
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string path = "adapter.layers[" + std::to_string(l) + "]";
        lora::LoraAdapter ad;
        const json& li = need(layers[l], "layer_index", path);
        if (!li.is_number_unsigned()) {
            bad(path + ".layer_index", "expected a non-negative integer");
        }
        ad.layer_index = li.get<std::size_t>();
        ad.A = read_matrix(need(layers[l], "A", path), path + ".A");
        ad.B = read_matrix(need(layers[l], "B", path), path + ".B");
        set.adapters.push_back(std::move(ad));
    }
    const json& rank = need(j, "rank", "adapter");
    if (!rank.is_number_unsigned() || rank.get<std::size_t>() != set.rank()) {
        bad("adapter.rank", "does not match the stored factors");
    }
    try {
        lora::validate(set);
    } catch (const Error& e) {
        bad("adapter", e.what());
    }
    return set;
}

std::string denoiser_to_json(const diffusion::Denoiser& m) {
    json j;
    j["schema_version"] = kSchemaVersion;
    j["data_dim"] = m.data_dim;
    j["time_dim"] = m.time_dim;
    j["embed_dim"] = m.embed_dim;
    j["width"] = m.width;
    j["W_in"] = matrix_json(m.W_in);
    j["b_in"] = matrix_json(m.b_in);
    json W = json::array();
    json b = json::array();
    for (std::size_t l = 0; l < m.W.size(); ++l) {
        W.push_back(matrix_json(m.W[l]));
        b.push_back(matrix_json(m.b[l]));
    }
    j["W"] = W;
    j["b"] = b;
    j["W_out"] = matrix_json(m.W_out);
    j["b_out"] = matrix_json(m.b_out);
    j["token_table"] = matrix_json(m.token_table);
    return j.dump() + "\n";
}

diffusion::Denoiser denoiser_from_json(std::string_view text) {
    const json j = parse_json(text, "base");
    check_schema(j, "base");
    diffusion::Denoiser m;
    m.data_dim = need(j, "data_dim", "base").get<std::size_t>();
    m.time_dim = need(j, "time_dim", "base").get<std::size_t>();
    m.embed_dim = need(j, "embed_dim", "base").get<std::size_t>();
    m.width = need(j, "width", "base").get<std::size_t>();
    m.W_in = read_matrix(need(j, "W_in", "base"), "base.W_in");
    m.b_in = read_matrix(need(j, "b_in", "base"), "base.b_in");
    const json& W = need(j, "W", "base");
    const json& b = need(j, "b", "base");
    if (!W.is_array() || !b.is_array() || W.size() != b.size()) {
        bad("base.W", "layer weight and bias lists must have equal length");
    }
    for (std::size_t l = 0; l < W.size(); ++l) {
        m.W.push_back(read_matrix(W[l], "base.W[" + std::to_string(l) + "]"));
        m.b.push_back(read_matrix(b[l], "base.b[" + std::to_string(l) + "]"));
        if (m.W.back().rows() != m.width || m.W.back().cols() != m.width) {
            bad("base.W[" + std::to_string(l) + "]", "expected a width x width matrix");
        }
    }
    m.W_out = read_matrix(need(j, "W_out", "base"), "base.W_out");
    m.b_out = read_matrix(need(j, "b_out", "base"), "base.b_out");
    m.token_table = read_matrix(need(j, "token_table", "base"), "base.token_table", m.embed_dim);
    if (m.W_in.rows() != m.input_dim() || m.W_in.cols() != m.width) {
        bad("base.W_in", "shape " + m.W_in.shape_string() + " does not match the header");
    }
    return m;
}

std::string state_to_json(const Step2Checkpoint& ck) {
    const auto& s = ck.state;
    json j;
    j["schema_version"] = kSchemaVersion;
    j["concept_ids"] = s.bank.concept_ids;
    j["C"] = matrix_json(s.bank.C);
    j["proxies"] = matrix_json(s.proxies.P);
    json layers = json::array();
    for (const auto& layer : s.decoder.layers) {
        layers.push_back({{"self_attn", attention_json(layer.self_attn)},
                          {"cross_attn", attention_json(layer.cross_attn)},
                          {"ffn_in", matrix_json(layer.ffn_in)},
                          {"ffn_out", matrix_json(layer.ffn_out)}});
    }
    j["decoder"] = {{"use_ffn", s.decoder.use_ffn},
                    {"layer_norm", s.decoder.layer_norm},
                    {"layers", layers}};
    j["fusion"] = {{"W1", matrix_json(s.fusion.W1)},
                   {"b1", matrix_json(s.fusion.b1)},
                   {"W2", matrix_json(s.fusion.W2)},
                   {"b2", matrix_json(s.fusion.b2)}};
    json wstar = json::array();
    for (const auto& w : s.subspace.W_star) {
        wstar.push_back(matrix_json(w));
    }
    json H = json::array();
    for (const auto& hs : s.subspace.H) {
        json per = json::array();
        for (const auto& h : hs) {
            per.push_back(matrix_json(h));
        }
        H.push_back(per);
    }
    j["subspace"] = {{"W_star", wstar}, {"H", H}};
    j["loss_before"] = ck.loss_before;
    j["order"] = ck.order;
    json lam = json::array();
    for (const auto& w : ck.entry_lambda) {
        lam.push_back({{"active", w.active}, {"lambda", w.lambda}});
    }
    j["entry_lambda"] = lam;
    return j.dump() + "\n";
}

Step2Checkpoint state_from_json(std::string_view text) {
    const json j = parse_json(text, "state");
    check_schema(j, "state");
    Step2Checkpoint ck;
    auto& s = ck.state;
    s.bank.concept_ids = need(j, "concept_ids", "state").get<std::vector<int>>();
    s.bank.C = read_matrix(need(j, "C", "state"), "state.C");
    s.proxies.P = read_matrix(need(j, "proxies", "state"), "state.proxies");
    const json& dec = need(j, "decoder", "state");
    s.decoder.use_ffn = need(dec, "use_ffn", "state.decoder").get<bool>();
    s.decoder.layer_norm = need(dec, "layer_norm", "state.decoder").get<bool>();
    const json& layers = need(dec, "layers", "state.decoder");
    for (std::size_t l = 0; l < layers.size(); ++l) {
        const std::string path = "state.decoder.layers[" + std::to_string(l) + "]";
        agg::DecoderLayer layer;
        layer.self_attn = read_attention(need(layers[l], "self_attn", path), path + ".self_attn");
        layer.cross_attn = read_attention(need(layers[l], "cross_attn", path), path + ".cross_attn");
        layer.ffn_in = read_matrix(need(layers[l], "ffn_in", path), path + ".ffn_in");
        layer.ffn_out = read_matrix(need(layers[l], "ffn_out", path), path + ".ffn_out");
        s.decoder.layers.push_back(std::move(layer));
    }
    const json& fus = need(j, "fusion", "state");
    s.fusion.W1 = read_matrix(need(fus, "W1", "state.fusion"), "state.fusion.W1");
    s.fusion.b1 = read_matrix(need(fus, "b1", "state.fusion"), "state.fusion.b1");
    s.fusion.W2 = read_matrix(need(fus, "W2", "state.fusion"), "state.fusion.W2");
    s.fusion.b2 = read_matrix(need(fus, "b2", "state.fusion"), "state.fusion.b2");
    const json& sub = need(j, "subspace", "state");
    for (const auto& w : need(sub, "W_star", "state.subspace")) {
        s.subspace.W_star.push_back(read_matrix(w, "state.subspace.W_star"));
    }
    for (const auto& hs : need(sub, "H", "state.subspace")) {
        std::vector<Matrix> per;
        for (const auto& h : hs) {
            per.push_back(read_matrix(h, "state.subspace.H"));
        }
        s.subspace.H.push_back(std::move(per));
    }
    ck.loss_before = read_vector(need(j, "loss_before", "state"), "state.loss_before");
    ck.order = need(j, "order", "state").get<std::vector<int>>();
    for (const auto& w : need(j, "entry_lambda", "state")) {
        ck.entry_lambda.push_back(
            {read_vector(need(w, "lambda", "state.entry_lambda"), "state.entry_lambda"),
             need(w, "active", "state.entry_lambda").get<std::size_t>()});
    }
    return ck;
}

std::string metrics_csv(const std::vector<std::pair<int, pipeline::MetricsReport>>& reports) {
    std::string out = "order_id,concept_id,ia_analog,ims_analog,loss_before,loss_after,forgetting\n";
    for (const auto& [order_id, report] : reports) {
        for (const auto& c : report.concepts) {
            out += std::to_string(order_id) + "," + std::to_string(c.concept_id) + "," +
                   format_double(c.ia_analog) + "," + format_double(c.ims_analog) + "," +
                   format_double(c.loss_before) + "," + format_double(c.loss_after) + "," +
                   format_double(c.forgetting) + "\n";
        }
    }
    return out;
}

std::string samples_csv(int concept_id, std::size_t prompt_id, const std::vector<Vector>& xs) {
    std::string out = "concept_id,prompt_id";
    const std::size_t dim = xs.empty() ? 0 : xs.front().size();
    for (std::size_t k = 0; k < dim; ++k) {
        out += ",x" + std::to_string(k);
    }
    out += "\n";
    for (const auto& x : xs) {
        out += std::to_string(concept_id) + "," + std::to_string(prompt_id);
        for (double v : x) {
            out += "," + format_double(v);
        }
        out += "\n";
    }
    return out;
}

std::string drift_json(const drift::TrialSummary& s, const drift::DriftReport& example) {
    json rep;
    rep["norm_cidm"] = example.norm_cidm;
    rep["norm_fl2t"] = example.norm_fl2t;
    rep["k_star"] = example.k_star ? json(*example.k_star) : json(nullptr);
    rep["epsilon"] = example.epsilon ? json(*example.epsilon) : json(nullptr);
    rep["lambda_used"] = example.lambda_used;
    rep["bound_rhs"] = example.bound_rhs;
    rep["degenerate"] = example.degenerate;
    json j;
    j["schema_version"] = kSchemaVersion;
    j["trials"] = s.rows.size();
    j["bound_held"] = s.bound_held;
    j["reduced"] = s.reduced;
    j["degenerate"] = s.degenerate;
    j["min_slack"] = s.min_slack;
    j["max_identity_error"] = s.max_identity_error;
    j["example"] = rep;
    return j.dump(2) + "\n";
}

std::string drift_csv(const drift::TrialSummary& s) {
    std::string out = "trial_id,norm_cidm,norm_fl2t,reduced\n";
    for (const auto& r : s.rows) {
        out += std::to_string(r.trial_id) + "," + format_double(r.norm_cidm) + "," +
               format_double(r.norm_fl2t) + "," + (r.reduced ? "true" : "false") + "\n";
    }
    return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view content) {
    std::error_code ec;
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path(), ec);
        if (ec) {
            throw IoError("cannot create directory " + path.parent_path().string() + ": " +
                          ec.message());
        }
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw IoError("cannot open " + tmp.string() + " for writing");
        }
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!f) {
            throw IoError("write failed for " + tmp.string());
        }
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " +
                      ec.message());
    }
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot read " + path.string());
    }
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

Command parse_args(int argc, const char* const* argv) {
    Command cmd;
    CLI::App app{"FL2T concept-incremental consolidation engine", "fl2t"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kVersion));

    const auto add_common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("--config", cmd.config, "Experiment config JSON");
        if (needs_config) {
            opt->required();
        }
        sub->add_option("--seed", cmd.seed, "Override the config seed");
        sub->add_option("--out", cmd.out, "Output path");
    };

    auto* s1 = app.add_subcommand("train-step1", "Independent per-concept training");
    add_common(s1, true);
    s1->get_option("--out")->required();

    auto* s2 = app.add_subcommand("train-step2", "Joint consolidation training");
    add_common(s2, true);
    s2->get_option("--out")->required();
    s2->add_option("--in", cmd.in, "Step-1 output directory")->required();

    auto* gen = app.add_subcommand("generate", "Sample from the consolidated model");
    add_common(gen, true);
    gen->get_option("--out")->required();
    gen->add_option("--in", cmd.in, "Step-2 output directory")->required();
    gen->add_option("--concept", cmd.concept_id, "Concept id")->required();
    gen->add_option("--context", cmd.context, "Context word index");
    gen->add_option("--n", cmd.n, "Number of samples")->check(CLI::PositiveNumber);

    auto* ev = app.add_subcommand("evaluate", "Metrics for a Step-2 state");
    add_common(ev, true);
    ev->get_option("--out")->required();
    ev->add_option("--in", cmd.in, "Step-2 output directory")->required();

    auto* dr = app.add_subcommand("drift-analyze", "Randomized drift-bound trials");
    add_common(dr, false);
    dr->get_option("--out")->required();
    dr->add_option("--trials", cmd.trials, "Number of trials");
    dr->add_option("--dim", cmd.dim, "Maximum gradient dimension")->check(CLI::PositiveNumber);
    dr->add_option("--max-n", cmd.max_n, "Maximum gradients per set")->check(CLI::PositiveNumber);

    auto* oe = app.add_subcommand("order-experiment", "Full runs over several concept orders");
    add_common(oe, true);
    oe->get_option("--out")->required();
    oe->add_option("--orders", cmd.orders, "Orders as '0,1,2;2,1,0'");
    oe->add_option("--shuffles", cmd.shuffles, "Number of generated orders")
        ->check(CLI::Range(2, 1000));

    auto* bl = app.add_subcommand("baseline", "Sequential fine-tuning baseline");
    add_common(bl, true);
    bl->get_option("--out")->required();

    auto* gc = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
    add_common(gc, false);
    gc->add_option("--points", cmd.points, "Random points per loss")->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        std::ostringstream out;
        std::ostringstream err;
        const int code = app.exit(e, out, err);
        std::cout << out.str();
        throw UsageError(err.str(), code == 0 ? 0 : kExitUsage);
    }
    for (auto* sub : app.get_subcommands()) {
        cmd.name = sub->get_name();
    }
    return cmd;
}

int run(const Command& cmd) {
    if (cmd.name == "drift-analyze") {
        const std::uint64_t seed = cmd.seed.value_or(7);
        const auto summary = drift::run_trials(cmd.trials, cmd.max_n, cmd.dim, seed);
        const drift::GradientSet example{{{3.0, 0.0}, {0.0, 4.0}}};
        const std::filesystem::path out = require_out(cmd);
        write_file_atomic(out, drift_json(summary, drift::find_reducing_coefficients(example)));
        std::filesystem::path csv = out;
        csv.replace_extension(".csv");
        write_file_atomic(csv, drift_csv(summary));
        log("drift trials " + std::to_string(summary.rows.size()) + ": bound held " +
            std::to_string(summary.bound_held) + ", reduced " + std::to_string(summary.reduced) +
            ", degenerate " + std::to_string(summary.degenerate));
        return kExitOk;
    }
    if (cmd.name == "gradcheck") {
        const auto entries = pipeline::run_gradcheck(cmd.seed.value_or(7), cmd.points);
        std::string table = "loss,points,max_rel_error\n";
        bool ok = true;
        for (const auto& e : entries) {
            table += e.name + "," + std::to_string(e.points) + "," + format_double(e.max_rel_error) +
                     "\n";
            ok = ok && e.max_rel_error < 1e-4;
        }
        std::cout << table;
        if (!cmd.out.empty()) {
            write_file_atomic(cmd.out, table);
        }
        return ok ? kExitOk : kExitNumerical;
    }

    ExperimentConfig cfg = load_config(cmd.config);
    if (cmd.seed) {
        cfg.seed = *cmd.seed;
    }
    pipeline::validate(cfg);
    const auto tasks = pipeline::build_tasks(cfg);

    if (cmd.name == "train-step1") {
        const std::filesystem::path dir = require_out(cmd);
        log("pretraining base model");
        const auto base = pipeline::pretrain_base(cfg);
        log("step 1: " + std::to_string(tasks.size()) + " concepts");
        const auto s1 = pipeline::train_step1(base, tasks, cfg);
        write_file_atomic(dir / "base.json", denoiser_to_json(base));
        write_file_atomic(dir / "bank.json", bank_json(s1));
        write_adapters(dir, s1.adapters);
        std::string csv = "concept_id,loss_init,loss_trained\n";
        for (std::size_t i = 0; i < s1.bank.concept_ids.size(); ++i) {
            csv += std::to_string(s1.bank.concept_ids[i]) + "," + format_double(s1.loss_init[i]) +
                   "," + format_double(s1.loss_trained[i]) + "\n";
        }
        write_file_atomic(dir / "step1_losses.csv", csv);
        write_file_atomic(dir / "manifest.json", manifest(cmd, &cfg));
        return kExitOk;
    }
    if (cmd.name == "train-step2") {
        const std::filesystem::path dir = require_out(cmd);
        const auto in = load_step1(require_in(cmd));
        log("step 2: " + std::to_string(cfg.epochs_step2) + " epochs");
        const auto s2 = pipeline::train_step2(in.base, tasks, in.s1, cfg);
        write_file_atomic(dir / "base.json", denoiser_to_json(in.base));
        write_adapters(dir, s2.state.adapters);
        Step2Checkpoint ck{s2.state, in.s1.loss_trained, s2.order, s2.entry_lambda};
        write_file_atomic(dir / "state.json", state_to_json(ck));
        std::string csv = "concept_id,other_id,entry_lambda,final_lambda\n";
        for (std::size_t g = 0; g < s2.entry_lambda.size(); ++g) {
            const Vector& last = s2.lambda_trace[g].empty() ? s2.entry_lambda[g].lambda
                                                            : s2.lambda_trace[g].back();
            for (std::size_t i = 0; i < last.size(); ++i) {
                if (i == g) {
                    continue;
                }
                csv += std::to_string(s2.state.bank.concept_ids[g]) + "," +
                       std::to_string(s2.state.bank.concept_ids[i]) + "," +
                       format_double(s2.entry_lambda[g].lambda[i]) + "," + format_double(last[i]) +
                       "\n";
            }
        }
        write_file_atomic(dir / "lambda.csv", csv);
        write_file_atomic(dir / "manifest.json", manifest(cmd, &cfg));
        log("R'1 " + format_double(s2.r1_start) + " -> " + format_double(s2.r1_end));
        return kExitOk;
    }
    if (cmd.name == "generate") {
        const auto in = load_step2(require_in(cmd));
        if (cmd.context >= cfg.context_words) {
            throw UsageError("generate: --context must be below context_words", kExitUsage);
        }
        const std::vector<int> prompt{static_cast<int>(cfg.base_classes + cmd.context),
                                      diffusion::concept_token(cmd.concept_id)};
        SeededRng rng(derive_seed(cfg.seed, "cli-generate",
                                  static_cast<std::uint64_t>(cmd.concept_id), cmd.context));
        const auto xs = pipeline::consolidate_and_generate(
            in.base, in.ck.state.adapters, in.ck.state.bank, prompt, cmd.n, rng,
            pipeline::schedule_for(cfg));
        write_file_atomic(require_out(cmd), samples_csv(cmd.concept_id, cmd.context, xs));
        return kExitOk;
    }
    if (cmd.name == "evaluate") {
        const auto in = load_step2(require_in(cmd));
        const auto& st = in.ck.state;
        const pipeline::HiddenForPrompt hidden = [&](std::span<const int> p) {
            return pipeline::ewa_hidden(in.base, st.adapters, st.bank, p);
        };
        const auto report = pipeline::evaluate(in.base, hidden, st.bank, tasks, in.ck.loss_before, cfg);
        write_file_atomic(require_out(cmd), metrics_csv({{0, report}}));
        log("mean forgetting " + format_double(report.mean_forgetting()));
        return kExitOk;
    }
    if (cmd.name == "baseline") {
        const std::filesystem::path dir = require_out(cmd);
        log("pretraining base model");
        const auto base = pipeline::pretrain_base(cfg);
        log("sequential baseline");
        const auto run = pipeline::run_baseline_sequential(base, tasks, cfg);
        write_file_atomic(dir / "metrics.csv", metrics_csv({{0, run.metrics}}));
        write_file_atomic(dir / "adapters" / "shared.json", adapter_to_json(run.shared));
        write_file_atomic(dir / "manifest.json", manifest(cmd, &cfg));
        log("mean forgetting " + format_double(run.metrics.mean_forgetting()));
        return kExitOk;
    }
    if (cmd.name == "order-experiment") {
        const std::filesystem::path dir = require_out(cmd);
        std::vector<int> ids;
        for (const auto& t : tasks) {
            ids.push_back(t.concept_id);
        }
        const auto orders =
            cmd.orders.empty() ? default_orders(ids, cmd.shuffles, cfg.seed) : parse_orders(cmd.orders);
        for (std::size_t k = 0; k < orders.size(); ++k) {
            std::vector<int> sorted = orders[k];
            std::sort(sorted.begin(), sorted.end());
            if (sorted != ids) {
                throw ConfigError("--orders[" + std::to_string(k) +
                                  "]: not a permutation of the task concept ids");
            }
        }
        log("pretraining base model");
        const auto base = pipeline::pretrain_base(cfg);
        log("order experiment over " + std::to_string(orders.size()) + " orders");
        const auto rep = pipeline::run_order_experiment(base, tasks, cfg, orders);
        std::vector<std::pair<int, pipeline::MetricsReport>> rows;
        json runs = json::array();
        for (std::size_t k = 0; k < rep.runs.size(); ++k) {
            rows.emplace_back(static_cast<int>(k), rep.runs[k].metrics);
            json lam = json::array();
            for (const auto& w : rep.runs[k].entry_lambda) {
                lam.push_back(w.lambda);
            }
            runs.push_back({{"order_id", k},
                            {"order", rep.runs[k].order},
                            {"fingerprint", hex64(rep.runs[k].state_fingerprint)},
                            {"permutation_deviation", rep.runs[k].permutation_deviation},
                            {"mean_forgetting", rep.runs[k].metrics.mean_forgetting()},
                            {"entry_lambda", lam}});
        }
        json j;
        j["schema_version"] = kSchemaVersion;
        j["runs"] = runs;
        j["lambda_multiset_max_diff"] = rep.lambda_multiset_max_diff;
        j["max_permutation_deviation"] = rep.max_permutation_deviation;
        j["max_pairwise_ims_diff"] = rep.max_pairwise_ims_diff;
        write_file_atomic(dir / "metrics.csv", metrics_csv(rows));
        write_file_atomic(dir / "order_report.json", j.dump(2) + "\n");
        write_file_atomic(dir / "manifest.json", manifest(cmd, &cfg));
        log("max pairwise ims difference " + format_double(rep.max_pairwise_ims_diff));
        return kExitOk;
    }
    throw UsageError("unknown command '" + cmd.name + "'", kExitUsage);
}

int main_entry(int argc, const char* const* argv) {
    try {
        return run(parse_args(argc, argv));
    } catch (const UsageError& e) {
        if (e.code() != 0) {
            std::cerr << e.what();
            if (std::string_view(e.what()).empty() || std::string_view(e.what()).back() != '\n') {
                std::cerr << '\n';
            }
        }
        return e.code();
    } catch (const TrainingError& e) {
        std::cerr << "fl2t: numerical failure at step " << e.step() << ": " << e.what() << '\n';
        return kExitNumerical;
    } catch (const EvaluationError& e) {
        std::cerr << "fl2t: numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const IoError& e) {
        std::cerr << "fl2t: I/O error: " << e.what() << '\n';
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "fl2t: " << e.what() << '\n';
        return kExitUsage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "fl2t: malformed input: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "fl2t: I/O error: " << e.what() << '\n';
        return kExitIo;
    }
}

}  // namespace fl2t::cli
