// Copyright 2026 The FL2T Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include "fl2t/cli.hpp"
#include "fl2t/errors.hpp"
#include "test_support.hpp"

namespace fl2t::cli {
namespace {

namespace fs = std::filesystem;

std::string error_of(std::string_view text) {
    try {
        parse_config(text);
    } catch (const ConfigError& e) {
        return e.what();
    }
    return {};
}

pipeline::ExperimentConfig tiny() {
    pipeline::ExperimentConfig c;
    c.G = 2;
    c.samples_per_concept = 8;
    c.width = 8;
    c.L = 2;
    c.d = 4;
    c.r = 2;
    c.pretrain_steps = 5;
    c.epochs_step1 = 1;
    c.epochs_step2 = 1;
    c.batch_size = 4;
    c.eval_samples = 4;
    c.eval_loss_repeats = 1;
    return c;
}

TEST(Config, EmptyObjectGivesDefaults) {
    EXPECT_EQ(parse_config("{}"), pipeline::ExperimentConfig{});
}

TEST(Config, RejectsNegativeGamma) {
    EXPECT_NE(error_of(R"({"gamma1": -1})").find("gamma1"), std::string::npos);
}

TEST(Config, RejectsUnknownKeysAndTypes) {
    EXPECT_NE(error_of(R"({"foo": 1})").find("foo"), std::string::npos);
    EXPECT_NE(error_of(R"({"gamma1": "x"})").find("gamma1"), std::string::npos);
    EXPECT_NE(error_of(R"({"optimizer": "rmsprop"})").find("optimizer"), std::string::npos);
    EXPECT_NE(error_of(R"({"order": [0, 0, 1, 2]})").find("order"), std::string::npos);
}

TEST(Config, SyntaxErrorReportsPosition) {
    const std::string msg = error_of("{\n  \"G\": 4,\n  \"tau\" 0.1\n}");
    EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("column"), std::string::npos) << msg;
}

TEST(Config, RoundTrip) {
    pipeline::ExperimentConfig c;
    c.G = 3;
    c.tau = 0.25;
    c.gamma2 = 1.0 / 3.0;
    c.optimizer = pipeline::OptimizerKind::kSgd;
    c.lambda_mode = agg::RelevanceMode::kRawInnerProduct;
    c.order = {2, 0, 1};
    const auto back = parse_config(dump_config(c));
    EXPECT_EQ(back, c);
    EXPECT_EQ(dump_config(back), dump_config(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
    EXPECT_EQ(config_hash(c).size(), 16u);
    c.tau = 0.26;
    EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Config, ExplicitConceptsAndShuffledOrder) {
    const auto c = parse_config(R"({
      "suite": "explicit", "G": 2, "order": "shuffled:3",
      "concepts": [
        {"concept_id": 4, "means": [[0, 1]], "stds": [0.2]},
        {"concept_id": 9, "means": [[1, 0], [2, 2]], "stds": [0.1, 0.3]}
      ]})");
    ASSERT_EQ(c.concepts.size(), 2u);
    EXPECT_EQ(c.concepts[1].means[1], (Vector{2.0, 2.0}));
    EXPECT_EQ(c.order_spec, "shuffled:3");
    EXPECT_EQ(parse_config(dump_config(c)), c);
}

TEST(Checkpoint, AdapterRoundTrip) {
    SeededRng rng(4);
    lora::AdapterSet set = lora::init_adapter_set(7, 2, 5, 5, 2, rng);
    set.adapters[0].B = testing::random_matrix(2, 2, 5, 0.3);
    const auto back = adapter_from_json(adapter_to_json(set));
    EXPECT_EQ(back.concept_id, 7);
    ASSERT_EQ(back.adapters.size(), 2u);
    for (std::size_t l = 0; l < 2; ++l) {
        EXPECT_EQ(back.adapters[l].layer_index, set.adapters[l].layer_index);
        EXPECT_EQ(back.adapters[l].A, set.adapters[l].A);
        EXPECT_EQ(back.adapters[l].B, set.adapters[l].B);
    }
}

TEST(Checkpoint, UnknownSchemaMajorRejected) {
    SeededRng rng(4);
    std::string text = adapter_to_json(lora::init_adapter_set(1, 1, 3, 3, 1, rng));
    text.replace(text.find("\"1.0\""), 5, "\"2.0\"");
    EXPECT_THROW(adapter_from_json(text), ConfigError);
    EXPECT_THROW(adapter_from_json("{\"schema_version\": \"1.0\"}"), ConfigError);
}

TEST(Checkpoint, DenoiserAndStateRoundTrip) {
    const auto cfg = tiny();
    const auto base = pipeline::pretrain_base(cfg);
    const auto back = denoiser_from_json(denoiser_to_json(base));
    EXPECT_EQ(back.W_in, base.W_in);
    EXPECT_EQ(back.W, base.W);
    EXPECT_EQ(back.b, base.b);
    EXPECT_EQ(back.W_out, base.W_out);
    EXPECT_EQ(back.token_table, base.token_table);

    const auto tasks = pipeline::build_tasks(cfg);
    const auto s1 = pipeline::train_step1(base, tasks, cfg);
    const auto s2 = pipeline::train_step2(base, tasks, s1, cfg);
    Step2Checkpoint ck{s2.state, s1.loss_trained, s2.order, s2.entry_lambda};
    const auto got = state_from_json(state_to_json(ck));
    EXPECT_TRUE(got.state.adapters.empty());
    auto restored = got.state;
    restored.adapters = s2.state.adapters;
    EXPECT_EQ(pipeline::fingerprint(restored), pipeline::fingerprint(s2.state));
    EXPECT_EQ(got.loss_before, ck.loss_before);
    EXPECT_EQ(got.order, ck.order);
    ASSERT_EQ(got.entry_lambda.size(), ck.entry_lambda.size());
    for (std::size_t i = 0; i < ck.entry_lambda.size(); ++i) {
        EXPECT_EQ(got.entry_lambda[i].lambda, ck.entry_lambda[i].lambda);
    }
}

TEST(Args, ParsesSubcommands) {
    const char* argv[] = {"fl2t", "drift-analyze", "--out", "x.json", "--trials", "5", "--seed", "3"};
    const Command cmd = parse_args(8, argv);
    EXPECT_EQ(cmd.name, "drift-analyze");
    EXPECT_EQ(cmd.trials, 5u);
    ASSERT_TRUE(cmd.seed.has_value());
    EXPECT_EQ(*cmd.seed, 3u);
}

TEST(Args, MissingConfigIsUsageError) {
    const char* argv[] = {"fl2t", "train-step1", "--out", "x"};
    try {
        parse_args(4, argv);
        FAIL();
    } catch (const UsageError& e) {
        EXPECT_EQ(e.code(), kExitUsage);
    }
    EXPECT_EQ(main_entry(4, argv), kExitUsage);
    const char* none[] = {"fl2t"};
    EXPECT_EQ(main_entry(1, none), kExitUsage);
}

TEST(Run, MissingInputDirectoryIsIoError) {
    const fs::path dir = fs::temp_directory_path() / "fl2t_cli_test_missing";
    fs::create_directories(dir);
    write_file_atomic(dir / "cfg.json", dump_config(tiny()));
    const std::string cfg = (dir / "cfg.json").string();
    const std::string out = (dir / "out").string();
    const std::string in = (dir / "nope").string();
    const char* argv[] = {"fl2t", "train-step2", "--config", cfg.c_str(), "--in", in.c_str(),
                          "--out", out.c_str()};
    EXPECT_EQ(main_entry(8, argv), kExitIo);
    fs::remove_all(dir);
}

TEST(Files, AtomicWriteAndRead) {
    const fs::path dir = fs::temp_directory_path() / "fl2t_cli_test_files";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_file_atomic(dir / "a.txt", "one");
    write_file_atomic(dir / "a.txt", "two");
    EXPECT_EQ(read_file(dir / "a.txt"), "two");
    EXPECT_FALSE(fs::exists(dir / "a.txt.tmp"));
    EXPECT_THROW(read_file(dir / "missing.txt"), IoError);
    EXPECT_THROW(write_file_atomic(dir / "a.txt" / "b.txt", "x"), IoError);
    fs::remove_all(dir);
}

TEST(Format, ShortestRoundTrip) {
    EXPECT_EQ(format_double(0.1), "0.1");
    EXPECT_EQ(format_double(-2.0), "-2");
    const double x = 1.0 / 3.0;
    EXPECT_EQ(std::stod(format_double(x)), x);
}

TEST(Csv, Headers) {
    pipeline::MetricsReport rep;
    rep.concepts.push_back({3, 0.5, 0.75, 1.0, 1.5, 0.5});
    const std::string csv = metrics_csv({{0, rep}});
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "order_id,concept_id,ia_analog,ims_analog,loss_before,loss_after,forgetting");
    EXPECT_NE(csv.find("0,3,0.5,0.75,1,1.5,0.5"), std::string::npos);
    const std::string s = samples_csv(2, 1, {{0.25, -1.0}});
    EXPECT_EQ(s, "concept_id,prompt_id,x0,x1\n2,1,0.25,-1\n");
}

}  // namespace
}  // namespace fl2t::cli
