// Copyright (c) 2026 The dmlseq Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dmlseq/cli.hpp"
#include "dmlseq/config.hpp"
#include "dmlseq/errors.hpp"
#include "dmlseq/gradcheck.hpp"
#include "dmlseq/objectives.hpp"

namespace dmlseq {
namespace {

namespace fs = std::filesystem;

struct CliRun {
  int code = -1;
  std::string out;
  std::string err;
};

CliRun cli(std::initializer_list<std::string> args) {
  std::vector<std::string> storage{"dmlseq"};
  storage.insert(storage.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const std::string& s : storage) argv.push_back(s.c_str());
  std::ostringstream out, err;
  CliRun r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

/// A seconds-scale run: toy model, tiny noiseless task, one epoch.
constexpr const char* kTinyConfig = R"({
  "task": {"vocab_size": 6, "feature_dim": 4, "frames_per_token": 4, "noise_std": 0.1,
           "min_tokens": 1, "max_tokens": 3, "train_size": 24, "valid_size": 6, "test_size": 6, "seed": 5},
  "students": [
    {"model": {"encoder_blocks": 1, "decoder_blocks": 1, "model_dim": 8, "ffn_dim": 16, "num_heads": 1}, "seed": 1, "init_seed": 1},
    {"model": {"encoder_blocks": 1, "decoder_blocks": 1, "model_dim": 8, "ffn_dim": 16, "num_heads": 1}, "seed": 2, "init_seed": 2}
  ],
  "objective": {"mode": "mutual", "lambda": 0.4},
  "trainer": {"batch_size": 8, "max_epochs": 1, "warmup_steps": 10, "seed": 1},
  "decode": {"beam": 2},
  "compare": {
    "rows": [{"name": "large/none/independent", "setup": "large", "mode": "independent"},
             {"name": "large/none/mutual", "setup": "large", "mode": "mutual"}],
    "seeds": [1], "test_splits": 2, "cohort_size": 2,
    "large": {"encoder_blocks": 1, "decoder_blocks": 1, "model_dim": 8, "ffn_dim": 16, "num_heads": 1},
    "compact": {"encoder_blocks": 1, "decoder_blocks": 1, "model_dim": 8, "ffn_dim": 8, "num_heads": 1}
  },
  "output_dir": "tiny"
})";

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fs::temp_directory_path() / ("dmlseq_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root);
    fs::create_directories(root);
    config = root / "tiny.json";
    std::ofstream(config) << kTinyConfig;
    unsetenv("DMLSEQ_OUT");
  }
  void TearDown() override {
    unsetenv("DMLSEQ_OUT");
    fs::remove_all(root);
  }
  std::string dir(const std::string& name) const { return (root / name).string(); }

  fs::path root;
  fs::path config;
};

TEST(RunConfigParse, UnknownKeysAreRejected) {
  EXPECT_THROW(parse_run_config(R"({"trainer": {"batch_size": 4, "bogus": 1}})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"extra": 1})"), ConfigError);
  EXPECT_THROW(parse_run_config(R"({"objective": {"mode": "sideways"}})"), ConfigError);
  EXPECT_THROW(parse_run_config("{not json"), ConfigError);
  EXPECT_NO_THROW(parse_run_config("{}"));
}

TEST(RunConfigParse, DefaultsAndRoundTrip) {
  const RunConfig c = parse_run_config(kTinyConfig);
  ASSERT_EQ(c.students.size(), 2u);
  EXPECT_EQ(c.students[0].model.vocab_size, 6);
  EXPECT_EQ(c.students[0].model.feature_dim, 4);
  EXPECT_EQ(c.students[0].model.dropout, 0.1);
  EXPECT_EQ(c.objective.alpha, 0.1);
  EXPECT_EQ(c.objective.sampling.target_probability, 0.3);
  EXPECT_EQ(c.objective.sampling.ramp_epochs, 20);
  EXPECT_EQ(c.trainer.adam.beta2, 0.98);
  EXPECT_EQ(c.trainer.patience, 5);
  EXPECT_EQ(c.compare.rows.size(), 2u);
  EXPECT_EQ(c.compare.large.vocab_size, 6);
  const std::string once = to_json(c);
  EXPECT_EQ(to_json(parse_run_config(once)), once);
  const RunConfig defaults = parse_run_config("{}");
  EXPECT_EQ(defaults.decode.beam, 20);
  EXPECT_EQ(defaults.trainer.batch_size, 32);
  EXPECT_EQ(defaults.objective.lambda, 0.4);
}

TEST(RunConfigParse, StudentShapesMustMatchTheTask) {
  EXPECT_THROW(parse_run_config(R"({"task": {"vocab_size": 6}, "students": [{"model": {"vocab_size": 9}}]})"),
               ConfigError);
}

TEST(RunConfigParse, Overrides) {
  const std::string edited = apply_overrides(kTinyConfig, {"students.1.seed=7", "objective.mode=independent",
                                                           "trainer.lr_factor=0.5", "decode.beam=1"});
  const RunConfig c = parse_run_config(edited);
  EXPECT_EQ(c.students[1].seed, 7u);
  EXPECT_EQ(c.objective.mode, ObjectiveMode::kIndependent);
  EXPECT_EQ(c.trainer.lr_factor, 0.5);
  EXPECT_EQ(c.decode.beam, 1);
  EXPECT_THROW(apply_overrides(kTinyConfig, {"students.9.seed=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(kTinyConfig, {"students.x.seed=1"}), ConfigError);
  EXPECT_THROW(apply_overrides(kTinyConfig, {"noequals"}), ConfigError);
}

TEST(RunConfigParse, ModeNames) {
  for (ObjectiveMode m : {ObjectiveMode::kIndependent, ObjectiveMode::kMutual, ObjectiveMode::kDistill}) {
    EXPECT_EQ(parse_mode(mode_name(m)), m);
  }
  EXPECT_THROW(parse_mode("dml"), ConfigError);
}

TEST(GridRows, SixteenRowLayout) {
  const std::vector<GridRow> rows = table1_rows();
  ASSERT_EQ(rows.size(), 16u);
  int large = 0, compact = 0, distill = 0, all_three = 0;
  std::set<std::string> names;
  for (const GridRow& r : rows) {
    names.insert(r.name);
    (r.setup == "large" ? large : compact) += 1;
    distill += r.mode == ObjectiveMode::kDistill;
    all_three += r.label_smoothing && r.scheduled_sampling && r.spec_augment;
  }
  EXPECT_EQ(names.size(), 16u);
  EXPECT_EQ(large, 10);
  EXPECT_EQ(compact, 6);
  EXPECT_EQ(distill, 2);
  EXPECT_EQ(all_three, 2 + 3);
  EXPECT_EQ(rows.front().name, "large/none/independent");
  EXPECT_TRUE(names.count("compact/ls+ss+sa/distill"));
  const RunConfig c = parse_run_config(R"({"compare": {"preset": "table1"}})");
  EXPECT_EQ(c.compare.rows.size(), 16u);
}

TEST(GradcheckNegativeControl, CorruptedBackwardRuleFails) {
  ModelParams params = ModelParams::initialize(toy_model_config(), 1);
  const std::vector<Utterance> batch = generate_task(toy_task_config()).train.utterances;
  const std::vector<Utterance> one{batch.front()};
  const StreamKey key{1, 2, 0, 0};
  auto honest = [&](Graph& g) {
    const StudentInputs in = make_student_inputs(params, one, {}, key);
    return mle_loss(g, predict(g, params, in, key, false));
  };
  // Identity whose backward rule scales the incoming gradient by 1.01.
  auto corrupted = [&](Graph& g) {
    const Var loss = honest(g);
    return g.emit("bad_identity", g.value(loss), {loss}, [loss](Graph& gr, Var, std::span<const double> dy) {
      auto d = gr.grad_buffer(loss);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += 1.01 * dy[i];
    });
  };
  EXPECT_TRUE(check_gradient("honest", params, honest).passed);
  const GradcheckResult bad = check_gradient("corrupted", params, corrupted);
  EXPECT_FALSE(bad.passed);
  EXPECT_GT(bad.max_rel_error, 5e-3);
  EXPECT_FALSE(bad.worst_parameter.empty());
}

TEST_F(CliTest, HelpAndUsageErrors) {
  EXPECT_EQ(cli({"--help"}).code, kExitOk);
  EXPECT_EQ(cli({}).code, kExitConfigError);
  EXPECT_EQ(cli({"fly"}).code, kExitConfigError);
  EXPECT_EQ(cli({"train", "-c", dir("missing.json")}).code, kExitConfigError);
  EXPECT_EQ(cli({"evaluate", "--checkpoint", dir("none.ckpt"), "--corpus", dir("none.corpus")}).code,
            kExitConfigError);
}

TEST_F(CliTest, SynthDataIsReplayExactAndValidated) {
  ASSERT_EQ(cli({"synth-data", "-c", config.string(), "-o", dir("a")}).code, kExitOk);
  ASSERT_EQ(cli({"synth-data", "-c", config.string(), "-o", dir("b")}).code, kExitOk);
  for (const char* f : {"train.corpus", "valid.corpus", "test.corpus", "config.json"}) {
    EXPECT_FALSE(slurp(root / "a" / f).empty()) << f;
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  EXPECT_EQ(read_corpus(root / "a" / "train.corpus").size(), 24u);
  EXPECT_EQ(read_corpus(root / "a" / "test.corpus").size(), 6u);
  const CliRun bad = cli({"synth-data", "-c", config.string(), "--set", "task.vocab_size=3", "-o", dir("c")});
  EXPECT_EQ(bad.code, kExitConfigError);
  EXPECT_NE(bad.err.find("vocab_size"), std::string::npos);
}

TEST_F(CliTest, TrainThenEvaluate) {
  ASSERT_EQ(cli({"synth-data", "-c", config.string(), "-o", dir("data")}).code, kExitOk);
  const CliRun t = cli({"train", "-c", config.string(), "-o", dir("run")});
  ASSERT_EQ(t.code, kExitOk) << t.err;
  for (const char* f : {"config.json", "standardizer.json", "metrics.jsonl", "checkpoints/student_0.ckpt",
                        "checkpoints/student_1.ckpt", "checkpoints/selected.json"}) {
    EXPECT_TRUE(fs::exists(root / "run" / f)) << f;
  }
  // The serialized config reproduces the run.
  EXPECT_EQ(cli({"train", "-c", (root / "run" / "config.json").string(), "-o", dir("again")}).code, kExitOk);
  EXPECT_EQ(slurp(root / "run" / "metrics.jsonl"), slurp(root / "again" / "metrics.jsonl"));

  const std::string csv = dir("report.csv");
  const CliRun e = cli({"evaluate", "--checkpoint", dir("run/checkpoints/student_0.ckpt"), "--corpus",
                        dir("data/test.corpus"), "--beam", "2", "-o", csv});
  ASSERT_EQ(e.code, kExitOk) << e.err;
  EXPECT_EQ(e.out.rfind("CER ", 0), 0u);
  const std::string report = slurp(csv);
  EXPECT_EQ(report.substr(0, report.find('\n')), "utterance_id,ref,hyp,S,I,D,cer");
  EXPECT_EQ(std::count(report.begin(), report.end(), '\n'), 7);
}

TEST_F(CliTest, DistillRequiresTeacher) {
  const CliRun r = cli({"train", "-c", config.string(), "--set", "objective.mode=distill", "-o", dir("kd")});
  EXPECT_EQ(r.code, kExitConfigError);
  EXPECT_NE(r.err.find("kd_teacher"), std::string::npos);
}

TEST_F(CliTest, NumericBlowUpExitsThree) {
  const CliRun r = cli({"train", "-c", config.string(), "--set", "trainer.lr_factor=1e250", "--set",
                        "trainer.max_epochs=3", "-o", dir("nan")});
  EXPECT_EQ(r.code, kExitNumericError);
}

TEST_F(CliTest, GradcheckExitCodes) {
  const CliRun ok = cli({"gradcheck"});
  EXPECT_EQ(ok.code, kExitOk);
  EXPECT_NE(ok.out.find("ok   combined"), std::string::npos);
  EXPECT_NE(ok.out.find("max_rel_error="), std::string::npos);
  EXPECT_EQ(cli({"gradcheck", "--tolerance", "1e-12"}).code, kExitCheckFailed);
}

TEST_F(CliTest, OutputRootFromEnvironment) {
  setenv("DMLSEQ_OUT", root.c_str(), 1);
  ASSERT_EQ(cli({"synth-data", "-c", config.string()}).code, kExitOk);
  EXPECT_TRUE(fs::exists(root / "tiny" / "train.corpus"));
}

TEST_F(CliTest, CompareWritesOneRowPerGridEntry) {
  const CliRun r = cli({"compare", "-c", config.string(), "-o", dir("cmp")});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const std::string csv = slurp(root / "cmp" / "compare.csv");
  std::istringstream in(csv);
  std::string header, row1, row2, extra;
  std::getline(in, header);
  std::getline(in, row1);
  std::getline(in, row2);
  EXPECT_FALSE(std::getline(in, extra));
  EXPECT_EQ(header, "row,setup,label_smoothing,scheduled_sampling,spec_augment,kd,dml,test1,test2");
  EXPECT_EQ(row1.rfind("large/none/independent,large,", 0), 0u);
  EXPECT_EQ(row2.rfind("large/none/mutual,large,", 0), 0u);
  ASSERT_EQ(cli({"compare", "-c", config.string(), "-o", dir("cmp2")}).code, kExitOk);
  EXPECT_EQ(slurp(root / "cmp2" / "compare.csv"), csv);
}

}  // namespace
}  // namespace dmlseq
