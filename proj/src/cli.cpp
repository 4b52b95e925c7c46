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

#include "dmlseq/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dmlseq/config.hpp"
#include "dmlseq/decode.hpp"
#include "dmlseq/errors.hpp"
#include "dmlseq/gradcheck.hpp"
#include "dmlseq/pipeline.hpp"
#include "dmlseq/trainer.hpp"

namespace dmlseq {

namespace fs = std::filesystem;

namespace {

constexpr const char* kOutputRootVar = "DMLSEQ_OUT";

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir;
  int workers = 0;  // 0: keep the configured value
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

RunConfig resolve_config(const CommonOptions& o) {
  const std::string text = o.config_path.empty() ? std::string("{}") : read_text(o.config_path);
  RunConfig c = parse_run_config(o.overrides.empty() ? text : apply_overrides(text, o.overrides));
  if (o.workers > 0) c.trainer.workers = o.workers;
  return c;
}

/// --out wins; otherwise a relative output_dir is placed under $DMLSEQ_OUT when set.
fs::path output_dir(const CommonOptions& o, const RunConfig& c) {
  if (!o.out_dir.empty()) return o.out_dir;
  fs::path dir(c.output_dir);
  if (dir.is_relative()) {
    if (const char* root = std::getenv(kOutputRootVar); root != nullptr && *root != '\0') {
      dir = fs::path(root) / dir;
    }
  }
  return dir;
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

void add_common(CLI::App* cmd, CommonOptions& o, bool workers) {
  cmd->add_option("-c,--config", o.config_path, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--set", o.overrides, "Override a config value: dotted.key=value")
      ->take_all()
      ->allow_extra_args(false);
  cmd->add_option("-o,--out", o.out_dir, "Output directory");
  if (workers) cmd->add_option("-w,--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
}

int cmd_synth_data(const CommonOptions& o, std::ostream& out) {
  const RunConfig c = resolve_config(o);
  fs::path dir = o.out_dir.empty() && !c.data_dir.empty() ? fs::path(c.data_dir) : output_dir(o, c);
  make_dir(dir);
  const TaskCorpora t = generate_task(c.task);
  for (const Corpus* corpus : {&t.train, &t.valid, &t.test}) {
    const fs::path path = dir / (corpus->split + ".corpus");
    write_corpus(path, *corpus);
    out << path.string() << ": " << corpus->size() << " utterances\n";
  }
  write_text(dir / "config.json", to_json(c));
  return kExitOk;
}

int cmd_train(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, c);
  make_dir(dir);
  write_text(dir / "config.json", to_json(c));

  const PreparedData data = prepare_data(c);
  save_standardizer(dir / "standardizer.json", data.standardizer);

  ModelParams teacher;
  const ModelParams* teacher_ptr = nullptr;
  if (c.objective.mode == ObjectiveMode::kDistill) {
    if (c.objective.kd_teacher.empty()) throw ConfigError("objective.kd_teacher: path required for distillation");
    teacher = load_checkpoint(c.objective.kd_teacher);
    teacher_ptr = &teacher;
  }

  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) throw IoError("cannot write " + (dir / "metrics.jsonl").string());
  TrainOutputs outputs;
  outputs.metrics = &metrics;
  outputs.log = &err;
  outputs.checkpoint_dir = dir / "checkpoints";
  const TrainResult r = train(c.students, c.objective, c.trainer, data.train, data.valid, teacher_ptr, outputs);

  out << "trained " << c.students.size() << " student(s) for " << r.steps << " steps";
  if (r.early_stopped) out << " (early stop)";
  out << "\nselected student " << r.selected << ", validation loss " << r.best_valid_loss[r.selected]
      << "\ncheckpoint " << (outputs.checkpoint_dir / ("student_" + std::to_string(r.selected) + ".ckpt")).string()
      << '\n';
  return kExitOk;
}

struct EvaluateOptions {
  std::string checkpoint;
  std::string corpus;
  std::string stats;
  std::string out;
  int beam = 20;
  int workers = 1;
};

int cmd_evaluate(const EvaluateOptions& o, std::ostream& out, std::ostream& err) {
  const ModelParams params = load_checkpoint(o.checkpoint);
  Corpus corpus = read_corpus(o.corpus);
  if (corpus.empty()) throw ConfigError("evaluate: corpus " + o.corpus + " is empty");

  fs::path stats = o.stats;
  if (stats.empty()) {
    const fs::path ckpt_dir = fs::path(o.checkpoint).parent_path();
    for (const fs::path& candidate : {ckpt_dir / "standardizer.json", ckpt_dir.parent_path() / "standardizer.json"}) {
      if (fs::exists(candidate)) {
        stats = candidate;
        break;
      }
    }
  }
  if (stats.empty()) {
    err << "note: no standardizer.json found; features are used as stored\n";
  } else {
    load_standardizer(stats).apply(corpus);
  }

  const CorpusEvaluation eval = evaluate_corpus(params, corpus, o.beam, o.workers);
  fs::path csv = o.out;
  if (csv.empty()) {
    csv = fs::path(o.corpus).stem().string() + ".beam" + std::to_string(o.beam) + ".cer.csv";
    if (const char* root = std::getenv(kOutputRootVar); root != nullptr && *root != '\0') csv = fs::path(root) / csv;
  }
  if (csv.has_parent_path()) make_dir(csv.parent_path());
  std::ofstream f(csv, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + csv.string());
  write_cer_csv(f, eval);

  char line[160];
  std::snprintf(line, sizeof line, "CER %.4f%% (S=%d I=%d D=%d N=%d) over %zu utterances, beam %d\n",
                100.0 * eval.cer(), eval.total.substitutions, eval.total.insertions, eval.total.deletions,
                eval.total.ref_length, eval.utterances.size(), o.beam);
  out << line << "report " << csv.string() << '\n';
  return kExitOk;
}

int cmd_compare(const CommonOptions& o, std::ostream& out, std::ostream& err) {
  const RunConfig c = resolve_config(o);
  const fs::path dir = output_dir(o, c);
  make_dir(dir);
  write_text(dir / "config.json", to_json(c));
  const PreparedData data = prepare_data(c, static_cast<std::size_t>(c.compare.test_splits));
  const CompareResult result = run_compare(c, data, &err);
  std::ostringstream csv;
  write_compare_csv(csv, result);
  write_text(dir / "compare.csv", csv.str());
  out << csv.str();
  return kExitOk;
}

int cmd_gradcheck(const CommonOptions& o, double tolerance, std::ostream& out) {
  GradcheckOptions options;
  options.tolerance = tolerance;
  if (!o.config_path.empty() || !o.overrides.empty()) options.seed = resolve_config(o).trainer.seed;
  const std::vector<GradcheckResult> results = run_gradient_suite(options);
  bool ok = true;
  for (const GradcheckResult& r : results) {
    char line[256];
    std::snprintf(line, sizeof line, "%-4s %-9s max_rel_error=%.3e entries=%zu worst=%s (analytic %.6e, numeric %.6e)\n",
                  r.passed ? "ok" : "FAIL", r.objective.c_str(), r.max_rel_error, r.checked,
                  r.worst_parameter.c_str(), r.analytic, r.numeric);
    out << line;
    ok = ok && r.passed;
  }
  out << (ok ? "all objectives pass" : "gradient check failed") << '\n';
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mutual learning for Transformer encoder-decoders", "dmlseq"};
  app.require_subcommand(1);

  CommonOptions synth, train_opts, compare, grad;
  EvaluateOptions eval;
  CLI::App* synth_cmd = app.add_subcommand("synth-data", "Write train/valid/test corpus files");
  add_common(synth_cmd, synth, false);
  CLI::App* train_cmd = app.add_subcommand("train", "Train a cohort and write checkpoints and metrics");
  add_common(train_cmd, train_opts, true);
  CLI::App* eval_cmd = app.add_subcommand("evaluate", "Decode a corpus and write a CER report");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  eval_cmd->add_option("--corpus", eval.corpus, "Corpus file")->required();
  eval_cmd->add_option("--beam", eval.beam, "Beam width (1: greedy)")->check(CLI::PositiveNumber);
  eval_cmd->add_option("--stats", eval.stats, "standardizer.json of the training run");
  eval_cmd->add_option("-o,--out", eval.out, "CSV report path");
  eval_cmd->add_option("-w,--workers", eval.workers, "Worker threads")->check(CLI::PositiveNumber);
  CLI::App* compare_cmd = app.add_subcommand("compare", "Train and evaluate a grid of objectives");
  add_common(compare_cmd, compare, true);
  CLI::App* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every objective");
  add_common(grad_cmd, grad, false);
  double grad_tolerance = GradcheckOptions{}.tolerance;
  grad_cmd->add_option("--tolerance", grad_tolerance, "Maximum relative error")->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  }

  try {
    if (synth_cmd->parsed()) return cmd_synth_data(synth, out);
    if (train_cmd->parsed()) return cmd_train(train_opts, out, err);
    if (eval_cmd->parsed()) return cmd_evaluate(eval, out, err);
    if (compare_cmd->parsed()) return cmd_compare(compare, out, err);
    if (grad_cmd->parsed()) return cmd_gradcheck(grad, grad_tolerance, out);
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitNumericError;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
  return kExitConfigError;
}

}  // namespace dmlseq
