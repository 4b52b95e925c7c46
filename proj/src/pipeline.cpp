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

#include "dmlseq/pipeline.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <tuple>

#include "json.hpp"

#include "dmlseq/decode.hpp"
#include "dmlseq/errors.hpp"
#include "dmlseq/rng.hpp"

namespace dmlseq {

PreparedData prepare_data(const RunConfig& config, std::size_t test_splits) {
  if (test_splits == 0) throw ConfigError("prepare_data: at least one test split");
  PreparedData d;
  if (config.data_dir.empty()) {
    TaskCorpora t = generate_task(config.task);
    d.train = std::move(t.train);
    d.valid = std::move(t.valid);
    d.tests.push_back(std::move(t.test));
  } else {
    const std::filesystem::path dir(config.data_dir);
    d.train = read_corpus(dir / "train.corpus");
    d.valid = read_corpus(dir / "valid.corpus");
    d.tests.push_back(read_corpus(dir / "test.corpus"));
  }
  if (test_splits > 1) {
    std::vector<Corpus> extra = generate_test_splits(d.train.task, test_splits);
    for (std::size_t i = 1; i < extra.size(); ++i) d.tests.push_back(std::move(extra[i]));
  }
  if (d.train.empty()) throw ConfigError("prepare_data: empty training split");
  d.standardizer = Standardizer::fit(d.train);
  d.standardizer.apply(d.train);
  d.standardizer.apply(d.valid);
  for (Corpus& c : d.tests) d.standardizer.apply(c);
  return d;
}

void save_standardizer(const std::filesystem::path& path, const Standardizer& s) {
  nlohmann::ordered_json j;
  j["mean"] = s.mean;
  j["inv_std"] = s.inv_std;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

Standardizer load_standardizer(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    const nlohmann::json j = nlohmann::json::parse(in);
    Standardizer s;
    s.mean = j.at("mean").get<std::vector<double>>();
    s.inv_std = j.at("inv_std").get<std::vector<double>>();
    if (s.mean.size() != s.inv_std.size()) throw ConfigError("standardizer: size mismatch");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("standardizer " + path.string() + ": " + e.what());
  }
}

StudentConfig seeded_student(const ModelConfig& model, std::uint64_t base_seed, std::size_t index) {
  StudentConfig s;
  s.model = model;
  s.seed = derive_seed({base_seed, index, 0});
  s.init_seed = derive_seed({base_seed, index, 1});
  return s;
}

ObjectiveConfig row_objective(const ObjectiveConfig& base, const GridRow& row) {
  ObjectiveConfig o = base;
  o.mode = row.mode;
  o.label_smoothing = row.label_smoothing;
  o.scheduled_sampling = row.scheduled_sampling;
  o.spec_augment = row.spec_augment;
  return o;
}

namespace {

std::vector<double> test_cer(const ModelParams& params, const PreparedData& data, int beam,
                             int workers) {
  std::vector<double> out;
  for (const Corpus& c : data.tests) out.push_back(100.0 * evaluate_corpus(params, c, beam, workers).cer());
  return out;
}

}  // namespace

CompareResult run_compare(const RunConfig& config, const PreparedData& data,
                          std::ostream* progress) {
  config.validate();
  if (config.compare.rows.empty()) throw ConfigError("compare: no rows configured");
  CompareResult result;
  result.rows = config.compare.rows;
  result.cer.assign(result.rows.size(), std::vector<double>(data.tests.size(), 0.0));

  ModelConfig large = config.compare.large;
  ModelConfig compact = config.compare.compact;
  for (ModelConfig* m : {&large, &compact}) {
    m->vocab_size = data.train.task.vocab_size;
    m->feature_dim = data.train.task.feature_dim;
  }
  const auto K = static_cast<std::size_t>(config.compare.cohort_size);
  const int beam = config.decode.beam;
  const int workers = config.trainer.workers;

  using TeacherKey = std::tuple<bool, bool, bool, std::uint64_t>;
  std::map<TeacherKey, ModelParams> teachers;

  for (std::uint64_t seed : config.compare.seeds) {
    TrainerConfig trainer = config.trainer;
    trainer.seed = seed;
    auto train_large_independent = [&](const GridRow& row) {
      const TeacherKey key{row.label_smoothing, row.scheduled_sampling, row.spec_augment, seed};
      auto it = teachers.find(key);
      if (it == teachers.end()) {
        GridRow indep = row;
        indep.mode = ObjectiveMode::kIndependent;
        TrainerConfig t = trainer;
        t.selection = SelectionMode::kBest;
        const std::vector<StudentConfig> students{seeded_student(large, seed, 0)};
        TrainResult r = train(students, row_objective(config.objective, indep), t, data.train, data.valid);
        it = teachers.emplace(key, std::move(r.best_params[0])).first;
      }
      return it->second;
    };

    for (std::size_t i = 0; i < result.rows.size(); ++i) {
      const GridRow& row = result.rows[i];
      const ObjectiveConfig objective = row_objective(config.objective, row);
      TrainerConfig t = trainer;
      ModelParams selected;
      if (row.setup == "large") {
        if (row.mode == ObjectiveMode::kIndependent) {
          selected = train_large_independent(row);
        } else {
          std::vector<StudentConfig> students;
          for (std::size_t k = 0; k < K; ++k) students.push_back(seeded_student(large, seed, k));
          t.selection = SelectionMode::kBest;
          TrainResult r = train(students, objective, t, data.train, data.valid);
          selected = std::move(r.best_params[r.selected]);
        }
      } else {
        std::vector<StudentConfig> students{seeded_student(compact, seed, 0)};
        const ModelParams* teacher = nullptr;
        ModelParams teacher_params;
        if (row.mode == ObjectiveMode::kDistill) {
          teacher_params = train_large_independent(row);
          teacher = &teacher_params;
        } else if (row.mode == ObjectiveMode::kMutual) {
          for (std::size_t k = 1; k < K; ++k) students.push_back(seeded_student(large, seed, k));
        }
        t.selection = SelectionMode::kCompact;
        t.compact_student = 0;
        TrainResult r = train(students, objective, t, data.train, data.valid, teacher);
        selected = std::move(r.best_params[r.selected]);
      }
      const std::vector<double> cer = test_cer(selected, data, beam, workers);
      for (std::size_t s = 0; s < cer.size(); ++s) {
        result.cer[i][s] += cer[s] / static_cast<double>(config.compare.seeds.size());
      }
      if (progress != nullptr) {
        *progress << "seed " << seed << " " << row.name << ":";
        for (double c : cer) *progress << ' ' << c;
        *progress << '\n';
        progress->flush();
      }
    }
  }
  return result;
}

void write_compare_csv(std::ostream& out, const CompareResult& result) {
  out << "row,setup,label_smoothing,scheduled_sampling,spec_augment,kd,dml";
  const std::size_t splits = result.cer.empty() ? 0 : result.cer.front().size();
  for (std::size_t s = 0; s < splits; ++s) out << ",test" << s + 1;
  out << '\n';
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const GridRow& r = result.rows[i];
    out << r.name << ',' << r.setup << ',' << int{r.label_smoothing} << ','
        << int{r.scheduled_sampling} << ',' << int{r.spec_augment} << ','
        << int{r.mode == ObjectiveMode::kDistill} << ',' << int{r.mode == ObjectiveMode::kMutual};
    for (double c : result.cer[i]) {
      char buf[32];
      std::snprintf(buf, sizeof buf, ",%.4f", c);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace dmlseq
