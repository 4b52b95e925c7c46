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

#include "dmlseq/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

#include "dmlseq/errors.hpp"

namespace dmlseq {

using json = nlohmann::ordered_json;

namespace {

/// Reads the members of one JSON object, rejecting keys nobody asked for.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }
  ~ObjectReader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError(where_ + ": unknown key '" + key + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const std::string& key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

void read_task(const json& j, SyntheticTaskConfig& t) {
  ObjectReader r(j, "task");
  r.get("vocab_size", t.vocab_size);
  r.get("feature_dim", t.feature_dim);
  r.get("frames_per_token", t.frames_per_token);
  r.get("noise_std", t.noise_std);
  r.get("min_tokens", t.min_tokens);
  r.get("max_tokens", t.max_tokens);
  r.get("train_size", t.train_size);
  r.get("valid_size", t.valid_size);
  r.get("test_size", t.test_size);
  r.get("seed", t.seed);
}

json write_task(const SyntheticTaskConfig& t) {
  return json{{"vocab_size", t.vocab_size},   {"feature_dim", t.feature_dim},
              {"frames_per_token", t.frames_per_token}, {"noise_std", t.noise_std},
              {"min_tokens", t.min_tokens},   {"max_tokens", t.max_tokens},
              {"train_size", t.train_size},   {"valid_size", t.valid_size},
              {"test_size", t.test_size},     {"seed", t.seed}};
}

void read_model(const json& j, ModelConfig& m, const std::string& where) {
  ObjectReader r(j, where);
  r.get("encoder_blocks", m.encoder_blocks);
  r.get("decoder_blocks", m.decoder_blocks);
  r.get("model_dim", m.model_dim);
  r.get("ffn_dim", m.ffn_dim);
  r.get("num_heads", m.num_heads);
  r.get("vocab_size", m.vocab_size);
  r.get("feature_dim", m.feature_dim);
  r.get("dropout", m.dropout);
  r.get("max_positions", m.max_positions);
}

json write_model(const ModelConfig& m) {
  return json{{"encoder_blocks", m.encoder_blocks}, {"decoder_blocks", m.decoder_blocks},
              {"model_dim", m.model_dim},           {"ffn_dim", m.ffn_dim},
              {"num_heads", m.num_heads},           {"vocab_size", m.vocab_size},
              {"feature_dim", m.feature_dim},       {"dropout", m.dropout},
              {"max_positions", m.max_positions}};
}

ModelConfig model_for_task(const SyntheticTaskConfig& task) {
  ModelConfig m;
  m.vocab_size = task.vocab_size;
  m.feature_dim = task.feature_dim;
  return m;
}

ModelConfig desk_model(const SyntheticTaskConfig& task, int blocks) {
  ModelConfig m = model_for_task(task);
  m.encoder_blocks = blocks;
  m.decoder_blocks = blocks;
  m.model_dim = 32;
  m.ffn_dim = 64;
  m.num_heads = 2;
  return m;
}

void read_objective(const json& j, ObjectiveConfig& o) {
  ObjectReader r(j, "objective");
  std::string mode = mode_name(o.mode);
  r.get("mode", mode);
  o.mode = parse_mode(mode);
  r.get("lambda", o.lambda);
  r.get("label_smoothing", o.label_smoothing);
  r.get("alpha", o.alpha);
  r.get("scheduled_sampling", o.scheduled_sampling);
  if (const json* s = r.child("sampling")) {
    ObjectReader sr(*s, "objective.sampling");
    sr.get("target_probability", o.sampling.target_probability);
    sr.get("ramp_epochs", o.sampling.ramp_epochs);
  }
  r.get("spec_augment", o.spec_augment);
  if (const json* s = r.child("spec")) {
    ObjectReader sr(*s, "objective.spec");
    sr.get("num_freq_masks", o.spec.num_freq_masks);
    sr.get("num_time_masks", o.spec.num_time_masks);
    sr.get("max_freq_width", o.spec.max_freq_width);
    sr.get("max_time_width", o.spec.max_time_width);
    sr.get("fill_value", o.spec.fill_value);
  }
  r.get("kd_teacher", o.kd_teacher);
  r.get("kd_weight", o.kd_weight);
}

json write_objective(const ObjectiveConfig& o) {
  return json{{"mode", mode_name(o.mode)},
              {"lambda", o.lambda},
              {"label_smoothing", o.label_smoothing},
              {"alpha", o.alpha},
              {"scheduled_sampling", o.scheduled_sampling},
              {"sampling",
               {{"target_probability", o.sampling.target_probability},
                {"ramp_epochs", o.sampling.ramp_epochs}}},
              {"spec_augment", o.spec_augment},
              {"spec",
               {{"num_freq_masks", o.spec.num_freq_masks},
                {"num_time_masks", o.spec.num_time_masks},
                {"max_freq_width", o.spec.max_freq_width},
                {"max_time_width", o.spec.max_time_width},
                {"fill_value", o.spec.fill_value}}},
              {"kd_teacher", o.kd_teacher},
              {"kd_weight", o.kd_weight}};
}

void read_trainer(const json& j, TrainerConfig& t) {
  ObjectReader r(j, "trainer");
  r.get("batch_size", t.batch_size);
  r.get("max_epochs", t.max_epochs);
  r.get("warmup_steps", t.warmup_steps);
  r.get("lr_factor", t.lr_factor);
  r.get("patience", t.patience);
  r.get("grad_clip", t.grad_clip);
  if (const json* a = r.child("adam")) {
    ObjectReader ar(*a, "trainer.adam");
    ar.get("beta1", t.adam.beta1);
    ar.get("beta2", t.adam.beta2);
    ar.get("epsilon", t.adam.epsilon);
  }
  r.get("seed", t.seed);
  r.get("workers", t.workers);
  r.get("sequential_updates", t.sequential_updates);
  std::string selection = t.selection == SelectionMode::kBest ? "best" : "compact";
  r.get("selection", selection);
  if (selection == "best") {
    t.selection = SelectionMode::kBest;
  } else if (selection == "compact") {
    t.selection = SelectionMode::kCompact;
  } else {
    throw ConfigError("trainer.selection: expected 'best' or 'compact', got '" + selection + "'");
  }
  r.get("compact_student", t.compact_student);
  r.get("max_steps", t.max_steps);
  r.get("epoch_cer", t.epoch_cer);
}

json write_trainer(const TrainerConfig& t) {
  return json{{"batch_size", t.batch_size},
              {"max_epochs", t.max_epochs},
              {"warmup_steps", t.warmup_steps},
              {"lr_factor", t.lr_factor},
              {"patience", t.patience},
              {"grad_clip", t.grad_clip},
              {"adam", {{"beta1", t.adam.beta1}, {"beta2", t.adam.beta2}, {"epsilon", t.adam.epsilon}}},
              {"seed", t.seed},
              {"workers", t.workers},
              {"sequential_updates", t.sequential_updates},
              {"selection", t.selection == SelectionMode::kBest ? "best" : "compact"},
              {"compact_student", t.compact_student},
              {"max_steps", t.max_steps},
              {"epoch_cer", t.epoch_cer}};
}

void read_row(const json& j, GridRow& row, const std::string& where) {
  ObjectReader r(j, where);
  r.get("name", row.name);
  r.get("setup", row.setup);
  r.get("label_smoothing", row.label_smoothing);
  r.get("scheduled_sampling", row.scheduled_sampling);
  r.get("spec_augment", row.spec_augment);
  std::string mode = mode_name(row.mode);
  r.get("mode", mode);
  row.mode = parse_mode(mode);
}

json write_row(const GridRow& row) {
  return json{{"name", row.name},
              {"setup", row.setup},
              {"label_smoothing", row.label_smoothing},
              {"scheduled_sampling", row.scheduled_sampling},
              {"spec_augment", row.spec_augment},
              {"mode", mode_name(row.mode)}};
}

json parse_document(std::string_view text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
}

}  // namespace

std::string mode_name(ObjectiveMode mode) {
  switch (mode) {
    case ObjectiveMode::kIndependent:
      return "independent";
    case ObjectiveMode::kMutual:
      return "mutual";
    case ObjectiveMode::kDistill:
      return "distill";
  }
  return "independent";
}

ObjectiveMode parse_mode(std::string_view name) {
  if (name == "independent") return ObjectiveMode::kIndependent;
  if (name == "mutual") return ObjectiveMode::kMutual;
  if (name == "distill") return ObjectiveMode::kDistill;
  throw ConfigError("objective mode must be 'independent', 'mutual' or 'distill', got '" +
                    std::string(name) + "'");
}

std::vector<GridRow> table1_rows() {
  struct Techniques {
    const char* tag;
    bool ls, ss, sa;
  };
  const Techniques large[] = {{"none", false, false, false},
                              {"ls", true, false, false},
                              {"ss", false, true, false},
                              {"sa", false, false, true},
                              {"ls+ss+sa", true, true, true}};
  const Techniques compact[] = {{"none", false, false, false}, {"ls+ss+sa", true, true, true}};
  std::vector<GridRow> rows;
  for (ObjectiveMode mode : {ObjectiveMode::kIndependent, ObjectiveMode::kMutual}) {
    for (const Techniques& t : large) {
      rows.push_back({std::string("large/") + t.tag + "/" + mode_name(mode), "large", t.ls, t.ss,
                      t.sa, mode});
    }
  }
  for (ObjectiveMode mode :
       {ObjectiveMode::kIndependent, ObjectiveMode::kDistill, ObjectiveMode::kMutual}) {
    for (const Techniques& t : compact) {
      rows.push_back({std::string("compact/") + t.tag + "/" + mode_name(mode), "compact", t.ls,
                      t.ss, t.sa, mode});
    }
  }
  return rows;
}

void RunConfig::validate() const {
  task.validate();
  if (students.empty()) throw ConfigError("students: at least one student is required");
  for (std::size_t k = 0; k < students.size(); ++k) {
    const ModelConfig& m = students[k].model;
    m.validate();
    if (m.vocab_size != task.vocab_size || m.feature_dim != task.feature_dim) {
      throw ConfigError("students." + std::to_string(k) +
                        ": vocab_size and feature_dim must match the task");
    }
  }
  objective.validate(students.size());
  trainer.validate();
  if (decode.beam < 1) throw ConfigError("decode.beam must be at least 1");
  if (decode.max_len < 0) throw ConfigError("decode.max_len must be non-negative");
  if (compare.seeds.empty()) throw ConfigError("compare.seeds: at least one seed is required");
  if (compare.test_splits < 1) throw ConfigError("compare.test_splits must be at least 1");
  if (compare.cohort_size < 2) throw ConfigError("compare.cohort_size must be at least 2");
  for (const GridRow& row : compare.rows) {
    if (row.setup != "large" && row.setup != "compact") {
      throw ConfigError("compare row '" + row.name + "': setup must be 'large' or 'compact'");
    }
    if (row.mode == ObjectiveMode::kDistill && row.setup != "compact") {
      throw ConfigError("compare row '" + row.name + "': distillation needs the compact setup");
    }
  }
  compare.large.validate();
  compare.compact.validate();
}

RunConfig parse_run_config(std::string_view json_text) {
  const json doc = parse_document(json_text);
  RunConfig c;
  {
    ObjectReader r(doc, "config");
    if (const json* t = r.child("task")) read_task(*t, c.task);
    c.compare.large = desk_model(c.task, 2);
    c.compare.compact = desk_model(c.task, 1);
    r.get("data_dir", c.data_dir);
    if (const json* s = r.child("students")) {
      if (!s->is_array()) throw ConfigError("students: expected an array");
      for (std::size_t k = 0; k < s->size(); ++k) {
        const std::string where = "students." + std::to_string(k);
        StudentConfig sc;
        sc.model = model_for_task(c.task);
        sc.seed = k;
        sc.init_seed = k;
        ObjectReader sr(s->at(k), where);
        if (const json* m = sr.child("model")) read_model(*m, sc.model, where + ".model");
        sr.get("seed", sc.seed);
        sr.get("init_seed", sc.init_seed);
        c.students.push_back(sc);
      }
    }
    if (const json* o = r.child("objective")) read_objective(*o, c.objective);
    if (const json* t = r.child("trainer")) read_trainer(*t, c.trainer);
    if (const json* d = r.child("decode")) {
      ObjectReader dr(*d, "decode");
      dr.get("beam", c.decode.beam);
      dr.get("max_len", c.decode.max_len);
    }
    if (const json* cmp = r.child("compare")) {
      ObjectReader cr(*cmp, "compare");
      std::string preset;
      cr.get("preset", preset);
      if (!preset.empty() && preset != "table1") {
        throw ConfigError("compare.preset: only 'table1' is defined");
      }
      if (const json* rows = cr.child("rows")) {
        if (!preset.empty()) throw ConfigError("compare: give either preset or rows");
        if (!rows->is_array()) throw ConfigError("compare.rows: expected an array");
        for (std::size_t i = 0; i < rows->size(); ++i) {
          GridRow row;
          read_row(rows->at(i), row, "compare.rows." + std::to_string(i));
          c.compare.rows.push_back(row);
        }
      }
      if (preset == "table1") c.compare.rows = table1_rows();
      cr.get("seeds", c.compare.seeds);
      cr.get("test_splits", c.compare.test_splits);
      cr.get("cohort_size", c.compare.cohort_size);
      if (const json* m = cr.child("large")) read_model(*m, c.compare.large, "compare.large");
      if (const json* m = cr.child("compact")) read_model(*m, c.compare.compact, "compare.compact");
    }
    r.get("output_dir", c.output_dir);
  }
  if (c.students.empty()) {
    // Mutual learning needs a peer; the other modes train one model.
    const std::uint64_t count = c.objective.mode == ObjectiveMode::kMutual ? 2 : 1;
    for (std::uint64_t k = 1; k <= count; ++k) {
      c.students.push_back(StudentConfig{model_for_task(c.task), k, k});
    }
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_json(const RunConfig& c) {
  json doc;
  doc["task"] = write_task(c.task);
  doc["data_dir"] = c.data_dir;
  json students = json::array();
  for (const StudentConfig& s : c.students) {
    students.push_back(json{{"model", write_model(s.model)}, {"seed", s.seed}, {"init_seed", s.init_seed}});
  }
  doc["students"] = students;
  doc["objective"] = write_objective(c.objective);
  doc["trainer"] = write_trainer(c.trainer);
  doc["decode"] = json{{"beam", c.decode.beam}, {"max_len", c.decode.max_len}};
  json rows = json::array();
  for (const GridRow& row : c.compare.rows) rows.push_back(write_row(row));
  doc["compare"] = json{{"rows", rows},
                        {"seeds", c.compare.seeds},
                        {"test_splits", c.compare.test_splits},
                        {"large", write_model(c.compare.large)},
                        {"compact", write_model(c.compare.compact)},
                        {"cohort_size", c.compare.cohort_size}};
  doc["output_dir"] = c.output_dir;
  return doc.dump(2) + "\n";
}

std::string apply_overrides(std::string_view json_text, const std::vector<std::string>& edits) {
  json doc = json_text.empty() ? json::object() : parse_document(json_text);
  for (const std::string& edit : edits) {
    const auto eq = edit.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("override '" + edit + "': expected key=value");
    }
    const std::string key = edit.substr(0, eq);
    const std::string raw = edit.substr(eq + 1);
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    json* node = &doc;
    std::size_t begin = 0;
    while (true) {
      const auto dot = key.find('.', begin);
      const std::string part = key.substr(begin, dot == std::string::npos ? std::string::npos : dot - begin);
      if (part.empty()) throw ConfigError("override '" + edit + "': empty key segment");
      json* next = nullptr;
      if (node->is_array()) {
        std::size_t idx = 0;
        try {
          std::size_t used = 0;
          idx = std::stoul(part, &used);
          if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
          throw ConfigError("override '" + edit + "': '" + part + "' is not an array index");
        }
        if (idx >= node->size()) throw ConfigError("override '" + edit + "': index out of range");
        next = &(*node)[idx];
      } else {
        if (node->is_null()) *node = json::object();
        if (!node->is_object()) throw ConfigError("override '" + edit + "': '" + part + "' is not an object");
        next = &(*node)[part];
      }
      if (dot == std::string::npos) {
        *next = value;
        break;
      }
      node = next;
      begin = dot + 1;
    }
  }
  return doc.dump();
}

}  // namespace dmlseq
