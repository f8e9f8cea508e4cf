#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "deepformer/config.hpp"
#include "deepformer/corpus.hpp"
#include "deepformer/errors.hpp"
#include "deepformer/train.hpp"

namespace deepformer {

// one sweep cell: encoder/decoder depth plus the init to train it with
struct SweepCell {
  size_t n_enc = 1;
  size_t n_dec = 1;
  std::string init_mode = "admin";

  std::string label() const {
    return std::to_string(n_enc) + "x" + std::to_string(n_dec) + ":" + init_mode;
  }
};

inline SweepCell sweep_cell_from_string(const std::string& text) {
  SweepCell c;
  size_t x = text.find('x');
  size_t colon = text.find(':');
  if (x == std::string::npos || colon == std::string::npos || colon < x) {
    throw ConfigError("sweep cell '" + text + "' must look like 8x2:admin");
  }
  try {
    c.n_enc = std::stoul(text.substr(0, x));
    c.n_dec = std::stoul(text.substr(x + 1, colon - x - 1));
  } catch (const std::exception&) {
    throw ConfigError("sweep cell '" + text + "' has non-numeric depths");
  }
  c.init_mode = text.substr(colon + 1);
  if (c.init_mode != "default" && c.init_mode != "admin") {
    throw ConfigError("sweep cell '" + text + "' init must be default or admin");
  }
  return c;
}

// everything one run needs: model, task, training, and run bookkeeping.
// accepted as flat key=value with [section] headers, or as JSON with the
// same section names
struct RunConfig {
  ModelConfig model;
  TaskSpec task;
  TrainOptions train;
  std::string init_mode = "admin";  // default | admin
  std::vector<uint64_t> seeds = {0};
  uint64_t data_seed = 7;
  std::string out_dir = "runs/out";
  std::vector<SweepCell> cells;

  void validate() const {
    model.validate();
    task.validate();
    train.validate();
    if (init_mode != "default" && init_mode != "admin") {
      throw ConfigError("init_mode must be default or admin, got '" + init_mode + "'");
    }
    if (seeds.empty()) throw ConfigError("at least one seed is required");
    if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  }

  // derived wiring: the task dictates both vocabularies, and admin init
  // requires the admin block structure while default trains the plain
  // post-LN stack
  void resolve() {
    model.src_vocab = task.vocab_size;
    model.tgt_vocab = task.vocab_size;
    model.block_mode = init_mode == "admin" ? BlockMode::admin : model.block_mode;
    if (init_mode == "default" && model.block_mode == BlockMode::admin) {
      model.block_mode = BlockMode::postln;
    }
    validate();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["model"] = {{"n_enc_layers", model.n_enc_layers},
                  {"n_dec_layers", model.n_dec_layers},
                  {"d_model", model.d_model},
                  {"d_ff", model.d_ff},
                  {"n_heads", model.n_heads},
                  {"src_vocab", model.src_vocab},
                  {"tgt_vocab", model.tgt_vocab},
                  {"max_len", model.max_len},
                  {"dropout", model.dropout},
                  {"label_smoothing", model.label_smoothing},
                  {"ln_eps", model.ln_eps},
                  {"block_mode", block_mode_name(model.block_mode)}};
    j["task"] = {{"kind", task_kind_name(task.kind)},
                 {"vocab_size", task.vocab_size},
                 {"min_len", task.min_len},
                 {"max_len", task.max_len},
                 {"perm_seed", task.perm_seed},
                 {"n_train", task.n_train},
                 {"n_dev", task.n_dev},
                 {"n_test", task.n_test}};
    j["train"] = {{"warmup_steps", train.schedule.warmup_steps},
                  {"peak_lr", train.schedule.peak_lr},
                  {"epochs", train.epochs},
                  {"token_budget", train.token_budget},
                  {"accum_steps", train.accum_steps},
                  {"clip_norm", train.clip_norm},
                  {"explode_factor", train.explode_factor},
                  {"explode_steps", train.explode_steps}};
    j["run"] = {{"init_mode", init_mode},
                {"seeds", seeds},
                {"data_seed", data_seed},
                {"out_dir", out_dir}};
    if (!cells.empty()) {
      std::vector<std::string> labels;
      for (const auto& c : cells) labels.push_back(c.label());
      j["sweep"] = {{"cells", labels}};
    }
    return j;
  }
};

namespace detail {

template <typename T>
T scalar_from(const nlohmann::json& v, const std::string& where) {
  try {
    if constexpr (std::is_same_v<T, std::string>) {
      if (v.is_string()) return v.get<std::string>();
      return v.dump();
    } else {
      if (v.is_string()) {
        // kv files hand numbers over as text
        std::istringstream ss(v.get<std::string>());
        T out;
        ss >> out;
        if (ss.fail()) throw ConfigError(where + ": cannot parse '" +
                                         v.get<std::string>() + "'");
        return out;
      }
      return v.get<T>();
    }
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + ": wrong value type " + v.dump());
  }
}

inline std::vector<std::string> list_from(const nlohmann::json& v) {
  std::vector<std::string> out;
  if (v.is_array()) {
    for (const auto& e : v) out.push_back(scalar_from<std::string>(e, "list"));
    return out;
  }
  std::string s = scalar_from<std::string>(v, "list");
  std::string item;
  std::istringstream ss(s);
  while (std::getline(ss, item, ',')) {
    size_t b = item.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    size_t e = item.find_last_not_of(" \t");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

using ConfigSetter = std::function<void(RunConfig&, const nlohmann::json&)>;

inline const std::map<std::string, std::map<std::string, ConfigSetter>>&
config_setters() {
  static const std::map<std::string, std::map<std::string, ConfigSetter>> table = {
      {"model",
       {{"n_enc_layers", [](RunConfig& c, const nlohmann::json& v) {
           c.model.n_enc_layers = scalar_from<size_t>(v, "model.n_enc_layers"); }},
        {"n_dec_layers", [](RunConfig& c, const nlohmann::json& v) {
           c.model.n_dec_layers = scalar_from<size_t>(v, "model.n_dec_layers"); }},
        {"d_model", [](RunConfig& c, const nlohmann::json& v) {
           c.model.d_model = scalar_from<size_t>(v, "model.d_model"); }},
        {"d_ff", [](RunConfig& c, const nlohmann::json& v) {
           c.model.d_ff = scalar_from<size_t>(v, "model.d_ff"); }},
        {"n_heads", [](RunConfig& c, const nlohmann::json& v) {
           c.model.n_heads = scalar_from<size_t>(v, "model.n_heads"); }},
        {"src_vocab", [](RunConfig& c, const nlohmann::json& v) {
           c.model.src_vocab = scalar_from<size_t>(v, "model.src_vocab"); }},
        {"tgt_vocab", [](RunConfig& c, const nlohmann::json& v) {
           c.model.tgt_vocab = scalar_from<size_t>(v, "model.tgt_vocab"); }},
        {"max_len", [](RunConfig& c, const nlohmann::json& v) {
           c.model.max_len = scalar_from<size_t>(v, "model.max_len"); }},
        {"dropout", [](RunConfig& c, const nlohmann::json& v) {
           c.model.dropout = scalar_from<double>(v, "model.dropout"); }},
        {"label_smoothing", [](RunConfig& c, const nlohmann::json& v) {
           c.model.label_smoothing = scalar_from<double>(v, "model.label_smoothing"); }},
        {"ln_eps", [](RunConfig& c, const nlohmann::json& v) {
           c.model.ln_eps = scalar_from<double>(v, "model.ln_eps"); }},
        {"block_mode", [](RunConfig& c, const nlohmann::json& v) {
           c.model.block_mode =
               block_mode_from_name(scalar_from<std::string>(v, "model.block_mode")); }}}},
      {"task",
       {{"kind", [](RunConfig& c, const nlohmann::json& v) {
           c.task.kind = task_kind_from_name(scalar_from<std::string>(v, "task.kind")); }},
        {"vocab_size", [](RunConfig& c, const nlohmann::json& v) {
           c.task.vocab_size = scalar_from<size_t>(v, "task.vocab_size"); }},
        {"min_len", [](RunConfig& c, const nlohmann::json& v) {
           c.task.min_len = scalar_from<size_t>(v, "task.min_len"); }},
        {"max_len", [](RunConfig& c, const nlohmann::json& v) {
           c.task.max_len = scalar_from<size_t>(v, "task.max_len"); }},
        {"perm_seed", [](RunConfig& c, const nlohmann::json& v) {
           c.task.perm_seed = scalar_from<uint64_t>(v, "task.perm_seed"); }},
        {"n_train", [](RunConfig& c, const nlohmann::json& v) {
           c.task.n_train = scalar_from<size_t>(v, "task.n_train"); }},
        {"n_dev", [](RunConfig& c, const nlohmann::json& v) {
           c.task.n_dev = scalar_from<size_t>(v, "task.n_dev"); }},
        {"n_test", [](RunConfig& c, const nlohmann::json& v) {
           c.task.n_test = scalar_from<size_t>(v, "task.n_test"); }}}},
      {"train",
       {{"warmup_steps", [](RunConfig& c, const nlohmann::json& v) {
           c.train.schedule.warmup_steps = scalar_from<size_t>(v, "train.warmup_steps"); }},
        {"peak_lr", [](RunConfig& c, const nlohmann::json& v) {
           c.train.schedule.peak_lr = scalar_from<double>(v, "train.peak_lr"); }},
        {"epochs", [](RunConfig& c, const nlohmann::json& v) {
           c.train.epochs = scalar_from<size_t>(v, "train.epochs"); }},
        {"token_budget", [](RunConfig& c, const nlohmann::json& v) {
           c.train.token_budget = scalar_from<size_t>(v, "train.token_budget"); }},
        {"accum_steps", [](RunConfig& c, const nlohmann::json& v) {
           c.train.accum_steps = scalar_from<size_t>(v, "train.accum_steps"); }},
        {"clip_norm", [](RunConfig& c, const nlohmann::json& v) {
           c.train.clip_norm = scalar_from<double>(v, "train.clip_norm"); }},
        {"explode_factor", [](RunConfig& c, const nlohmann::json& v) {
           c.train.explode_factor = scalar_from<double>(v, "train.explode_factor"); }},
        {"explode_steps", [](RunConfig& c, const nlohmann::json& v) {
           c.train.explode_steps = scalar_from<size_t>(v, "train.explode_steps"); }}}},
      {"run",
       {{"init_mode", [](RunConfig& c, const nlohmann::json& v) {
           c.init_mode = scalar_from<std::string>(v, "run.init_mode"); }},
        {"seeds", [](RunConfig& c, const nlohmann::json& v) {
           c.seeds.clear();
           for (const auto& s : list_from(v)) {
             try {
               c.seeds.push_back(std::stoull(s));
             } catch (const std::exception&) {
               throw ConfigError("run.seeds: '" + s + "' is not an integer");
             }
           }
         }},
        {"data_seed", [](RunConfig& c, const nlohmann::json& v) {
           c.data_seed = scalar_from<uint64_t>(v, "run.data_seed"); }},
        {"out_dir", [](RunConfig& c, const nlohmann::json& v) {
           c.out_dir = scalar_from<std::string>(v, "run.out_dir"); }}}},
      {"sweep",
       {{"cells", [](RunConfig& c, const nlohmann::json& v) {
           c.cells.clear();
           for (const auto& s : list_from(v)) c.cells.push_back(sweep_cell_from_string(s));
         }}}},
  };
  return table;
}

inline void apply_config_key(RunConfig& cfg, const std::string& section,
                             const std::string& key, const nlohmann::json& value) {
  const auto& table = config_setters();
  auto sit = table.find(section);
  if (sit == table.end()) throw ConfigError("unknown config section [" + section + "]");
  auto kit = sit->second.find(key);
  if (kit == sit->second.end()) {
    throw ConfigError("unknown key '" + key + "' in section [" + section + "]");
  }
  kit->second(cfg, value);
}

}  // namespace detail

inline RunConfig parse_run_config_json(const nlohmann::json& j) {
  RunConfig cfg;
  for (const auto& [section, body] : j.items()) {
    if (!body.is_object()) {
      throw ConfigError("config section '" + section + "' must be an object");
    }
    for (const auto& [key, value] : body.items()) {
      detail::apply_config_key(cfg, section, key, value);
    }
  }
  return cfg;
}

inline RunConfig parse_run_config_text(const std::string& text) {
  size_t first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    return parse_run_config_json(nlohmann::json::parse(text));
  }
  RunConfig cfg;
  std::istringstream in(text);
  std::string line, section;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("line " + std::to_string(lineno) + ": unterminated section");
      }
      section = line.substr(1, line.size() - 2);
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    }
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      size_t b2 = s.find_first_not_of(" \t");
      size_t e2 = s.find_last_not_of(" \t");
      s = b2 == std::string::npos ? "" : s.substr(b2, e2 - b2 + 1);
    };
    trim(key);
    trim(value);
    if (section.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": key before any [section]");
    }
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    detail::apply_config_key(cfg, section, key, nlohmann::json(value));
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot read config file " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_run_config_text(ss.str());
}

}  // namespace deepformer
