#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "varc/checkpoint.hpp"
#include "varc/common.hpp"
#include "varc/inference.hpp"
#include "varc/training.hpp"
#include "varc/vit.hpp"

namespace varc {

// One run's complete tunable surface: model architecture, offline training,
// adaptation, and inference knobs. Parsed from a flat `key = value` file
// (one setting per line, '#' comments) with later settings and command-line
// overrides winning. Serialized into every checkpoint and report.
struct RunConfig {
  VitConfig model;
  TrainConfig train;
  TrainConfig ttt;
  EvalOptions eval;
  int k_max = 300;

  RunConfig() {
    ttt.batch_size = 8;  // adaptation default; offline default stays 32
  }
};

// The pass@k evaluation grid: 1-2-5 decades capped at k_max (which is
// appended if not already on the grid).
inline std::vector<int> pass_k_curve(int k_max) {
  check(k_max >= 1, Errc::BadConfig, "k must be >= 1");
  const int base[] = {1, 2, 5, 10, 20, 50, 100, 200, 300};
  std::vector<int> out;
  for (int k : base) {
    if (k <= k_max) out.push_back(k);
  }
  if (out.empty() || out.back() != k_max) out.push_back(k_max);
  return out;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int r = std::stoi(v, &pos);
    check(pos == v.size(), Errc::BadConfig, "");
    return r;
  } catch (...) {
    fail(Errc::BadConfig, "setting " + key + ": expected an integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const std::uint64_t r = std::stoull(v, &pos);
    check(pos == v.size(), Errc::BadConfig, "");
    return r;
  } catch (...) {
    fail(Errc::BadConfig, "setting " + key + ": expected an unsigned integer, got '" + v + "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double r = std::stod(v, &pos);
    check(pos == v.size(), Errc::BadConfig, "");
    return r;
  } catch (...) {
    fail(Errc::BadConfig, "setting " + key + ": expected a number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  fail(Errc::BadConfig, "setting " + key + ": expected a boolean, got '" + v + "'");
}

inline bool apply_train_setting(TrainConfig& c, const std::string& field, const std::string& key,
                                const std::string& value) {
  if (field == "epochs") c.epochs = parse_int(key, value);
  else if (field == "warmup_epochs") c.warmup_epochs = parse_int(key, value);
  else if (field == "batch_size") c.batch_size = parse_int(key, value);
  else if (field == "base_lr") c.base_lr = parse_double(key, value);
  else if (field == "seed") c.seed = parse_u64(key, value);
  else if (field == "augment_scale") c.augment_scale = parse_bool(key, value);
  else if (field == "augment_translation") c.augment_translation = parse_bool(key, value);
  else if (field == "max_scale") c.max_scale = parse_int(key, value);
  else if (field == "loss_mask") c.loss_mask = loss_mask_mode_from_string(value);
  else if (field == "full_finetune") c.full_finetune = parse_bool(key, value);
  else if (field == "aux_seed") c.aux_seed = parse_u64(key, value);
  else if (field == "validate_every") c.validate_every = parse_int(key, value);
  else return false;
  return true;
}

}  // namespace detail

// Applies one `section.field = value` setting. Unknown keys are an error
// naming the key.
inline void apply_setting(RunConfig& rc, const std::string& key, const std::string& value) {
  const std::size_t dot = key.find('.');
  check(dot != std::string::npos && dot > 0 && dot + 1 < key.size(), Errc::BadConfig,
        "unknown setting '" + key + "' (expected section.field)");
  const std::string section = key.substr(0, dot);
  const std::string field = key.substr(dot + 1);
  using namespace detail;

  if (section == "model") {
    VitConfig& m = rc.model;
    if (field == "hidden_dim") m.hidden_dim = parse_int(key, value);
    else if (field == "depth") m.depth = parse_int(key, value);
    else if (field == "heads") m.heads = parse_int(key, value);
    else if (field == "mlp_hidden") m.mlp_hidden = parse_int(key, value);
    else if (field == "dropout") m.dropout = static_cast<float>(parse_double(key, value));
    else if (field == "dropout_attn") m.dropout_attn = static_cast<float>(parse_double(key, value));
    else if (field == "dropout_mlp") m.dropout_mlp = static_cast<float>(parse_double(key, value));
    else if (field == "patch_size") m.patch_size = parse_int(key, value);
    else if (field == "canvas_size") m.canvas_size = parse_int(key, value);
    else if (field == "pixel_embed_dim") m.pixel_embed_dim = parse_int(key, value);
    else if (field == "num_task_embeddings") m.num_task_embeddings = parse_int(key, value);
    else if (field == "positional_mode") m.positional_mode = positional_mode_from_string(value);
    else fail(Errc::BadConfig, "unknown setting '" + key + "'");
    return;
  }
  if (section == "train") {
    check(apply_train_setting(rc.train, field, key, value), Errc::BadConfig,
          "unknown setting '" + key + "'");
    return;
  }
  if (section == "ttt") {
    check(apply_train_setting(rc.ttt, field, key, value), Errc::BadConfig,
          "unknown setting '" + key + "'");
    return;
  }
  if (section == "eval") {
    EvalOptions& e = rc.eval;
    if (field == "views_per_aux") e.views_per_aux = parse_int(key, value);
    else if (field == "num_aux") e.num_aux = parse_int(key, value);
    else if (field == "single_view") e.single_view = parse_bool(key, value);
    else if (field == "do_ttt") e.do_ttt = parse_bool(key, value);
    else if (field == "joint") e.joint = parse_bool(key, value);
    else if (field == "jobs") e.jobs = parse_int(key, value);
    else if (field == "max_scale") e.max_scale = parse_int(key, value);
    else if (field == "seed") e.seed = parse_u64(key, value);
    else if (field == "k_max") rc.k_max = parse_int(key, value);
    else fail(Errc::BadConfig, "unknown setting '" + key + "'");
    return;
  }
  fail(Errc::BadConfig, "unknown setting '" + key + "'");
}

// Parses `key = value` lines. Blank lines and '#' comments are skipped.
struct ConfigLine {
  std::string key;
  std::string value;
  int lineno = 0;
};

inline std::vector<ConfigLine> parse_config_file(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), Errc::IoError, "cannot open config file " + path);
  std::vector<ConfigLine> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    lineno += 1;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const std::size_t eq = t.find('=');
    check(eq != std::string::npos, Errc::BadConfig,
          path + ":" + std::to_string(lineno) + ": expected 'key = value'");
    const std::string key = detail::trim(t.substr(0, eq));
    const std::string value = detail::trim(t.substr(eq + 1));
    check(!key.empty(), Errc::BadConfig,
          path + ":" + std::to_string(lineno) + ": empty key");
    out.push_back(ConfigLine{key, value, lineno});
  }
  return out;
}

// Config file (optional) first, then overrides, later entries winning.
inline RunConfig load_run_config(const std::string& config_path,
                                 const std::vector<std::string>& overrides) {
  RunConfig rc;
  if (!config_path.empty()) {
    for (const ConfigLine& cl : parse_config_file(config_path)) {
      try {
        apply_setting(rc, cl.key, cl.value);
      } catch (const Error& e) {
        fail(e.code(), config_path + ":" + std::to_string(cl.lineno) + ": " + e.message());
      }
    }
  }
  for (const std::string& kv : overrides) {
    const std::size_t eq = kv.find('=');
    check(eq != std::string::npos, Errc::BadConfig,
          "override '" + kv + "': expected key=value");
    apply_setting(rc, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  return rc;
}

inline nlohmann::json eval_options_to_json(const EvalOptions& e, int k_max) {
  nlohmann::json j;
  j["views_per_aux"] = e.views_per_aux;
  j["num_aux"] = e.num_aux;
  j["single_view"] = e.single_view;
  j["do_ttt"] = e.do_ttt;
  j["joint"] = e.joint;
  j["jobs"] = e.jobs;
  j["max_scale"] = e.max_scale;
  j["seed"] = e.seed;
  j["k_max"] = k_max;
  return j;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  nlohmann::json j;
  j["model"] = vit_config_to_json(rc.model);
  j["train"] = train_config_to_json(rc.train);
  j["ttt"] = train_config_to_json(rc.ttt);
  j["eval"] = eval_options_to_json(rc.eval, rc.k_max);
  return j;
}

}  // namespace varc
