#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "varc/arc_io.hpp"
#include "varc/common.hpp"
#include "varc/grid.hpp"
#include "varc/nn.hpp"
#include "varc/tensor.hpp"
#include "varc/training.hpp"
#include "varc/vit.hpp"

namespace varc {

// Binary model file:
//   "VARC" | u32 version | u64 meta_len | meta (UTF-8 JSON) |
//   u64 tensor_count | per tensor: u64 name_len | name | u64 rank |
//   u64 dims[rank] | f32 data (little-endian)
// The model parameters come first in their canonical order; any further
// tensors (e.g. optimizer moments) are named with an "opt." prefix.
inline constexpr std::uint32_t kCheckpointVersion = 1;

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json vit_config_to_json(const VitConfig& c) {
  nlohmann::json j;
  j["hidden_dim"] = c.hidden_dim;
  j["depth"] = c.depth;
  j["heads"] = c.heads;
  j["mlp_hidden"] = c.mlp_hidden;
  j["dropout"] = c.dropout;
  j["dropout_attn"] = c.dropout_attn;
  j["dropout_mlp"] = c.dropout_mlp;
  j["patch_size"] = c.patch_size;
  j["canvas_size"] = c.canvas_size;
  j["num_symbols"] = c.num_symbols;
  j["pixel_embed_dim"] = c.pixel_embed_dim;
  j["num_task_embeddings"] = c.num_task_embeddings;
  j["positional_mode"] = positional_mode_name(c.positional_mode);
  return j;
}

inline VitConfig vit_config_from_json(const nlohmann::json& j) {
  VitConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.depth = j.at("depth").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.dropout = j.at("dropout").get<float>();
  c.dropout_attn = j.value("dropout_attn", -1.0f);
  c.dropout_mlp = j.value("dropout_mlp", -1.0f);
  c.patch_size = j.at("patch_size").get<int>();
  c.canvas_size = j.at("canvas_size").get<int>();
  c.num_symbols = j.value("num_symbols", kNumSymbols);
  c.pixel_embed_dim = j.value("pixel_embed_dim", 0);
  c.num_task_embeddings = j.at("num_task_embeddings").get<int>();
  c.positional_mode = positional_mode_from_string(j.at("positional_mode").get<std::string>());
  c.validate();
  return c;
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  nlohmann::json j;
  j["epochs"] = c.epochs;
  j["warmup_epochs"] = c.warmup_epochs;
  j["batch_size"] = c.batch_size;
  j["base_lr"] = c.base_lr;
  j["seed"] = c.seed;
  j["augment_scale"] = c.augment_scale;
  j["augment_translation"] = c.augment_translation;
  j["max_scale"] = c.max_scale;
  j["loss_mask"] = loss_mask_mode_name(c.loss_mask);
  j["full_finetune"] = c.full_finetune;
  j["aux_seed"] = c.aux_seed;
  j["validate_every"] = c.validate_every;
  return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.epochs = j.value("epochs", c.epochs);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.seed = j.value("seed", c.seed);
  c.augment_scale = j.value("augment_scale", c.augment_scale);
  c.augment_translation = j.value("augment_translation", c.augment_translation);
  c.max_scale = j.value("max_scale", c.max_scale);
  c.loss_mask = loss_mask_mode_from_string(j.value("loss_mask", std::string("union_fg")));
  c.full_finetune = j.value("full_finetune", c.full_finetune);
  c.aux_seed = j.value("aux_seed", c.aux_seed);
  c.validate_every = j.value("validate_every", c.validate_every);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Little-endian primitives
// ---------------------------------------------------------------------------

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 4);
}

inline void write_u64(std::ostream& os, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(b, 8);
}

inline std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  check(is.good(), Errc::BadCheckpoint, "truncated file (u32)");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  check(is.good(), Errc::BadCheckpoint, "truncated file (u64)");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline void write_tensor_entry(std::ostream& os, const std::string& name, const Tensor& t) {
  write_u64(os, name.size());
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_u64(os, t.shape.size());
  for (auto d : t.shape) write_u64(os, static_cast<std::uint64_t>(d));
  static_assert(sizeof(float) == 4);
  os.write(reinterpret_cast<const char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

struct TensorEntry {
  std::string name;
  Tensor tensor;
};

inline TensorEntry read_tensor_entry(std::istream& is) {
  TensorEntry e;
  const std::uint64_t name_len = read_u64(is);
  check(name_len > 0 && name_len < 4096, Errc::BadCheckpoint, "implausible tensor name length");
  e.name.resize(name_len);
  is.read(e.name.data(), static_cast<std::streamsize>(name_len));
  const std::uint64_t rank = read_u64(is);
  check(rank <= 8, Errc::BadCheckpoint, "implausible tensor rank");
  std::vector<std::int64_t> shape(rank);
  for (auto& d : shape) d = static_cast<std::int64_t>(read_u64(is));
  e.tensor = Tensor(shape);
  is.read(reinterpret_cast<char*>(e.tensor.data.data()),
          static_cast<std::streamsize>(e.tensor.data.size() * sizeof(float)));
  check(is.good(), Errc::BadCheckpoint, "truncated tensor payload");
  return e;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Save / load
// ---------------------------------------------------------------------------

// Writes atomically (temp file, then rename). `meta_raw` must be a JSON
// object; `opt` appends the optimizer moments as "opt.m.<name>"/"opt.v.<name>"
// plus a scalar "opt.t".
inline void save_checkpoint(const std::string& path, const VitModel& model,
                            const std::string& meta_raw, const AdamState* opt = nullptr) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    check(os.good(), Errc::IoError, "cannot open " + tmp.string() + " for writing");
    os.write("VARC", 4);
    detail::write_u32(os, kCheckpointVersion);
    detail::write_u64(os, meta_raw.size());
    os.write(meta_raw.data(), static_cast<std::streamsize>(meta_raw.size()));

    std::uint64_t count = model.params.size();
    if (opt && opt->m.size() == model.params.size()) {
      count += 2 * model.params.size() + 1;
    }
    detail::write_u64(os, count);
    for (const auto& prm : model.params) {
      detail::write_tensor_entry(os, prm.name, prm.value);
    }
    if (opt && opt->m.size() == model.params.size()) {
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        detail::write_tensor_entry(os, "opt.m." + model.params[i].name, opt->m[i]);
      }
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        detail::write_tensor_entry(os, "opt.v." + model.params[i].name, opt->v[i]);
      }
      Tensor t_step({1});
      t_step.data[0] = static_cast<float>(opt->t);
      detail::write_tensor_entry(os, "opt.t", t_step);
    }
    check(os.good(), Errc::IoError, "write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  check(!ec, Errc::IoError, "cannot move checkpoint into place: " + ec.message());
}

inline void save_checkpoint(const std::string& path, const VitModel& model,
                            const nlohmann::json& meta, const AdamState* opt = nullptr) {
  save_checkpoint(path, model, meta.dump(), opt);
}

struct LoadedCheckpoint {
  VitModel model;
  nlohmann::json meta;
  std::string meta_raw;
  std::map<std::string, Tensor> extra;  // "opt.*" tensors, if stored
};

inline LoadedCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), Errc::IoError, "cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  check(is.good() && std::memcmp(magic, "VARC", 4) == 0, Errc::BadCheckpoint,
        path + ": not a model file (bad magic)");
  const std::uint32_t version = detail::read_u32(is);
  check(version == kCheckpointVersion, Errc::BadCheckpoint,
        path + ": unsupported version " + std::to_string(version));

  LoadedCheckpoint out;
  const std::uint64_t meta_len = detail::read_u64(is);
  out.meta_raw.resize(meta_len);
  is.read(out.meta_raw.data(), static_cast<std::streamsize>(meta_len));
  check(is.good(), Errc::BadCheckpoint, path + ": truncated metadata");
  out.meta = nlohmann::json::parse(out.meta_raw, nullptr, /*allow_exceptions=*/false);
  check(!out.meta.is_discarded() && out.meta.is_object(), Errc::BadCheckpoint,
        path + ": metadata is not a JSON object");
  check(out.meta.contains("model"), Errc::BadCheckpoint, path + ": metadata lacks model config");

  VitConfig cfg = vit_config_from_json(out.meta.at("model"));
  out.model.cfg = cfg;
  const auto shapes = param_shapes(cfg);
  const std::uint64_t count = detail::read_u64(is);
  check(count >= shapes.size(), Errc::BadCheckpoint, path + ": missing parameter tensors");

  for (const auto& [name, shape] : shapes) {
    detail::TensorEntry e = detail::read_tensor_entry(is);
    check(e.name == name, Errc::BadCheckpoint,
          path + ": expected tensor " + name + ", found " + e.name);
    check(e.tensor.shape == shape, Errc::BadCheckpoint, path + ": shape mismatch for " + name);
    Parameter prm(name, shape);
    prm.value = std::move(e.tensor);
    out.model.params.push_back(std::move(prm));
  }
  for (std::uint64_t i = shapes.size(); i < count; ++i) {
    detail::TensorEntry e = detail::read_tensor_entry(is);
    check(e.name.rfind("opt.", 0) == 0, Errc::BadCheckpoint,
          path + ": unexpected extra tensor " + e.name);
    out.extra.emplace(std::move(e.name), std::move(e.tensor));
  }
  out.model.wire_indices();
  out.model.build_rope();
  return out;
}

// ---------------------------------------------------------------------------
// Data fingerprint (FNV-1a over a canonical walk of the task set)
// ---------------------------------------------------------------------------

inline std::uint64_t taskset_fingerprint(const TaskSet& data) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void* bytes, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  auto mix_grid = [&](const Grid& g) {
    const std::int32_t dims[2] = {g.rows, g.cols};
    mix(dims, sizeof(dims));
    mix(g.cells.data(), g.cells.size());
  };
  for (const Task& t : data.tasks) {
    mix(t.id.data(), t.id.size());
    for (const ExamplePair& pr : t.demo) {
      mix_grid(pr.input);
      if (pr.output) mix_grid(*pr.output);
    }
    for (const ExamplePair& pr : t.infer) {
      mix_grid(pr.input);
      if (pr.output) mix_grid(*pr.output);
    }
  }
  return h;
}

}  // namespace varc
