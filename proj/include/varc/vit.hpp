#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "varc/common.hpp"
#include "varc/geometry.hpp"
#include "varc/nn.hpp"
#include "varc/rng.hpp"
#include "varc/tensor.hpp"

namespace varc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class PositionalMode { rope2d, abs2d, rope1d, abs1d, none };

inline const char* positional_mode_name(PositionalMode m) {
  switch (m) {
    case PositionalMode::rope2d: return "rope2d";
    case PositionalMode::abs2d: return "abs2d";
    case PositionalMode::rope1d: return "rope1d";
    case PositionalMode::abs1d: return "abs1d";
    case PositionalMode::none: return "none";
  }
  return "?";
}

inline PositionalMode positional_mode_from_string(const std::string& s) {
  if (s == "rope2d") return PositionalMode::rope2d;
  if (s == "abs2d") return PositionalMode::abs2d;
  if (s == "rope1d") return PositionalMode::rope1d;
  if (s == "abs1d") return PositionalMode::abs1d;
  if (s == "none") return PositionalMode::none;
  fail(Errc::BadConfig, "unknown positional mode: " + s);
}

struct VitConfig {
  int hidden_dim = 512;
  int depth = 10;
  int heads = 8;
  int mlp_hidden = 512;
  float dropout = 0.1f;
  float dropout_attn = -1.0f;  // < 0 means "use dropout"
  float dropout_mlp = -1.0f;   // < 0 means "use dropout"
  int patch_size = 2;
  int canvas_size = 64;
  int num_symbols = kNumSymbols;
  int pixel_embed_dim = 0;  // 0 means "match hidden_dim"
  int num_task_embeddings = 400;
  PositionalMode positional_mode = PositionalMode::rope2d;

  int pixel_dim() const { return pixel_embed_dim > 0 ? pixel_embed_dim : hidden_dim; }
  int patches_per_side() const { return canvas_size / patch_size; }
  int num_patches() const { return patches_per_side() * patches_per_side(); }
  int seq_len() const { return num_patches() + 1; }  // +1 task token
  int head_dim() const { return hidden_dim / heads; }
  float attn_dropout() const { return dropout_attn >= 0.0f ? dropout_attn : dropout; }
  float mlp_dropout() const { return dropout_mlp >= 0.0f ? dropout_mlp : dropout; }

  void validate() const {
    check(canvas_size > 0 && patch_size > 0 && canvas_size % patch_size == 0, Errc::BadConfig,
          "canvas_size must be a positive multiple of patch_size");
    check(hidden_dim > 0 && heads > 0 && hidden_dim % heads == 0, Errc::BadConfig,
          "hidden_dim must be divisible by heads");
    check(depth >= 1 && mlp_hidden >= 1, Errc::BadConfig, "depth and mlp_hidden must be >= 1");
    check(num_symbols == kNumSymbols, Errc::BadConfig, "the symbol alphabet is fixed at 12");
    check(num_task_embeddings >= 1, Errc::BadConfig, "need at least one task embedding");
    check(dropout >= 0.0f && dropout < 1.0f, Errc::BadConfig, "dropout must be in [0, 1)");
    if (positional_mode == PositionalMode::rope2d) {
      check(head_dim() % 4 == 0, Errc::BadConfig, "rope2d needs head_dim divisible by 4");
    }
    if (positional_mode == PositionalMode::rope1d) {
      check(head_dim() % 2 == 0, Errc::BadConfig, "rope1d needs head_dim divisible by 2");
    }
    if (positional_mode == PositionalMode::abs2d) {
      check(hidden_dim % 2 == 0, Errc::BadConfig, "abs2d needs an even hidden_dim");
    }
  }
};

// Canonical parameter list for a config: (name, shape). The order is fixed;
// checkpoints and the optimizer rely on it.
inline std::vector<std::pair<std::string, std::vector<std::int64_t>>> param_shapes(
    const VitConfig& cfg) {
  cfg.validate();
  const std::int64_t h = cfg.hidden_dim;
  const std::int64_t pe = cfg.pixel_dim();
  const std::int64_t pp = static_cast<std::int64_t>(cfg.patch_size) * cfg.patch_size;
  std::vector<std::pair<std::string, std::vector<std::int64_t>>> out;
  out.push_back({"pixel_embed", {cfg.num_symbols, pe}});
  out.push_back({"patch_proj.w", {pp * pe, h}});
  out.push_back({"patch_proj.b", {h}});
  out.push_back({"task_embed", {cfg.num_task_embeddings, h}});
  if (cfg.positional_mode == PositionalMode::abs2d) {
    out.push_back({"pos_col", {cfg.patches_per_side(), h / 2}});
    out.push_back({"pos_row", {cfg.patches_per_side(), h / 2}});
  } else if (cfg.positional_mode == PositionalMode::abs1d) {
    out.push_back({"pos", {cfg.num_patches(), h}});
  }
  for (int b = 0; b < cfg.depth; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    out.push_back({p + "ln1.g", {h}});
    out.push_back({p + "ln1.b", {h}});
    out.push_back({p + "attn.wqkv", {h, 3 * h}});
    out.push_back({p + "attn.bqkv", {3 * h}});
    out.push_back({p + "attn.wo", {h, h}});
    out.push_back({p + "attn.bo", {h}});
    out.push_back({p + "ln2.g", {h}});
    out.push_back({p + "ln2.b", {h}});
    out.push_back({p + "mlp.w1", {h, cfg.mlp_hidden}});
    out.push_back({p + "mlp.b1", {cfg.mlp_hidden}});
    out.push_back({p + "mlp.w2", {cfg.mlp_hidden, h}});
    out.push_back({p + "mlp.b2", {h}});
  }
  out.push_back({"final_ln.g", {h}});
  out.push_back({"final_ln.b", {h}});
  out.push_back({"head.w", {h, pp * cfg.num_symbols}});
  out.push_back({"head.b", {pp * cfg.num_symbols}});
  return out;
}

inline std::int64_t count_params(const VitConfig& cfg) {
  std::int64_t total = 0;
  for (const auto& [name, shape] : param_shapes(cfg)) total += Tensor::numel_of(shape);
  return total;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

struct VitModel {
  VitConfig cfg;
  std::vector<Parameter> params;
  RopeTable rope;  // empty unless a rope mode is active

  // Direct indices into params, in canonical order.
  struct BlockIdx {
    int ln1_g, ln1_b, wqkv, bqkv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2;
  };
  int pixel_embed = -1, patch_w = -1, patch_b = -1, task_embed = -1;
  int pos_col = -1, pos_row = -1, pos_1d = -1;
  std::vector<BlockIdx> blocks;
  int final_g = -1, final_b = -1, head_w = -1, head_b = -1;

  Parameter& p(int idx) { return params[static_cast<std::size_t>(idx)]; }
  const Parameter& p(int idx) const { return params[static_cast<std::size_t>(idx)]; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name == name) return static_cast<int>(i);
    }
    fail(Errc::BadCheckpoint, "no parameter named " + name);
  }

  std::int64_t num_params() const {
    std::int64_t n = 0;
    for (const auto& prm : params) n += prm.numel();
    return n;
  }

  void zero_grads() {
    for (auto& prm : params) prm.grad.zero();
  }

  bool uses_rope() const {
    return cfg.positional_mode == PositionalMode::rope2d ||
           cfg.positional_mode == PositionalMode::rope1d;
  }

  void build_rope() {
    if (cfg.positional_mode == PositionalMode::rope2d) {
      rope = build_rope2d(cfg.patches_per_side(), cfg.patches_per_side(), cfg.head_dim(),
                          10000.0f, /*leading_pad=*/1);
    } else if (cfg.positional_mode == PositionalMode::rope1d) {
      rope = build_rope1d(cfg.num_patches(), cfg.head_dim(), 10000.0f, /*leading_pad=*/1);
    } else {
      rope = RopeTable{};
    }
  }

  void wire_indices() {
    blocks.assign(cfg.depth, BlockIdx{});
    pixel_embed = find("pixel_embed");
    patch_w = find("patch_proj.w");
    patch_b = find("patch_proj.b");
    task_embed = find("task_embed");
    pos_col = cfg.positional_mode == PositionalMode::abs2d ? find("pos_col") : -1;
    pos_row = cfg.positional_mode == PositionalMode::abs2d ? find("pos_row") : -1;
    pos_1d = cfg.positional_mode == PositionalMode::abs1d ? find("pos") : -1;
    for (int b = 0; b < cfg.depth; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      BlockIdx& ix = blocks[b];
      ix.ln1_g = find(pre + "ln1.g");
      ix.ln1_b = find(pre + "ln1.b");
      ix.wqkv = find(pre + "attn.wqkv");
      ix.bqkv = find(pre + "attn.bqkv");
      ix.wo = find(pre + "attn.wo");
      ix.bo = find(pre + "attn.bo");
      ix.ln2_g = find(pre + "ln2.g");
      ix.ln2_b = find(pre + "ln2.b");
      ix.w1 = find(pre + "mlp.w1");
      ix.b1 = find(pre + "mlp.b1");
      ix.w2 = find(pre + "mlp.w2");
      ix.b2 = find(pre + "mlp.b2");
    }
    final_g = find("final_ln.g");
    final_b = find("final_ln.b");
    head_w = find("head.w");
    head_b = find("head.b");
  }

  // Truncated-normal weights and embedding tables, zero biases, unit
  // layer-norm gains.
  static VitModel init(const VitConfig& cfg, Rng& rng) {
    VitModel m;
    m.cfg = cfg;
    for (auto& [name, shape] : param_shapes(cfg)) {
      m.params.emplace_back(name, shape);
    }
    for (auto& prm : m.params) {
      const bool is_gain = prm.name.size() >= 2 && prm.name.substr(prm.name.size() - 2) == ".g";
      const bool is_bias = prm.name.size() >= 2 && prm.name.substr(prm.name.size() - 2) == ".b";
      if (is_gain) {
        std::fill(prm.value.data.begin(), prm.value.data.end(), 1.0f);
      } else if (is_bias) {
        // already zero
      } else {
        for (auto& w : prm.value.data) w = rng.trunc_normal(0.02f);
      }
    }
    m.wire_indices();
    m.build_rope();
    return m;
  }
};

// ---------------------------------------------------------------------------
// Activation workspace
// ---------------------------------------------------------------------------

struct BlockActs {
  Tensor ln1_out, ln1_mean, ln1_rstd;  // [B,T,h], [B*T], [B*T]
  Tensor qkv;                          // [B*T, 3h]
  Tensor q, k, v;                      // [B,T,h]
  AttnScratch attn;
  Tensor attn_out;   // [B,T,h] pre-projection
  Tensor attn_proj;  // [B,T,h] after wo (+ dropout, applied in place)
  Tensor drop_attn;  // [B,T,h] dropout mask
  Tensor res1;       // [B,T,h]
  Tensor ln2_out, ln2_mean, ln2_rstd;
  Tensor mlp_h;      // [B,T,mlp] pre-activation
  Tensor mlp_act;    // [B,T,mlp] gelu then dropout (in place)
  Tensor drop_mlp;   // [B,T,mlp]
  Tensor mlp_out;    // [B,T,h]
  Tensor res2;       // [B,T,h] block output
};

struct VitActs {
  int batch = 0;

  std::vector<std::int32_t> pixel_idx;  // [B*N*p^2] symbols in patch order
  std::vector<std::int32_t> task_idx;   // [B]
  std::vector<std::uint8_t> key_mask;   // [B*T], token 0 never masked
  Tensor patch_in;                      // [B*N, p^2*pe]
  Tensor patch_tok;                     // [B*N, h]
  Tensor task_rows;                     // [B, h]
  Tensor x0;                            // [B,T,h] token stream entering block 0
  std::vector<BlockActs> blocks;
  Tensor final_out, final_mean, final_rstd;
  Tensor head_in;       // [B*N, h] patch rows of final_out
  Tensor patch_logits;  // [B*N, p^2*12]
  Tensor logits;        // [B,S,S,12]

  // Gradient buffers (allocated with the activations, zeroed per use).
  Tensor d_stream, d_stream2;              // [B,T,h]
  Tensor d_ln, d_attn_out, d_wo_out;       // [B,T,h]
  Tensor d_qkv;                            // [B*T, 3h]
  Tensor dq, dk, dv;                       // [B,T,h]
  Tensor d_mlp_h, d_mlp_act;               // [B,T,mlp]
  Tensor d_head_in, d_patch_logits;        // [B*N, ..]
  Tensor d_patch_tok, d_patch_in;          // [B*N, ..]
  Tensor d_logits;                         // [B,S,S,12]

  void ensure(const VitConfig& cfg, int b_count) {
    if (batch == b_count && !blocks.empty()) return;
    batch = b_count;
    const std::int64_t B = b_count;
    const std::int64_t T = cfg.seq_len();
    const std::int64_t N = cfg.num_patches();
    const std::int64_t h = cfg.hidden_dim;
    const std::int64_t mlp = cfg.mlp_hidden;
    const std::int64_t pp = static_cast<std::int64_t>(cfg.patch_size) * cfg.patch_size;
    const std::int64_t pe = cfg.pixel_dim();
    const std::int64_t S = cfg.canvas_size;

    pixel_idx.assign(static_cast<std::size_t>(B * N * pp), 0);
    task_idx.assign(static_cast<std::size_t>(B), 0);
    key_mask.assign(static_cast<std::size_t>(B * T), 0);
    patch_in = Tensor({B * N, pp * pe});
    patch_tok = Tensor({B * N, h});
    task_rows = Tensor({B, h});
    x0 = Tensor({B, T, h});
    blocks.assign(static_cast<std::size_t>(cfg.depth), BlockActs{});
    for (auto& blk : blocks) {
      blk.ln1_out = Tensor({B, T, h});
      blk.ln1_mean = Tensor({B * T});
      blk.ln1_rstd = Tensor({B * T});
      blk.qkv = Tensor({B * T, 3 * h});
      blk.q = Tensor({B, T, h});
      blk.k = Tensor({B, T, h});
      blk.v = Tensor({B, T, h});
      blk.attn_out = Tensor({B, T, h});
      blk.attn_proj = Tensor({B, T, h});
      blk.drop_attn = Tensor({B, T, h});
      blk.res1 = Tensor({B, T, h});
      blk.ln2_out = Tensor({B, T, h});
      blk.ln2_mean = Tensor({B * T});
      blk.ln2_rstd = Tensor({B * T});
      blk.mlp_h = Tensor({B, T, mlp});
      blk.mlp_act = Tensor({B, T, mlp});
      blk.drop_mlp = Tensor({B, T, mlp});
      blk.mlp_out = Tensor({B, T, h});
      blk.res2 = Tensor({B, T, h});
    }
    final_out = Tensor({B, T, h});
    final_mean = Tensor({B * T});
    final_rstd = Tensor({B * T});
    head_in = Tensor({B * N, h});
    patch_logits = Tensor({B * N, pp * kNumSymbols});
    logits = Tensor({B, S, S, kNumSymbols});

    d_stream = Tensor({B, T, h});
    d_stream2 = Tensor({B, T, h});
    d_ln = Tensor({B, T, h});
    d_attn_out = Tensor({B, T, h});
    d_wo_out = Tensor({B, T, h});
    d_qkv = Tensor({B * T, 3 * h});
    dq = Tensor({B, T, h});
    dk = Tensor({B, T, h});
    dv = Tensor({B, T, h});
    d_mlp_h = Tensor({B, T, mlp});
    d_mlp_act = Tensor({B, T, mlp});
    d_head_in = Tensor({B * N, h});
    d_patch_logits = Tensor({B * N, pp * kNumSymbols});
    d_patch_tok = Tensor({B * N, h});
    d_patch_in = Tensor({B * N, pp * pe});
    d_logits = Tensor({B, S, S, kNumSymbols});
  }
};

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline void add_bias_rows(float* out, const float* bias, std::int64_t rows, std::int64_t d) {
  for (std::int64_t r = 0; r < rows; ++r) {
    float* row = out + r * d;
    for (std::int64_t c = 0; c < d; ++c) row[c] += bias[c];
  }
}

}  // namespace detail

// Canvas -> per-pixel 12-way logits for a batch. Token 0 is the task
// embedding; it is always attendable and carries no position. Patch tokens
// whose pixels are all BG are masked out of the attention keys.
inline void vit_forward(const VitModel& model, const std::vector<const Canvas*>& canvases,
                        const std::vector<int>& task_indices, bool train_mode, Rng& rng,
                        VitActs& acts) {
  const VitConfig& cfg = model.cfg;
  const int B = static_cast<int>(canvases.size());
  check(B > 0 && canvases.size() == task_indices.size(), Errc::ShapeMismatch,
        "forward: batch inputs misaligned");
  acts.ensure(cfg, B);

  const int S = cfg.canvas_size;
  const int p_sz = cfg.patch_size;
  const int pps = cfg.patches_per_side();
  const std::int64_t N = cfg.num_patches();
  const std::int64_t T = cfg.seq_len();
  const std::int64_t h = cfg.hidden_dim;
  const std::int64_t pp = static_cast<std::int64_t>(p_sz) * p_sz;
  const std::int64_t pe = cfg.pixel_dim();

  // Symbols in patch order, plus the all-BG key mask per patch token.
  for (int b = 0; b < B; ++b) {
    const Canvas& canvas = *canvases[b];
    check(canvas.size == S, Errc::ShapeMismatch, "forward: canvas size mismatch");
    check(task_indices[b] >= 0 && task_indices[b] < cfg.num_task_embeddings,
          Errc::TaskIndexOutOfRange,
          "task index " + std::to_string(task_indices[b]) + " out of range");
    acts.task_idx[b] = task_indices[b];
    acts.key_mask[static_cast<std::size_t>(b) * T] = 0;
    for (std::int64_t n = 0; n < N; ++n) {
      const int pr = static_cast<int>(n) / pps;
      const int pc = static_cast<int>(n) % pps;
      bool all_bg = true;
      for (int dr = 0; dr < p_sz; ++dr) {
        for (int dc = 0; dc < p_sz; ++dc) {
          const std::uint8_t sym = canvas.at(pr * p_sz + dr, pc * p_sz + dc);
          acts.pixel_idx[(static_cast<std::size_t>(b) * N + n) * pp + dr * p_sz + dc] = sym;
          if (sym != kBG) all_bg = false;
        }
      }
      acts.key_mask[static_cast<std::size_t>(b) * T + 1 + n] = all_bg ? 1 : 0;
    }
  }

  // Embed pixels (rows land directly in patch-concatenated order), project.
  embedding_forward(model.p(model.pixel_embed).value, acts.pixel_idx.data(),
                    static_cast<std::int64_t>(acts.pixel_idx.size()), acts.patch_in);
  linear_forward(acts.patch_in, model.p(model.patch_w).value, &model.p(model.patch_b).value,
                 acts.patch_tok);

  // Assemble the token stream: task token first, then patch tokens.
  embedding_forward(model.p(model.task_embed).value, acts.task_idx.data(), B, acts.task_rows);
  for (int b = 0; b < B; ++b) {
    float* row0 = acts.x0.ptr() + static_cast<std::int64_t>(b) * T * h;
    const float* task_src = acts.task_rows.ptr() + static_cast<std::int64_t>(b) * h;
    std::copy(task_src, task_src + h, row0);
    std::copy(acts.patch_tok.ptr() + static_cast<std::int64_t>(b) * N * h,
              acts.patch_tok.ptr() + static_cast<std::int64_t>(b + 1) * N * h, row0 + h);
  }

  // Learned absolute tables, if configured (patch tokens only).
  if (cfg.positional_mode == PositionalMode::abs2d) {
    const Tensor& pcol = model.p(model.pos_col).value;
    const Tensor& prow = model.p(model.pos_row).value;
    for (int b = 0; b < B; ++b) {
      for (std::int64_t n = 0; n < N; ++n) {
        float* row = acts.x0.ptr() + (static_cast<std::int64_t>(b) * T + 1 + n) * h;
        const std::int64_t pc = n % pps, pr = n / pps;
        for (std::int64_t c = 0; c < h / 2; ++c) row[c] += pcol.data[pc * (h / 2) + c];
        for (std::int64_t c = 0; c < h / 2; ++c) row[h / 2 + c] += prow.data[pr * (h / 2) + c];
      }
    }
  } else if (cfg.positional_mode == PositionalMode::abs1d) {
    const Tensor& pos = model.p(model.pos_1d).value;
    for (int b = 0; b < B; ++b) {
      for (std::int64_t n = 0; n < N; ++n) {
        float* row = acts.x0.ptr() + (static_cast<std::int64_t>(b) * T + 1 + n) * h;
        for (std::int64_t c = 0; c < h; ++c) row[c] += pos.data[n * h + c];
      }
    }
  }

  const RopeTable* rope = model.uses_rope() ? &model.rope : nullptr;
  const bool exempt0 = rope != nullptr;

  const Tensor* x_in = &acts.x0;
  for (int bi = 0; bi < cfg.depth; ++bi) {
    BlockActs& blk = acts.blocks[static_cast<std::size_t>(bi)];
    const VitModel::BlockIdx& ix = model.blocks[static_cast<std::size_t>(bi)];

    layer_norm_forward(*x_in, model.p(ix.ln1_g).value, model.p(ix.ln1_b).value, 1e-5f,
                       blk.ln1_out, blk.ln1_mean, blk.ln1_rstd);
    linear_forward(blk.ln1_out, model.p(ix.wqkv).value, &model.p(ix.bqkv).value, blk.qkv);
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(B) * T; ++t) {
      const float* src = blk.qkv.ptr() + t * 3 * h;
      std::copy(src, src + h, blk.q.ptr() + t * h);
      std::copy(src + h, src + 2 * h, blk.k.ptr() + t * h);
      std::copy(src + 2 * h, src + 3 * h, blk.v.ptr() + t * h);
    }
    attention_forward(blk.q, blk.k, blk.v, cfg.heads, acts.key_mask.data(), rope, exempt0,
                      blk.attn_out, blk.attn);
    linear_forward(blk.attn_out, model.p(ix.wo).value, &model.p(ix.bo).value, blk.attn_proj);
    dropout_forward(blk.attn_proj, cfg.attn_dropout(), train_mode, rng, blk.attn_proj,
                    blk.drop_attn);
    for (std::int64_t i = 0; i < blk.res1.numel(); ++i) {
      blk.res1.data[i] = x_in->data[i] + blk.attn_proj.data[i];
    }

    layer_norm_forward(blk.res1, model.p(ix.ln2_g).value, model.p(ix.ln2_b).value, 1e-5f,
                       blk.ln2_out, blk.ln2_mean, blk.ln2_rstd);
    linear_forward(blk.ln2_out, model.p(ix.w1).value, &model.p(ix.b1).value, blk.mlp_h);
    gelu_forward(blk.mlp_h, blk.mlp_act);
    dropout_forward(blk.mlp_act, cfg.mlp_dropout(), train_mode, rng, blk.mlp_act, blk.drop_mlp);
    linear_forward(blk.mlp_act, model.p(ix.w2).value, &model.p(ix.b2).value, blk.mlp_out);
    for (std::int64_t i = 0; i < blk.res2.numel(); ++i) {
      blk.res2.data[i] = blk.res1.data[i] + blk.mlp_out.data[i];
    }
    x_in = &blk.res2;
  }

  layer_norm_forward(*x_in, model.p(model.final_g).value, model.p(model.final_b).value, 1e-5f,
                     acts.final_out, acts.final_mean, acts.final_rstd);

  // Drop the task token, classify every patch, scatter logits to pixels.
  for (int b = 0; b < B; ++b) {
    std::copy(acts.final_out.ptr() + (static_cast<std::int64_t>(b) * T + 1) * h,
              acts.final_out.ptr() + (static_cast<std::int64_t>(b) * T + T) * h,
              acts.head_in.ptr() + static_cast<std::int64_t>(b) * N * h);
  }
  linear_forward(acts.head_in, model.p(model.head_w).value, &model.p(model.head_b).value,
                 acts.patch_logits);
  for (int b = 0; b < B; ++b) {
    for (std::int64_t n = 0; n < N; ++n) {
      const int pr = static_cast<int>(n) / pps, pc = static_cast<int>(n) % pps;
      for (int dr = 0; dr < p_sz; ++dr) {
        for (int dc = 0; dc < p_sz; ++dc) {
          const float* src = acts.patch_logits.ptr() +
                             (static_cast<std::int64_t>(b) * N + n) * pp * kNumSymbols +
                             (static_cast<std::int64_t>(dr) * p_sz + dc) * kNumSymbols;
          float* dst = acts.logits.ptr() +
                       ((static_cast<std::int64_t>(b) * S + pr * p_sz + dr) * S + pc * p_sz + dc) *
                           kNumSymbols;
          std::copy(src, src + kNumSymbols, dst);
        }
      }
    }
  }
}

// Single-canvas convenience wrapper returning the [S,S,12] logits.
inline Tensor vit_forward_single(const VitModel& model, const Canvas& canvas, int task_index,
                                 bool train_mode, Rng& rng, VitActs& acts) {
  vit_forward(model, {&canvas}, {task_index}, train_mode, rng, acts);
  Tensor out({model.cfg.canvas_size, model.cfg.canvas_size, kNumSymbols});
  out.data = acts.logits.data;
  return out;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

// Consumes acts.d_logits (gradient w.r.t. the forward's logits) and
// accumulates into every parameter's grad. Must follow a train-mode forward
// on the same acts.
inline void vit_backward(VitModel& model, VitActs& acts) {
  const VitConfig& cfg = model.cfg;
  const int B = acts.batch;
  const int S = cfg.canvas_size;
  const int p_sz = cfg.patch_size;
  const int pps = cfg.patches_per_side();
  const std::int64_t N = cfg.num_patches();
  const std::int64_t T = cfg.seq_len();
  const std::int64_t h = cfg.hidden_dim;
  const std::int64_t pp = static_cast<std::int64_t>(p_sz) * p_sz;

  // Pixel logits -> patch-major rows.
  for (int b = 0; b < B; ++b) {
    for (std::int64_t n = 0; n < N; ++n) {
      const int pr = static_cast<int>(n) / pps, pc = static_cast<int>(n) % pps;
      for (int dr = 0; dr < p_sz; ++dr) {
        for (int dc = 0; dc < p_sz; ++dc) {
          const float* src = acts.d_logits.ptr() +
                             ((static_cast<std::int64_t>(b) * S + pr * p_sz + dr) * S + pc * p_sz + dc) *
                                 kNumSymbols;
          float* dst = acts.d_patch_logits.ptr() +
                       (static_cast<std::int64_t>(b) * N + n) * pp * kNumSymbols +
                       (static_cast<std::int64_t>(dr) * p_sz + dc) * kNumSymbols;
          std::copy(src, src + kNumSymbols, dst);
        }
      }
    }
  }

  acts.d_head_in.zero();
  linear_backward(acts.head_in, model.p(model.head_w).value, acts.d_patch_logits,
                  &acts.d_head_in, model.p(model.head_w).grad, &model.p(model.head_b).grad);

  // Patch rows back into the token stream (task-token rows get zero).
  acts.d_stream.zero();
  for (int b = 0; b < B; ++b) {
    std::copy(acts.d_head_in.ptr() + static_cast<std::int64_t>(b) * N * h,
              acts.d_head_in.ptr() + static_cast<std::int64_t>(b + 1) * N * h,
              acts.d_stream.ptr() + (static_cast<std::int64_t>(b) * T + 1) * h);
  }

  const Tensor* last_in =
      cfg.depth > 0 ? &acts.blocks[static_cast<std::size_t>(cfg.depth - 1)].res2 : &acts.x0;
  acts.d_stream2.zero();
  layer_norm_backward(*last_in, model.p(model.final_g).value, acts.final_mean, acts.final_rstd,
                      acts.d_stream, acts.d_stream2, model.p(model.final_g).grad,
                      model.p(model.final_b).grad);
  std::swap(acts.d_stream.data, acts.d_stream2.data);  // d_stream = d(res2 of last block)

  const RopeTable* rope = model.uses_rope() ? &model.rope : nullptr;
  const bool exempt0 = rope != nullptr;

  for (int bi = cfg.depth - 1; bi >= 0; --bi) {
    BlockActs& blk = acts.blocks[static_cast<std::size_t>(bi)];
    const VitModel::BlockIdx& ix = model.blocks[static_cast<std::size_t>(bi)];
    const Tensor& x_in = bi == 0 ? acts.x0 : acts.blocks[static_cast<std::size_t>(bi - 1)].res2;

    // res2 = res1 + fc2(dropout(gelu(fc1(ln2(res1))))): the incoming
    // d_stream is both the direct residual gradient and the MLP path input.
    acts.d_mlp_act.zero();
    linear_backward(blk.mlp_act, model.p(ix.w2).value, acts.d_stream, &acts.d_mlp_act,
                    model.p(ix.w2).grad, &model.p(ix.b2).grad);
    acts.d_mlp_h.zero();
    dropout_backward(acts.d_mlp_act, blk.drop_mlp, acts.d_mlp_h);  // d after-gelu
    std::swap(acts.d_mlp_act.data, acts.d_mlp_h.data);             // d_mlp_act = d(gelu out)
    acts.d_mlp_h.zero();
    gelu_backward(blk.mlp_h, acts.d_mlp_act, acts.d_mlp_h);
    acts.d_ln.zero();
    linear_backward(blk.ln2_out, model.p(ix.w1).value, acts.d_mlp_h, &acts.d_ln,
                    model.p(ix.w1).grad, &model.p(ix.b1).grad);
    layer_norm_backward(blk.res1, model.p(ix.ln2_g).value, blk.ln2_mean, blk.ln2_rstd, acts.d_ln,
                        acts.d_stream, model.p(ix.ln2_g).grad, model.p(ix.ln2_b).grad);
    // d_stream now holds d(res1): residual passthrough plus the ln2 path.

    // res1 = x_in + dropout(wo(attn_out)): route through the dropout mask.
    acts.d_wo_out.zero();
    dropout_backward(acts.d_stream, blk.drop_attn, acts.d_wo_out);
    acts.d_attn_out.zero();
    linear_backward(blk.attn_out, model.p(ix.wo).value, acts.d_wo_out, &acts.d_attn_out,
                    model.p(ix.wo).grad, &model.p(ix.bo).grad);
    acts.dq.zero();
    acts.dk.zero();
    acts.dv.zero();
    attention_backward(blk.q, blk.k, blk.v, cfg.heads, rope, exempt0, acts.d_attn_out, blk.attn,
                       acts.dq, acts.dk, acts.dv);
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(B) * T; ++t) {
      float* dst = acts.d_qkv.ptr() + t * 3 * h;
      std::copy(acts.dq.ptr() + t * h, acts.dq.ptr() + (t + 1) * h, dst);
      std::copy(acts.dk.ptr() + t * h, acts.dk.ptr() + (t + 1) * h, dst + h);
      std::copy(acts.dv.ptr() + t * h, acts.dv.ptr() + (t + 1) * h, dst + 2 * h);
    }
    acts.d_ln.zero();
    linear_backward(blk.ln1_out, model.p(ix.wqkv).value, acts.d_qkv, &acts.d_ln,
                    model.p(ix.wqkv).grad, &model.p(ix.bqkv).grad);
    layer_norm_backward(x_in, model.p(ix.ln1_g).value, blk.ln1_mean, blk.ln1_rstd, acts.d_ln,
                        acts.d_stream, model.p(ix.ln1_g).grad, model.p(ix.ln1_b).grad);
    // d_stream now holds d(x_in) for the next (earlier) block.
  }

  // Token stream -> positional tables, task embeddings, patch projection.
  if (cfg.positional_mode == PositionalMode::abs2d) {
    Tensor& dcol = model.p(model.pos_col).grad;
    Tensor& drow = model.p(model.pos_row).grad;
    for (int b = 0; b < B; ++b) {
      for (std::int64_t n = 0; n < N; ++n) {
        const float* row = acts.d_stream.ptr() + (static_cast<std::int64_t>(b) * T + 1 + n) * h;
        const std::int64_t pc = n % pps, pr = n / pps;
        for (std::int64_t c = 0; c < h / 2; ++c) dcol.data[pc * (h / 2) + c] += row[c];
        for (std::int64_t c = 0; c < h / 2; ++c) drow.data[pr * (h / 2) + c] += row[h / 2 + c];
      }
    }
  } else if (cfg.positional_mode == PositionalMode::abs1d) {
    Tensor& dpos = model.p(model.pos_1d).grad;
    for (int b = 0; b < B; ++b) {
      for (std::int64_t n = 0; n < N; ++n) {
        const float* row = acts.d_stream.ptr() + (static_cast<std::int64_t>(b) * T + 1 + n) * h;
        for (std::int64_t c = 0; c < h; ++c) dpos.data[n * h + c] += row[c];
      }
    }
  }

  for (int b = 0; b < B; ++b) {
    // Task token row.
    const float* row0 = acts.d_stream.ptr() + static_cast<std::int64_t>(b) * T * h;
    float* dtask = model.p(model.task_embed).grad.ptr() +
                   static_cast<std::int64_t>(acts.task_idx[b]) * h;
    for (std::int64_t c = 0; c < h; ++c) dtask[c] += row0[c];
    // Patch token rows.
    std::copy(row0 + h, row0 + T * h,
              acts.d_patch_tok.ptr() + static_cast<std::int64_t>(b) * N * h);
  }
  acts.d_patch_in.zero();
  linear_backward(acts.patch_in, model.p(model.patch_w).value, acts.d_patch_tok,
                  &acts.d_patch_in, model.p(model.patch_w).grad, &model.p(model.patch_b).grad);
  embedding_backward(acts.pixel_idx.data(), static_cast<std::int64_t>(acts.pixel_idx.size()),
                     acts.d_patch_in, model.p(model.pixel_embed).grad);
}

// ---------------------------------------------------------------------------
// Tokenize (inspection/testing surface)
// ---------------------------------------------------------------------------

struct TokenizeResult {
  Tensor tokens;                            // [N, hidden]
  std::vector<std::pair<int, int>> coords;  // patch (row, col)
  std::vector<std::uint8_t> patch_bg_mask;  // true = every pixel is BG
};

inline TokenizeResult tokenize(const VitModel& model, const Canvas& canvas) {
  const VitConfig& cfg = model.cfg;
  check(canvas.size == cfg.canvas_size, Errc::ShapeMismatch, "tokenize: canvas size mismatch");
  const int p_sz = cfg.patch_size;
  const int pps = cfg.patches_per_side();
  const std::int64_t N = cfg.num_patches();
  const std::int64_t pp = static_cast<std::int64_t>(p_sz) * p_sz;
  const std::int64_t pe = cfg.pixel_dim();

  TokenizeResult out;
  out.coords.resize(static_cast<std::size_t>(N));
  out.patch_bg_mask.assign(static_cast<std::size_t>(N), 0);
  std::vector<std::int32_t> idx(static_cast<std::size_t>(N * pp));
  for (std::int64_t n = 0; n < N; ++n) {
    const int pr = static_cast<int>(n) / pps, pc = static_cast<int>(n) % pps;
    out.coords[static_cast<std::size_t>(n)] = {pr, pc};
    bool all_bg = true;
    for (int dr = 0; dr < p_sz; ++dr) {
      for (int dc = 0; dc < p_sz; ++dc) {
        const std::uint8_t sym = canvas.at(pr * p_sz + dr, pc * p_sz + dc);
        idx[static_cast<std::size_t>(n * pp + dr * p_sz + dc)] = sym;
        if (sym != kBG) all_bg = false;
      }
    }
    out.patch_bg_mask[static_cast<std::size_t>(n)] = all_bg ? 1 : 0;
  }
  Tensor embedded({N, pp * pe});
  embedding_forward(model.p(model.pixel_embed).value, idx.data(),
                    static_cast<std::int64_t>(idx.size()), embedded);
  out.tokens = Tensor({N, cfg.hidden_dim});
  linear_forward(embedded, model.p(model.patch_w).value, &model.p(model.patch_b).value,
                 out.tokens);
  return out;
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

// Which canvas cells the per-pixel loss covers. The narrow input-foreground
// mask cannot supervise the BD border (those cells are background in the
// input canvas), so the default unions both foregrounds; "all" supervises
// every cell including far-field background.
enum class LossMaskMode { input_fg, target_fg, union_fg, all };

inline const char* loss_mask_mode_name(LossMaskMode m) {
  switch (m) {
    case LossMaskMode::input_fg: return "input_fg";
    case LossMaskMode::target_fg: return "target_fg";
    case LossMaskMode::union_fg: return "union_fg";
    case LossMaskMode::all: return "all";
  }
  return "?";
}

inline LossMaskMode loss_mask_mode_from_string(const std::string& s) {
  if (s == "input_fg") return LossMaskMode::input_fg;
  if (s == "target_fg") return LossMaskMode::target_fg;
  if (s == "union_fg") return LossMaskMode::union_fg;
  if (s == "all") return LossMaskMode::all;
  fail(Errc::BadConfig, "unknown loss mask mode: " + s);
}

inline void build_loss_mask(const Canvas& input, const Canvas& target, LossMaskMode mode,
                            std::vector<std::uint8_t>& mask) {
  const std::size_t n = input.cells.size();
  mask.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    switch (mode) {
      case LossMaskMode::input_fg: mask[i] = input.cells[i] != kBG; break;
      case LossMaskMode::target_fg: mask[i] = target.cells[i] != kBG; break;
      case LossMaskMode::union_fg:
        mask[i] = input.cells[i] != kBG || target.cells[i] != kBG;
        break;
      case LossMaskMode::all: mask[i] = 1; break;
    }
  }
}

struct TrainSample {
  Canvas input;
  Canvas target;
  int task_index = 0;
};

// One optimizer step on a batch: forward, per-sample masked cross-entropy
// (samples average equally; a sample with an empty mask is skipped), full
// backward, Adam update. Returns the batch loss, or NaN if every sample was
// skipped (no step taken). `trainable` restricts the update to those
// parameter indices (empty = all).
inline double training_step(VitModel& model, const std::vector<TrainSample>& batch, float lr,
                            LossMaskMode mask_mode, Rng& rng, AdamState& adam, VitActs& acts,
                            int* skipped_out = nullptr,
                            const std::vector<int>* trainable = nullptr) {
  check(!batch.empty(), Errc::BadConfig, "training_step: empty batch");
  const int B = static_cast<int>(batch.size());
  const std::int64_t cells =
      static_cast<std::int64_t>(model.cfg.canvas_size) * model.cfg.canvas_size;

  std::vector<const Canvas*> inputs(batch.size());
  std::vector<int> tasks(batch.size());
  for (int b = 0; b < B; ++b) {
    inputs[static_cast<std::size_t>(b)] = &batch[static_cast<std::size_t>(b)].input;
    tasks[static_cast<std::size_t>(b)] = batch[static_cast<std::size_t>(b)].task_index;
  }
  model.zero_grads();
  vit_forward(model, inputs, tasks, /*train_mode=*/true, rng, acts);

  // First pass: find usable samples so the batch mean has the right weight.
  std::vector<std::vector<std::uint8_t>> masks(batch.size());
  std::vector<std::int64_t> mask_counts(batch.size(), 0);
  int usable = 0;
  for (int b = 0; b < B; ++b) {
    const auto& s = batch[static_cast<std::size_t>(b)];
    build_loss_mask(s.input, s.target, mask_mode, masks[static_cast<std::size_t>(b)]);
    std::int64_t count = 0;
    for (auto m : masks[static_cast<std::size_t>(b)]) count += m ? 1 : 0;
    mask_counts[static_cast<std::size_t>(b)] = count;
    if (count > 0) usable += 1;
  }
  if (skipped_out) *skipped_out = B - usable;
  if (usable == 0) return std::numeric_limits<double>::quiet_NaN();

  acts.d_logits.zero();
  double loss = 0.0;
  for (int b = 0; b < B; ++b) {
    const std::int64_t count = mask_counts[static_cast<std::size_t>(b)];
    if (count == 0) continue;
    const auto& s = batch[static_cast<std::size_t>(b)];
    Tensor logits_view({cells, kNumSymbols});
    const float* src = acts.logits.ptr() + static_cast<std::int64_t>(b) * cells * kNumSymbols;
    std::copy(src, src + cells * kNumSymbols, logits_view.ptr());
    Tensor dview({cells, kNumSymbols});
    const double sample_loss = cross_entropy_masked(
        logits_view, s.target.cells.data(), masks[static_cast<std::size_t>(b)].data(), cells,
        &dview, 1.0 / (static_cast<double>(count) * usable));
    loss += sample_loss / usable;
    float* dst = acts.d_logits.ptr() + static_cast<std::int64_t>(b) * cells * kNumSymbols;
    for (std::int64_t i = 0; i < cells * kNumSymbols; ++i) dst[i] += dview.data[i];
  }

  vit_backward(model, acts);
  adam_step(model.params, adam, lr, AdamConfig{}, trainable);
  return loss;
}

}  // namespace varc
