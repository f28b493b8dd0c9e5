#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "varc/common.hpp"
#include "varc/geometry.hpp"
#include "varc/grid.hpp"
#include "varc/nn.hpp"
#include "varc/rng.hpp"
#include "varc/vit.hpp"

namespace varc {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

// Fixed seed behind the ten predefined color permutations, so every run of
// the pipeline expands the same auxiliary task set.
inline constexpr std::uint64_t kDefaultAuxSeed = 1729;

struct TrainConfig {
  int epochs = 100;
  int warmup_epochs = 10;
  int batch_size = 32;       // adaptation runs typically shrink this to 8
  double base_lr = 3e-4;
  std::uint64_t seed = 0;
  bool augment_scale = true;
  bool augment_translation = true;
  int max_scale = 8;
  LossMaskMode loss_mask = LossMaskMode::union_fg;
  bool full_finetune = true;  // false: adaptation updates task embeddings only
  std::uint64_t aux_seed = kDefaultAuxSeed;
  int validate_every = 10;    // offline validation cadence, in epochs

  void validate() const {
    check(epochs >= 1 && batch_size >= 1, Errc::BadConfig, "epochs/batch_size must be >= 1");
    check(warmup_epochs >= 1 && warmup_epochs < epochs, Errc::BadConfig,
          "need 0 < warmup_epochs < epochs");
    check(base_lr > 0.0, Errc::BadConfig, "base_lr must be positive");
    check(max_scale >= 1, Errc::BadConfig, "max_scale must be >= 1");
    check(validate_every >= 1, Errc::BadConfig, "validate_every must be >= 1");
  }
};

// ---------------------------------------------------------------------------
// Auxiliary tasks: identity plus {flip, rotation} x {10 color permutations}
// ---------------------------------------------------------------------------

inline constexpr int kNumAuxTasks = 51;

struct AuxTask {
  int aux_index = 0;
  Dihedral dihedral = Dihedral::identity;
  ColorPerm color = ColorPerm{};
};

// Deterministic expansion: index 0 is identity/identity; indices 1..50 pair
// the five non-identity dihedrals with ten distinct permutations (the first
// of which is the identity permutation).
inline std::vector<AuxTask> build_aux_tasks(std::uint64_t seed) {
  std::vector<ColorPerm> perms;
  perms.push_back(color_perm_identity());
  Rng rng(seed);
  while (perms.size() < 10) {
    ColorPerm p = random_color_perm(rng);
    bool dup = false;
    for (const auto& q : perms) dup = dup || q.map == p.map;
    if (!dup) perms.push_back(p);
  }
  const Dihedral dihedrals[5] = {Dihedral::flip_h, Dihedral::flip_v, Dihedral::rot90,
                                 Dihedral::rot180, Dihedral::rot270};
  std::vector<AuxTask> out;
  out.push_back(AuxTask{0, Dihedral::identity, color_perm_identity()});
  int idx = 1;
  for (Dihedral d : dihedrals) {
    for (const ColorPerm& p : perms) {
      out.push_back(AuxTask{idx++, d, p});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample pools
// ---------------------------------------------------------------------------

// Where a pair came from. Only demonstration pairs may be trained on; the
// held-out pairs exist solely for validation and scoring.
enum class Lineage { demo, infer };

struct PoolEntry {
  Grid input;
  Grid output;
  int task_index = 0;
  Lineage lineage = Lineage::demo;
};

// Draw a fresh placement for one pair (scale and offset only; the dihedral
// and color of the pool entry were fixed when the pool was built).
inline ViewTransform draw_train_view(Rng& rng, const PoolEntry& e, int canvas_size,
                                     const TrainConfig& cfg) {
  ViewTransform v = sample_view(rng, e.input.rows, e.input.cols,
                                std::make_pair(e.output.rows, e.output.cols), canvas_size,
                                cfg.augment_scale ? cfg.max_scale : 1);
  if (!cfg.augment_translation) {
    v.row0 = 0;
    v.col0 = 0;
  }
  return v;
}

inline TrainSample realize_sample(const PoolEntry& e, const ViewTransform& v, int canvas_size) {
  check(e.lineage == Lineage::demo, Errc::BadConfig,
        "held-out pairs must never reach a gradient step");
  TrainSample s;
  s.input = place_input(e.input, v, canvas_size);
  s.target = place_target(e.output, v, canvas_size);
  s.task_index = e.task_index;
  return s;
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

// Deterministic canonical placement (scale 1, top-left) on the held-out
// pairs of every task; returns exact-match fraction, or nullopt when no
// held-out pair has a ground-truth output.
inline std::optional<double> validate_exact(const VitModel& model, const TaskSet& data,
                                            VitActs& acts) {
  Rng dummy(0);
  std::int64_t total = 0, correct = 0;
  const int S = model.cfg.canvas_size;
  for (std::size_t ti = 0; ti < data.tasks.size(); ++ti) {
    const Task& task = data.tasks[ti];
    for (const ExamplePair& pair : task.infer) {
      if (!pair.output.has_value()) continue;
      if (pair.input.rows > S || pair.input.cols > S) continue;
      ViewTransform v;  // identity, scale 1, origin
      Canvas canvas = place_input(pair.input, v, S);
      vit_forward(model, {&canvas}, {static_cast<int>(ti)}, /*train_mode=*/false, dummy, acts);
      ProbField probs({S, S, kNumSymbols});
      softmax_forward(acts.logits.ptr(), probs.ptr(), static_cast<std::int64_t>(S) * S,
                      kNumSymbols);
      DecodeResult dec = decode_prediction(probs, v);
      total += 1;
      if (dec.ok() && dec.grid == *pair.output) correct += 1;
    }
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Epoch loop shared by offline training and both adaptation modes
// ---------------------------------------------------------------------------

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::int64_t samples = 0;
  int skipped = 0;
  std::optional<double> val_exact;
};

inline nlohmann::json epoch_metrics_to_json(const EpochMetrics& m, const std::string& phase) {
  nlohmann::json j;
  j["phase"] = phase;
  j["epoch"] = m.epoch;
  j["loss"] = m.loss;
  j["lr"] = m.lr;
  j["samples"] = m.samples;
  j["skipped"] = m.skipped;
  if (m.val_exact.has_value()) j["val_exact"] = *m.val_exact;
  return j;
}

namespace detail {

// Shuffle the pool, draw fresh placements, and step the optimizer, for
// cfg.epochs epochs. `validator` (optional) runs on the configured cadence;
// `on_epoch` (optional) observes the model after each epoch, 1-based.
inline std::vector<EpochMetrics> run_training_epochs(
    VitModel& model, const std::vector<PoolEntry>& pool, const TrainConfig& cfg, Rng& root,
    const std::string& phase, const std::vector<int>* trainable, std::ostream* metrics_out,
    const std::function<std::optional<double>(VitModel&, VitActs&)>& validator = {},
    const std::function<void(int, const VitModel&)>& on_epoch = {}) {
  check(!pool.empty(), Errc::EmptyTaskSet, "no demonstration pairs to train on");
  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(pool.size()) + cfg.batch_size - 1) / cfg.batch_size;
  LRSchedule sched{cfg.base_lr, cfg.warmup_epochs, cfg.epochs, steps_per_epoch};

  AdamState adam;
  VitActs acts;
  std::vector<std::size_t> order(pool.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  std::vector<EpochMetrics> history;
  history.reserve(static_cast<std::size_t>(cfg.epochs));
  std::int64_t global_step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng erng = root.split(0x1000 + static_cast<std::uint64_t>(epoch));
    erng.shuffle(order);
    EpochMetrics em;
    em.epoch = epoch;
    double loss_sum = 0.0;
    std::int64_t loss_batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<TrainSample> batch;
      batch.reserve(stop - start);
      for (std::size_t i = start; i < stop; ++i) {
        const PoolEntry& e = pool[order[i]];
        const ViewTransform v = draw_train_view(erng, e, model.cfg.canvas_size, cfg);
        batch.push_back(realize_sample(e, v, model.cfg.canvas_size));
      }
      const float lr = static_cast<float>(lr_at(sched, global_step));
      em.lr = lr;
      int skipped = 0;
      const double loss = training_step(model, batch, lr, cfg.loss_mask, erng, adam, acts,
                                        &skipped, trainable);
      em.skipped += skipped;
      em.samples += static_cast<std::int64_t>(batch.size());
      if (!std::isnan(loss)) {
        loss_sum += loss;
        loss_batches += 1;
      }
      global_step += 1;
    }
    em.loss = loss_batches > 0 ? loss_sum / static_cast<double>(loss_batches) : 0.0;
    if (validator && ((epoch + 1) % cfg.validate_every == 0 || epoch + 1 == cfg.epochs)) {
      em.val_exact = validator(model, acts);
    }
    if (metrics_out) {
      *metrics_out << epoch_metrics_to_json(em, phase).dump() << "\n";
      metrics_out->flush();
    }
    if (on_epoch) on_epoch(epoch + 1, model);
    history.push_back(std::move(em));
  }
  return history;
}

// Swap in a freshly initialized task-embedding table with `rows` rows.
inline void reset_task_embeddings(VitModel& model, int rows, Rng& rng) {
  model.cfg.num_task_embeddings = rows;
  Parameter fresh("task_embed", {rows, model.cfg.hidden_dim});
  for (auto& w : fresh.value.data) w = rng.trunc_normal(0.02f);
  model.params[static_cast<std::size_t>(model.task_embed)] = std::move(fresh);
}

// Every demo pair of `task`, pre-transformed by every auxiliary task.
// Embedding row = embed_base + aux_index.
inline void append_aux_pool(std::vector<PoolEntry>& pool, const Task& task,
                            const std::vector<AuxTask>& aux, int embed_base) {
  for (const AuxTask& a : aux) {
    ViewTransform t;
    t.dihedral = a.dihedral;
    t.color = a.color;
    for (const ExamplePair& pair : task.demo) {
      check(pair.output.has_value(), Errc::MissingField, "demo pair without output");
      pool.push_back(PoolEntry{transform_grid(pair.input, t), transform_grid(*pair.output, t),
                               embed_base + a.aux_index, Lineage::demo});
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Offline multi-task training
// ---------------------------------------------------------------------------

struct TrainResult {
  VitModel model;
  std::vector<EpochMetrics> history;
};

// Joint training over every task's demonstration pairs. Task i uses
// embedding row i (tasks keep their load order, which is sorted by id).
// Each epoch reshuffles the pairs and draws a fresh placement per sample.
// Held-out pairs are touched only by the periodic exact-match validation.
inline TrainResult train_offline(const TaskSet& data, const VitConfig& vit_cfg,
                                 const TrainConfig& cfg, std::ostream* metrics_out = nullptr) {
  cfg.validate();
  vit_cfg.validate();
  check(!data.tasks.empty(), Errc::EmptyTaskSet, "no tasks to train on");
  check(vit_cfg.num_task_embeddings >= static_cast<int>(data.tasks.size()), Errc::BadConfig,
        "need at least one task embedding per task");

  Rng root(cfg.seed);
  Rng init_rng = root.split(0xA);
  TrainResult result{VitModel::init(vit_cfg, init_rng), {}};

  std::vector<PoolEntry> pool;
  for (std::size_t ti = 0; ti < data.tasks.size(); ++ti) {
    for (const ExamplePair& pair : data.tasks[ti].demo) {
      check(pair.output.has_value(), Errc::MissingField, "demo pair without output");
      pool.push_back(PoolEntry{pair.input, *pair.output, static_cast<int>(ti), Lineage::demo});
    }
  }

  auto validator = [&data](VitModel& m, VitActs& acts) { return validate_exact(m, data, acts); };
  result.history = detail::run_training_epochs(result.model, pool, cfg, root, "offline",
                                               /*trainable=*/nullptr, metrics_out, validator);
  return result;
}

// ---------------------------------------------------------------------------
// Test-time training
// ---------------------------------------------------------------------------

// Adapt a trained model to one unseen task: copy the trunk, allocate 51
// fresh task embeddings (one per auxiliary task), build the demo x aux pool,
// and fine-tune with fresh per-sample placements. The optimizer starts from
// fresh Adam moments. With cfg.full_finetune=false only the new embeddings
// move. Demo pairs only; the task's held-out inputs are never seen here.
inline VitModel test_time_train(const VitModel& base, const Task& task, const TrainConfig& cfg,
                                std::uint64_t seed, std::ostream* metrics_out = nullptr,
                                std::vector<EpochMetrics>* history_out = nullptr,
                                const std::function<void(int, const VitModel&)>& on_epoch = {}) {
  cfg.validate();
  check(!task.demo.empty(), Errc::EmptyTaskSet, "adaptation needs at least one demo pair");

  Rng root(seed);
  VitModel model = base;
  Rng embed_rng = root.split(0xE);
  detail::reset_task_embeddings(model, kNumAuxTasks, embed_rng);

  const std::vector<AuxTask> aux = build_aux_tasks(cfg.aux_seed);
  std::vector<PoolEntry> pool;
  pool.reserve(task.demo.size() * aux.size());
  detail::append_aux_pool(pool, task, aux, /*embed_base=*/0);

  std::vector<int> embed_only{model.task_embed};
  const std::vector<int>* trainable = cfg.full_finetune ? nullptr : &embed_only;
  auto history = detail::run_training_epochs(model, pool, cfg, root, "ttt", trainable,
                                             metrics_out, /*validator=*/{}, on_epoch);
  if (history_out) *history_out = std::move(history);
  return model;
}

// Joint adaptation: one model fine-tuned on every task's demo pool at once.
// Task t with auxiliary index a uses embedding row t*51 + a. Kept behind a
// flag; independent per-task adaptation is the default and scores higher.
inline VitModel joint_test_time_train(const VitModel& base, const TaskSet& data,
                                      const TrainConfig& cfg, std::uint64_t seed,
                                      std::ostream* metrics_out = nullptr) {
  cfg.validate();
  check(!data.tasks.empty(), Errc::EmptyTaskSet, "joint adaptation needs tasks");

  Rng root(seed);
  VitModel model = base;
  Rng embed_rng = root.split(0xE);
  detail::reset_task_embeddings(model, static_cast<int>(data.tasks.size()) * kNumAuxTasks,
                                embed_rng);

  const std::vector<AuxTask> aux = build_aux_tasks(cfg.aux_seed);
  std::vector<PoolEntry> pool;
  for (std::size_t ti = 0; ti < data.tasks.size(); ++ti) {
    detail::append_aux_pool(pool, data.tasks[ti], aux,
                            static_cast<int>(ti) * kNumAuxTasks);
  }

  std::vector<int> embed_only{model.task_embed};
  const std::vector<int>* trainable = cfg.full_finetune ? nullptr : &embed_only;
  detail::run_training_epochs(model, pool, cfg, root, "joint-ttt", trainable, metrics_out);
  return model;
}

}  // namespace varc
