#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "varc/common.hpp"
#include "varc/geometry.hpp"
#include "varc/grid.hpp"
#include "varc/rng.hpp"
#include "varc/training.hpp"
#include "varc/vit.hpp"

namespace varc {

// ---------------------------------------------------------------------------
// Single-view prediction
// ---------------------------------------------------------------------------

// A successful prediction, already mapped back to the original frame.
struct Candidate {
  Grid grid;
  int view_id = 0;
  int aux_index = 0;
};

struct PredictResult {
  DecodeStatus status = DecodeStatus::Ok;
  Grid grid;  // valid iff status == Ok
  int view_id = 0;
  int aux_index = 0;

  bool ok() const { return status == DecodeStatus::Ok; }
};

// Transform the input by the auxiliary task, place it with the given
// geometry, run the model with the auxiliary embedding, then invert
// everything (block average over the decoded extent, inverse color, inverse
// dihedral) so the candidate lives in the task's original frame.
inline PredictResult predict_view(const VitModel& model, VitActs& acts, const Grid& x,
                                  const AuxTask& aux, int scale, int row0, int col0,
                                  int task_index, int view_id = 0) {
  const int S = model.cfg.canvas_size;
  ViewTransform view;
  view.dihedral = aux.dihedral;
  view.color = aux.color;
  view.scale = scale;
  view.row0 = row0;
  view.col0 = col0;

  Canvas canvas = place_input(x, view, S);
  Rng dummy(0);
  vit_forward(model, {&canvas}, {task_index}, /*train_mode=*/false, dummy, acts);
  ProbField probs({S, S, kNumSymbols});
  softmax_forward(acts.logits.ptr(), probs.ptr(), static_cast<std::int64_t>(S) * S, kNumSymbols);

  PredictResult r;
  r.view_id = view_id;
  r.aux_index = aux.aux_index;
  DecodeResult dec = decode_prediction(probs, view);
  r.status = dec.status;
  if (dec.ok()) r.grid = std::move(dec.grid);
  return r;
}

// ---------------------------------------------------------------------------
// Majority vote
// ---------------------------------------------------------------------------

struct VoteTally {
  struct Entry {
    Grid grid;
    int count = 0;
    int first_index = 0;  // earliest candidate position, for tie-breaks
  };
  std::vector<Entry> entries;  // ranked: count desc, ties by first occurrence
  int total_views = 0;
  int failures = 0;
};

// Exact-equality equivalence classes over the candidate list, ranked by
// size; ties keep the order in which the grids first appeared.
inline VoteTally majority_vote(const std::vector<Grid>& candidates) {
  VoteTally tally;
  tally.total_views = static_cast<int>(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    bool found = false;
    for (auto& e : tally.entries) {
      if (e.grid == candidates[i]) {
        e.count += 1;
        found = true;
        break;
      }
    }
    if (!found) {
      tally.entries.push_back(
          VoteTally::Entry{candidates[i], 1, static_cast<int>(i)});
    }
  }
  std::stable_sort(tally.entries.begin(), tally.entries.end(),
                   [](const VoteTally::Entry& a, const VoteTally::Entry& b) {
                     return a.count > b.count;
                   });
  return tally;
}

// True iff the truth grid appears among the k most-voted candidates.
inline bool pass_at_k(const VoteTally& tally, const Grid& truth, int k) {
  check(k >= 1, Errc::BadConfig, "pass@k needs k >= 1");
  const std::size_t top = std::min(static_cast<std::size_t>(k), tally.entries.size());
  for (std::size_t i = 0; i < top; ++i) {
    if (tally.entries[i].grid == truth) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// Multi-view inference
// ---------------------------------------------------------------------------

// One view per (auxiliary task, geometric draw) pair: view id
// aux_index * views_per_aux + draw, each with its own rng stream so the
// result is independent of dispatch order. Decode failures are dropped from
// the vote but counted. Auxiliary task a uses embedding row
// embed_base + a.aux_index.
inline VoteTally multi_view_infer(const VitModel& model, const Grid& x,
                                  const std::vector<AuxTask>& aux_tasks, int views_per_aux,
                                  std::uint64_t seed, int embed_base = 0, int max_scale = 8,
                                  std::vector<PredictResult>* results_out = nullptr) {
  check(!aux_tasks.empty() && views_per_aux >= 1, Errc::BadConfig,
        "need at least one auxiliary task and one view");
  const int S = model.cfg.canvas_size;
  Rng root(seed);
  VitActs acts;

  std::vector<Grid> ok_grids;
  int failures = 0;
  int total = 0;
  for (const AuxTask& aux : aux_tasks) {
    const auto [tr_rows, tr_cols] = dihedral_shape(x.rows, x.cols, aux.dihedral);
    for (int draw = 0; draw < views_per_aux; ++draw) {
      const int view_id = aux.aux_index * views_per_aux + draw;
      Rng vrng = root.split(static_cast<std::uint64_t>(view_id));
      PredictResult r;
      total += 1;
      try {
        const ViewTransform geom =
            sample_view(vrng, tr_rows, tr_cols, std::nullopt, S, max_scale);
        r = predict_view(model, acts, x, aux, geom.scale, geom.row0, geom.col0,
                         embed_base + aux.aux_index, view_id);
      } catch (const Error&) {
        // No feasible placement for this input at any scale: treat like a
        // decode failure so the vote can proceed on other views.
        r.status = DecodeStatus::Degenerate;
        r.view_id = view_id;
        r.aux_index = aux.aux_index;
      }
      if (r.ok()) {
        ok_grids.push_back(r.grid);
      } else {
        failures += 1;
      }
      if (results_out) results_out->push_back(std::move(r));
    }
  }
  VoteTally tally = majority_vote(ok_grids);
  tally.total_views = total;
  tally.failures = failures;
  return tally;
}

// ---------------------------------------------------------------------------
// Task-set evaluation
// ---------------------------------------------------------------------------

struct EvalOptions {
  int views_per_aux = 10;
  int num_aux = kNumAuxTasks;  // use the first N auxiliary frames
  bool single_view = false;    // one identity-frame view instead of the fan-out
  bool do_ttt = true;
  bool joint = false;  // one jointly adapted model instead of per-task copies
  int jobs = 1;
  int max_scale = 8;
  std::vector<int> k_curve = {1, 2, 5, 10, 20, 50, 100, 200, 300};
  std::uint64_t seed = 0;
};

struct TaskReport {
  std::string id;
  bool pass1 = false;
  bool pass2 = false;
  std::vector<std::uint8_t> pass_curve;  // parallel to k_curve, all-or-nothing
  int num_inputs = 0;
  int inputs_correct_top1 = 0;
  int views_total = 0;
  int decode_failures = 0;
  std::int64_t adapt_samples = 0;
  bool failed = false;  // the sweep recorded an error instead of a score
  std::string message;
};

struct EvalReport {
  std::vector<TaskReport> tasks;
  std::vector<int> k_curve;
  std::vector<double> curve;  // task pass rate at each k
  double pass1 = 0.0;
  double pass2 = 0.0;
  double per_input_top1 = 0.0;
  int total_views = 0;
  int total_failures = 0;
};

namespace detail {

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

inline nlohmann::json eval_report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["pass1"] = r.pass1;
  j["pass2"] = r.pass2;
  j["per_input_top1"] = r.per_input_top1;
  j["k_curve"] = r.k_curve;
  j["curve"] = r.curve;
  j["total_views"] = r.total_views;
  j["decode_failures"] = r.total_failures;
  nlohmann::json tasks = nlohmann::json::array();
  for (const TaskReport& t : r.tasks) {
    nlohmann::json tj;
    tj["id"] = t.id;
    tj["pass1"] = t.pass1;
    tj["pass2"] = t.pass2;
    tj["num_inputs"] = t.num_inputs;
    tj["inputs_correct_top1"] = t.inputs_correct_top1;
    tj["views"] = t.views_total;
    tj["decode_failures"] = t.decode_failures;
    tj["adapt_samples"] = t.adapt_samples;
    if (t.failed) tj["error"] = t.message;
    tasks.push_back(std::move(tj));
  }
  j["tasks"] = std::move(tasks);
  return j;
}

// Adapt (unless disabled) and score every task: a task passes at k iff all
// of its held-out inputs have the truth among the top-k vote. Per-task
// failures are recorded in the report, never abort the sweep. With jobs > 1
// tasks run on a thread pool; per-task seeding keeps the outcome identical
// to a serial run.
inline EvalReport evaluate_taskset(const VitModel& base, const TaskSet& data,
                                   const TrainConfig& ttt_cfg, const EvalOptions& opt) {
  check(!data.tasks.empty(), Errc::EmptyTaskSet, "no tasks to evaluate");
  check(opt.jobs >= 1, Errc::BadConfig, "jobs must be >= 1");
  for (std::size_t i = 1; i < opt.k_curve.size(); ++i) {
    check(opt.k_curve[i - 1] < opt.k_curve[i], Errc::BadConfig, "k curve must be increasing");
  }
  check(!opt.k_curve.empty() && opt.k_curve.front() >= 1, Errc::BadConfig,
        "k curve must start at k >= 1");

  check(opt.num_aux >= 1 && opt.num_aux <= kNumAuxTasks, Errc::BadConfig,
        "num_aux must be in [1, 51]");
  std::vector<AuxTask> aux_all = build_aux_tasks(ttt_cfg.aux_seed);
  aux_all.resize(static_cast<std::size_t>(opt.num_aux));
  const std::vector<AuxTask> aux_identity{aux_all.front()};

  // Joint mode adapts once, up front, over every task's demo pool.
  VitModel joint_model;
  if (opt.do_ttt && opt.joint) {
    joint_model = joint_test_time_train(base, data, ttt_cfg, opt.seed);
  }

  EvalReport report;
  report.k_curve = opt.k_curve;
  report.tasks.resize(data.tasks.size());

  auto eval_one = [&](std::size_t ti) {
    const Task& task = data.tasks[ti];
    TaskReport& tr = report.tasks[ti];
    tr.id = task.id;
    tr.pass_curve.assign(opt.k_curve.size(), 1);
    try {
      const std::uint64_t task_seed = opt.seed ^ detail::fnv1a64(task.id);
      VitModel local;
      VitModel* model = nullptr;
      int embed_base = 0;
      const std::vector<AuxTask>* aux_used = &aux_all;

      if (opt.do_ttt && opt.joint) {
        // Adaptation already happened up front; forwards are read-only, so
        // every worker can share the jointly adapted model.
        model = &joint_model;
        embed_base = static_cast<int>(ti) * kNumAuxTasks;
      } else if (opt.do_ttt) {
        std::vector<EpochMetrics> hist;
        local = test_time_train(base, task, ttt_cfg, task_seed, nullptr, &hist);
        for (const auto& em : hist) tr.adapt_samples += em.samples;
        model = &local;
      } else {
        // No adaptation: no embeddings exist for unseen tasks, so reuse the
        // offline row at this position (exact for the training set itself)
        // and only the identity frame.
        local = base;
        model = &local;
        embed_base = static_cast<int>(ti) % base.cfg.num_task_embeddings;
      }
      if (!opt.do_ttt) aux_used = &aux_identity;
      if (opt.single_view) aux_used = &aux_identity;
      const int views = opt.single_view ? 1 : opt.views_per_aux;

      bool all_pass1 = true, all_pass2 = true;
      std::vector<std::uint8_t> all_k(opt.k_curve.size(), 1);
      int scored = 0;
      for (std::size_t pi = 0; pi < task.infer.size(); ++pi) {
        const ExamplePair& pair = task.infer[pi];
        if (!pair.output.has_value()) continue;
        scored += 1;
        const std::uint64_t view_seed =
            task_seed ^ (0x9E3779B97F4A7C15ULL * (static_cast<std::uint64_t>(pi) + 1));
        VoteTally tally = multi_view_infer(*model, pair.input, *aux_used, views, view_seed,
                                           embed_base, opt.max_scale);
        tr.views_total += tally.total_views;
        tr.decode_failures += tally.failures;
        const bool p1 = pass_at_k(tally, *pair.output, 1);
        const bool p2 = pass_at_k(tally, *pair.output, 2);
        all_pass1 = all_pass1 && p1;
        all_pass2 = all_pass2 && p2;
        if (p1) tr.inputs_correct_top1 += 1;
        for (std::size_t ki = 0; ki < opt.k_curve.size(); ++ki) {
          if (!pass_at_k(tally, *pair.output, opt.k_curve[ki])) all_k[ki] = 0;
        }
      }
      check(scored > 0, Errc::MissingField, "task has no held-out pair with ground truth");
      tr.num_inputs = scored;
      tr.pass1 = all_pass1;
      tr.pass2 = all_pass2;
      tr.pass_curve = std::move(all_k);
    } catch (const Error& e) {
      tr.failed = true;
      tr.message = e.what();
      tr.pass1 = tr.pass2 = false;
      tr.pass_curve.assign(opt.k_curve.size(), 0);
    }
  };

  if (opt.jobs == 1) {
    for (std::size_t ti = 0; ti < data.tasks.size(); ++ti) eval_one(ti);
  } else {
    // Static stride assignment: each task writes only its own report slot,
    // so the result is identical to a serial run.
    std::vector<std::thread> workers;
    const int jobs = std::min<int>(opt.jobs, static_cast<int>(data.tasks.size()));
    workers.reserve(static_cast<std::size_t>(jobs));
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w]() {
        for (std::size_t ti = static_cast<std::size_t>(w); ti < data.tasks.size();
             ti += static_cast<std::size_t>(jobs)) {
          eval_one(ti);
        }
      });
    }
    for (auto& t : workers) t.join();
  }

  // Aggregate.
  int n = 0, c1 = 0, c2 = 0;
  std::int64_t inputs_total = 0, inputs_correct = 0;
  std::vector<int> curve_counts(opt.k_curve.size(), 0);
  for (const TaskReport& t : report.tasks) {
    n += 1;
    if (t.pass1) c1 += 1;
    if (t.pass2) c2 += 1;
    inputs_total += t.num_inputs;
    inputs_correct += t.inputs_correct_top1;
    report.total_views += t.views_total;
    report.total_failures += t.decode_failures;
    for (std::size_t ki = 0; ki < opt.k_curve.size(); ++ki) {
      if (!t.failed && t.pass_curve[ki]) curve_counts[ki] += 1;
    }
  }
  report.pass1 = n > 0 ? static_cast<double>(c1) / n : 0.0;
  report.pass2 = n > 0 ? static_cast<double>(c2) / n : 0.0;
  report.per_input_top1 =
      inputs_total > 0 ? static_cast<double>(inputs_correct) / inputs_total : 0.0;
  report.curve.resize(opt.k_curve.size());
  for (std::size_t ki = 0; ki < opt.k_curve.size(); ++ki) {
    report.curve[ki] = n > 0 ? static_cast<double>(curve_counts[ki]) / n : 0.0;
  }
  return report;
}

}  // namespace varc
