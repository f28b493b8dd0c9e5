// Command-line harness: data ingestion, offline training, per-task
// adaptation, evaluation, single-task prediction, and artifact inspection
// for the grid-puzzle solver library.
//
// Exit codes: 0 success, 1 configuration error, 2 data/file error,
// 3 runtime error.

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "varc/arc_io.hpp"
#include "varc/checkpoint.hpp"
#include "varc/common.hpp"
#include "varc/inference.hpp"
#include "varc/pgm.hpp"
#include "varc/run_config.hpp"
#include "varc/training.hpp"
#include "varc/vit.hpp"

namespace {

using namespace varc;

int exit_code_for(Errc c) {
  switch (c) {
    case Errc::BadConfig:
    case Errc::CoordinatesOutOfRange:
    case Errc::StepOutOfRange:
      return 1;  // caller asked for something invalid
    case Errc::IoError:
    case Errc::RaggedRows:
    case Errc::ColorOutOfRange:
    case Errc::EmptyGrid:
    case Errc::MissingField:
    case Errc::EmptyTaskSet:
    case Errc::UnknownTaskId:
    case Errc::BadCheckpoint:
      return 2;  // the supplied files are unusable
    default:
      return 3;  // internal failure while running
  }
}

std::string hex_u64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

const Task& find_task(const TaskSet& set, const std::string& id) {
  for (const Task& t : set.tasks) {
    if (t.id == id) return t;
  }
  fail(Errc::UnknownTaskId, "no task with id '" + id + "'");
}

int task_position(const TaskSet& set, const std::string& id) {
  for (std::size_t i = 0; i < set.tasks.size(); ++i) {
    if (set.tasks[i].id == id) return static_cast<int>(i);
  }
  fail(Errc::UnknownTaskId, "no task with id '" + id + "'");
}

nlohmann::json grid_json(const Grid& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < g.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < g.cols; ++c) row.push_back(static_cast<int>(g.at(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  check(out.good(), Errc::IoError, "cannot write " + path);
  out << j.dump(2) << "\n";
  check(out.good(), Errc::IoError, "short write to " + path);
}

// Opens the metrics sink: an explicit file when requested, stderr otherwise
// so long runs always show progress.
std::ostream* open_metrics(const std::string& path, std::ofstream& file) {
  if (path.empty()) return &std::cerr;
  file.open(path);
  check(file.good(), Errc::IoError, "cannot write " + path);
  return &file;
}

// Per-task adaptation seed; mixes the run seed with the task id so task
// order and set composition do not matter.
std::uint64_t task_seed_for(std::uint64_t seed, const std::string& id) {
  return seed ^ varc::detail::fnv1a64(id);
}

constexpr std::uint64_t kViewSeedStride = 0x9E3779B97F4A7C15ULL;

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string data;
  std::string out;
  std::string rearc_dir;
  std::int64_t rearc_pairs = 0;
  std::uint64_t rearc_seed = 0;
  bool rearc_replace = false;
};

void run_ingest(const IngestArgs& a) {
  TaskSet data = load_taskset(a.data);
  if (!a.rearc_dir.empty()) {
    MergeReport rep;
    data = merge_rearc(std::move(data), a.rearc_dir, a.rearc_pairs, a.rearc_seed,
                       a.rearc_replace, &rep);
    std::cout << "merged generated pairs: " << rep.pairs_added << " pairs into "
              << rep.tasks_extended << " tasks";
    if (!rep.skipped_ids.empty()) {
      std::cout << "; " << rep.skipped_ids.size() << " generator files without a matching task";
    }
    if (!rep.missing_ids.empty()) {
      std::cout << "; " << rep.missing_ids.size() << " tasks without a generator file";
    }
    std::cout << "\n";
  }

  std::size_t demo = 0, truth = 0, blind = 0;
  for (const Task& t : data.tasks) {
    demo += t.demo.size();
    for (const ExamplePair& p : t.infer) (p.has_output() ? truth : blind) += 1;
  }
  std::cout << "tasks: " << data.tasks.size() << "\n";
  std::cout << "demo pairs: " << demo << "\n";
  std::cout << "held-out inputs: " << (truth + blind) << " (" << truth << " with ground truth)\n";
  std::cout << "fingerprint: " << hex_u64(taskset_fingerprint(data)) << "\n";
  if (!a.out.empty()) {
    save_taskset(data, a.out);
    std::cout << "wrote " << a.out << "\n";
  }
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string data;
  std::string out;
  std::string metrics;
};

void run_train(const RunConfig& rc, const TrainArgs& a) {
  TaskSet data = load_taskset(a.data);
  const std::string fp = hex_u64(taskset_fingerprint(data));

  std::ofstream mfile;
  std::ostream* mout = open_metrics(a.metrics, mfile);
  TrainResult res = train_offline(data, rc.model, rc.train, mout);

  nlohmann::json meta;
  meta["model"] = vit_config_to_json(res.model.cfg);
  meta["run_config"] = run_config_to_json(rc);
  meta["seed"] = rc.train.seed;
  meta["phase"] = "offline";
  meta["data_fingerprint"] = fp;
  meta["num_tasks"] = data.tasks.size();
  meta["epochs_trained"] = rc.train.epochs;
  if (!res.history.empty()) {
    const EpochMetrics& last = res.history.back();
    meta["final_loss"] = last.loss;
    if (last.val_exact) meta["final_val_exact"] = *last.val_exact;
  }
  save_checkpoint(a.out, res.model, meta);
  std::cout << "wrote " << a.out << " (" << res.model.num_params() << " parameters, "
            << rc.train.epochs << " epochs)\n";
}

// ---------------------------------------------------------------------------
// ttt
// ---------------------------------------------------------------------------

struct TttArgs {
  std::string checkpoint;
  std::string data;
  std::string task_id;
  std::string out;
  std::string metrics;
  bool joint = false;
};

void run_ttt(const RunConfig& rc, const TttArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.checkpoint);
  TaskSet data = load_taskset(a.data);
  const std::string fp = hex_u64(taskset_fingerprint(data));

  std::ofstream mfile;
  std::ostream* mout = open_metrics(a.metrics, mfile);

  nlohmann::json meta;
  meta["run_config"] = run_config_to_json(rc);
  meta["data_fingerprint"] = fp;
  meta["base_meta"] = lc.meta;

  VitModel adapted;
  if (a.joint) {
    check(a.task_id.empty(), Errc::BadConfig, "--joint adapts every task; drop --task-id");
    adapted = joint_test_time_train(lc.model, data, rc.ttt, rc.ttt.seed, mout);
    meta["phase"] = "joint-ttt";
    meta["seed"] = rc.ttt.seed;
    meta["num_tasks"] = data.tasks.size();
  } else {
    check(!a.task_id.empty(), Errc::BadConfig, "need --task-id (or --joint)");
    const Task& task = find_task(data, a.task_id);
    const std::uint64_t seed = task_seed_for(rc.ttt.seed, task.id);
    adapted = test_time_train(lc.model, task, rc.ttt, seed, mout);
    meta["phase"] = "ttt";
    meta["seed"] = seed;
    meta["task_id"] = task.id;
  }
  meta["model"] = vit_config_to_json(adapted.cfg);
  save_checkpoint(a.out, adapted, meta);
  std::cout << "wrote " << a.out << " (" << adapted.cfg.num_task_embeddings
            << " task embeddings)\n";
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out;
};

void run_eval(const RunConfig& rc, const EvalArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.checkpoint);
  TaskSet data = load_taskset(a.data);

  EvalOptions opt = rc.eval;
  opt.k_curve = pass_k_curve(rc.k_max);
  EvalReport rep = evaluate_taskset(lc.model, data, rc.ttt, opt);

  nlohmann::json j = eval_report_to_json(rep);
  j["run_config"] = run_config_to_json(rc);
  j["seed"] = opt.seed;
  j["checkpoint_meta"] = lc.meta;
  j["data_fingerprint"] = hex_u64(taskset_fingerprint(data));

  std::ostream& human = a.out.empty() ? std::cerr : std::cout;
  human << "tasks: " << rep.tasks.size() << "\n";
  human << "pass@1: " << rep.pass1 << "\n";
  human << "pass@2: " << rep.pass2 << "\n";
  human << "per-input top-1: " << rep.per_input_top1 << "\n";
  human << "views: " << rep.total_views << " (" << rep.total_failures << " failed to decode)\n";
  human << "pass@k:";
  for (std::size_t i = 0; i < rep.k_curve.size(); ++i) {
    human << " " << rep.k_curve[i] << ":" << rep.curve[i];
  }
  human << "\n";
  int failed = 0;
  for (const TaskReport& t : rep.tasks) {
    if (t.failed) {
      failed += 1;
      human << "task " << t.id << " failed: " << t.message << "\n";
    }
  }
  if (failed > 0) human << failed << " task(s) failed to evaluate\n";

  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json_file(a.out, j);
    std::cout << "wrote " << a.out << "\n";
  }
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string data;
  std::string task_id;
  int input_index = 0;
  std::string out;
};

void run_predict(const RunConfig& rc, const PredictArgs& a) {
  LoadedCheckpoint lc = load_checkpoint(a.checkpoint);
  TaskSet data = load_taskset(a.data);
  const Task& task = find_task(data, a.task_id);
  check(a.input_index >= 0 && a.input_index < static_cast<int>(task.infer.size()),
        Errc::BadConfig,
        "input index out of range (task has " + std::to_string(task.infer.size()) +
            " held-out inputs)");

  const std::uint64_t task_seed = task_seed_for(rc.eval.seed, task.id);
  std::vector<AuxTask> aux = build_aux_tasks(rc.ttt.aux_seed);
  check(rc.eval.num_aux >= 1 && rc.eval.num_aux <= static_cast<int>(aux.size()),
        Errc::BadConfig, "num_aux must be in [1, " + std::to_string(aux.size()) + "]");

  VitModel model;
  int embed_base = 0;
  int views_per_aux = rc.eval.views_per_aux;
  if (rc.eval.do_ttt) {
    std::cerr << "adapting to task " << task.id << "...\n";
    model = test_time_train(lc.model, task, rc.ttt, task_seed, &std::cerr);
    aux.resize(static_cast<std::size_t>(rc.eval.num_aux));
  } else {
    model = lc.model;
    embed_base = task_position(data, task.id) % model.cfg.num_task_embeddings;
    aux.resize(1);  // no per-augmentation embeddings exist without adaptation
  }
  if (rc.eval.single_view) {
    aux.resize(1);
    views_per_aux = 1;
  }

  const Grid& x = task.infer[static_cast<std::size_t>(a.input_index)].input;
  const std::uint64_t view_seed =
      task_seed ^ (kViewSeedStride * static_cast<std::uint64_t>(a.input_index + 1));
  VoteTally tally = multi_view_infer(model, x, aux, views_per_aux, view_seed, embed_base,
                                     rc.eval.max_scale);

  nlohmann::json j;
  j["task_id"] = task.id;
  j["input_index"] = a.input_index;
  j["views"] = tally.total_views;
  j["decode_failures"] = tally.failures;
  j["run_config"] = run_config_to_json(rc);
  j["seed"] = rc.eval.seed;
  nlohmann::json cands = nlohmann::json::array();
  for (std::size_t i = 0; i < tally.entries.size() && i < 5; ++i) {
    nlohmann::json c;
    c["votes"] = tally.entries[i].count;
    c["grid"] = grid_json(tally.entries[i].grid);
    cands.push_back(std::move(c));
  }
  j["candidates"] = cands;
  if (!tally.entries.empty()) j["prediction"] = grid_json(tally.entries[0].grid);
  const ExamplePair& pair = task.infer[static_cast<std::size_t>(a.input_index)];
  if (pair.has_output()) {
    j["correct_top1"] = pass_at_k(tally, *pair.output, 1);
    j["correct_top2"] = pass_at_k(tally, *pair.output, 2);
  }

  std::ostream& human = a.out.empty() ? std::cerr : std::cout;
  human << "views: " << tally.total_views << ", decode failures: " << tally.failures << "\n";
  for (std::size_t i = 0; i < tally.entries.size() && i < 5; ++i) {
    human << "candidate " << i << ": " << tally.entries[i].count << " votes ("
          << tally.entries[i].grid.rows << "x" << tally.entries[i].grid.cols << ")\n";
  }
  if (a.out.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    write_json_file(a.out, j);
    std::cout << "wrote " << a.out << "\n";
  }
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectArgs {
  std::string checkpoint;
  std::string data;
  std::string task_id;
  std::string out_prefix = "inspect";
  std::string attention;  // "layer,row,col"; layer -1 = every layer
  int pair_index = 0;
  int embed_row = -1;
  bool task_embeddings = false;
  bool ttt_snapshots = false;
  std::string snap_epochs = "1,2,5,10,20,50,100";
};

void inspect_attention(const RunConfig& /*rc*/, const InspectArgs& a,
                       const LoadedCheckpoint& lc) {
  int layer = 0, row = 0, col = 0;
  check(std::sscanf(a.attention.c_str(), "%d,%d,%d", &layer, &row, &col) == 3, Errc::BadConfig,
        "--attention expects layer,row,col");

  const VitModel& model = lc.model;
  const VitConfig& cfg = model.cfg;
  const int S = cfg.canvas_size;
  const int pps = cfg.patches_per_side();
  const int T = cfg.seq_len();
  check(layer == -1 || (layer >= 0 && layer < cfg.depth), Errc::CoordinatesOutOfRange,
        "layer " + std::to_string(layer) + " out of range (depth " + std::to_string(cfg.depth) +
            ")");
  check(row >= 0 && row < S && col >= 0 && col < S, Errc::CoordinatesOutOfRange,
        "pixel (" + std::to_string(row) + "," + std::to_string(col) + ") outside the " +
            std::to_string(S) + "x" + std::to_string(S) + " canvas");

  check(!a.data.empty() && !a.task_id.empty(), Errc::BadConfig,
        "--attention needs --data and --task-id");
  TaskSet data = load_taskset(a.data);
  const Task& task = find_task(data, a.task_id);
  check(a.pair_index >= 0 && a.pair_index < static_cast<int>(task.demo.size()), Errc::BadConfig,
        "pair index out of range (task has " + std::to_string(task.demo.size()) +
            " demo pairs)");
  const Grid& grid = task.demo[static_cast<std::size_t>(a.pair_index)].input;
  const Canvas canvas = place_input(grid, ViewTransform{}, S);

  int embed_row = a.embed_row;
  if (embed_row < 0) embed_row = task_position(data, task.id) % cfg.num_task_embeddings;
  check(embed_row < cfg.num_task_embeddings, Errc::CoordinatesOutOfRange,
        "embedding row out of range");

  std::vector<int> layers;
  if (layer == -1) {
    for (int l = 0; l < cfg.depth; ++l) layers.push_back(l);
  } else {
    layers.push_back(layer);
  }

  VitActs acts;
  acts.ensure(cfg, 1);
  for (int l : layers) acts.blocks[static_cast<std::size_t>(l)].attn.capture_scores = true;
  Rng rng(0);
  std::vector<const Canvas*> canvases{&canvas};
  std::vector<int> task_indices{embed_row};
  vit_forward(model, canvases, task_indices, /*train_mode=*/false, rng, acts);

  // Query token for the pixel's patch; token 0 is the task token.
  const int q = 1 + (row / cfg.patch_size) * pps + (col / cfg.patch_size);
  write_canvas_pgm(a.out_prefix + ".input.pgm", canvas);
  std::cout << "wrote " << a.out_prefix << ".input.pgm\n";

  const int H = cfg.heads;
  for (int l : layers) {
    const Tensor& scores = acts.blocks[static_cast<std::size_t>(l)].attn.scores_all;
    check(scores.numel() == static_cast<std::size_t>(H) * T * T, Errc::ShapeMismatch,
          "attention capture missing");
    // Raw scores for the query row, one row per head.
    const std::string csv_path =
        a.out_prefix + ".attn.layer" + std::to_string(l) + ".csv";
    {
      std::ofstream csv(csv_path);
      check(csv.good(), Errc::IoError, "cannot write " + csv_path);
      csv << std::setprecision(9);
      for (int h = 0; h < H; ++h) {
        const float* r = scores.ptr() + (static_cast<std::size_t>(h) * T + q) * T;
        for (int k = 0; k < T; ++k) csv << (k ? "," : "") << r[k];
        csv << "\n";
      }
    }

    // Spatial maps over the patch grid: raw scores averaged over heads, and
    // the actual attention distribution (per-head softmax, then averaged).
    std::vector<float> pre(static_cast<std::size_t>(pps) * pps, 0.0f);
    std::vector<float> soft(static_cast<std::size_t>(pps) * pps, 0.0f);
    for (int h = 0; h < H; ++h) {
      const float* r = scores.ptr() + (static_cast<std::size_t>(h) * T + q) * T;
      float mx = r[0];
      for (int k = 1; k < T; ++k) mx = std::max(mx, r[k]);
      double denom = 0.0;
      for (int k = 0; k < T; ++k) denom += std::exp(static_cast<double>(r[k]) - mx);
      for (int k = 1; k < T; ++k) {
        pre[static_cast<std::size_t>(k - 1)] += r[k] / static_cast<float>(H);
        soft[static_cast<std::size_t>(k - 1)] += static_cast<float>(
            std::exp(static_cast<double>(r[k]) - mx) / denom / H);
      }
    }
    // Masked keys sit at a large negative sentinel; pin them to the real
    // minimum so the map's contrast shows the live scores.
    float lo = 0.0f;
    bool seen = false;
    for (float v : pre) {
      if (v > -1e8f && (!seen || v < lo)) {
        lo = v;
        seen = true;
      }
    }
    for (float& v : pre) {
      if (v <= -1e8f) v = lo;
    }
    const std::string pre_path =
        a.out_prefix + ".attn.layer" + std::to_string(l) + ".pre.pgm";
    const std::string soft_path =
        a.out_prefix + ".attn.layer" + std::to_string(l) + ".soft.pgm";
    write_heatmap_pgm(pre_path, pps, pps, pre);
    write_heatmap_pgm(soft_path, pps, pps, soft);
    std::cout << "wrote " << pre_path << ", " << soft_path << ", " << csv_path << "\n";
  }
}

void inspect_task_embeddings(const InspectArgs& a, const LoadedCheckpoint& lc) {
  const Tensor& table = lc.model.p(lc.model.task_embed).value;
  const int rows = lc.model.cfg.num_task_embeddings;
  const int cols = lc.model.cfg.hidden_dim;
  const std::string path = a.out_prefix + ".task_embeddings.csv";
  std::ofstream csv(path);
  check(csv.good(), Errc::IoError, "cannot write " + path);
  csv << std::setprecision(9);
  for (int r = 0; r < rows; ++r) {
    const float* p = table.ptr() + static_cast<std::size_t>(r) * cols;
    for (int c = 0; c < cols; ++c) csv << (c ? "," : "") << p[c];
    csv << "\n";
  }
  std::cout << "wrote " << path << " (" << rows << "x" << cols << ")\n";
}

void inspect_ttt_snapshots(const RunConfig& rc, const InspectArgs& a,
                           const LoadedCheckpoint& lc) {
  check(!a.data.empty() && !a.task_id.empty(), Errc::BadConfig,
        "--ttt-snapshots needs --data and --task-id");
  TaskSet data = load_taskset(a.data);
  const Task& task = find_task(data, a.task_id);
  check(!task.infer.empty(), Errc::MissingField, "task has no held-out input to predict");

  std::set<int> snaps;
  {
    std::stringstream ss(a.snap_epochs);
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (item.empty()) continue;
      const int e = varc::detail::parse_int("--snap-epochs", item);
      if (e >= 1 && e <= rc.ttt.epochs) snaps.insert(e);
    }
  }
  snaps.insert(rc.ttt.epochs);

  const Grid& x = task.infer[0].input;
  const std::vector<AuxTask> aux = build_aux_tasks(rc.ttt.aux_seed);
  VitActs acts;
  int written = 0;
  auto on_epoch = [&](int epoch, const VitModel& m) {
    if (!snaps.count(epoch)) return;
    // Plain placement, untransformed view, this task's identity-augmentation
    // embedding (row 0).
    PredictResult r = predict_view(m, acts, x, aux[0], /*scale=*/1, /*row0=*/0, /*col0=*/0,
                                   /*task_index=*/0);
    nlohmann::json j;
    j["epoch"] = epoch;
    j["task_id"] = task.id;
    j["input_index"] = 0;
    j["status"] = decode_status_name(r.status);
    if (r.ok()) j["grid"] = grid_json(r.grid);
    const std::string path = a.out_prefix + ".ttt.epoch" + std::to_string(epoch) + ".json";
    write_json_file(path, j);
    written += 1;
  };

  const std::uint64_t seed = task_seed_for(rc.ttt.seed, task.id);
  test_time_train(lc.model, task, rc.ttt, seed, &std::cerr, nullptr, on_epoch);
  std::cout << "wrote " << written << " snapshot(s) to " << a.out_prefix << ".ttt.epoch*.json\n";
}

void run_inspect(const RunConfig& rc, const InspectArgs& a) {
  check(!a.attention.empty() || a.task_embeddings || a.ttt_snapshots, Errc::BadConfig,
        "nothing to inspect: pass --attention, --task-embeddings, or --ttt-snapshots");
  LoadedCheckpoint lc = load_checkpoint(a.checkpoint);
  if (!a.attention.empty()) inspect_attention(rc, a, lc);
  if (a.task_embeddings) inspect_task_embeddings(a, lc);
  if (a.ttt_snapshots) inspect_ttt_snapshots(rc, a, lc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grid-puzzle solver: offline multi-task training, per-task adaptation, "
               "multi-view voting inference"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "flat key = value settings file");
  app.add_option("--set", overrides, "override one setting, section.field=value (repeatable)");

  IngestArgs ingest_args;
  CLI::App* ingest = app.add_subcommand("ingest", "validate a task set, optionally merge "
                                                  "generated pairs, and report a fingerprint");
  ingest->add_option("--data", ingest_args.data, "task set (JSON file or directory)")->required();
  ingest->add_option("--out", ingest_args.out, "write the resulting task set here");
  ingest->add_option("--rearc", ingest_args.rearc_dir, "directory of generated pairs per task");
  ingest->add_option("--rearc-pairs", ingest_args.rearc_pairs, "generated pairs to add per task");
  ingest->add_option("--rearc-seed", ingest_args.rearc_seed, "seed for sampling generated pairs");
  ingest->add_flag("--rearc-replace", ingest_args.rearc_replace, "sample with replacement");

  TrainArgs train_args;
  CLI::App* train = app.add_subcommand("train", "train the shared model on every task's demo "
                                                "pairs");
  train->add_option("--data", train_args.data, "task set (JSON file or directory)")->required();
  train->add_option("--out", train_args.out, "checkpoint to write")->required();
  train->add_option("--metrics", train_args.metrics, "write JSONL metrics here (default: stderr)");
  std::uint64_t train_seed = 0;
  train->add_option("--seed", train_seed, "offline training seed");

  TttArgs ttt_args;
  CLI::App* ttt = app.add_subcommand("ttt", "adapt a trained checkpoint to one task's demo "
                                            "pairs (or all tasks with --joint)");
  ttt->add_option("--checkpoint", ttt_args.checkpoint, "trained checkpoint")->required();
  ttt->add_option("--data", ttt_args.data, "task set holding the task")->required();
  ttt->add_option("--task-id", ttt_args.task_id, "task to adapt to");
  ttt->add_option("--out", ttt_args.out, "adapted checkpoint to write")->required();
  ttt->add_option("--metrics", ttt_args.metrics, "write JSONL metrics here (default: stderr)");
  ttt->add_flag("--joint", ttt_args.joint, "adapt one model to every task at once");
  std::uint64_t ttt_seed = 0;
  ttt->add_option("--seed", ttt_seed, "adaptation seed");

  EvalArgs eval_args;
  CLI::App* eval = app.add_subcommand("eval", "adapt to and score every task; emit a JSON "
                                              "report");
  eval->add_option("--checkpoint", eval_args.checkpoint, "trained checkpoint")->required();
  eval->add_option("--data", eval_args.data, "task set to score")->required();
  eval->add_option("--out", eval_args.out, "write the JSON report here (default: stdout)");
  int eval_k = 0, eval_views = 0, eval_aux = 0, eval_jobs = 0;
  std::uint64_t eval_seed = 0;
  bool eval_joint = false, eval_single = false, eval_no_ttt = false;
  eval->add_option("-k,--k", eval_k, "largest k on the pass@k curve");
  eval->add_option("--views", eval_views, "sampled placements per augmentation");
  eval->add_option("--aux", eval_aux, "augmentations to vote over (1..51)");
  eval->add_option("--jobs", eval_jobs, "tasks adapted in parallel");
  eval->add_option("--seed", eval_seed, "evaluation seed");
  eval->add_flag("--joint-ttt", eval_joint, "one jointly adapted model instead of per-task");
  eval->add_flag("--single-view", eval_single, "one untransformed view, no voting");
  eval->add_flag("--no-ttt", eval_no_ttt, "skip adaptation (scores the training tasks only)");

  PredictArgs predict_args;
  CLI::App* predict = app.add_subcommand("predict", "adapt to one task and predict one "
                                                    "held-out input");
  predict->add_option("--checkpoint", predict_args.checkpoint, "trained checkpoint")->required();
  predict->add_option("--data", predict_args.data, "task set holding the task")->required();
  predict->add_option("--task-id", predict_args.task_id, "task to predict")->required();
  predict->add_option("--input-index", predict_args.input_index, "which held-out input");
  predict->add_option("--out", predict_args.out, "write the prediction JSON here");
  int pred_views = 0, pred_aux = 0;
  std::uint64_t pred_seed = 0;
  bool pred_no_ttt = false, pred_single = false;
  predict->add_option("--views", pred_views, "sampled placements per augmentation");
  predict->add_option("--aux", pred_aux, "augmentations to vote over (1..51)");
  predict->add_option("--seed", pred_seed, "prediction seed");
  predict->add_flag("--no-ttt", pred_no_ttt, "skip adaptation");
  predict->add_flag("--single-view", pred_single, "one untransformed view, no voting");

  InspectArgs inspect_args;
  CLI::App* inspect = app.add_subcommand("inspect", "dump attention maps, the task-embedding "
                                                    "table, or adaptation snapshots");
  inspect->add_option("--checkpoint", inspect_args.checkpoint, "checkpoint to inspect")
      ->required();
  inspect->add_option("--out-prefix", inspect_args.out_prefix, "artifact filename prefix");
  inspect->add_option("--attention", inspect_args.attention,
                      "layer,row,col: attention from that pixel's patch (layer -1 = all layers)");
  inspect->add_option("--data", inspect_args.data, "task set (for --attention/--ttt-snapshots)");
  inspect->add_option("--task-id", inspect_args.task_id, "task id");
  inspect->add_option("--pair", inspect_args.pair_index, "demo pair to visualize");
  inspect->add_option("--embed-row", inspect_args.embed_row,
                      "task-embedding row (default: the task's position in the set)");
  inspect->add_flag("--task-embeddings", inspect_args.task_embeddings,
                    "dump the embedding table as CSV");
  inspect->add_flag("--ttt-snapshots", inspect_args.ttt_snapshots,
                    "re-run adaptation, writing a prediction at each logged epoch");
  inspect->add_option("--snap-epochs", inspect_args.snap_epochs,
                      "comma-separated epochs to snapshot");

  try {
    app.parse(argc, argv);

    RunConfig rc = load_run_config(config_path, overrides);
    if (train->count("--seed")) rc.train.seed = train_seed;
    if (ttt->count("--seed")) rc.ttt.seed = ttt_seed;
    if (eval->count("-k")) rc.k_max = eval_k;
    if (eval->count("--views")) rc.eval.views_per_aux = eval_views;
    if (eval->count("--aux")) rc.eval.num_aux = eval_aux;
    if (eval->count("--jobs")) rc.eval.jobs = eval_jobs;
    if (eval->count("--seed")) rc.eval.seed = eval_seed;
    if (eval_joint) rc.eval.joint = true;
    if (eval_single) rc.eval.single_view = true;
    if (eval_no_ttt) rc.eval.do_ttt = false;
    if (predict->count("--views")) rc.eval.views_per_aux = pred_views;
    if (predict->count("--aux")) rc.eval.num_aux = pred_aux;
    if (predict->count("--seed")) rc.eval.seed = pred_seed;
    if (pred_no_ttt) rc.eval.do_ttt = false;
    if (pred_single) rc.eval.single_view = true;

    if (ingest->parsed()) run_ingest(ingest_args);
    if (train->parsed()) run_train(rc, train_args);
    if (ttt->parsed()) run_ttt(rc, ttt_args);
    if (eval->parsed()) run_eval(rc, eval_args);
    if (predict->parsed()) run_predict(rc, predict_args);
    if (inspect->parsed()) run_inspect(rc, inspect_args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const varc::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
