#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "varc/common.hpp"
#include "varc/grid.hpp"
#include "varc/rng.hpp"

namespace varc {

// Parse one grid from its JSON form: a non-empty array of equally sized,
// non-empty rows whose entries are integers in [0, 9].
inline Grid parse_grid(const nlohmann::json& j) {
  check(j.is_array() && !j.empty(), Errc::EmptyGrid, "grid must be a non-empty array of rows");
  const auto& first = j.at(0);
  check(first.is_array() && !first.empty(), Errc::EmptyGrid, "grid rows must be non-empty arrays");
  Grid g(static_cast<int>(j.size()), static_cast<int>(first.size()));
  for (int r = 0; r < g.rows; ++r) {
    const auto& row = j.at(r);
    check(row.is_array() && static_cast<int>(row.size()) == g.cols, Errc::RaggedRows,
          "row " + std::to_string(r) + " has " + std::to_string(row.size()) +
              " cells, expected " + std::to_string(g.cols));
    for (int c = 0; c < g.cols; ++c) {
      const auto& cell = row.at(c);
      check(cell.is_number_integer(), Errc::ColorOutOfRange,
            "cell (" + std::to_string(r) + "," + std::to_string(c) + ") is not an integer");
      const std::int64_t v = cell.get<std::int64_t>();
      check(v >= 0 && v < kNumColors, Errc::ColorOutOfRange,
            "cell (" + std::to_string(r) + "," + std::to_string(c) + ") = " + std::to_string(v) +
                " outside [0, 9]");
      g.at(r, c) = static_cast<std::uint8_t>(v);
    }
  }
  return g;
}

inline nlohmann::json grid_to_json(const Grid& g) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < g.rows; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < g.cols; ++c) row.push_back(static_cast<int>(g.at(r, c)));
    rows.push_back(std::move(row));
  }
  return rows;
}

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  check(in.good(), Errc::IoError, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::IoError, "malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

inline std::vector<ExamplePair> parse_pair_list(const nlohmann::json& j, const std::string& where,
                                                bool require_output) {
  check(j.is_array(), Errc::MissingField, where + " must be an array of {input, output} pairs");
  std::vector<ExamplePair> pairs;
  pairs.reserve(j.size());
  for (const auto& item : j) {
    check(item.is_object() && item.contains("input"), Errc::MissingField,
          where + " pair missing input field");
    ExamplePair p;
    p.input = parse_grid(item.at("input"));
    if (item.contains("output") && !item.at("output").is_null()) {
      p.output = parse_grid(item.at("output"));
    } else {
      check(!require_output, Errc::MissingField, where + " pair missing output field");
    }
    pairs.push_back(std::move(p));
  }
  return pairs;
}

inline Task parse_task(const std::string& id, const nlohmann::json& j) {
  check(j.is_object(), Errc::MissingField, "task " + id + " must be an object");
  check(j.contains("train"), Errc::MissingField, "task " + id + " missing train field");
  check(j.contains("test"), Errc::MissingField, "task " + id + " missing test field");
  Task t;
  t.id = id;
  t.demo = parse_pair_list(j.at("train"), "task " + id + " train", /*require_output=*/true);
  t.infer = parse_pair_list(j.at("test"), "task " + id + " test", /*require_output=*/false);
  check(!t.demo.empty(), Errc::MissingField, "task " + id + " has no train pairs");
  check(!t.infer.empty(), Errc::MissingField, "task " + id + " has no test pairs");
  return t;
}

inline nlohmann::json task_to_json(const Task& t) {
  nlohmann::json j;
  nlohmann::json train = nlohmann::json::array();
  for (const auto& p : t.demo) {
    train.push_back({{"input", grid_to_json(p.input)}, {"output", grid_to_json(*p.output)}});
  }
  nlohmann::json test = nlohmann::json::array();
  for (const auto& p : t.infer) {
    nlohmann::json item = {{"input", grid_to_json(p.input)}};
    if (p.has_output()) item["output"] = grid_to_json(*p.output);
    test.push_back(std::move(item));
  }
  j["train"] = std::move(train);
  j["test"] = std::move(test);
  return j;
}

}  // namespace detail

// Load a task set from either a single JSON file mapping task id -> task, or
// a directory of <task_id>.json files. Tasks are returned sorted by id so the
// result does not depend on filesystem enumeration order.
inline TaskSet load_taskset(const std::string& path_str) {
  namespace fs = std::filesystem;
  const fs::path path(path_str);
  check(fs::exists(path), Errc::IoError, "no such file or directory: " + path_str);

  TaskSet set;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path)) {
      if (entry.is_regular_file() && entry.path().extension() == ".json") {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      set.tasks.push_back(detail::parse_task(file.stem().string(), detail::read_json_file(file)));
    }
  } else {
    const nlohmann::json j = detail::read_json_file(path);
    check(j.is_object(), Errc::MissingField,
          "task set file must be an object mapping task id to task");
    for (const auto& [id, body] : j.items()) {
      set.tasks.push_back(detail::parse_task(id, body));
    }
    std::sort(set.tasks.begin(), set.tasks.end(),
              [](const Task& a, const Task& b) { return a.id < b.id; });
  }
  check(!set.tasks.empty(), Errc::EmptyTaskSet, "no tasks found in " + path_str);
  return set;
}

// Write a task set as a single JSON file (id -> task object).
inline void save_taskset(const TaskSet& set, const std::string& path) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& t : set.tasks) j[t.id] = detail::task_to_json(t);
  std::ofstream out(path);
  check(out.good(), Errc::IoError, "cannot write " + path);
  out << j.dump(2) << "\n";
}

struct MergeReport {
  int tasks_extended = 0;
  std::int64_t pairs_added = 0;
  std::vector<std::string> skipped_ids;  // generator files with no matching task
  std::vector<std::string> missing_ids;  // tasks with no generator file
};

// Extend each task's demo pairs with samples drawn from a directory of
// pre-generated pairs (<task_id>.json holding an array of {input, output}).
// Generator files whose id matches no task are skipped and reported.
// Sampling is seeded and without replacement by default; if a file holds
// fewer pairs than requested, every pair is taken once unless
// with_replacement is set. The base demo pairs are never reordered or
// modified, only appended to.
inline TaskSet merge_rearc(TaskSet base, const std::string& dir_str, std::int64_t pairs_per_task,
                           std::uint64_t seed, bool with_replacement = false,
                           MergeReport* report_out = nullptr) {
  namespace fs = std::filesystem;
  const fs::path dir(dir_str);
  check(fs::is_directory(dir), Errc::IoError, "not a directory: " + dir_str);
  check(pairs_per_task >= 0, Errc::BadConfig, "pairs_per_task must be non-negative");

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());

  const Rng root(seed);
  MergeReport report;
  for (const auto& file : files) {
    const std::string id = file.stem().string();
    auto it = std::find_if(base.tasks.begin(), base.tasks.end(),
                           [&](const Task& t) { return t.id == id; });
    if (it == base.tasks.end()) {
      report.skipped_ids.push_back(id);
      continue;
    }
    const nlohmann::json j = detail::read_json_file(file);
    std::vector<ExamplePair> pool =
        detail::parse_pair_list(j, "generated pairs for " + id, /*require_output=*/true);
    if (pool.empty() || pairs_per_task == 0) continue;

    // Child stream keyed by task id, so the draw for one task is independent
    // of which other files happen to be present.
    Rng task_rng = root.split(std::hash<std::string>{}(id));
    const std::int64_t n = static_cast<std::int64_t>(pool.size());
    std::int64_t take = pairs_per_task;
    if (!with_replacement && take > n) take = n;

    if (with_replacement) {
      for (std::int64_t k = 0; k < take; ++k) {
        it->demo.push_back(pool[task_rng.next_below(static_cast<std::uint64_t>(n))]);
      }
    } else {
      // Partial Fisher-Yates: the first `take` slots become the sample.
      std::vector<std::int64_t> idx(pool.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
      for (std::int64_t k = 0; k < take; ++k) {
        const std::int64_t pick =
            k + static_cast<std::int64_t>(task_rng.next_below(static_cast<std::uint64_t>(n - k)));
        std::swap(idx[k], idx[pick]);
        it->demo.push_back(pool[idx[k]]);
      }
    }
    report.tasks_extended += 1;
    report.pairs_added += take;
  }

  for (const auto& task : base.tasks) {
    const bool has_file = std::any_of(files.begin(), files.end(), [&](const fs::path& f) {
      return f.stem().string() == task.id;
    });
    if (!has_file) report.missing_ids.push_back(task.id);
  }
  if (report_out) *report_out = std::move(report);
  return base;
}

}  // namespace varc
