#pragma once

// Tiny synthetic puzzle families used across the test suites: each family is
// a deterministic grid rule simple enough to learn at desk scale but only
// solvable when the relevant structure (color identity, position) is
// available to the model.

#include <string>
#include <vector>

#include "varc/grid.hpp"
#include "varc/rng.hpp"

namespace microtasks {

using varc::ExamplePair;
using varc::Grid;
using varc::Rng;
using varc::Task;
using varc::TaskSet;

enum class Family { identity, color_swap, mirror_h };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::identity: return "identity";
    case Family::color_swap: return "color_swap";
    case Family::mirror_h: return "mirror_h";
  }
  return "?";
}

// Random grid over a small palette. Colors 1 and 2 are boosted so the
// color-swap rule always has something to act on.
inline Grid random_grid(Rng& rng, int max_side = 5) {
  const int h = rng.uniform_int(1, max_side);
  const int w = rng.uniform_int(1, max_side);
  Grid g(h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const int roll = rng.uniform_int(0, 7);
      std::uint8_t color;
      if (roll < 2) color = 1;
      else if (roll < 4) color = 2;
      else color = static_cast<std::uint8_t>(rng.uniform_int(0, 9));
      g.at(r, c) = color;
    }
  }
  return g;
}

inline Grid apply_family(const Grid& in, Family f) {
  Grid out = in;
  switch (f) {
    case Family::identity:
      break;
    case Family::color_swap:
      for (auto& cell : out.cells) {
        if (cell == 1) cell = 2;
        else if (cell == 2) cell = 1;
      }
      break;
    case Family::mirror_h:
      for (int r = 0; r < out.rows; ++r) {
        for (int c = 0; c < out.cols; ++c) out.at(r, c) = in.at(r, in.cols - 1 - c);
      }
      break;
  }
  return out;
}

inline ExamplePair make_pair(Rng& rng, Family f, int max_side = 5) {
  ExamplePair p;
  p.input = random_grid(rng, max_side);
  p.output = apply_family(p.input, f);
  return p;
}

inline Task make_task(const std::string& id, Family f, int num_demo, int num_infer, Rng& rng,
                      int max_side = 5) {
  Task t;
  t.id = id;
  for (int i = 0; i < num_demo; ++i) t.demo.push_back(make_pair(rng, f, max_side));
  for (int i = 0; i < num_infer; ++i) t.infer.push_back(make_pair(rng, f, max_side));
  return t;
}

// One task per family, `pairs_per_family` demo pairs each, one held-out pair
// per task for validation.
inline TaskSet make_training_set(int pairs_per_family, std::uint64_t seed = 11) {
  Rng rng(seed);
  TaskSet set;
  set.tasks.push_back(make_task("train_identity", Family::identity, pairs_per_family, 1, rng));
  set.tasks.push_back(make_task("train_swap", Family::color_swap, pairs_per_family, 1, rng));
  set.tasks.push_back(make_task("train_mirror", Family::mirror_h, pairs_per_family, 1, rng));
  return set;
}

// Fresh tasks drawn from the same rules, cycling through the families.
inline TaskSet make_holdout_set(int num_tasks, int num_demo, std::uint64_t seed = 23) {
  Rng rng(seed);
  TaskSet set;
  const Family fams[] = {Family::identity, Family::color_swap, Family::mirror_h};
  for (int i = 0; i < num_tasks; ++i) {
    const Family f = fams[i % 3];
    set.tasks.push_back(make_task("holdout_" + std::to_string(i) + "_" + family_name(f), f,
                                  num_demo, 1, rng));
  }
  return set;
}

}  // namespace microtasks
