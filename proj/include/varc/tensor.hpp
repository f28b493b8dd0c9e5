#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "varc/common.hpp"

namespace varc {

// Dense row-major float tensor. Shapes are explicit; there is no implicit
// broadcasting — every op states the layout it expects.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0f);
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  float* ptr() { return data.data(); }
  const float* ptr() const { return data.data(); }

  void zero() { std::fill(data.begin(), data.end(), 0.0f); }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
};

// A named trainable tensor with its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, std::vector<std::int64_t> shape)
      : name(std::move(n)), value(shape), grad(std::move(shape)) {}

  std::int64_t numel() const { return value.numel(); }
};

}  // namespace varc
