#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace coevo::numerics {

// Dense row-major tensor of doubles. Deliberately minimal: the simulator
// only needs rank-1 vectors, rank-2 similarity matrices and rank-3 C,H,W
// feature maps.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> values;

  Tensor() = default;

  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    values.assign(numel_of(shape), 0.0);
  }

  Tensor(std::vector<int> s, std::vector<double> v)
      : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != numel_of(shape))
      throw std::invalid_argument("tensor shape/value size mismatch");
  }

  static std::size_t numel_of(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return s.empty() ? 0 : n;
  }

  std::size_t numel() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }

  // Rank-3 accessors (channel, row, col).
  double& at(int c, int h, int w) {
    return values[idx3(c, h, w)];
  }
  double at(int c, int h, int w) const {
    return values[idx3(c, h, w)];
  }

  bool all_finite() const;

 private:
  std::size_t idx3(int c, int h, int w) const {
    return (static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w;
  }
};

}  // namespace coevo::numerics
