#pragma once

#include <random>
#include <string>
#include <vector>

#include "mddn/tensor.hpp"

namespace mddn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}

  std::size_t numel() const noexcept { return value.numel(); }
  void zero_grad() { grad.zero(); }
};

template <typename T>
using ParamList = std::vector<Parameter<T>*>;

using Rng = std::mt19937_64;

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

template <typename T>
void fill_normal(Tensor<T>& t, Rng& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = static_cast<T>(dist(rng));
}

}  // namespace mddn
