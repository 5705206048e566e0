#pragma once

#include <random>
#include <string>
#include <vector>

#include "edfnet/tensor.hpp"

namespace edfnet {

/// y = x·W (+ b). W is in x out, b is 1 x out.
struct Linear {
  ad::Parameter weight;
  ad::Parameter bias;
  bool has_bias = true;

  Linear() = default;
  Linear(const std::string& name, std::size_t in, std::size_t out, bool with_bias, std::mt19937_64& rng)
      : weight(name + ".w", ad::Array(in, out)),
        bias(name + ".b", ad::Array(1, out)),
        has_bias(with_bias) {
    ad::init_uniform_glorot(weight, in, out, rng);
  }

  std::size_t in() const { return weight.value.rows(); }
  std::size_t out() const { return weight.value.cols(); }

  ad::Var operator()(ad::Tape& t, ad::Var x) {
    ad::Var y = ad::matmul(x, t.param(weight));
    return has_bias ? ad::add(y, t.param(bias)) : y;
  }

  void collect(std::vector<ad::Parameter*>& out) {
    out.push_back(&weight);
    if (has_bias) out.push_back(&bias);
  }

  void zero() {
    weight.value.fill(0.0);
    bias.value.fill(0.0);
  }
};

}  // namespace edfnet
