#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fstm/autograd.hpp"
#include "fstm/params.hpp"
#include "fstm/tensor.hpp"

namespace fstm::gradcheck {

// Builds the output from one leaf per input tensor.
using GraphFn = std::function<ad::Var(const std::vector<ad::Var>& leaves)>;

struct Options {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Denominator floor of the relative error, per unit of sum_i |R_i y_i|
  // (the roundoff scale of the projected output).
  double floor = 1e-6;
  // Entries probed per input (all when the input is smaller).
  std::size_t max_entries = 24;
  std::uint64_t seed = 7;
};

struct Result {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t probes = 0;
  bool pass = false;
  std::string worst;  // probe with the largest error
};

// Compares reverse-mode gradients of <R, f(inputs)> (R a fixed random
// weighting of the output) against central differences on sampled entries of
// every input and along one random direction through all inputs jointly.
// rel err = |analytic - numeric| / max(|analytic|, |numeric|, floor * max(1, sum_i |R_i y_i|)).
Result check(const std::string& name, const GraphFn& f, const std::vector<Tensor>& inputs,
             const Options& opt = {});

// Same comparison for the tensors of a parameter store, entered through a
// Binding.
using StoreFn = std::function<ad::Var(const Binding& p)>;
Result check_params(const std::string& name, const StoreFn& f, const ParamStore& store,
                    const Options& opt = {});

}  // namespace fstm::gradcheck
